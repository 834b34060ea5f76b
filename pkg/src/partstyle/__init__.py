"""Part-aware text-driven stylization of partitioned triangle meshes."""

from .config import FinetuneConfig, RunConfig
from .estimator import PartStylizer, check_mesh
from .field import FieldConfig, StyleField, init_field, load_checkpoint, save_checkpoint
from .finetune import (
    FinetuneDataset,
    average_precision,
    evaluate_ap,
    generate_dataset,
    load_dataset,
    save_dataset,
    tune_offsets,
)
from .grounding import (
    OracleGroundingBackend,
    PromptOffset,
    ToyGroundingBackend,
    alignment_map,
    encode,
    localize,
    select_anchor_view,
)
from .losses import LossConfig, clip_style_loss, part_style_loss
from .mesh import PartitionedMesh, StylizedMesh, apply_style, export_mesh, load_mesh, normalize_mesh, read_ply
from .metrics import ConsistencyReport, consistency_study, image_metrics
from .render import Camera, make_camera, rasterize, render, uniform_viewpoints
from .trainer import PromptSpec, TrainConfig, parse_prompt, run, schedule_loss, train_step

__version__ = "0.1.0"

__all__ = [
    "Camera", "ConsistencyReport", "FieldConfig", "FinetuneConfig", "FinetuneDataset", "LossConfig",
    "OracleGroundingBackend", "PartStylizer", "PartitionedMesh", "PromptOffset", "PromptSpec", "RunConfig",
    "StyleField", "StylizedMesh", "ToyGroundingBackend", "TrainConfig", "alignment_map", "apply_style",
    "average_precision", "check_mesh", "clip_style_loss", "consistency_study", "encode", "evaluate_ap",
    "export_mesh", "generate_dataset", "image_metrics", "init_field", "load_checkpoint", "load_dataset",
    "load_mesh", "localize", "make_camera", "normalize_mesh", "parse_prompt", "part_style_loss", "rasterize",
    "read_ply", "render", "run", "save_checkpoint", "save_dataset", "schedule_loss", "select_anchor_view",
    "train_step", "tune_offsets", "uniform_viewpoints",
]
