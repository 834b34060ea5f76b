"""End-to-end optimization of a style field against grounding and embedding losses."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import grounding as gr
from .field import FieldConfig, StyleField, init_field, parameter_hash
from .losses import (
    LossConfig,
    augment,
    clip_style_loss,
    crop_regions,
    gather_alignment,
    make_embedder,
    part_style_loss,
    whole_image_crop,
)
from .mesh import PartitionedMesh, StylizedMesh, apply_style, export_mesh
from .render import (
    DEFAULT_ELEVATIONS,
    Camera,
    render,
    sample_training_views,
    save_png,
    silhouette_iou,
    uniform_viewpoints,
)

logger = logging.getLogger(__name__)

PART_STYLE = "part-style"
EMBEDDING = "embedding"
MODES = ("full", "no-embedding", "no-grounding")


class PromptError(ValueError):
    pass


class LocalizationError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, state=None, dump_path=None):
        super().__init__(message)
        self.state = state
        self.dump_path = dump_path


# ------------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PhrasalPair:
    style: str
    part_phrase: str
    part_index: int

    @property
    def text(self) -> str:
        return f"{self.style} {self.part_phrase}"


@dataclass(frozen=True)
class PromptSpec:
    text: str
    pairs: tuple[PhrasalPair, ...]

    @property
    def style_phrases(self) -> list[str]:
        return [p.style for p in self.pairs]

    @property
    def part_phrases(self) -> list[str]:
        return [p.part_phrase for p in self.pairs]

    @property
    def pair_texts(self) -> list[str]:
        return [p.text for p in self.pairs]

    @property
    def part_indices(self) -> list[int]:
        return [p.part_index for p in self.pairs]


def parse_prompt(text: str, mesh: PartitionedMesh) -> PromptSpec:
    """Split ``"wood base, gold tube"`` into (style, part) pairs bound to mesh parts."""
    chunks = [c.strip() for c in text.split(",") if c.strip()]
    if not chunks:
        raise PromptError("empty prompt")
    known = sorted({p for i in range(mesh.n_parts) for p in mesh.phrases_for(i)})
    pairs, seen = [], {}
    for chunk in chunks:
        tokens = chunk.split()
        idx = mesh.resolve_part(chunk)
        if idx is None:
            raise PromptError(f"no part matches {chunk!r}; known parts and synonyms: {known}")
        n = max(
            len(c.split())
            for c in mesh.phrases_for(idx)
            if [t.lower() for t in tokens[-len(c.split()):]] == c.lower().split()
        )
        style, part = " ".join(tokens[:-n]), " ".join(tokens[-n:])
        if not style:
            raise PromptError(f"pair {chunk!r} has no style phrase")
        if idx in seen:
            raise PromptError(f"part {mesh.part_names[idx]!r} is styled twice ({seen[idx]!r} and {chunk!r})")
        seen[idx] = chunk
        pairs.append(PhrasalPair(style, part, idx))
    return PromptSpec(text, tuple(pairs))


# ------------------------------------------------------------------ schedule


def parse_alternation(alternation: str) -> int:
    if alternation == "every-other":
        return 1
    if alternation.startswith("block:"):
        k = int(alternation.split(":", 1)[1])
        if k < 1:
            raise ValueError("block size must be >= 1")
        return k
    raise ValueError(f"alternation must be 'every-other' or 'block:K', got {alternation!r}")


def schedule_loss(iteration: int, alternation: str = "every-other") -> str:
    """Which loss drives ``iteration``: blocks of ``k`` steps, part-style first."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    k = parse_alternation(alternation)
    return PART_STYLE if (iteration // k) % 2 == 0 else EMBEDDING


# -------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 5e-4
    alternation: str = "every-other"
    seed: int = 0
    views_per_iter: int = 2
    view_sigma: float = math.radians(15.0)
    snapshot_every: int = 500
    grounding: str = "toy"
    localizer: str | None = None
    embedding: str = "toy"
    mode: str = "full"
    image_size: int = 512
    grid_size: int = 32
    camera_distance: float = 2.5
    fov: float = math.radians(60.0)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    anchor_azimuths: int = 8
    anchor_elevations: tuple[float, ...] = DEFAULT_ELEVATIONS
    turntable_views: int = 8
    min_side: int = 10
    dtype: str = "float32"
    field: FieldConfig = FieldConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        parse_alternation(self.alternation)
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        object.__setattr__(self, "anchor_elevations", tuple(float(e) for e in self.anchor_elevations))
        if isinstance(self.field, dict):
            object.__setattr__(self, "field", FieldConfig(**self.field))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @property
    def localizer_key(self) -> str:
        # color-word grounding cannot read part phrases off a gray content render
        if self.localizer:
            return self.localizer
        return "oracle" if self.grounding == "toy" else self.grounding

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["anchor_elevations"] = list(self.anchor_elevations)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        data = dict(data)
        if "field" in data:
            _reject_unknown(FieldConfig, data["field"], "field")
            data["field"] = FieldConfig(**data["field"])
        if "loss" in data:
            _reject_unknown(LossConfig, data["loss"], "loss")
            data["loss"] = LossConfig(**data["loss"])
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _reject_unknown(cls, data: dict, label: str) -> None:
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {label} config keys: {sorted(unknown)}")


# --------------------------------------------------------------------- state


@dataclass
class TrainState:
    config: TrainConfig
    field: StyleField
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    anchor: Camera
    grounding: gr.GroundingBackend
    localizer: gr.GroundingBackend
    embedder: object | None
    iteration: int = 0
    loss_log: list[dict] = field(default_factory=list)
    max_offset: float = 0.0
    _cache: dict = field(default_factory=dict)

    def content_locations(self, mesh: PartitionedMesh, prompt: PromptSpec, camera: Camera) -> gr.SpatialLocationSet:
        key = camera.key
        if key in self._cache:
            return self._cache[key]
        content = render(mesh, camera, self.config.background)
        locs = gr.localize(self.localizer, content, prompt.part_phrases, self.config.loss.threshold)
        if camera == self.anchor:
            self._cache[key] = locs
        return locs


def build_backends(config: TrainConfig, mesh: PartitionedMesh):
    def make(kind):
        if kind == "oracle":
            return gr.OracleGroundingBackend(mesh, grid_size=config.grid_size, min_side=config.min_side)
        if kind == "toy":
            return gr.ToyGroundingBackend(grid_size=config.grid_size)
        return gr.make_backend(kind, mesh)

    grounding = make(config.grounding)
    localizer = grounding if config.localizer_key == config.grounding else make(config.localizer_key)
    embedder = make_embedder(config.embedding) if config.mode != "no-embedding" else None
    return grounding, localizer, embedder


def init_state(config: TrainConfig, mesh: PartitionedMesh, prompt: PromptSpec, anchor: Camera | None = None, backends=None) -> TrainState:
    grounding, localizer, embedder = backends or build_backends(config, mesh)
    if anchor is None:
        candidates = uniform_viewpoints(
            config.anchor_azimuths, config.anchor_elevations, config.camera_distance, config.fov, config.image_size
        )
        anchor = gr.select_anchor_view(localizer, mesh, prompt.part_phrases, candidates, config.background)
    fld = init_field(replace(config.field, seed=config.seed), dtype=config.torch_dtype)
    opt = torch.optim.Adam(fld.parameters(), lr=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    return TrainState(config, fld, opt, rng, anchor, grounding, localizer, embedder)


def stylize(field_: StyleField, mesh: PartitionedMesh) -> StylizedMesh:
    dtype = next(field_.parameters()).dtype
    colors, disp = field_(torch.tensor(mesh.vertices, dtype=dtype))
    return apply_style(mesh, colors, disp)


# ---------------------------------------------------------------------- step


def active_loss(state: TrainState) -> str:
    mode = state.config.mode
    if mode == "no-embedding":
        return PART_STYLE
    if mode == "no-grounding":
        return EMBEDDING
    return schedule_loss(state.iteration, state.config.alternation)


def train_step(state: TrainState, mesh: PartitionedMesh, prompt: PromptSpec, cameras: list[Camera]) -> list[dict]:
    """One scheduled loss, summed over the views that localized, then one update."""
    cfg = state.config
    kind = active_loss(state)
    styled = stylize(state.field, mesh)
    holistic = cfg.mode == "no-grounding"

    total, rows = None, []
    for cam_id, cam in enumerate(cameras):
        locs = None if holistic else state.content_locations(mesh, prompt, cam)
        if locs is not None and len(locs) == 0:
            logger.info("iteration %d: view %d localized nothing, dropped", state.iteration, cam_id)
            continue
        image = render(styled, cam, cfg.background)
        if locs is not None:
            assert locs.source_camera == image.camera, "content and styled cameras differ"
        if kind == PART_STYLE:
            amap = gr.alignment_map(gr.encode(state.grounding, image, prompt.pair_texts))
            loss = part_style_loss(gather_alignment(amap, locs), cfg.loss)
        else:
            if holistic:
                crops, phrases = whole_image_crop(image), [prompt.text]
            else:
                stride = image.image_size // cfg.grid_size
                crops, phrases = crop_regions(image, locs, stride, cfg.loss.crop_pad), prompt.style_phrases
            patches = augment(crops, cfg.loss, state.rng, state.embedder.input_size, fill=cfg.background[0])
            loss = clip_style_loss(state.embedder, patches, phrases)
        total = loss if total is None else total + loss
        rows.append({"iteration": state.iteration, "loss": kind, "value": float(loss.detach()), "camera": cam_id})

    if total is None:
        raise LocalizationError(f"iteration {state.iteration}: no view produced any localized region")

    state.optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        state.optimizer.step()
    offsets = styled.vertex_offsets.detach().norm(dim=1).max().item()
    state.max_offset = max(state.max_offset, offsets)
    for r in rows:
        r["max_offset"] = offsets
    state.loss_log.extend(rows)
    state.iteration += 1
    return rows


# ----------------------------------------------------------------------- run


@dataclass
class RunArtifacts:
    stylized: StylizedMesh
    field: StyleField
    anchor: Camera
    loss_log: list[dict]
    checkpoints: list[Path]
    turntable: list
    metadata: dict
    out_dir: Path | None = None


def mesh_hash(stylized: StylizedMesh) -> str:
    pos, col = stylized.numpy()
    h = hashlib.sha256(pos.tobytes())
    h.update(col.tobytes())
    h.update(stylized.faces.tobytes())
    return h.hexdigest()


def _camera_dict(cam: Camera) -> dict:
    return asdict(cam)


def save_state(path, state: TrainState) -> None:
    payload = {
        "format": "partstyle-train",
        "version": 1,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "field": state.field.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": state.rng.bit_generator.state,
        "anchor": _camera_dict(state.anchor),
        "loss_log": state.loss_log,
        "max_offset": state.max_offset,
    }
    torch.save(payload, path)


def load_state(path, mesh: PartitionedMesh, prompt: PromptSpec, backends=None) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "partstyle-train":
        raise ValueError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_dict(payload["config"])
    state = init_state(config, mesh, prompt, anchor=Camera(**payload["anchor"]), backends=backends)
    state.field.load_state_dict(payload["field"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng"]
    state.iteration = payload["iteration"]
    state.loss_log = list(payload["loss_log"])
    state.max_offset = payload["max_offset"]
    return state


def _write_checkpoint(state: TrainState, ckpt_dir: Path) -> Path:
    path = ckpt_dir / f"iter_{state.iteration:06d}.pt"
    try:
        save_state(path, state)
    except (OSError, RuntimeError) as exc:
        dump = Path(tempfile.mkdtemp(prefix="partstyle-dump-")) / path.name
        try:
            save_state(dump, state)
        except Exception:  # noqa: BLE001
            dump = None
        raise TrainingAborted(f"checkpoint write failed at {path}: {exc}", state=state, dump_path=dump) from exc
    return path


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "loss", "value", "camera", "max_offset"])
        writer.writeheader()
        writer.writerows(rows)


def run(config: TrainConfig, mesh: PartitionedMesh, prompt: PromptSpec | str, out_dir=None, resume_from=None, stop_at: int | None = None, anchor: Camera | None = None) -> RunArtifacts:
    """Select the anchor, optimize for ``config.iterations`` steps, export results.

    ``stop_at`` ends early (after a snapshot) to support split runs; ``out_dir``
    of ``None`` keeps everything in memory. A given ``anchor`` skips selection.
    """
    if isinstance(prompt, str):
        prompt = parse_prompt(prompt, mesh)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out else None
    if out:
        (out / "renders").mkdir(parents=True, exist_ok=True)
        ckpt_dir.mkdir(exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump({"prompt": prompt.text, "train": config.to_dict()}, fh, indent=1)

    state = load_state(resume_from, mesh, prompt) if resume_from else init_state(config, mesh, prompt, anchor=anchor)
    if state.config != config and resume_from:
        logger.warning("resuming with the checkpoint's config; the passed config differs")
    cfg = state.config
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)

    checkpoints: list[Path] = []
    while state.iteration < end:
        cams = sample_training_views(state.anchor, cfg.view_sigma, cfg.views_per_iter, state.rng)
        try:
            train_step(state, mesh, prompt, cams)
        except LocalizationError:
            if out:
                for i, cam in enumerate(cams):
                    save_png(render(mesh, cam, cfg.background), out / "renders" / f"localization_failure_{i}.png")
            raise
        if ckpt_dir is not None and (state.iteration % cfg.snapshot_every == 0 or state.iteration == end):
            checkpoints.append(_write_checkpoint(state, ckpt_dir))

    with torch.no_grad():
        final = stylize(state.field, mesh).detach()
    turntable_cams = [
        replace(state.anchor, azimuth=state.anchor.azimuth + 2 * math.pi * k / cfg.turntable_views)
        for k in range(cfg.turntable_views)
    ]
    turntable = [render(final, cam, cfg.background) for cam in turntable_cams]
    content_anchor = render(mesh, state.anchor, cfg.background)
    metadata = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "prompt": prompt.text,
        "pairs": [asdict(p) for p in prompt.pairs],
        "anchor": _camera_dict(state.anchor),
        "iterations_done": state.iteration,
        "final_mesh_hash": mesh_hash(final),
        "field_hash": parameter_hash(state.field),
        "max_offset": state.max_offset,
        "anchor_silhouette_iou": silhouette_iou(content_anchor, turntable[0]),
        "localizer": cfg.localizer_key,
    }
    if out:
        write_loss_log(out / "loss_log.csv", state.loss_log)
        if state.iteration == cfg.iterations:
            export_mesh(final, out / "final_mesh.ply")
        for k, img in enumerate(turntable):
            save_png(img, out / "renders" / f"turntable_{k:02d}.png")
        save_png(content_anchor, out / "renders" / "anchor_content.png")
        with open(out / "metadata.json", "w") as fh:
            json.dump(metadata, fh, indent=1)
    return RunArtifacts(final, state.field, state.anchor, state.loss_log, checkpoints, turntable, metadata, out)
