"""JSON run configuration shared by the CLI and the estimator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .trainer import TrainConfig


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    learning_rate: float = 0.1
    n_azimuths: int = 8
    elevations: tuple[float, ...] = (-0.5235987755982988, 0.0, 0.5235987755982988)
    image_size: int = 256
    min_side: int = 10
    iou_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))


@dataclass(frozen=True)
class RunConfig:
    mesh: str | None = None
    parts: str | None = None
    prompt: str | None = None
    out_dir: str = "runs/latest"
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_dict(self) -> dict:
        ft = {f.name: getattr(self.finetune, f.name) for f in fields(FinetuneConfig)}
        ft["elevations"] = list(ft["elevations"])
        return {
            "mesh": self.mesh, "parts": self.parts, "prompt": self.prompt, "out_dir": self.out_dir,
            "train": self.train.to_dict(), "finetune": ft,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        if "finetune" in data:
            extra = set(data["finetune"]) - {f.name for f in fields(FinetuneConfig)}
            if extra:
                raise ValueError(f"unknown finetune config keys: {sorted(extra)}")
            data["finetune"] = FinetuneConfig(**data["finetune"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))
