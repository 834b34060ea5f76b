"""Neural style field: vertex position -> (color, displacement)."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    num_frequencies: int = 6
    frequency_scale: float = 1.0
    hidden_width: int = 256
    depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        if self.frequency_scale <= 0:
            raise ValueError("frequency_scale must be positive")
        if self.hidden_width < 8:
            raise ValueError("hidden_width must be >= 8")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def encoded_width(self) -> int:
        return 3 + 6 * self.num_frequencies


def positional_encode(points: torch.Tensor, config: FieldConfig) -> torch.Tensor:
    """``[p, sin(2^k s p), cos(2^k s p)]`` for k < num_frequencies, blocks ordered by k."""
    out = [points]
    for k in range(config.num_frequencies):
        arg = (2.0**k) * config.frequency_scale * points
        out.append(torch.sin(arg))
        out.append(torch.cos(arg))
    return torch.cat(out, dim=-1)


class StyleField(nn.Module):
    """Shared ReLU trunk split into a color branch and a displacement branch.

    The last linear layer of each branch starts at zero, so a fresh field is
    the identity style: mid-gray color and no displacement.
    """

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        w = config.hidden_width
        layers: list[nn.Module] = []
        width_in = config.encoded_width
        for _ in range(config.depth):
            layers += [nn.Linear(width_in, w), nn.ReLU()]
            width_in = w
        self.trunk = nn.Sequential(*layers)
        self.color_head = nn.Sequential(nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 3))
        self.displacement_head = nn.Sequential(nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 1))
        for head in (self.color_head, self.displacement_head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def forward(self, vertices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = next(self.parameters()).dtype
        x = positional_encode(torch.as_tensor(vertices, dtype=dtype), self.config)
        h = self.trunk(x)
        colors = 0.5 + 0.5 * torch.tanh(self.color_head(h))
        displacements = torch.tanh(self.displacement_head(h)).squeeze(-1)
        return colors, displacements


def init_field(config: FieldConfig, dtype: torch.dtype = torch.float32) -> StyleField:
    # a private generator keeps global torch RNG state untouched
    gen = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        field = StyleField(config)
    return field.to(dtype)


def evaluate(field: StyleField, vertices) -> tuple[torch.Tensor, torch.Tensor]:
    return field(vertices)


def parameter_hash(field: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(field.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, field: StyleField, iteration: int, extra: dict | None = None) -> None:
    payload = {
        "format": "partstyle-field",
        "version": CHECKPOINT_VERSION,
        "config": asdict(field.config),
        "iteration": iteration,
        "state_dict": field.state_dict(),
        "dtype": str(next(field.parameters()).dtype),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[StyleField, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "partstyle-field":
        raise ValueError(f"{path} is not a style-field checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    dtype = getattr(torch, payload["dtype"].replace("torch.", ""))
    field = init_field(FieldConfig(**payload["config"]), dtype=dtype)
    field.load_state_dict(payload["state_dict"])
    return field, payload
