"""Pairwise image metrics and the multi-seed consistency study."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from skimage.metrics import structural_similarity

from .render import render

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
METRICS = ("mse", "psnr", "ssim")


def _as_array(img) -> np.ndarray:
    if hasattr(img, "numpy") and not isinstance(img, np.ndarray):
        img = img.numpy()
    return np.asarray(img, dtype=np.float64)


def image_metrics(a, b, perceptual: Callable | None = None) -> dict:
    """MSE, PSNR (capped at 100 dB) and Gaussian-window SSIM for [0, 1] RGB images.

    ``perceptual`` is an optional learned-metric callable; without one the
    ``perceptual`` entry is ``None``.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    ssim = float(
        structural_similarity(
            a, b, data_range=1.0, channel_axis=-1 if a.ndim == 3 else None,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        )
    )
    out = {"mse": mse, "psnr": psnr, "ssim": ssim, "perceptual": None}
    if perceptual is not None:
        out["perceptual"] = float(perceptual(a, b))
    return out


def lpips_metric(net: str = "alex", device: str = "cpu") -> Callable:
    """LPIPS plug-in; needs the ``lpips`` package and its downloaded weights."""
    import lpips
    import torch

    model = lpips.LPIPS(net=net).to(device).eval()

    def metric(a: np.ndarray, b: np.ndarray) -> float:
        ta = torch.as_tensor(a, dtype=torch.float32).permute(2, 0, 1)[None] * 2 - 1
        tb = torch.as_tensor(b, dtype=torch.float32).permute(2, 0, 1)[None] * 2 - 1
        with torch.no_grad():
            return float(model(ta.to(device), tb.to(device)))

    return metric


@dataclass
class ConsistencyReport:
    seeds: list[int]
    pairs: list[dict]
    summary: dict[str, dict[str, float]]
    failed: dict[int, str] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=str)

    def table(self) -> str:
        lines = [f"{'metric':<12}{'mean':>12}{'std':>12}", "-" * 36]
        for name, stats in self.summary.items():
            lines.append(f"{name:<12}{stats['mean']:>12.5f}{stats['std']:>12.5f}")
        lines.append(f"pairs: {len(self.pairs)}  runs: {len(self.seeds) - len(self.failed)}/{len(self.seeds)}")
        if self.failed:
            lines.append(f"failed seeds: {sorted(self.failed)}")
        return "\n".join(lines)


def summarize(pairs: list[dict]) -> dict[str, dict[str, float]]:
    names = [m for m in METRICS] + (["perceptual"] if pairs and pairs[0]["metrics"].get("perceptual") is not None else [])
    out = {}
    for m in names:
        vals = np.array([p["metrics"][m] for p in pairs], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()) if len(vals) else float("nan"), "std": float(vals.std()) if len(vals) else float("nan")}
    return out


def consistency_study(config, mesh, prompt, n_runs: int, seeds=None, perceptual: Callable | None = None, on_run: Callable | None = None) -> ConsistencyReport:
    """Train ``n_runs`` fields that differ only in seed and compare their anchor renders pairwise.

    The anchor comes from the first successful run and is reused by the rest.
    ``on_run(index, seed, artifacts)`` sees every successful run.
    """
    from .trainer import parse_prompt, run

    if n_runs < 2:
        raise ValueError("a consistency study needs at least two runs")
    seeds = list(range(n_runs)) if seeds is None else list(seeds)
    if len(seeds) != n_runs:
        raise ValueError(f"expected {n_runs} seeds, got {len(seeds)}")
    if isinstance(prompt, str):
        prompt = parse_prompt(prompt, mesh)

    anchor, images, failed, hashes = None, {}, {}, {}
    for i, seed in enumerate(seeds):
        try:
            art = run(replace(config, seed=seed), mesh, prompt, anchor=anchor)
        except Exception as exc:  # noqa: BLE001 - a failed run is reported, not fatal
            logger.warning("study run %d (seed %d) failed: %s", i, seed, exc)
            failed[i] = f"{type(exc).__name__}: {exc}"
            continue
        if anchor is None:
            anchor = art.anchor
        if on_run is not None:
            on_run(i, seed, art)
        images[i] = render(art.stylized, anchor, config.background).numpy()
        hashes[i] = art.metadata["final_mesh_hash"]

    pairs = []
    for i, j in itertools.combinations(sorted(images), 2):
        pairs.append({"i": i, "j": j, "seed_i": seeds[i], "seed_j": seeds[j],
                      "metrics": image_metrics(images[i], images[j], perceptual)})
    manifest = {
        "config_hash": config.hash(),
        "prompt": prompt.text,
        "anchor": asdict(anchor) if anchor else None,
        "final_mesh_hashes": {seeds[i]: h for i, h in hashes.items()},
        "perceptual": perceptual is not None,
    }
    return ConsistencyReport(seeds, pairs, summarize(pairs), {seeds[i]: e for i, e in failed.items()}, manifest)
