"""Part-level style loss on synchronized grid cells and the crop embedding loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .grounding import COLOR_WORDS, AlignmentMap, SpatialLocationSet
from .render import RenderedImage

DISTANCE_KINDS = ("l2", "mse", "bce", "neg-mean")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    threshold: float = 0.5
    target_value: float = 1.0
    distance_kind: str = "l2"
    crop_pad: int = 8
    n_global_augs: int = 4
    n_local_augs: int = 4
    min_local_fraction: float = 0.5
    perspective_strength: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise LossError("threshold must lie in (0, 1)")
        if self.distance_kind not in DISTANCE_KINDS:
            raise LossError(f"distance_kind must be one of {DISTANCE_KINDS}")
        if self.n_global_augs < 0 or self.n_local_augs < 0:
            raise LossError("augmentation counts must be >= 0")
        if not 0.0 < self.min_local_fraction <= 1.0:
            raise LossError("min_local_fraction must lie in (0, 1]")


# ------------------------------------------------------------ part style loss


def gather_alignment(amap: AlignmentMap, locations: SpatialLocationSet) -> torch.Tensor:
    """Scores of each located cell for its own phrase, in entry order."""
    if len(locations) == 0:
        return amap.scores.new_zeros(0)
    xs, ys, ps = locations.as_arrays()
    w, h, n = amap.scores.shape
    bad = (xs < 0) | (xs >= w) | (ys < 0) | (ys >= h) | (ps < 0) | (ps >= n)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LossError(
            f"location {locations.entries[i]} outside alignment grid {w}x{h}x{n}; "
            "content and styled images were likely rendered from different cameras"
        )
    return amap.scores[torch.as_tensor(xs), torch.as_tensor(ys), torch.as_tensor(ps)]


def part_style_loss(gathered, config: LossConfig = LossConfig()) -> torch.Tensor:
    if not isinstance(gathered, torch.Tensor):
        gathered = torch.as_tensor(np.asarray(gathered, dtype=np.float64))
    scores = gathered
    if not scores.is_floating_point():
        scores = scores.double()
    if scores.numel() == 0:
        raise LossError("no localized regions: the part-style loss needs at least one located cell")
    target = torch.full_like(scores, config.target_value)
    kind = config.distance_kind
    if kind == "l2":
        return torch.linalg.vector_norm(torch.sigmoid(scores) - target)
    if kind == "mse":
        return ((torch.sigmoid(scores) - target) ** 2).mean()
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(scores, target)
    return -(torch.sigmoid(scores) * config.target_value).mean()


# ------------------------------------------------------------------ cropping


@dataclass(frozen=True, eq=False)
class CropSet:
    crops: list[tuple[torch.Tensor, int]]  # (H, W, 3) patch, phrase index
    rects: list[tuple[int, int, int, int]]
    source: RenderedImage
    skipped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.crops)


def cell_rect(x0, y0, x1, y1, grid_stride: int, pad: int, size: int) -> tuple[int, int, int, int]:
    """Pixel rect of an inclusive cell range, padded and clipped to the image."""
    return (
        max(0, x0 * grid_stride - pad),
        max(0, y0 * grid_stride - pad),
        min(size, (x1 + 1) * grid_stride + pad),
        min(size, (y1 + 1) * grid_stride + pad),
    )


def crop_regions(image: RenderedImage, locations: SpatialLocationSet, grid_stride: int, crop_pad: int = 8, n_parts: int | None = None) -> CropSet:
    """One crop per phrase: the padded bounding rectangle of its located cells."""
    if locations.grid_stride and locations.grid_stride != grid_stride:
        raise LossError(f"grid stride {grid_stride} differs from the localization stride {locations.grid_stride}")
    xs, ys, ps = locations.as_arrays()
    present = sorted(set(ps.tolist()))
    expected = range(n_parts) if n_parts is not None else present
    crops, rects = [], []
    for p in present:
        sel = ps == p
        rect = cell_rect(xs[sel].min(), ys[sel].min(), xs[sel].max(), ys[sel].max(), grid_stride, crop_pad, image.image_size)
        x0, y0, x1, y1 = rect
        crops.append((image.pixels[y0:y1, x0:x1], p))
        rects.append(rect)
    skipped = [p for p in expected if p not in present]
    return CropSet(crops, rects, image, skipped)


def whole_image_crop(image: RenderedImage, phrase: int = 0) -> CropSet:
    s = image.image_size
    return CropSet([(image.pixels, phrase)], [(0, 0, s, s)], image, [])


# -------------------------------------------------------------- augmentation


def _resize(patch: torch.Tensor, size: int) -> torch.Tensor:
    chw = patch.permute(2, 0, 1)[None]
    return F.interpolate(chw, size=(size, size), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)


def _perspective(patch: torch.Tensor, strength: float, rng: np.random.Generator, fill=1.0) -> torch.Tensor:
    from torchvision.transforms import functional as TF

    h, w = patch.shape[:2]
    hw, hh = int(strength * w / 2), int(strength * h / 2)
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    if hw == 0 and hh == 0:
        return patch

    def jitter(lim):
        return int(rng.integers(0, lim + 1)) if lim > 0 else 0

    end = [
        [jitter(hw), jitter(hh)],
        [w - 1 - jitter(hw), jitter(hh)],
        [w - 1 - jitter(hw), h - 1 - jitter(hh)],
        [jitter(hw), h - 1 - jitter(hh)],
    ]
    out = TF.perspective(patch.permute(2, 0, 1), start, end, fill=[fill] * 3)
    return out.permute(1, 2, 0)


def augment(crops: CropSet, config: LossConfig, rng: np.random.Generator, output_size: int = 32, fill: float = 1.0) -> list[tuple[torch.Tensor, int]]:
    """Global perspective views and local sub-crops of every crop, resized square."""
    out = []
    for patch, part in crops.crops:
        h, w = patch.shape[:2]
        for _ in range(config.n_global_augs):
            out.append((_resize(_perspective(patch, config.perspective_strength, rng, fill), output_size), part))
        for _ in range(config.n_local_augs):
            fh = rng.uniform(config.min_local_fraction, 1.0)
            fw = rng.uniform(config.min_local_fraction, 1.0)
            ch, cw = max(1, int(round(fh * h))), max(1, int(round(fw * w)))
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            out.append((_resize(patch[y0:y0 + ch, x0:x0 + cw], output_size), part))
    return out


# ----------------------------------------------------------- embedding loss


class EmbeddingBackend:
    """Image and text encoders into one space."""

    name = "abstract"
    input_size = 224

    def embed_images(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, S, S, 3) in [0, 1] -> (B, D)."""
        raise NotImplementedError

    def embed_texts(self, texts) -> torch.Tensor:
        raise NotImplementedError


class ToyEmbeddingBackend(EmbeddingBackend):
    """Mean RGB of a patch vs. the summed unit colors of a text's color words."""

    name = "toy"

    def __init__(self, input_size: int = 32, color_table: dict | None = None):
        self.input_size = input_size
        self.color_table = dict(COLOR_WORDS if color_table is None else color_table)

    def embed_images(self, patches: torch.Tensor) -> torch.Tensor:
        return patches.mean(dim=(1, 2))

    def embed_texts(self, texts) -> torch.Tensor:
        rows = []
        for text in texts:
            vecs = [
                torch.tensor(self.color_table[w], dtype=torch.float64)
                for w in text.lower().replace(",", " ").split()
                if w in self.color_table
            ]
            if not vecs:
                raise LossError(f"toy embedder has no color word in {text!r}; supported: {sorted(self.color_table)}")
            rows.append(sum(v / v.norm() for v in vecs))
        return torch.stack(rows)


class ClipEmbeddingBackend(EmbeddingBackend):
    """CLIP through ``transformers``; weights come from a local path or hub id."""

    name = "clip"
    input_size = 224
    _MEAN = (0.48145466, 0.4578275, 0.40821073)
    _STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name_or_path: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        from transformers import CLIPModel, CLIPTokenizer

        self.model = CLIPModel.from_pretrained(model_name_or_path).to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name_or_path)
        self.device = device
        for p in self.model.parameters():
            p.requires_grad_(False)

    def embed_images(self, patches):
        x = patches.permute(0, 3, 1, 2).to(self.device, torch.float32)
        if x.shape[-1] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        mean = torch.tensor(self._MEAN, device=self.device).view(1, 3, 1, 1)
        std = torch.tensor(self._STD, device=self.device).view(1, 3, 1, 1)
        return self.model.get_image_features(pixel_values=(x - mean) / std)

    def embed_texts(self, texts):
        tokens = self.tokenizer(list(texts), padding=True, return_tensors="pt").to(self.device)
        with torch.no_grad():
            return self.model.get_text_features(**tokens)


def make_embedder(kind: str, **kwargs) -> EmbeddingBackend:
    if kind == "toy":
        return ToyEmbeddingBackend(**kwargs)
    if kind == "clip":
        return ClipEmbeddingBackend(**kwargs)
    raise LossError(f"unknown embedding backend {kind!r}; choose from toy, clip")


def clip_style_loss(backend: EmbeddingBackend, patches: list[tuple[torch.Tensor, int]], style_phrases) -> torch.Tensor:
    """Negative mean cosine between each patch and the style phrase of its part."""
    if not patches:
        raise LossError("no patches to score")
    images = torch.stack([p for p, _ in patches])
    img = backend.embed_images(images)
    txt = backend.embed_texts(list(style_phrases)).to(img)
    parts = torch.as_tensor([k for _, k in patches])
    txt = txt[parts]
    ni, nt = img.norm(dim=-1), txt.norm(dim=-1)
    if bool((ni <= 1e-12).any()) or bool((nt <= 1e-12).any()):
        raise LossError("zero-norm embedding; cosine similarity undefined")
    cos = (img * txt).sum(dim=-1) / (ni * nt)
    return -cos.mean()


def max_part_style_loss(k: int, target_value: float = 1.0) -> float:
    """Upper bound of the l2 distance for ``k`` gathered cells."""
    return math.sqrt(k) * target_value
