"""Region-word grounding: fused features, alignment maps, localization, detection.

Three interchangeable backends share one interface:

* :class:`ToyGroundingBackend` - differentiable color-word grounding on pixel patches.
* :class:`OracleGroundingBackend` - ground truth from rasterized part masks.
* :class:`PretrainedGroundingBackend` - adapter around an external GLIP install.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .mesh import PartitionedMesh
from .render import Camera, RenderedImage, bboxes_from_mask, render, render_part_masks

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5

COLOR_WORDS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "pink": (1.0, 0.4, 0.7),
    "teal": (0.0, 0.5, 0.5),
    "lime": (0.5, 1.0, 0.0),
    "violet": (0.6, 0.2, 1.0),
}


class GroundingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FusedFeatures:
    visual: torch.Tensor  # (w, h, d), indexed [column, row]
    textual: torch.Tensor  # (N, d)
    grid_stride: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.visual.shape[:2])


@dataclass(frozen=True, eq=False)
class AlignmentMap:
    scores: torch.Tensor  # (w, h, N) logits
    grid_stride: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.scores.shape[:2])


@dataclass(frozen=True)
class SpatialLocationSet:
    """Grid cells ``(x, y, phrase)`` localized on a content image."""

    entries: tuple[tuple[int, int, int], ...]
    source_camera: Camera | None
    grid_shape: tuple[int, int]
    grid_stride: int

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def parts(self) -> list[int]:
        return sorted({p for _, _, p in self.entries})

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        arr = np.asarray(self.entries, dtype=np.int64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]


@dataclass(frozen=True)
class DetectedBox:
    box: tuple[int, int, int, int]  # half-open pixels (x0, y0, x1, y1)
    phrase: int
    confidence: float


@dataclass
class PromptOffset:
    """Learnable context vectors keyed by phrase; absent phrases use no offset."""

    dim: int
    vectors: dict[str, torch.Tensor] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, dim: int, phrases) -> PromptOffset:
        return cls(dim, {p: torch.zeros(dim, dtype=torch.float64) for p in phrases})

    def get(self, phrase: str) -> torch.Tensor | None:
        return self.vectors.get(phrase)

    def is_zero(self) -> bool:
        return all(bool((v == 0).all()) for v in self.vectors.values())

    def detach(self) -> PromptOffset:
        return PromptOffset(self.dim, {k: v.detach().clone() for k, v in self.vectors.items()})

    def save(self, path, mesh_id: str = "", backend_id: str = "") -> None:
        torch.save(
            {"format": "partstyle-offset", "dim": self.dim, "mesh_id": mesh_id, "backend_id": backend_id,
             "vectors": {k: v.detach().cpu() for k, v in self.vectors.items()}},
            path,
        )

    @classmethod
    def load(cls, path) -> PromptOffset:
        data = torch.load(path, map_location="cpu", weights_only=False)
        if data.get("format") != "partstyle-offset":
            raise ValueError(f"{path} is not a prompt-offset file")
        return cls(data["dim"], dict(data["vectors"]), meta={"mesh_id": data.get("mesh_id", ""), "backend_id": data.get("backend_id", "")})


class GroundingBackend:
    """Interface: ``encode`` plus a detection head; optional prompt-offset slot."""

    name = "abstract"
    supports_offsets = False
    differentiable = False

    def __init__(self, grid_size: int = 32):
        self.grid_size = grid_size
        self.prompt_offset: PromptOffset | None = None

    @property
    def embed_dim(self) -> int:
        raise NotImplementedError

    def grid_stride(self, image: RenderedImage) -> int:
        s = image.image_size
        if s % self.grid_size:
            raise GroundingError(f"image size {s} is not divisible by grid size {self.grid_size}")
        return s // self.grid_size

    def encode(self, image: RenderedImage, phrases) -> FusedFeatures:
        raise NotImplementedError

    def detect_boxes(self, image: RenderedImage, phrases, threshold: float = DEFAULT_THRESHOLD) -> list[DetectedBox]:
        raise NotImplementedError


# ------------------------------------------------------------------------ toy


class ToyGroundingBackend(GroundingBackend):
    """Color-word grounding in RGB chroma space.

    A visual cell is ``gain * (m - mean(m))`` for the mean RGB ``m`` of its
    pixel patch; a phrase is the sum-pooled token vectors of its color words,
    plus any prompt offset appended as an extra token. Scores therefore peak
    when a patch takes the phrase's color.
    """

    name = "toy"
    supports_offsets = True
    differentiable = True

    def __init__(self, grid_size: int = 32, gain: float = 6.0, color_table: dict | None = None):
        super().__init__(grid_size)
        self.gain = gain
        table = COLOR_WORDS if color_table is None else color_table
        self.color_table = {k.lower(): tuple(float(c) for c in v) for k, v in table.items()}

    @property
    def embed_dim(self) -> int:
        return 3

    def phrase_tokens(self, phrase: str) -> list[torch.Tensor]:
        tokens = []
        for word in phrase.lower().replace(",", " ").split():
            if word in self.color_table:
                vec = torch.tensor(self.color_table[word], dtype=torch.float64)
                tokens.append(vec / vec.norm())
        return tokens

    def encode_text(self, phrases) -> torch.Tensor:
        if not phrases:
            raise GroundingError("phrase list must not be empty")
        rows = []
        for phrase in phrases:
            tokens = self.phrase_tokens(phrase)
            offset = self.prompt_offset.get(phrase) if self.prompt_offset is not None else None
            if not tokens and offset is None:
                raise GroundingError(
                    f"toy backend cannot ground {phrase!r}: no color word; supported words: {sorted(self.color_table)}"
                )
            if offset is not None:
                tokens.append(offset.to(torch.float64))
            rows.append(torch.stack(tokens).sum(dim=0))
        return torch.stack(rows)

    def encode_image(self, image: RenderedImage) -> tuple[torch.Tensor, int]:
        stride = self.grid_stride(image)
        g = self.grid_size
        px = image.pixels
        # (rows, cols, 3) -> per-cell means indexed [x, y]
        cells = px.reshape(g, stride, g, stride, 3).mean(dim=(1, 3)).transpose(0, 1)
        chroma = cells - cells.mean(dim=-1, keepdim=True)
        return self.gain * chroma, stride

    def encode(self, image: RenderedImage, phrases) -> FusedFeatures:
        textual = self.encode_text(phrases)
        visual, stride = self.encode_image(image)
        return FusedFeatures(visual, textual.to(visual.dtype), stride)

    def detect_boxes(self, image, phrases, threshold: float = DEFAULT_THRESHOLD) -> list[DetectedBox]:
        amap = alignment_map(self.encode(image, phrases))
        probs = torch.sigmoid(amap.scores.detach()).cpu().numpy()
        stride = amap.grid_stride
        boxes = []
        for i in range(len(phrases)):
            xs, ys = np.nonzero(probs[:, :, i] > threshold)
            if len(xs) == 0:
                continue
            box = (int(xs.min()) * stride, int(ys.min()) * stride, (int(xs.max()) + 1) * stride, (int(ys.max()) + 1) * stride)
            boxes.append(DetectedBox(box, i, float(probs[xs, ys, i].mean())))
        return boxes


# --------------------------------------------------------------------- oracle


class OracleGroundingBackend(GroundingBackend):
    """Grounding read off the mesh's own part masks.

    Visual cells hold ``gain * (fraction of cell pixels in each part)`` plus a
    constant bias channel; phrase rows select their part and subtract
    ``gain / 2``, so a score is positive exactly when the part covers a strict
    majority of the cell.
    """

    name = "oracle"

    def __init__(self, mesh: PartitionedMesh, grid_size: int = 32, min_side: int = 10, gain: float = 8.0):
        super().__init__(grid_size)
        self.mesh = mesh
        self.min_side = min_side
        self.gain = gain

    @property
    def embed_dim(self) -> int:
        return self.mesh.n_parts + 1

    def resolve(self, phrases) -> list[int]:
        out = []
        for phrase in phrases:
            idx = self.mesh.resolve_part(phrase)
            if idx is None:
                known = [p for i in range(self.mesh.n_parts) for p in self.mesh.phrases_for(i)]
                raise GroundingError(f"oracle cannot resolve {phrase!r}; known parts: {known}")
            out.append(idx)
        return out

    def part_mask(self, image: RenderedImage) -> np.ndarray:
        return render_part_masks(self.mesh, image.camera)

    def encode(self, image: RenderedImage, phrases) -> FusedFeatures:
        parts = self.resolve(phrases)
        stride = self.grid_stride(image)
        g, n = self.grid_size, self.mesh.n_parts
        mask = self.part_mask(image)
        onehot = np.zeros(mask.shape + (n,))
        rows, cols = np.nonzero(mask >= 0)
        onehot[rows, cols, mask[rows, cols]] = 1.0
        frac = onehot.reshape(g, stride, g, stride, n).mean(axis=(1, 3)).transpose(1, 0, 2)
        visual = np.concatenate([self.gain * frac, np.ones((g, g, 1))], axis=-1)
        textual = np.zeros((len(parts), n + 1))
        textual[np.arange(len(parts)), parts] = 1.0
        textual[:, -1] = -self.gain / 2
        return FusedFeatures(torch.as_tensor(visual), torch.as_tensor(textual), stride)

    def detect_boxes(self, image, phrases, threshold: float = DEFAULT_THRESHOLD) -> list[DetectedBox]:
        parts = self.resolve(phrases)
        boxes = dict(bboxes_from_mask(self.part_mask(image), self.mesh.n_parts, self.min_side))
        return [DetectedBox(boxes[p], i, 1.0) for i, p in enumerate(parts) if p in boxes]


# ----------------------------------------------------------------- pretrained


class PretrainedGroundingBackend(GroundingBackend):
    """Adapter running a GLIP checkpoint in eval mode behind the common interface.

    Needs the ``maskrcnn_benchmark`` package from the GLIP code release and
    its weights; nothing is downloaded. Fused features are taken from the
    language-aware visual map at one pyramid level (``feature_level``).
    """

    name = "pretrained"
    supports_offsets = True

    def __init__(self, config_path, weights_path, grid_size: int = 32, feature_level: int = 0, device: str = "cuda"):
        super().__init__(grid_size)
        try:
            from maskrcnn_benchmark.config import cfg
            from maskrcnn_benchmark.engine.predictor_glip import GLIPDemo
        except ImportError as exc:  # pragma: no cover - depends on external install
            raise GroundingError(
                "the pretrained backend needs the GLIP code release (maskrcnn_benchmark) on the path"
            ) from exc
        cfg = cfg.clone()  # pragma: no cover
        cfg.merge_from_file(str(config_path))
        cfg.merge_from_list(["MODEL.WEIGHT", str(weights_path), "MODEL.DEVICE", device])
        self._demo = GLIPDemo(cfg, min_image_size=800, confidence_threshold=0.0)
        self._demo.model.eval()
        self.feature_level = feature_level
        self._captured: dict = {}
        self._hook()

    def _hook(self):  # pragma: no cover - external model internals
        fusion = self._demo.model.rpn.head

        def grab(_module, _inputs, output):
            self._captured["fused"] = output

        fusion.register_forward_hook(grab)

    @property
    def embed_dim(self) -> int:  # pragma: no cover
        return self._demo.cfg.MODEL.DYHEAD.CHANNELS

    def _run(self, image: RenderedImage, phrases):  # pragma: no cover
        bgr = (image.numpy()[..., ::-1] * 255).astype(np.uint8)
        caption = " . ".join(phrases)
        with torch.no_grad():
            preds = self._demo.compute_prediction(bgr, caption)
        return preds, self._captured.get("fused")

    def encode(self, image, phrases) -> FusedFeatures:  # pragma: no cover
        _, fused = self._run(image, phrases)
        visual = fused["visual"][self.feature_level][0].permute(2, 1, 0)
        textual = fused["lang"]["hidden"][0][: len(phrases)]
        if self.prompt_offset is not None:
            extra = [self.prompt_offset.get(p) for p in phrases]
            textual = torch.stack([t if o is None else t + o.to(t) for t, o in zip(textual, extra)])
        return FusedFeatures(visual, textual, image.image_size // visual.shape[0])

    def detect_boxes(self, image, phrases, threshold: float = DEFAULT_THRESHOLD) -> list[DetectedBox]:  # pragma: no cover
        preds, _ = self._run(image, phrases)
        out = []
        for box, label, score in zip(preds.bbox.tolist(), preds.get_field("labels").tolist(), preds.get_field("scores").tolist()):
            if score > threshold:
                out.append(DetectedBox(tuple(int(round(b)) for b in box), int(label) - 1, float(score)))
        return out


# ------------------------------------------------------------------ operations


def make_backend(kind: str, mesh: PartitionedMesh | None = None, **kwargs) -> GroundingBackend:
    if kind == "toy":
        return ToyGroundingBackend(**kwargs)
    if kind == "oracle":
        if mesh is None:
            raise GroundingError("the oracle backend needs the mesh")
        return OracleGroundingBackend(mesh, **kwargs)
    if kind == "pretrained":
        return PretrainedGroundingBackend(**kwargs)
    raise GroundingError(f"unknown grounding backend {kind!r}; choose from toy, oracle, pretrained")


def encode(backend: GroundingBackend, image: RenderedImage, phrases) -> FusedFeatures:
    if not phrases:
        raise GroundingError("phrase list must not be empty")
    return backend.encode(image, list(phrases))


def alignment_map(features: FusedFeatures) -> AlignmentMap:
    visual, textual = features.visual, features.textual
    if visual.shape[-1] != textual.shape[-1]:
        raise GroundingError(f"feature width mismatch: visual {visual.shape[-1]} vs textual {textual.shape[-1]}")
    textual = textual.to(visual.dtype)
    # ordered accumulation over the feature axis keeps every score bit-reproducible
    scores = visual[:, :, None, 0] * textual[None, None, :, 0]
    for k in range(1, visual.shape[-1]):
        scores = scores + visual[:, :, None, k] * textual[None, None, :, k]
    return AlignmentMap(scores, features.grid_stride)


def locations_from_map(amap: AlignmentMap, threshold: float = DEFAULT_THRESHOLD, camera: Camera | None = None) -> SpatialLocationSet:
    probs = torch.sigmoid(amap.scores.detach())
    best, arg = probs.max(dim=-1)
    xs, ys = np.nonzero((best > threshold).cpu().numpy())
    args = arg.cpu().numpy()
    entries = tuple((int(x), int(y), int(args[x, y])) for x, y in zip(xs, ys))
    return SpatialLocationSet(entries, camera, amap.grid_shape, amap.grid_stride)


def localize(backend: GroundingBackend, image: RenderedImage, part_phrases, threshold: float = DEFAULT_THRESHOLD) -> SpatialLocationSet:
    """Cells whose best post-sigmoid phrase score exceeds ``threshold``, tagged with that phrase."""
    amap = alignment_map(encode(backend, image, part_phrases))
    return locations_from_map(amap, threshold, image.camera)


def detect_boxes(backend: GroundingBackend, image: RenderedImage, phrases, threshold: float = DEFAULT_THRESHOLD) -> list[DetectedBox]:
    return backend.detect_boxes(image, list(phrases), threshold)


def view_confidence(boxes: list[DetectedBox], n_phrases: int) -> float:
    """Mean over phrases of their best box confidence (0 for undetected phrases)."""
    best = np.zeros(n_phrases)
    for b in boxes:
        best[b.phrase] = max(best[b.phrase], b.confidence)
    return float(best.mean()) if n_phrases else 0.0


def select_anchor_view(backend: GroundingBackend, mesh: PartitionedMesh, part_phrases, candidates, background=(1.0, 1.0, 1.0)) -> Camera:
    if not candidates:
        raise GroundingError("need at least one candidate view")
    best_cam, best_score = candidates[0], -1.0
    for cam in candidates:
        boxes = detect_boxes(backend, render(mesh, cam, background), part_phrases)
        score = view_confidence(boxes, len(part_phrases))
        logger.debug("anchor candidate az=%.3f el=%.3f score=%.4f", cam.azimuth, cam.elevation, score)
        if score > best_score:
            best_cam, best_score = cam, score
    return best_cam
