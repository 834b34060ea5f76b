"""Multi-view box dataset, prompt-offset tuning and detection AP."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .grounding import GroundingBackend, PromptOffset, alignment_map, encode
from .mesh import PartitionedMesh, StylizedMesh
from .render import Camera, RenderedImage, bboxes_from_mask, load_png, mask_from_faces, render, save_png

logger = logging.getLogger(__name__)

Box = tuple[int, int, int, int]


class DatasetError(ValueError):
    pass


class TuningDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    image: RenderedImage
    caption: str
    phrases: tuple[str, ...]  # one per part, in part order
    boxes: tuple[tuple[Box, int], ...]

    @property
    def camera(self) -> Camera:
        return self.image.camera


@dataclass(eq=False)
class FinetuneDataset:
    samples: list[Sample]
    synonyms: dict[str, list[str]]
    part_names: tuple[str, ...]
    min_side: int = 10
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def phrases(self) -> list[str]:
        seen = []
        for s in self.samples:
            seen += [p for p in s.phrases if p not in seen]
        return seen


def synonym_table(mesh: PartitionedMesh, synonyms: dict | None = None) -> dict[str, list[str]]:
    table = {}
    for i, name in enumerate(mesh.part_names):
        entry = list((synonyms or {}).get(name) or mesh.phrases_for(i))
        if not entry:
            raise DatasetError(f"part {name!r} needs at least one phrase")
        table[name] = entry
    return table


def generate_dataset(mesh, synonyms: dict | None, viewpoints: list[Camera], min_side: int = 10, background=(1.0, 1.0, 1.0)) -> FinetuneDataset:
    """One sample per (viewpoint, synonym assignment).

    ``mesh`` may be a :class:`StylizedMesh` to render colored parts. Assignment
    ``j`` takes the ``j``-th synonym of every part (cycling shorter lists).
    """
    base = mesh.base if isinstance(mesh, StylizedMesh) else mesh
    table = synonym_table(base, synonyms)
    lists = [table[n] for n in base.part_names]
    n_assign = max(len(s) for s in lists)
    seen_any = np.zeros(base.n_parts, dtype=bool)
    boxed_any = np.zeros(base.n_parts, dtype=bool)
    samples = []
    for cam in viewpoints:
        image = render(mesh, cam, background)
        mask = mask_from_faces(image.face_ids, base.face_parts)
        seen_any[np.unique(mask[mask >= 0])] = True
        boxes = tuple((box, part) for part, box in bboxes_from_mask(mask, base.n_parts, min_side))
        boxed_any[[part for _, part in boxes]] = True
        for j in range(n_assign):
            phrases = tuple(lst[j % len(lst)] for lst in lists)
            samples.append(Sample(image, ", ".join(phrases), phrases, boxes))
    hidden = [base.part_names[i] for i in np.flatnonzero(~seen_any)]
    if hidden:
        raise DatasetError(f"parts invisible from every viewpoint: {hidden}")
    tiny = [base.part_names[i] for i in np.flatnonzero(~boxed_any)]
    if tiny:
        raise DatasetError(f"parts smaller than min_side={min_side} px in every viewpoint: {tiny}")
    return FinetuneDataset(samples, table, base.part_names, min_side)


def regenerate_boxes(dataset: FinetuneDataset, mesh) -> list[tuple[tuple[Box, int], ...]]:
    base = mesh.base if isinstance(mesh, StylizedMesh) else mesh
    out = []
    for s in dataset.samples:
        mask = mask_from_faces(render(mesh, s.camera).face_ids, base.face_parts)
        out.append(tuple((box, part) for part, box in bboxes_from_mask(mask, base.n_parts, dataset.min_side)))
    return out


def save_dataset(dataset: FinetuneDataset, out_dir) -> Path:
    """Images plus a COCO-style ``annotations.json`` index."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    written = {}
    for i, s in enumerate(dataset.samples):
        key = id(s.image)
        if key not in written:
            written[key] = f"images/{len(written):05d}.png"
            save_png(s.image, out / written[key])
        size = s.image.image_size
        images.append({
            "id": i, "file_name": written[key], "width": size, "height": size,
            "caption": s.caption, "phrases": list(s.phrases), "camera": asdict(s.camera),
        })
        for box, part in s.boxes:
            x0, y0, x1, y1 = box
            annotations.append({
                "id": len(annotations), "image_id": i, "bbox": [x0, y0, x1 - x0, y1 - y0],
                "category_id": part, "phrase": s.phrases[part],
            })
    index = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(dataset.part_names)],
        "synonyms": dataset.synonyms,
        "min_side": dataset.min_side,
    }
    path = out / "annotations.json"
    path.write_text(json.dumps(index, indent=1))
    return path


def load_dataset(out_dir) -> FinetuneDataset:
    out = Path(out_dir)
    index = json.loads((out / "annotations.json").read_text())
    by_image: dict[int, list] = {}
    for a in index["annotations"]:
        x, y, w, h = a["bbox"]
        by_image.setdefault(a["image_id"], []).append(((x, y, x + w, y + h), a["category_id"]))
    samples = []
    for rec in index["images"]:
        pixels = torch.as_tensor(load_png(out / rec["file_name"]))
        image = RenderedImage(pixels, Camera(**rec["camera"]), False, np.full(pixels.shape[:2], -1))
        samples.append(Sample(image, rec["caption"], tuple(rec["phrases"]), tuple(by_image.get(rec["id"], []))))
    names = tuple(c["name"] for c in sorted(index["categories"], key=lambda c: c["id"]))
    return FinetuneDataset(samples, index["synonyms"], names, index["min_side"])


# -------------------------------------------------------------------- tuning


@contextlib.contextmanager
def using_offset(backend: GroundingBackend, offset: PromptOffset | None):
    previous = backend.prompt_offset
    backend.prompt_offset = offset
    try:
        yield backend
    finally:
        backend.prompt_offset = previous


def cell_labels(boxes, n_phrases: int, grid_shape: tuple[int, int], stride: int) -> torch.Tensor:
    """1 where a cell center falls inside the phrase's ground-truth box."""
    w, h = grid_shape
    labels = torch.zeros(w, h, n_phrases, dtype=torch.float64)
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    for (x0, y0, x1, y1), part in boxes:
        xs = (cx >= x0) & (cx < x1)
        ys = (cy >= y0) & (cy < y1)
        labels[np.ix_(xs, ys, [part])] = 1.0
    return labels


def grounding_loss(backend: GroundingBackend, dataset: FinetuneDataset) -> torch.Tensor:
    total = 0.0
    for s in dataset.samples:
        amap = alignment_map(encode(backend, s.image, s.phrases))
        labels = cell_labels(s.boxes, len(s.phrases), amap.grid_shape, amap.grid_stride)
        total = total + F.binary_cross_entropy_with_logits(amap.scores.double(), labels)
    return total / len(dataset.samples)


def tune_offsets(backend: GroundingBackend, dataset: FinetuneDataset, epochs: int = 50, learning_rate: float = 0.1) -> PromptOffset:
    """Fit one offset vector per phrase with the backend otherwise frozen.

    Each epoch is one full-batch Adam step on the mean cell-level BCE.
    """
    if not backend.supports_offsets:
        raise ValueError(f"backend {backend.name!r} exposes no prompt-offset slot")
    offset = PromptOffset.zeros(backend.embed_dim, dataset.phrases)
    if epochs <= 0:
        return offset
    params = []
    for v in offset.vectors.values():
        v.requires_grad_(True)
        params.append(v)
    opt = torch.optim.Adam(params, lr=learning_rate)
    history = []
    with using_offset(backend, offset):
        for epoch in range(epochs):
            loss = grounding_loss(backend, dataset)
            history.append(float(loss.detach()))
            if history[-1] > 10 * history[0]:
                raise TuningDiverged(f"offset tuning diverged at epoch {epoch}: loss {history[-1]:.4g} vs initial {history[0]:.4g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    logger.info("offset tuning loss %.4f -> %.4f over %d epochs", history[0], history[-1], epochs)
    tuned = offset.detach()
    tuned.history = history
    return tuned


# ------------------------------------------------------------------------ AP


def box_iou(a: Box, b: Box) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(detections, ground_truth, iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP.

    ``detections``: (sample, part, box, confidence); ``ground_truth``:
    (sample, part, box). A detection matches an unclaimed box of the same
    sample and part with IoU >= threshold, best IoU first.
    """
    npos = len(ground_truth)
    if npos == 0 or not detections:
        return 0.0
    gt_by_key: dict[tuple[int, int], list[Box]] = {}
    for sample, part, box in ground_truth:
        gt_by_key.setdefault((sample, part), []).append(box)
    claimed = {k: [False] * len(v) for k, v in gt_by_key.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i][3])
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        sample, part, box, _ = detections[i]
        cands = gt_by_key.get((sample, part), [])
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(cands):
            iou = box_iou(box, g)
            if iou >= best_iou and not claimed[(sample, part)][j]:
                best, best_iou = j, iou
        if best >= 0:
            claimed[(sample, part)][best] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def collect_detections(backend: GroundingBackend, dataset: FinetuneDataset, offset: PromptOffset | None = None):
    dets, gts = [], []
    with using_offset(backend, offset if offset is not None else backend.prompt_offset):
        for k, s in enumerate(dataset.samples):
            for box, part in s.boxes:
                gts.append((k, part, box))
            with torch.no_grad():
                for d in backend.detect_boxes(s.image, list(s.phrases)):
                    dets.append((k, d.phrase, d.box, d.confidence))
    return dets, gts


def evaluate_ap(backend: GroundingBackend, dataset: FinetuneDataset, offset: PromptOffset | None = None, iou_threshold: float = 0.5) -> float:
    if not dataset.samples:
        raise DatasetError("dataset is empty")
    dets, gts = collect_detections(backend, dataset, offset)
    return average_precision(dets, gts, iou_threshold)


def evaluate_ap_per_part(backend, dataset, offset=None, iou_threshold: float = 0.5) -> dict[str, float]:
    dets, gts = collect_detections(backend, dataset, offset)
    return {
        name: average_precision([d for d in dets if d[1] == i], [g for g in gts if g[1] == i], iou_threshold)
        for i, name in enumerate(dataset.part_names)
    }
