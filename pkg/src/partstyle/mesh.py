"""Part-labeled triangle meshes: loading, normalization, styling and export."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

DISPLACEMENT_SCALE = 0.1


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PartitionedMesh:
    """A triangle mesh whose faces are exhaustively split into named parts.

    ``vertex_normals`` are derived on construction (area-weighted face normals)
    unless given explicitly.
    """

    vertices: np.ndarray
    faces: np.ndarray
    part_names: tuple[str, ...]
    face_parts: np.ndarray
    synonyms: dict[str, tuple[str, ...]] = field(default_factory=dict)
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        face_parts = np.ascontiguousarray(self.face_parts, dtype=np.int64)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "face_parts", face_parts)
        object.__setattr__(self, "part_names", tuple(self.part_names))
        syn = {k: tuple(v) for k, v in (self.synonyms or {}).items()}
        object.__setattr__(self, "synonyms", syn)
        _validate(self)
        if self.vertex_normals is None:
            object.__setattr__(self, "vertex_normals", compute_vertex_normals(verts, faces))
        for arr in (self.vertices, self.faces, self.face_parts, self.vertex_normals):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    def part_faces(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.face_parts == part)

    def part_vertices(self, part: int) -> np.ndarray:
        """Vertex indices touched by any face of ``part``."""
        return np.unique(self.faces[self.face_parts == part])

    def phrases_for(self, part: int) -> tuple[str, ...]:
        name = self.part_names[part]
        extra = tuple(s for s in self.synonyms.get(name, ()) if s != name)
        return (name,) + extra

    def resolve_part(self, phrase: str) -> int | None:
        """Index of the part whose name or synonym ends ``phrase``, longest match first."""
        tokens = phrase.lower().split()
        best, best_len = None, 0
        for idx in range(self.n_parts):
            for cand in self.phrases_for(idx):
                ct = cand.lower().split()
                if ct and len(ct) <= len(tokens) and tokens[-len(ct):] == ct and len(ct) > best_len:
                    best, best_len = idx, len(ct)
        return best

    def with_vertices(self, vertices: np.ndarray) -> PartitionedMesh:
        return PartitionedMesh(vertices, self.faces, self.part_names, self.face_parts, self.synonyms)


def _validate(mesh: PartitionedMesh) -> None:
    v, f, fp = mesh.vertices, mesh.faces, mesh.face_parts
    if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
        raise MeshError(f"vertices must be a non-empty (e, 3) array, got {v.shape}")
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshError(f"faces must be triangles, got shape {f.shape}")
    if len(f) == 0:
        raise MeshError("mesh has no faces")
    if not np.all(np.isfinite(v)):
        raise MeshError("vertices contain non-finite values")
    if f.min() < 0 or f.max() >= len(v):
        raise MeshError("face index out of range")
    if fp.shape != (len(f),):
        raise MeshError(f"face_parts must have one entry per face ({len(f)}), got {fp.shape}")
    n = len(mesh.part_names)
    if n == 0:
        raise MeshError("mesh needs at least one part")
    unlabeled = np.flatnonzero((fp < 0) | (fp >= n))
    if len(unlabeled):
        raise MeshError(f"unlabeled faces: {unlabeled.tolist()}")
    counts = np.bincount(fp, minlength=n)
    empty = [mesh.part_names[i] for i in np.flatnonzero(counts == 0)]
    if empty:
        raise MeshError(f"parts without faces: {empty}")
    if len(set(mesh.part_names)) != n:
        raise MeshError("duplicate part names")


def face_areas_normals(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1), cross


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # unnormalized cross products are area-weighted; degenerate faces contribute zero
    _, cross = face_areas_normals(vertices, faces)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], cross)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    fallback = np.zeros_like(normals)
    fallback[:, 2] = 1.0
    return np.where(norm > 1e-12, normals / np.maximum(norm, 1e-300), fallback)


def vertex_normals_torch(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    tri = vertices[faces]
    cross = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    normals = torch.zeros_like(vertices)
    for k in range(3):
        normals = normals.index_add(0, faces[:, k], cross)
    return normals / normals.norm(dim=1, keepdim=True).clamp_min(1e-12)


def normalize_mesh(mesh: PartitionedMesh) -> PartitionedMesh:
    """Center on the vertex centroid and scale to unit bounding-sphere radius."""
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius <= 1e-12:
        raise MeshError("cannot normalize: all vertices coincide")
    if np.allclose(centered, mesh.vertices, atol=1e-12, rtol=0) and abs(radius - 1.0) < 1e-12:
        return mesh
    return mesh.with_vertices(centered / radius)


# ----------------------------------------------------------------------------- io


def read_obj(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, list[str | None]]:
    """Parse positions, triangle faces and the active group name per face."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    verts, faces, groups = [], [], []
    group = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{lineno}: non-triangle face with {len(idx)} vertices")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
                groups.append(group)
            elif tag in ("g", "o"):
                group = " ".join(parts[1:]) or None
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), groups


def write_obj(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_parts(path: str | os.PathLike) -> tuple[dict[str, list[int]], dict[str, list[str]], dict]:
    """Read a parts sidecar: ``{"parts": {name: [face, ...]}, "synonyms": {...}}``."""
    with open(path) as fh:
        data = json.load(fh)
    if "parts" not in data or not isinstance(data["parts"], dict):
        raise MeshError(f"{path}: missing 'parts' mapping")
    return data["parts"], data.get("synonyms", {}), data


def write_parts(path: str | os.PathLike, mesh: PartitionedMesh, extra: dict | None = None) -> None:
    data = {
        "parts": {name: mesh.part_faces(i).tolist() for i, name in enumerate(mesh.part_names)},
        "synonyms": {k: list(v) for k, v in mesh.synonyms.items()},
    }
    data.update(extra or {})
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def labels_from_parts(parts: dict[str, list[int]], n_faces: int) -> tuple[list[str], np.ndarray]:
    names = list(parts)
    face_parts = np.full(n_faces, -1, dtype=np.int64)
    for i, name in enumerate(names):
        idx = np.asarray(parts[name], dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= n_faces):
            raise MeshError(f"part {name!r} references faces outside [0, {n_faces})")
        clash = idx[face_parts[idx] >= 0]
        if len(clash):
            raise MeshError(f"faces labeled with more than one part: {clash.tolist()}")
        face_parts[idx] = i
    missing = np.flatnonzero(face_parts < 0)
    if len(missing):
        raise MeshError(f"unlabeled faces: {missing.tolist()}")
    return names, face_parts


def load_mesh(mesh_path, parts_path=None, normalize: bool = True) -> PartitionedMesh:
    """Load an OBJ mesh plus its parts sidecar.

    Without a sidecar, OBJ ``g``/``o`` group tags are used as part labels.
    Zero-area faces are kept (with a warning) so the labeling stays exhaustive.
    """
    verts, faces, groups = read_obj(mesh_path)
    if parts_path is not None:
        parts, synonyms, _ = read_parts(parts_path)
    else:
        if any(g is None for g in groups):
            missing = [i for i, g in enumerate(groups) if g is None]
            raise MeshError(f"unlabeled faces: {missing}")
        parts, synonyms = {}, {}
        for i, g in enumerate(groups):
            parts.setdefault(g, []).append(i)
    names, face_parts = labels_from_parts(parts, len(faces))
    areas, _ = face_areas_normals(verts, faces) if len(faces) else (np.zeros(0), None)
    degenerate = np.flatnonzero(areas <= 1e-14)
    if len(degenerate):
        logger.warning("%d degenerate faces kept: %s", len(degenerate), degenerate[:20].tolist())
    mesh = PartitionedMesh(verts, faces, names, face_parts, synonyms)
    return normalize_mesh(mesh) if normalize else mesh


# ---------------------------------------------------------------------- styling


@dataclass(frozen=True, eq=False)
class StylizedMesh:
    """Base mesh plus per-vertex colors and normal offsets.

    Colors and offsets are torch tensors so they can carry gradients back to a
    style field.
    """

    base: PartitionedMesh
    vertex_colors: torch.Tensor
    vertex_offsets: torch.Tensor

    @property
    def positions(self) -> torch.Tensor:
        base = torch.tensor(self.base.vertices, dtype=self.vertex_offsets.dtype)
        return base + self.vertex_offsets

    @property
    def faces(self) -> np.ndarray:
        return self.base.faces

    @property
    def face_parts(self) -> np.ndarray:
        return self.base.face_parts

    def detach(self) -> StylizedMesh:
        return StylizedMesh(self.base, self.vertex_colors.detach(), self.vertex_offsets.detach())

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        """Displaced positions and colors as float64 arrays."""
        return (
            self.positions.detach().cpu().double().numpy(),
            self.vertex_colors.detach().cpu().double().numpy(),
        )


def apply_style(mesh: PartitionedMesh, colors, displacements) -> StylizedMesh:
    colors = torch.as_tensor(colors)
    if not colors.is_floating_point():
        colors = colors.double()
    displacements = torch.as_tensor(displacements, dtype=colors.dtype)
    e = mesh.n_vertices
    if colors.shape != (e, 3):
        raise MeshError(f"colors must have shape ({e}, 3), got {tuple(colors.shape)}")
    if displacements.shape != (e,):
        raise MeshError(f"displacements must have shape ({e},), got {tuple(displacements.shape)}")
    normals = torch.tensor(mesh.vertex_normals, dtype=colors.dtype)
    offsets = DISPLACEMENT_SCALE * displacements[:, None] * normals
    return StylizedMesh(mesh, colors, offsets)


def identity_style(mesh: PartitionedMesh, gray: float = 0.5) -> StylizedMesh:
    colors = torch.full((mesh.n_vertices, 3), gray, dtype=torch.float64)
    return apply_style(mesh, colors, torch.zeros(mesh.n_vertices, dtype=torch.float64))


def part_color_style(mesh: PartitionedMesh, part_colors) -> StylizedMesh:
    """Flat per-part vertex colors (a vertex shared by parts takes the last one)."""
    colors = np.full((mesh.n_vertices, 3), 0.5)
    for part, rgb in enumerate(part_colors):
        colors[mesh.part_vertices(part)] = rgb
    return apply_style(mesh, torch.as_tensor(colors), torch.zeros(mesh.n_vertices, dtype=torch.float64))


def export_mesh(stylized: StylizedMesh, path: str | os.PathLike) -> None:
    """Write an ASCII PLY with displaced positions and 8-bit vertex colors."""
    positions, colors = stylized.numpy()
    rgb = np.clip(np.rint(np.clip(colors, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    faces = stylized.faces
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [
        f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}" for p, c in zip(positions, rgb)
    ]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in faces]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def read_ply(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read back an ASCII PLY written by :func:`export_mesh` -> (positions, colors, faces)."""
    with open(path) as fh:
        header = []
        for line in fh:
            line = line.strip()
            header.append(line)
            if line == "end_header":
                break
        counts = {}
        for h in header:
            tok = h.split()
            if tok[:1] == ["element"]:
                counts[tok[1]] = int(tok[2])
        nv, nf = counts.get("vertex", 0), counts.get("face", 0)
        rows = [next(fh).split() for _ in range(nv)]
        frows = [next(fh).split() for _ in range(nf)]
    data = np.asarray(rows, dtype=np.float64).reshape(nv, -1)
    faces = np.asarray([[int(x) for x in r[1:4]] for r in frows], dtype=np.int64).reshape(nf, 3)
    colors = data[:, 3:6] / 255.0 if data.shape[1] >= 6 else np.full((nv, 3), 0.5)
    return data[:, :3], colors, faces
