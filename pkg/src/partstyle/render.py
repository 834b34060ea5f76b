"""Differentiable rasterization, cameras, viewpoint sampling and part masks.

Visibility is resolved with a numpy z-buffer; the winning face per pixel is
then re-interpolated in torch so pixel values carry gradients to vertex colors
and positions (interior gradients only, no silhouette gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .mesh import PartitionedMesh, StylizedMesh, vertex_normals_torch

MAX_ELEVATION = math.pi / 2 - 1e-3
AMBIENT = 0.4
# camera-space directions towards each light, with their diffuse weights
LIGHTS = (
    ((0.4, 0.6, 1.0), 0.45),
    ((-0.6, -0.3, 0.8), 0.15),
)
CONTENT_GRAY = 0.5
_CANDIDATE_CHUNK = 4_000_000


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Look-at camera on a sphere around the origin, +y up.

    ``azimuth=0, elevation=0`` sits on the +z axis.
    """

    azimuth: float
    elevation: float
    distance: float = 2.5
    fov: float = math.radians(60.0)
    image_size: int = 512
    near: float = 0.05
    far: float = 100.0

    @property
    def key(self) -> tuple:
        return (self.azimuth, self.elevation, self.distance, self.fov, self.image_size, self.near, self.far)

    @property
    def eye(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.distance * np.array(
            [ce * math.sin(self.azimuth), math.sin(self.elevation), ce * math.cos(self.azimuth)]
        )

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are right, up, backward (camera looks down -z)."""
        eye = self.eye
        forward = -eye / np.linalg.norm(eye)
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return np.stack([right, up, -forward])

    def with_size(self, image_size: int) -> Camera:
        return replace(self, image_size=image_size)


def make_camera(azimuth, elevation, distance=2.5, fov=math.radians(60.0), image_size=512, **kw) -> Camera:
    if distance <= 1.0:
        raise CameraError(f"camera distance must exceed the unit mesh radius, got {distance}")
    if not -math.pi / 2 < elevation < math.pi / 2:
        raise CameraError(f"elevation must lie in (-pi/2, pi/2), got {elevation}")
    if not 0 < fov < math.pi:
        raise CameraError(f"fov must lie in (0, pi), got {fov}")
    if int(image_size) < 1:
        raise CameraError("image_size must be positive")
    return Camera(float(azimuth), float(elevation), float(distance), float(fov), int(image_size), **kw)


def uniform_viewpoints(n_azimuth: int, elevations, distance=2.5, fov=math.radians(60.0), image_size=512) -> list[Camera]:
    """Equally spaced azimuths for each elevation, elevation-major."""
    if n_azimuth < 1:
        raise CameraError("n_azimuth must be >= 1")
    return [
        make_camera(2 * math.pi * k / n_azimuth, el, distance, fov, image_size)
        for el in elevations
        for k in range(n_azimuth)
    ]


DEFAULT_ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)


def sample_training_views(anchor: Camera, sigma: float, count: int, rng: np.random.Generator) -> list[Camera]:
    """The anchor followed by ``count`` Gaussian perturbations of its azimuth/elevation."""
    views = [anchor]
    for _ in range(count):
        az = anchor.azimuth + float(rng.normal(0.0, sigma))
        el = float(np.clip(anchor.elevation + rng.normal(0.0, sigma), -MAX_ELEVATION, MAX_ELEVATION))
        views.append(replace(anchor, azimuth=az, elevation=el))
    return views


# ------------------------------------------------------------------ projection


def _project_np(vertices: np.ndarray, camera: Camera):
    cam = (vertices - camera.eye) @ camera.rotation.T
    depth = -cam[:, 2]
    t = math.tan(camera.fov / 2)
    s = camera.image_size
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (cam[:, 0] / (depth * t) + 1.0) * 0.5 * s
        py = (1.0 - cam[:, 1] / (depth * t)) * 0.5 * s
    return px, py, depth


def _project_torch(vertices: torch.Tensor, camera: Camera):
    eye = torch.as_tensor(camera.eye, dtype=vertices.dtype)
    rot = torch.as_tensor(camera.rotation, dtype=vertices.dtype)
    cam = (vertices - eye) @ rot.T
    depth = -cam[:, 2]
    t = math.tan(camera.fov / 2)
    s = camera.image_size
    px = (cam[:, 0] / (depth * t) + 1.0) * 0.5 * s
    py = (1.0 - cam[:, 1] / (depth * t)) * 0.5 * s
    return px, py, depth, rot


def rasterize(vertices: np.ndarray, faces: np.ndarray, camera: Camera) -> np.ndarray:
    """Index of the nearest face covering each pixel center, -1 for background.

    Ties in depth go to the lower face index, so results are deterministic.
    """
    s = camera.image_size
    px, py, depth = _project_np(np.asarray(vertices, dtype=np.float64), camera)
    fd = depth[faces]
    ok = (fd > camera.near).all(axis=1) & (fd.min(axis=1) < camera.far)
    fx, fy = px[faces], py[faces]
    area = (fx[:, 1] - fx[:, 0]) * (fy[:, 2] - fy[:, 0]) - (fx[:, 2] - fx[:, 0]) * (fy[:, 1] - fy[:, 0])
    ok &= np.abs(area) > 1e-12
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(fx.min(axis=1) - 0.5), 0, s)
        x1 = np.clip(np.floor(fx.max(axis=1) - 0.5), -1, s - 1)
        y0 = np.clip(np.ceil(fy.min(axis=1) - 0.5), 0, s)
        y1 = np.clip(np.floor(fy.max(axis=1) - 0.5), -1, s - 1)
    nx = np.where(ok, x1 - x0 + 1, 0).clip(min=0).astype(np.int64)
    ny = np.where(ok, y1 - y0 + 1, 0).clip(min=0).astype(np.int64)
    counts = nx * ny
    face_ids = np.flatnonzero(counts)

    best_invz = np.full(s * s, -np.inf)
    best_face = np.full(s * s, -1, dtype=np.int64)
    start = 0
    while start < len(face_ids):
        csum = np.cumsum(counts[face_ids[start:]])
        stop = start + max(1, int(np.searchsorted(csum, _CANDIDATE_CHUNK, side="right")))
        chunk = face_ids[start:stop]
        start = stop
        n = counts[chunk]
        f = np.repeat(chunk, n)
        local = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        X = x0[f].astype(np.int64) + local % nx[f]
        Y = y0[f].astype(np.int64) + local // nx[f]
        cx, cy = X + 0.5, Y + 0.5
        ax, ay = fx[f], fy[f]
        w0 = (ax[:, 1] - cx) * (ay[:, 2] - cy) - (ax[:, 2] - cx) * (ay[:, 1] - cy)
        w1 = (ax[:, 2] - cx) * (ay[:, 0] - cy) - (ax[:, 0] - cx) * (ay[:, 2] - cy)
        w2 = (ax[:, 0] - cx) * (ay[:, 1] - cy) - (ax[:, 1] - cx) * (ay[:, 0] - cy)
        a = area[f]
        b = np.stack([w0 / a, w1 / a, w2 / a], axis=1)
        inside = (b >= -1e-9).all(axis=1)
        invz = (b / fd[f]).sum(axis=1)
        inside &= invz * camera.far >= 1.0
        f, pid, invz = f[inside], (Y * s + X)[inside], invz[inside]
        order = np.lexsort((f, -invz, pid))
        pid, f, invz = pid[order], f[order], invz[order]
        first = np.ones(len(pid), dtype=bool)
        first[1:] = pid[1:] != pid[:-1]
        pid, f, invz = pid[first], f[first], invz[first]
        better = invz > best_invz[pid]
        best_invz[pid[better]] = invz[better]
        best_face[pid[better]] = f[better]
    return best_face.reshape(s, s)


# ---------------------------------------------------------------------- render


@dataclass(frozen=True, eq=False)
class RenderedImage:
    pixels: torch.Tensor  # (H, W, 3)
    camera: Camera
    differentiable: bool
    face_ids: np.ndarray  # (H, W), -1 background

    @property
    def image_size(self) -> int:
        return self.camera.image_size

    @property
    def foreground(self) -> np.ndarray:
        return self.face_ids >= 0

    def numpy(self) -> np.ndarray:
        return self.pixels.detach().cpu().double().numpy()


def _mesh_inputs(mesh_or_stylized, dtype):
    if isinstance(mesh_or_stylized, StylizedMesh):
        positions = mesh_or_stylized.positions
        colors = mesh_or_stylized.vertex_colors
        dtype = dtype or positions.dtype
        return positions.to(dtype), colors.to(dtype), mesh_or_stylized.faces
    if isinstance(mesh_or_stylized, PartitionedMesh):
        dtype = dtype or torch.float64
        positions = torch.tensor(mesh_or_stylized.vertices, dtype=dtype)
        colors = torch.full((mesh_or_stylized.n_vertices, 3), CONTENT_GRAY, dtype=dtype)
        return positions, colors, mesh_or_stylized.faces
    raise TypeError(f"cannot render {type(mesh_or_stylized).__name__}")


def render(mesh_or_stylized, camera: Camera, background=(1.0, 1.0, 1.0), dtype: torch.dtype | None = None) -> RenderedImage:
    """Rasterize with two-sided two-light diffuse shading.

    A plain :class:`PartitionedMesh` renders as the uniform gray content image.
    """
    positions, colors, faces = _mesh_inputs(mesh_or_stylized, dtype)
    dtype = positions.dtype
    s = camera.image_size
    face_map = rasterize(positions.detach().cpu().double().numpy(), faces, camera)
    flat = face_map.reshape(-1)
    pix = np.flatnonzero(flat >= 0)
    image = torch.as_tensor(background, dtype=dtype).reshape(1, 3).repeat(s * s, 1)
    if len(pix):
        faces_t = torch.tensor(faces)
        fidx = faces_t[torch.as_tensor(flat[pix])]
        px, py, depth, rot = _project_torch(positions, camera)
        cx = torch.as_tensor(pix % s, dtype=dtype) + 0.5
        cy = torch.as_tensor(pix // s, dtype=dtype) + 0.5
        ax, ay, ad = px[fidx], py[fidx], depth[fidx]
        w0 = (ax[:, 1] - cx) * (ay[:, 2] - cy) - (ax[:, 2] - cx) * (ay[:, 1] - cy)
        w1 = (ax[:, 2] - cx) * (ay[:, 0] - cy) - (ax[:, 0] - cx) * (ay[:, 2] - cy)
        w2 = (ax[:, 0] - cx) * (ay[:, 1] - cy) - (ax[:, 1] - cx) * (ay[:, 0] - cy)
        bary = torch.stack([w0, w1, w2], dim=1)
        bary = bary / bary.sum(dim=1, keepdim=True)
        persp = bary / ad
        persp = persp / persp.sum(dim=1, keepdim=True)
        albedo = (persp[..., None] * colors[fidx]).sum(dim=1)
        vn = vertex_normals_torch(positions, faces_t)
        n = (persp[..., None] * vn[fidx]).sum(dim=1)
        n = n / n.norm(dim=1, keepdim=True).clamp_min(1e-12)
        n_cam = n @ rot.T
        facing = torch.where(n_cam[:, 2:3].detach() < 0, -1.0, 1.0).to(dtype)
        n_cam = n_cam * facing
        shade = torch.full((len(pix),), AMBIENT, dtype=dtype)
        for direction, weight in LIGHTS:
            d = torch.as_tensor(direction, dtype=dtype)
            shade = shade + weight * (n_cam @ (d / d.norm())).clamp_min(0.0)
        shaded = albedo * shade[:, None]
        image = image.index_put((torch.as_tensor(pix),), shaded)
    pixels = image.reshape(s, s, 3)
    return RenderedImage(pixels, camera, bool(pixels.requires_grad), face_map)


def render_part_masks(mesh, camera: Camera) -> np.ndarray:
    """Per-pixel part index after the depth test, -1 for background."""
    if isinstance(mesh, StylizedMesh):
        verts = mesh.positions.detach().cpu().double().numpy()
        base = mesh.base
    else:
        verts, base = mesh.vertices, mesh
    face_map = rasterize(verts, base.faces, camera)
    return mask_from_faces(face_map, base.face_parts)


def mask_from_faces(face_map: np.ndarray, face_parts: np.ndarray) -> np.ndarray:
    mask = np.full(face_map.shape, -1, dtype=np.int64)
    hit = face_map >= 0
    mask[hit] = face_parts[face_map[hit]]
    return mask


def bbox_from_mask(mask: np.ndarray, part: int) -> tuple[int, int, int, int] | None:
    """Half-open pixel box ``(x0, y0, x1, y1)`` around ``mask == part``."""
    ys, xs = np.nonzero(mask == part)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def bboxes_from_mask(mask: np.ndarray, n_parts: int, min_side: int = 0) -> list[tuple[int, tuple[int, int, int, int]]]:
    out = []
    for part in range(n_parts):
        box = bbox_from_mask(mask, part)
        if box is None:
            continue
        if box[2] - box[0] < min_side or box[3] - box[1] < min_side:
            continue
        out.append((part, box))
    return out


def project_part_bboxes(mesh, camera: Camera, min_side: int = 10) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Tight boxes around each part's visible pixels; tiny or hidden parts are omitted."""
    base = mesh.base if isinstance(mesh, StylizedMesh) else mesh
    return bboxes_from_mask(render_part_masks(mesh, camera), base.n_parts, min_side)


def silhouette_iou(a: RenderedImage, b: RenderedImage) -> float:
    fa, fb = a.foreground, b.foreground
    union = (fa | fb).sum()
    return float((fa & fb).sum() / union) if union else 1.0


def to_uint8(pixels) -> np.ndarray:
    if isinstance(pixels, RenderedImage):
        pixels = pixels.numpy()
    elif isinstance(pixels, torch.Tensor):
        pixels = pixels.detach().cpu().double().numpy()
    return np.clip(np.rint(np.clip(pixels, 0, 1) * 255), 0, 255).astype(np.uint8)


def save_png(image, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path)


def save_mask_png(mask: np.ndarray, path) -> None:
    """Part masks as 8-bit indices shifted by one (0 = background)."""
    from PIL import Image

    Image.fromarray((mask + 1).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
