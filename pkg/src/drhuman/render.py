"""Soft silhouette rasterizer, z-buffer texture renderer and UV visibility maps."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from ._validation import InvariantError, check_same_shape
from .autodiff import Tensor
from .mesh import Mesh

NEAR = 0.01
DEFAULT_SIGMA = 1e-4
# sigmoid(-40) < 5e-18: pairs further out than this cannot change a float64 pixel
_SOFT_CUTOFF = 40.0


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantError("focal lengths must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise InvariantError("camera rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, size=(128, 128), fov_deg=40.0):
        eye, target, up = (np.asarray(x, dtype=np.float64) for x in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            raise InvariantError("up vector is parallel to the viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        w, h = size
        f = 0.5 * max(w, h) / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, w / 2.0, h / 2.0, int(w), int(h), r, -r @ eye)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "W": self.width,
                "H": self.height, "R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["W"]), int(d["H"]), np.array(d["R"]), np.array(d["t"]))
        except KeyError as exc:
            raise InvariantError(f"camera JSON missing field {exc.args[0]!r}") from None


def save_camera(camera: Camera, path) -> None:
    Path(path).write_text(json.dumps(camera.to_dict()))


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


# -- projection ---------------------------------------------------------------------

def project(camera: Camera, points) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Pixel coordinates (differentiable), depths and a behind-near-plane flag."""
    points = ad.as_tensor(points)
    pc = points.data @ camera.R.T + camera.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    behind = z <= NEAR
    zs = np.where(behind, NEAR, z)
    uv = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)

    def backward(g):
        gu, gv = g[:, 0], g[:, 1]
        gc = np.stack([camera.fx * gu / zs, camera.fy * gv / zs,
                       -(camera.fx * x * gu + camera.fy * y * gv) / zs ** 2], axis=1)
        return (gc @ camera.R,)

    return ad.make_op(uv, (points,), backward), z, behind


# -- shared triangle/pixel enumeration --------------------------------------------------

def _bbox_pairs(lo_x, hi_x, lo_y, hi_y):
    nx = np.maximum(hi_x - lo_x + 1, 0)
    ny = np.maximum(hi_y - lo_y + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    face = np.repeat(np.arange(len(counts)), counts)
    if total == 0:
        return face, np.zeros(0, np.int64), np.zeros(0, np.int64)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    return face, np.repeat(lo_x, counts) + offs % nxr, np.repeat(lo_y, counts) + offs // nxr


def _covered_pairs(tri: np.ndarray, width: int, height: int):
    """(face, col, row, lambdas) for pixel centres inside each 2-D triangle.

    ``tri`` holds F×3×2 coordinates in pixel units where pixel (row, col) has
    its centre at (col + 0.5, row + 0.5).
    """
    lo = np.floor(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 0.5).astype(np.int64)
    lo_x, lo_y = np.clip(lo[:, 0], 0, width), np.clip(lo[:, 1], 0, height)
    hi_x, hi_y = np.clip(hi[:, 0], -1, width - 1), np.clip(hi[:, 1], -1, height - 1)
    face, px, py = _bbox_pairs(lo_x, hi_x, lo_y, hi_y)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    p = np.stack([px + 0.5, py + 0.5], axis=1)
    area = _cross2(b - a, c - a)
    w0 = _cross2(b - p, c - p)
    w1 = _cross2(c - p, a - p)
    w2 = _cross2(a - p, b - p)
    nz = area != 0
    sgn = np.sign(area)
    inside = nz & (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
    lam = np.stack([w0, w1, w2], axis=1)[inside] / area[inside, None]
    return face[inside], px[inside], py[inside], lam


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


# -- soft silhouettes -------------------------------------------------------------------

def _segment_d2(p, a, b):
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    r = p - (a + t[:, None] * ab)
    return np.einsum("ij,ij->i", r, r), t, r


def soft_rasterize(points2d, faces: np.ndarray, width: int, height: int,
                   sigma: float = DEFAULT_SIGMA) -> Tensor:
    """Probabilistic silhouette from V×2 pixel-space vertex positions.

    Per face and pixel ``D = sigmoid(delta * d**2 / sigma)`` with ``d`` the
    exact 2-D distance to the triangle in units of ``max(W, H)`` and
    ``delta = +1`` inside; pixels aggregate ``1 - prod(1 - D)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points2d = ad.as_tensor(points2d)
    scale = float(max(width, height))
    q = points2d.data / scale
    tri = q[faces]
    reach = np.sqrt(_SOFT_CUTOFF * sigma)
    lo = np.floor((tri.min(axis=1) - reach) * scale - 0.5).astype(np.int64)
    hi = np.ceil((tri.max(axis=1) + reach) * scale - 0.5).astype(np.int64)
    lo_x, lo_y = np.clip(lo[:, 0], 0, width), np.clip(lo[:, 1], 0, height)
    hi_x, hi_y = np.clip(hi[:, 0], -1, width - 1), np.clip(hi[:, 1], -1, height - 1)
    face, px, py = _bbox_pairs(lo_x, hi_x, lo_y, hi_y)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    p = np.stack([(px + 0.5) / scale, (py + 0.5) / scale], axis=1)

    d_ab, t_ab, r_ab = _segment_d2(p, a, b)
    d_bc, t_bc, r_bc = _segment_d2(p, b, c)
    d_ca, t_ca, r_ca = _segment_d2(p, c, a)
    d2s = np.stack([d_ab, d_bc, d_ca], axis=1)
    which = np.argmin(d2s, axis=1)
    d2 = d2s[np.arange(len(which)), which]
    area = _cross2(b - a, c - a)
    w0, w1, w2 = _cross2(b - p, c - p), _cross2(c - p, a - p), _cross2(a - p, b - p)
    sgn = np.sign(area)
    inside = (area != 0) & (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
    delta = np.where(inside, 1.0, -1.0)
    x = delta * d2 / sigma
    softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    pix = py * width + px
    log_empty = -np.bincount(pix, weights=softplus, minlength=width * height)
    empty = np.exp(log_empty)
    image = (1.0 - empty).reshape(1, height, width)

    def backward(g):
        g_log = -g.reshape(-1) * empty  # d image / d log_empty = -empty
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # sigmoid(x), overflow-free
        g_d2 = g_log[pix] * (-sig) * delta / sigma
        t = np.choose(which, [t_ab, t_bc, t_ca])
        r = np.choose(which[:, None], [r_ab, r_bc, r_ca])
        g0 = (-2.0 * r * (1.0 - t)[:, None]) * g_d2[:, None]
        g1 = (-2.0 * r * t[:, None]) * g_d2[:, None]
        # segment endpoints per closest edge: ab -> (0,1), bc -> (1,2), ca -> (2,0)
        first = np.choose(which, [0, 1, 2])
        second = np.choose(which, [1, 2, 0])
        vert_first = faces[face, first]
        vert_second = faces[face, second]
        n = points2d.shape[0]
        out = np.zeros((n, 2))
        for k in range(2):
            out[:, k] = (np.bincount(vert_first, weights=g0[:, k], minlength=n)
                         + np.bincount(vert_second, weights=g1[:, k], minlength=n))
        return (out / scale,)

    return ad.make_op(image, (points2d,), backward)


def soft_silhouette(mesh: Mesh, camera: Camera, sigma: float = DEFAULT_SIGMA) -> Tensor:
    """1×H×W soft silhouette, differentiable in the mesh vertices."""
    uv, _, behind = project(camera, mesh.vertices)
    faces = mesh.faces
    drop = behind[faces].any(axis=1)
    if drop.any():
        warnings.warn(f"{int(drop.sum())} triangles behind the near plane dropped",
                      RuntimeWarning, stacklevel=2)
        faces = faces[~drop]
    return soft_rasterize(uv, faces, camera.width, camera.height, sigma)


def silhouette_loss(pred, target) -> Tensor:
    """``1 - |P*T|_1 / |P + T - P*T|_1`` (soft IoU loss)."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    check_same_shape(pred, target, "silhouettes")
    inter = ad.sum(pred * target)
    union = ad.sum(pred + target - pred * target)
    if union.item() == 0.0:
        warnings.warn("silhouette loss on two empty masks is vacuous; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    return 1.0 - inter / union


# -- hard rasterization -------------------------------------------------------------------

@dataclass(frozen=True)
class Rasterization:
    """Per-pixel nearest-face record for a fixed mesh and camera."""

    face_id: np.ndarray  # H×W, -1 where uncovered
    bary: np.ndarray     # H×W×3 perspective-correct barycentrics
    uv: np.ndarray       # H×W×2 interpolated texture coordinates
    depth: np.ndarray    # H×W, inf where uncovered

    @property
    def mask(self) -> np.ndarray:
        return (self.face_id >= 0).astype(np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_id.shape


def rasterize(mesh: Mesh, camera: Camera) -> Rasterization:
    """Z-buffer rasterization at pixel centres (ties go to the lower face index)."""
    h, w = camera.height, camera.width
    uv_px, z, behind = project(camera, Tensor(mesh.positions()))
    faces = mesh.faces
    keep = ~behind[faces].any(axis=1)
    fidx = np.nonzero(keep)[0]
    tri = uv_px.data[faces[fidx]]
    face, px, py, lam = _covered_pairs(tri, w, h)
    face = fidx[face]
    inv_z = 1.0 / z[faces[face]]
    persp = lam * inv_z
    denom = persp.sum(axis=1)
    depth = 1.0 / denom
    bary = persp / denom[:, None]
    pix = py * w + px
    order = np.lexsort((face, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    face_id = np.full(h * w, -1, dtype=np.int64)
    bary_img = np.zeros((h * w, 3))
    depth_img = np.full(h * w, np.inf)
    face_id[pix[win]] = face[win]
    bary_img[pix[win]] = bary[win]
    depth_img[pix[win]] = depth[win]
    uv_img = np.zeros((h * w, 2))
    covered = face_id >= 0
    corner_uv = mesh.uvs[faces[face_id[covered]]]
    uv_img[covered] = np.einsum("nk,nkc->nc", bary_img[covered], corner_uv)
    return Rasterization(face_id.reshape(h, w), bary_img.reshape(h, w, 3),
                         uv_img.reshape(h, w, 2), depth_img.reshape(h, w))


def bilinear_matrix(uv: np.ndarray, valid: np.ndarray, size: int) -> sp.csr_matrix:
    """Sparse (N × size²) bilinear sampling weights with clamp-to-edge addressing.

    Texel (row r, col c) has its centre at ``u = (c + 0.5)/size``,
    ``v = 1 - (r + 0.5)/size``.
    """
    n = uv.shape[0]
    x = np.clip(uv[:, 0] * size - 0.5, 0.0, size - 1.0)
    y = np.clip((1.0 - uv[:, 1]) * size - 0.5, 0.0, size - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), size - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), size - 1)
    x1, y1 = np.minimum(x0 + 1, size - 1), np.minimum(y0 + 1, size - 1)
    fx, fy = x - x0, y - y0
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([y0 * size + x0, y0 * size + x1, y1 * size + x0, y1 * size + x1])
    vals = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    vals = vals * np.tile(valid.astype(np.float64), 4)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, size * size))


def sample_texture(texture, sampler: sp.csr_matrix, height: int, width: int) -> Tensor:
    """Apply a precomputed sampling matrix to a 3×T×T texture, giving 3×H×W."""
    texture = ad.as_tensor(texture)
    c, t, _ = texture.shape
    flat = ad.transpose(ad.reshape(texture, (c, t * t)))
    return ad.reshape(ad.transpose(ad.spmm(sampler, flat)), (c, height, width))


def texture_sampler(raster: Rasterization, size: int) -> sp.csr_matrix:
    h, w = raster.shape
    return bilinear_matrix(raster.uv.reshape(-1, 2), raster.face_id.reshape(-1) >= 0, size)


def hard_render(mesh: Mesh, texture, camera: Camera,
                raster: Rasterization | None = None) -> tuple[Tensor, np.ndarray]:
    """Textured render (gradients reach texels only) and its coverage mask."""
    texture = ad.as_tensor(texture)
    if texture.ndim != 3 or texture.shape[0] != 3 or texture.shape[1] != texture.shape[2]:
        raise InvariantError(f"texture must be 3×T×T, got {texture.shape}")
    raster = rasterize(mesh, camera) if raster is None else raster
    sampler = texture_sampler(raster, texture.shape[1])
    color = sample_texture(texture, sampler, camera.height, camera.width)
    return color, raster.mask


# -- visibility --------------------------------------------------------------------------

def front_facing(mesh: Mesh, camera: Camera) -> np.ndarray:
    p = mesh.positions()
    f = mesh.faces
    n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    centroid = p[f].mean(axis=1)
    return np.einsum("ij,ij->i", n, camera.center - centroid) > 0


def rasterize_uv(mesh: Mesh, face_mask: np.ndarray, size: int) -> np.ndarray:
    """Binary size×size atlas marking texel centres covered by the chosen faces."""
    faces = mesh.faces[face_mask]
    tri = mesh.uvs[faces] * [size, -size] + [0.0, size]
    _, px, py, _ = _covered_pairs(tri, size, size)
    out = np.zeros((size, size))
    out[py, px] = 1.0
    return out


def visibility_map(mesh: Mesh, camera: Camera, size: int) -> np.ndarray:
    """1×T×T binary map of texels on faces whose normal points at the camera."""
    return rasterize_uv(mesh, front_facing(mesh, camera), size)[None]
