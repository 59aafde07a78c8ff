"""Texture generators, discriminators, texture losses and image-space region masks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from . import autodiff as ad
from ._validation import check_binary, check_same_shape
from .autodiff import DimensionError, Tensor
from .mesh import PART_INDEX, Mesh
from .render import Camera, project

ALPHA1 = 100.0
ALPHA2 = 100.0
LOG_FLOOR = 1e-8
CROP_SIZE = 32
CROP_MARGIN = 0.10
FACE_DILATION = 2


class FaceNotVisibleError(ValueError):
    """No face vertex projects into the frame; skip the face discriminator."""


# -- networks -----------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int
    size: int = 128
    channels: tuple = (16, 32, 64)
    kernel: int = 3


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _param(weights, name, value):
    weights[name] = Tensor(value, requires_grad=True, name=name)


def init_generator(prefix: str, spec: GeneratorSpec, seed: int = 0) -> dict[str, Tensor]:
    """Encoder-decoder weights under ``prefix`` (``"gtn."`` or ``"grn."``).

    Encoder: three stride-2 convolutions. Decoder: three nearest-upsample +
    convolution layers; the first two are concatenated with the matching
    encoder output, the last also sees the network input. The head adds an
    untied per-texel bias (zero at init) before the sigmoid.
    """
    if spec.size % 8:
        raise ValueError(f"atlas size must be divisible by 8, got {spec.size}")
    rng = np.random.default_rng(seed)
    k = spec.kernel
    c1, c2, c3 = spec.channels
    w: dict[str, Tensor] = {}
    layers = [("enc1", spec.in_channels, c1), ("enc2", c1, c2), ("enc3", c2, c3),
              ("dec1", c3, c2), ("dec2", 2 * c2, c1), ("dec3", 2 * c1 + spec.in_channels, 3)]
    for name, cin, cout in layers:
        fan_in = cin * k * k
        _param(w, f"{prefix}{name}.w", _uniform(rng, (cout, cin, k, k), fan_in))
        _param(w, f"{prefix}{name}.b", _uniform(rng, (cout,), fan_in))
    _param(w, f"{prefix}texel_bias", np.zeros((3, spec.size, spec.size)))
    return w


def generator_forward(weights: Mapping[str, Tensor], prefix: str, x) -> Tensor:
    x = ad.as_tensor(x)
    size = weights[f"{prefix}texel_bias"].shape[1]
    cin = weights[f"{prefix}enc1.w"].shape[1]
    if x.shape != (cin, size, size):
        raise DimensionError(f"generator {prefix!r} expects input {(cin, size, size)}, "
                             f"got {x.shape}")

    def conv(name, t, stride=1):
        return ad.conv2d(t, weights[f"{prefix}{name}.w"], weights[f"{prefix}{name}.b"],
                         stride=stride)

    e1 = ad.relu(conv("enc1", x, 2))
    e2 = ad.relu(conv("enc2", e1, 2))
    e3 = ad.relu(conv("enc3", e2, 2))
    d1 = ad.relu(conv("dec1", ad.upsample_nearest(e3)))
    d2 = ad.relu(conv("dec2", ad.upsample_nearest(ad.concat([d1, e2], axis=0))))
    d3 = conv("dec3", ad.concat([ad.upsample_nearest(ad.concat([d2, e1], axis=0)), x], axis=0))
    return ad.sigmoid(d3 + weights[f"{prefix}texel_bias"])


def coarse_texture(weights: Mapping[str, Tensor], x_v, prefix: str = "gtn.") -> Tensor:
    """Texture atlas from a 1×T×T visibility map."""
    x_v = ad.as_tensor(x_v)
    check_binary(x_v.data, "visibility map")
    return generator_forward(weights, prefix, x_v)


def refined_texture(weights: Mapping[str, Tensor], x_v, x_p, prefix: str = "grn.") -> Tensor:
    """Texture atlas from the visibility map stacked on a coarse atlas."""
    x_v, x_p = ad.as_tensor(x_v), ad.as_tensor(x_p)
    check_binary(x_v.data, "visibility map")
    return generator_forward(weights, prefix, ad.concat([x_v, x_p], axis=0))


def warm_start_refiner(gtn: Mapping[str, Tensor], src: str = "gtn.",
                       dst: str = "grn.") -> dict[str, Tensor]:
    """G_RN weights that reproduce G_TN exactly: coarse-texture input channels start at 0."""
    out: dict[str, Tensor] = {}
    for name, t in gtn.items():
        if not name.startswith(src):
            continue
        key = dst + name[len(src):]
        data = t.data.copy()
        if key.endswith("enc1.w"):
            data = np.concatenate([data, np.zeros((data.shape[0], 3) + data.shape[2:])], axis=1)
        elif key.endswith("dec3.w"):
            data = np.concatenate([data, np.zeros((data.shape[0], 3) + data.shape[2:])], axis=1)
        _param(out, key, data)
    return out


def init_discriminator(prefix: str, in_channels: int = 3, channels=(16, 32, 64),
                       kernel: int = 3, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    w: dict[str, Tensor] = {}
    cin = in_channels
    for i, cout in enumerate(channels, start=1):
        fan_in = cin * kernel * kernel
        _param(w, f"{prefix}conv{i}.w", _uniform(rng, (cout, cin, kernel, kernel), fan_in))
        _param(w, f"{prefix}conv{i}.b", _uniform(rng, (cout,), fan_in))
        cin = cout
    _param(w, f"{prefix}fc.w", _uniform(rng, (cin, 1), cin))
    _param(w, f"{prefix}fc.b", _uniform(rng, (1,), cin))
    return w


def discriminator_forward(weights: Mapping[str, Tensor], prefix: str, image) -> Tensor:
    """Probability (shape ``(1,)``) that ``image`` is real."""
    h = ad.as_tensor(image)
    i = 1
    while f"{prefix}conv{i}.w" in weights:
        h = ad.relu(ad.conv2d(h, weights[f"{prefix}conv{i}.w"], weights[f"{prefix}conv{i}.b"],
                              stride=2))
        i += 1
    c = h.shape[0]
    pooled = ad.reshape(ad.mean(h, axis=(1, 2)), (1, c))
    logit = ad.matmul(pooled, weights[f"{prefix}fc.w"]) + weights[f"{prefix}fc.b"]
    return ad.reshape(ad.sigmoid(logit), (1,))


# -- losses -----------------------------------------------------------------------------

def _mask3(mask, like: Tensor) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    check_binary(m, "mask")
    if m.shape[1:] != like.shape[1:]:
        raise DimensionError(f"mask {m.shape} does not match image {like.shape}")
    return np.broadcast_to(m, like.shape).copy()


def masked_l1(a, b, mask) -> Tensor:
    """``|(a - b) * M|_1 / |M|_1``; 0 (with a warning) for an empty mask."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    check_same_shape(a, b, "images")
    m = _mask3(mask, a)
    total = m.sum()
    if total == 0:
        warnings.warn("empty mask in masked L1 loss; returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    return ad.sum(ad.abs((a - b) * m)) / total


def texture_loss(I_hat, I, B) -> Tensor:
    return masked_l1(I_hat, I, B)


def _safe_log(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, LOG_FLOOR, np.inf))


def discriminator_loss(weights: Mapping[str, Tensor], prefix: str, real, fake) -> Tensor:
    """``-log D(real) - log(1 - D(fake))`` with ``fake`` detached from its graph."""
    d_real = discriminator_forward(weights, prefix, real)
    d_fake = discriminator_forward(weights, prefix, ad.as_tensor(fake).detach())
    return -(_safe_log(d_real) + _safe_log(1.0 - d_fake)).sum()


def generator_loss(weights: Mapping[str, Tensor], prefix: str, fake,
                   saturating: bool = False) -> Tensor:
    """``-log D(fake)``, or the saturating ``log(1 - D(fake))``."""
    d_fake = discriminator_forward(weights, prefix, fake)
    return (_safe_log(1.0 - d_fake) if saturating else -_safe_log(d_fake)).sum()


def gan_losses(weights: Mapping[str, Tensor], prefix: str, real, fake,
               saturating: bool = False) -> tuple[Tensor, Tensor]:
    """``(L_D, L_G)`` for one real/fake pair; ``L_D`` never reaches the generator."""
    return (discriminator_loss(weights, prefix, real, fake),
            generator_loss(weights, prefix, fake, saturating))


def regularization_loss(I, I_hat_rn, I_hat_tn, B, C, alpha1: float = ALPHA1,
                        alpha2: float = ALPHA2) -> Tensor:
    I_hat_rn = ad.as_tensor(I_hat_rn)
    first = alpha1 * masked_l1(I, I_hat_rn, B)
    c = _mask3(C, I_hat_rn)
    if c.sum() == 0:
        return first
    return first + alpha2 * masked_l1(I_hat_tn, I_hat_rn, c)


# -- image-space regions -------------------------------------------------------------------

@dataclass(frozen=True)
class RegionMasks:
    B: np.ndarray
    C: np.ndarray
    face_region: np.ndarray


def visible_face_points(mesh: Mesh, camera: Camera) -> np.ndarray:
    """Pixel positions of face-labeled vertices in front of the camera, facing it, in frame."""
    from .mesh import vertex_normals

    sel = mesh.part_labels == PART_INDEX["face"]
    if not sel.any():
        return np.zeros((0, 2))
    p = mesh.positions()
    with ad.no_grad():
        normals = vertex_normals(Mesh(Tensor(p), mesh.faces)).data
    uv, _, behind = project(camera, Tensor(p))
    facing = np.einsum("ij,ij->i", normals, camera.center - p) > 0
    pts = uv.data
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= camera.width)
              & (pts[:, 1] >= 0) & (pts[:, 1] <= camera.height))
    keep = sel & ~behind & facing & inside
    return pts[keep]


def _hull_mask(points: np.ndarray, height: int, width: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    if len(points) < 3:
        return out
    try:
        hull = ConvexHull(points)
    except QhullError:
        return out
    ys, xs = np.mgrid[0:height, 0:width]
    centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    inside = np.all(centers @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-12, axis=1)
    return inside.reshape(height, width)


def face_region_mask(mesh: Mesh, camera: Camera, dilation: int = FACE_DILATION) -> np.ndarray:
    pts = visible_face_points(mesh, camera)
    mask = _hull_mask(pts, camera.height, camera.width)
    if not mask.any():
        warnings.warn("no face vertices visible; face region is empty", RuntimeWarning,
                      stacklevel=2)
        return mask
    if dilation:
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=dilation)
    return mask


def region_masks(pred_sil, real_sil, mesh: Mesh, camera: Camera,
                 threshold: float = 0.5) -> RegionMasks:
    """B (union of binarized silhouettes), C (disagreement outside the face) and the face region."""
    pred = np.asarray(pred_sil.data if isinstance(pred_sil, Tensor) else pred_sil)
    real = np.asarray(real_sil.data if isinstance(real_sil, Tensor) else real_sil)
    if pred.shape != real.shape:
        raise DimensionError(f"silhouettes differ in shape: {pred.shape} vs {real.shape}")
    p = pred.reshape(pred.shape[-2:]) >= threshold
    r = real.reshape(real.shape[-2:]) >= threshold
    face = face_region_mask(mesh, camera)
    B = p | r
    C = (p ^ r) & ~face
    as_img = lambda m: m.astype(np.float64)[None]
    return RegionMasks(as_img(B), as_img(C), as_img(face))


# -- differentiable crops -------------------------------------------------------------------

def crop_matrix(height: int, width: int, box, size: int) -> sp.csr_matrix:
    """Sparse (size² × H·W) bilinear resampling of the box ``(x0, y0, w, h)``.

    Coordinates are continuous pixel units (pixel ``i`` spans ``[i, i+1)``).
    Samples outside the image read zero.
    """
    x0, y0, bw, bh = (float(v) for v in box)
    j = np.arange(size)
    sx = x0 + (j + 0.5) * bw / size - 0.5
    sy = y0 + (j + 0.5) * bh / size - 0.5
    gx, gy = np.meshgrid(sx, sy)
    gx, gy = gx.ravel(), gy.ravel()
    fx0, fy0 = np.floor(gx), np.floor(gy)
    ax, ay = gx - fx0, gy - fy0
    rows, cols, vals = [], [], []
    out_idx = np.arange(size * size)
    for dx, dy, wgt in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                        (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        cx = fx0.astype(np.int64) + dx
        cy = fy0.astype(np.int64) + dy
        ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height) & (wgt != 0)
        rows.append(out_idx[ok])
        cols.append(cy[ok] * width + cx[ok])
        vals.append(wgt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size * size, height * width))


def resample(image, box, size: int) -> Tensor:
    """Bilinear crop-and-resize of a C×H×W image to C×size×size."""
    image = ad.as_tensor(image)
    c, h, w = image.shape
    m = crop_matrix(h, w, box, size)
    flat = ad.transpose(ad.reshape(image, (c, h * w)))
    return ad.reshape(ad.transpose(ad.spmm(m, flat)), (c, size, size))


def face_box(mesh: Mesh, camera: Camera, margin: float = CROP_MARGIN) -> tuple:
    pts = visible_face_points(mesh, camera)
    if len(pts) == 0:
        raise FaceNotVisibleError("face is not visible in this view; skip D1 for this sample")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = max(hi[0] - lo[0], hi[1] - lo[1]) * (1.0 + margin)
    if side <= 0:
        raise FaceNotVisibleError("face projects to a single point; skip D1 for this sample")
    center = 0.5 * (lo + hi)
    return (center[0] - side / 2, center[1] - side / 2, side, side)


def face_crop(image, mesh: Mesh, camera: Camera, size: int = CROP_SIZE,
              margin: float = CROP_MARGIN) -> Tensor:
    """3×S×S bilinear crop of the face square (channels first like every image here)."""
    return resample(image, face_box(mesh, camera, margin), size)
