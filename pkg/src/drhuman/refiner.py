"""Graph-convolutional mesh refiner with per-part clamped vertex offsets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .mesh import (PARTS, Adjacency, Mesh, build_adjacency, laplacian_loss,
                   normal_consistency_loss, vertex_normals)
from .render import DEFAULT_SIGMA, Camera, silhouette_loss, soft_silhouette

CLAMP_TABLE: dict[str, float] = {
    "face": 0.0, "footprints": 0.0, "hands": 0.0, "head": 0.04, "torso": 0.06,
    "arms": 0.02, "forearms": 0.04, "thighs": 0.04, "calves": 0.03, "feet": 0.02,
}
LAMBDA_GL = 1.0
LAMBDA_GN = 0.5
IN_FEATURES = 3
# average valence of a closed triangle mesh; each unit sums 1 + ~6 feature rows
MEAN_DEGREE = 6.0


def validate_clamp_table(table: Mapping[str, float]) -> dict[str, float]:
    missing = [p for p in PARTS if p not in table]
    if missing:
        raise ValueError(f"clamp table lacks parts {missing}")
    extra = sorted(set(table) - set(PARTS))
    if extra:
        raise ValueError(f"clamp table has unknown parts {extra}")
    out = {p: float(table[p]) for p in PARTS}
    bad = [p for p, k in out.items() if not (np.isfinite(k) and k >= 0.0)]
    if bad:
        raise ValueError(f"clamp thresholds must be finite and >= 0: {bad}")
    return out


def vertex_bounds(part_labels: np.ndarray, table: Mapping[str, float] = CLAMP_TABLE) -> np.ndarray:
    """Per-vertex K as a V×3 array (same bound on every component)."""
    table = validate_clamp_table(table)
    k = np.array([table[p] for p in PARTS])
    return np.repeat(k[np.asarray(part_labels)][:, None], 3, axis=1)


@dataclass(frozen=True)
class RefinerConfig:
    blocks: int = 3
    layers: int = 6
    width: int = 128
    seed: int = 0
    zero_refine: bool = True

    def __post_init__(self):
        for name in ("blocks", "layers", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


def weight_names(config: RefinerConfig) -> list[str]:
    names = []
    for b in range(1, config.blocks + 1):
        for l in range(1, config.layers + 1):
            names += [f"gm.b{b}.l{l}.W0", f"gm.b{b}.l{l}.W1"]
        names.append(f"gm.b{b}.W")
    return names


def init_weights(config: RefinerConfig = RefinerConfig()) -> dict[str, Tensor]:
    """Uniform ``±1/sqrt(fan_in)`` weights from a fixed seed.

    For graph convolutions the fan-in counts the summed neighbor rows,
    ``d * (1 + MEAN_DEGREE)``; otherwise features grow by roughly the valence
    at every layer. With ``zero_refine`` the output matrices start at zero so
    the untrained refiner is the identity on meshes.
    """
    rng = np.random.default_rng(config.seed)
    weights: dict[str, Tensor] = {}
    for b in range(1, config.blocks + 1):
        for l in range(1, config.layers + 1):
            d_in = IN_FEATURES if l == 1 else config.width
            bound = 1.0 / np.sqrt(d_in * (1.0 + MEAN_DEGREE))
            for w in ("W0", "W1"):
                weights[f"gm.b{b}.l{l}.{w}"] = Tensor(
                    rng.uniform(-bound, bound, (d_in, config.width)), requires_grad=True,
                    name=f"gm.b{b}.l{l}.{w}")
        d_cat = config.width + IN_FEATURES
        out = (np.zeros((d_cat, 3)) if config.zero_refine
               else rng.uniform(-1 / np.sqrt(d_cat), 1 / np.sqrt(d_cat), (d_cat, 3)))
        weights[f"gm.b{b}.W"] = Tensor(out, requires_grad=True, name=f"gm.b{b}.W")
    return weights


def infer_config(weights: Mapping[str, Tensor]) -> RefinerConfig:
    """Recover block/layer counts and width from checkpoint tensor names."""
    blocks = {int(n.split(".")[1][1:]) for n in weights if n.startswith("gm.b")}
    if not blocks:
        raise ValueError("no refiner tensors (gm.*) found")
    layers = {int(n.split(".")[2][1:]) for n in weights
              if n.startswith("gm.b1.l") and n.endswith(".W0")}
    width = ad.as_tensor(weights["gm.b1.l1.W0"]).shape[1]
    config = RefinerConfig(blocks=max(blocks), layers=max(layers), width=width)
    missing = [n for n in weight_names(config) if n not in weights]
    if missing:
        raise ValueError(f"refiner weights missing {missing[:3]}")
    return config


def graph_conv(features, adjacency, W0, W1) -> Tensor:
    """``ReLU(f_i W0 + sum_{j in N(i)} f_j W1)`` for every vertex ``i``."""
    features, W0, W1 = ad.as_tensor(features), ad.as_tensor(W0), ad.as_tensor(W1)
    matrix = adjacency.matrix if isinstance(adjacency, Adjacency) else adjacency
    n, d = features.shape
    if matrix.shape != (n, n):
        raise DimensionError(f"adjacency {matrix.shape} does not match {n} vertices")
    if W0.shape[0] != d or W1.shape[0] != d or W0.shape[1] != W1.shape[1]:
        raise DimensionError(f"graph_conv: features have width {d}, W0 {W0.shape}, W1 {W1.shape}")
    return ad.relu(ad.matmul(features, W0) + ad.matmul(ad.spmm(matrix, features), W1))


def refine_block(mesh: Mesh, weights: Mapping[str, Tensor], adjacency: Adjacency,
                 block: int = 1, layers: int | None = None) -> Tensor:
    """Offsets ``tanh([f' ; f] W)`` with ``f`` the vertex normals of ``mesh``."""
    if layers is None:
        layers = sum(1 for n in weights if n.startswith(f"gm.b{block}.l") and n.endswith(".W0"))
    f = vertex_normals(mesh)
    h = f
    for l in range(1, layers + 1):
        h = graph_conv(h, adjacency, weights[f"gm.b{block}.l{l}.W0"],
                       weights[f"gm.b{block}.l{l}.W1"])
    return ad.tanh(ad.matmul(ad.concat([h, f], axis=1), weights[f"gm.b{block}.W"]))


def clamp_offsets(u, part_labels: np.ndarray, table: Mapping[str, float] = CLAMP_TABLE) -> Tensor:
    k = vertex_bounds(part_labels, table)
    return ad.clamp(u, -k, k)


def refine_mesh(weights: Mapping[str, Tensor], P: Mesh, adjacency: Adjacency | None = None,
                table: Mapping[str, float] = CLAMP_TABLE, clamp: bool = True) -> Mesh:
    """Apply every block in turn, re-clamping the running displacement from ``P``.

    ``clamp=False`` is the unclamped ablation: offsets are added as predicted.
    """
    config = infer_config(weights)
    if adjacency is None:
        adjacency = build_adjacency(P)
    k = vertex_bounds(P.part_labels, table) if clamp else None
    base = P.vertices
    disp = None
    current = P
    for b in range(1, config.blocks + 1):
        u = refine_block(current, weights, adjacency, block=b, layers=config.layers)
        if clamp:
            u = ad.clamp(u, -k, k)
            disp = u if disp is None else ad.clamp(disp + u, -k, k)
        else:
            disp = u if disp is None else disp + u
        current = P.with_vertices(base + disp)
    if clamp:
        current = current.with_vertices(_snap_to_bounds(current.vertices, base.data, k))
    return current


def _snap_to_bounds(v: Tensor, base: np.ndarray, k: np.ndarray) -> Tensor:
    """Nudge coordinates whose rounded offset ``v - base`` exceeds ``k`` by an ulp or so.

    ``base + d`` with ``|d| <= k`` can round to a point slightly outside the
    bound; the correction is a constant, so gradients are unchanged.
    """
    fixed = v.data.copy()
    for _ in range(4):
        hi = fixed - base > k
        lo = base - fixed > k
        if not (hi.any() or lo.any()):
            break
        fixed[hi] = np.nextafter(fixed[hi], -np.inf)
        fixed[lo] = np.nextafter(fixed[lo], np.inf)
    if np.array_equal(fixed, v.data):
        return v
    return v + (fixed - v.data)


def mesh_loss(M: Mesh, targets: Sequence, cameras: Sequence[Camera],
              adjacency: Adjacency | None = None, lambda_gl: float = LAMBDA_GL,
              lambda_gn: float = LAMBDA_GN, sigma: float = DEFAULT_SIGMA,
              parts: dict | None = None) -> Tensor:
    """``lambda_gl*L_gl + lambda_gn*L_gn + mean_views L_s``.

    If ``parts`` is a dict it receives the three components as floats.
    """
    if len(targets) == 0 or len(targets) != len(cameras):
        raise ValueError("mesh_loss needs one target silhouette per camera and at least one view")
    if adjacency is None:
        adjacency = build_adjacency(M)
    sil = None
    for target, cam in zip(targets, cameras):
        term = silhouette_loss(soft_silhouette(M, cam, sigma), target)
        sil = term if sil is None else sil + term
    sil = sil / float(len(targets))
    l_gl = laplacian_loss(M, adjacency)
    l_gn = normal_consistency_loss(M, adjacency)
    if parts is not None:
        parts.update(silhouette=sil.item(), laplacian=l_gl.item(), normal=l_gn.item())
    return lambda_gl * l_gl + lambda_gn * l_gn + sil
