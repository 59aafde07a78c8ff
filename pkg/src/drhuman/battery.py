"""Finite-difference gradient battery run by ``drhuman gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor, finite_diff_check, l1_norm
from .mesh import PARTS, build_adjacency, icosphere
from .refiner import RefinerConfig, init_weights, mesh_loss, refine_mesh
from .render import (Camera, bilinear_matrix, hard_render, sample_texture, silhouette_loss,
                     soft_silhouette)
from .texture import (GeneratorSpec, coarse_texture, generator_loss, init_discriminator,
                      init_generator, refined_texture, regularization_loss, texture_loss)

RASTER_TOL = 1e-3
NETWORK_TOL = 1e-5
N_COORDS = 8


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _camera(size: int = 16) -> Camera:
    return Camera.look_at([0.3, 0.4, 3.2], [0.0, 0.0, 0.0], size=(size, size), fov_deg=45.0)


def _sphere(rng):
    mesh = icosphere(1, 0.8)
    return mesh.with_vertices(Tensor(mesh.positions() + rng.normal(scale=0.02, size=(mesh.n_vertices, 3))))


def _pick(rng, shape) -> np.ndarray:
    size = int(np.prod(shape))
    return rng.choice(size, size=min(N_COORDS, size), replace=False)


def _swap(weights, name):
    def f(t):
        w = dict(weights)
        w[name] = t
        return w
    return f


def check_soft_silhouette(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    mesh = _sphere(rng)
    cam = _camera()
    target = (rng.uniform(size=(1, 16, 16)) > 0.5).astype(float)
    f = lambda t: silhouette_loss(soft_silhouette(mesh.with_vertices(t), cam, 1e-3), target)
    err = finite_diff_check(f, mesh.positions(), eps=1e-5,
                            coords=_pick(rng, mesh.positions().shape))
    return CheckResult("soft_silhouette/vertices", seed, err, RASTER_TOL)


def check_hard_render(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    mesh = _sphere(rng)
    cam = _camera()
    target = rng.uniform(size=(3, 16, 16))
    tex = rng.uniform(size=(3, 8, 8))
    f = lambda t: l1_norm(hard_render(mesh, t, cam)[0] - target)
    err = finite_diff_check(f, tex, eps=1e-6, coords=_pick(rng, tex.shape))
    return CheckResult("hard_render/texels", seed, err, RASTER_TOL)


def check_mesh_loss(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    P = _sphere(rng)
    adj = build_adjacency(P)
    weights = init_weights(RefinerConfig(blocks=2, layers=2, width=8, seed=seed, zero_refine=False))
    table = {p: 0.5 for p in PARTS}
    cams = [_camera(), Camera.look_at([-2.5, 0.5, 2.0], [0, 0, 0], size=(16, 16), fov_deg=45.0)]
    targets = [(rng.uniform(size=(1, 16, 16)) > 0.5).astype(float) for _ in cams]
    names = sorted(weights)
    name = names[seed % len(names)]
    swap = _swap(weights, name)

    def f(t):
        M = refine_mesh(swap(t), P, adj, table)
        return mesh_loss(M, targets, cams, adj, sigma=1e-3)

    err = finite_diff_check(f, weights[name].data, eps=1e-6, coords=_pick(rng, weights[name].shape))
    return CheckResult(f"mesh_loss/{name}", seed, err, RASTER_TOL)


def _texture_fixture(rng, size: int = 16, image: int = 12):
    n = image * image
    uv = rng.uniform(size=(n, 2))
    valid = rng.uniform(size=n) > 0.2
    sampler = bilinear_matrix(uv, valid, size)
    x_v = (rng.uniform(size=(1, size, size)) > 0.5).astype(float)
    real = rng.uniform(size=(3, image, image))
    B = (rng.uniform(size=(1, image, image)) > 0.3).astype(float)
    C = (rng.uniform(size=(1, image, image)) > 0.7).astype(float)
    return sampler, x_v, real, B, C


SMALL = dict(size=16, channels=(3, 4, 5))


def _generator_check(seed: int, kind: str) -> CheckResult:
    rng = np.random.default_rng(seed)
    sampler, x_v, real, B, C = _texture_fixture(rng)
    gtn = init_generator("gtn.", GeneratorSpec(1, **SMALL), seed)
    gtn["gtn.texel_bias"].data = rng.normal(scale=0.1, size=(3, 16, 16))
    render = lambda tex: sample_texture(tex, sampler, 12, 12)
    if kind == "texture_loss":
        weights, prefix = gtn, "gtn."
        loss = lambda w: texture_loss(render(coarse_texture(w, x_v)), real, B)
    else:
        grn = init_generator("grn.", GeneratorSpec(4, **SMALL), seed + 1)
        x_p = coarse_texture(gtn, x_v).data
        i_tn = render(Tensor(x_p)).data
        weights, prefix = grn, "grn."
        if kind == "adversarial_loss":
            disc = init_discriminator("d2.", channels=(3, 4, 5), seed=seed + 2)
            # a sharper read-out so generator gradients sit well above roundoff
            disc["d2.fc.w"].data = disc["d2.fc.w"].data * 50.0
            loss = lambda w: generator_loss(disc, "d2.", render(refined_texture(w, x_v, x_p)))
        else:
            loss = lambda w: regularization_loss(real, render(refined_texture(w, x_v, x_p)),
                                                 i_tn, B, C)
    names = sorted(n for n in weights if n.startswith(prefix))
    name = names[seed % len(names)]
    swap = _swap(weights, name)
    # wide enough that cancellation stays small next to ~1e-6 gradient entries
    err = finite_diff_check(lambda t: loss(swap(t)), weights[name].data, eps=3e-5,
                            coords=_pick(rng, weights[name].shape))
    return CheckResult(f"{kind}/{name}", seed, err, NETWORK_TOL)


def check_texture_loss(seed: int) -> CheckResult:
    return _generator_check(seed, "texture_loss")


def check_adversarial_loss(seed: int) -> CheckResult:
    return _generator_check(seed, "adversarial_loss")


def check_regularization_loss(seed: int) -> CheckResult:
    return _generator_check(seed, "regularization_loss")


CHECKS: dict[str, Callable[[int], CheckResult]] = {
    "soft_silhouette": check_soft_silhouette,
    "hard_render": check_hard_render,
    "mesh_loss": check_mesh_loss,
    "texture_loss": check_texture_loss,
    "adversarial_loss": check_adversarial_loss,
    "regularization_loss": check_regularization_loss,
}


def run_battery(seeds: Iterable[int] = range(20), checks: Iterable[str] | None = None) -> list[CheckResult]:
    names = list(CHECKS) if checks is None else list(checks)
    return [CHECKS[n](s) for n in names for s in seeds]
