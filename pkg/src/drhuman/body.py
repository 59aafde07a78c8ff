"""Parametric body: linear blend skinning over the 24-joint SMPL tree.

The learned SMPL asset is replaced by :func:`generate_template`, a procedural
capsule humanoid with the same joint ordering, ten hand-designed shape modes,
a UV atlas and the ten body-part labels used by the refinement clamp.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._validation import InvariantError, check_pose, check_shape_params
from .autodiff import Tensor
from .mesh import PART_INDEX, Mesh

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
)
SMPL_PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18,
                         19, 20, 21])
N_JOINTS = 24
N_BETAS = 10


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: Mesh
    parents: np.ndarray
    joint_rest_positions: np.ndarray
    skin_weights: np.ndarray
    blendshapes: np.ndarray
    joint_blendshapes: np.ndarray

    def __post_init__(self):
        validate_model(self)

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices


def validate_model(model: BodyModel) -> None:
    v = model.template.n_vertices
    parents = np.asarray(model.parents)
    if parents.shape != (N_JOINTS,) or parents[0] != -1:
        raise InvariantError("joint tree must have 24 entries rooted at joint 0")
    for k in range(1, N_JOINTS):
        if not 0 <= parents[k] < k:
            raise InvariantError(f"joint {k} parent {parents[k]} breaks topological order")
    if model.joint_rest_positions.shape != (N_JOINTS, 3):
        raise InvariantError("joint_rest_positions must be 24×3")
    w = model.skin_weights
    if w.shape != (v, N_JOINTS):
        raise InvariantError(f"skin_weights must be {v}×24, got {w.shape}")
    if np.any(w < 0):
        raise InvariantError("skin_weights must be nonnegative")
    if np.any((w > 0).sum(axis=1) > 4):
        raise InvariantError("skin_weights allow at most 4 nonzero entries per vertex")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise InvariantError("skin_weights rows must sum to 1")
    if model.blendshapes.shape != (N_BETAS, v, 3):
        raise InvariantError(f"blendshapes must be 10×{v}×3")
    if model.joint_blendshapes.shape != (N_BETAS, N_JOINTS, 3):
        raise InvariantError("joint_blendshapes must be 10×24×3")
    if np.linalg.norm(model.blendshapes, axis=2).max() > 0.1 + 1e-12:
        raise InvariantError("blendshape displacement exceeds 0.1 m per unit beta")


# -- rotations ------------------------------------------------------------------

_SKEW = np.zeros((3, 9))
# K(w) = [[0,-z,y],[z,0,-x],[-y,x,0]] flattened row-major
_SKEW[0, 5], _SKEW[0, 7] = -1.0, 1.0
_SKEW[1, 2], _SKEW[1, 6] = 1.0, -1.0
_SKEW[2, 1], _SKEW[2, 3] = -1.0, 1.0


def _rodrigues_coeffs(sq: Tensor) -> tuple[Tensor, Tensor]:
    """``sin(t)/t`` and ``(1-cos t)/t**2`` as functions of ``t**2``."""
    s = sq.data
    small = s < 1e-4
    t = np.sqrt(np.where(small, 1.0, s))
    a = np.where(small, 1 - s / 6 + s * s / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - s / 24 + s * s / 720, (1 - np.cos(t)) / np.where(small, 1.0, s))
    da = np.where(small, -1 / 6 + s / 60, (np.cos(t) - a) / (2 * np.where(small, 1.0, s)))
    db = np.where(small, -1 / 24 + s / 360, (a - 2 * b) / (2 * np.where(small, 1.0, s)))
    return (ad.make_op(a, (sq,), lambda g: (g * da,)),
            ad.make_op(b, (sq,), lambda g: (g * db,)))


def rodrigues_batch(omega) -> Tensor:
    """N×3 axis-angle vectors to N×3×3 rotation matrices."""
    omega = ad.as_tensor(omega)
    n = omega.shape[0]
    a, b = _rodrigues_coeffs(ad.square(omega).sum(axis=1))
    k = ad.reshape(ad.matmul(omega, Tensor(_SKEW)), (n, 3, 3))
    k2 = ad.matmul(k, k)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    a3 = ad.broadcast_to(ad.reshape(a, (n, 1, 1)), (n, 3, 3))
    b3 = ad.broadcast_to(ad.reshape(b, (n, 1, 1)), (n, 3, 3))
    return a3 * k + b3 * k2 + eye


def rodrigues(axis_angle) -> Tensor:
    """Rotation matrix for one axis-angle vector."""
    w = ad.reshape(ad.as_tensor(axis_angle), (1, 3))
    return ad.reshape(rodrigues_batch(w), (3, 3))


# -- kinematics -----------------------------------------------------------------------

def shaped_joints(model: BodyModel, beta) -> Tensor:
    beta = ad.reshape(ad.as_tensor(beta), (1, N_BETAS))
    js = Tensor(model.joint_blendshapes.reshape(N_BETAS, -1))
    return ad.reshape(ad.matmul(beta, js), (N_JOINTS, 3)) + model.joint_rest_positions


def _chain(model: BodyModel, theta, joints: Tensor):
    """World rotations and joint displacements (posed minus rest) per joint."""
    theta = ad.as_tensor(theta)
    rot = rodrigues_batch(ad.reshape(theta, (N_JOINTS, 3)))
    eye = np.eye(3)
    world_r: list[Tensor] = []
    disp: list[Tensor] = []
    for k in range(N_JOINTS):
        local = rot[k]
        p = model.parents[k]
        if p < 0:
            world_r.append(local)
            disp.append(Tensor(np.zeros(3)))
            continue
        bone = ad.reshape(joints[k] - joints[p], (3, 1))
        # displacement recurrence keeps the rest pose exact: (R - I) is exactly 0 there
        moved = ad.reshape(ad.matmul(world_r[p] - eye, bone), (3,))
        world_r.append(ad.matmul(world_r[p], local))
        disp.append(moved + disp[p])
    return world_r, disp


def forward_kinematics(model: BodyModel, theta, beta=None) -> Tensor:
    """24 world transforms (4×4) ``G_k`` for pose ``theta``."""
    beta = np.zeros(N_BETAS) if beta is None else beta
    joints = shaped_joints(model, beta)
    world_r, disp = _chain(model, theta, joints)
    mats = []
    bottom = Tensor(np.array([[0.0, 0.0, 0.0, 1.0]]))
    for k in range(N_JOINTS):
        t = ad.reshape(joints[k] + disp[k], (3, 1))
        mats.append(ad.concat([ad.concat([world_r[k], t], axis=1), bottom], axis=0))
    return ad.stack(mats)


def skin(model: BodyModel, theta, beta) -> Mesh:
    """Posed and shaped mesh; differentiable in ``theta`` and ``beta``."""
    if not isinstance(theta, Tensor):
        theta = check_pose(theta)
    if not isinstance(beta, Tensor):
        beta = check_shape_params(beta)
    v = model.n_vertices
    beta_row = ad.reshape(ad.as_tensor(beta), (1, N_BETAS))
    offsets = ad.reshape(ad.matmul(beta_row, Tensor(model.blendshapes.reshape(N_BETAS, -1))),
                         (v, 3))
    shaped = offsets + model.template.vertices.data
    joints = shaped_joints(model, beta)
    world_r, disp = _chain(model, theta, joints)
    eye = np.eye(3)
    # per joint: x -> x + (R - I)(x - j) + d
    delta_r = ad.reshape(ad.stack([r - eye for r in world_r]), (N_JOINTS, 9))
    trans = ad.stack(disp) - ad.reshape(ad.matmul(ad.reshape(ad.stack(world_r), (N_JOINTS, 3, 3))
                                                  - np.broadcast_to(eye, (N_JOINTS, 3, 3)),
                                                  ad.reshape(joints, (N_JOINTS, 3, 1))),
                                        (N_JOINTS, 3))
    w = Tensor(model.skin_weights)
    per_vertex_r = ad.reshape(ad.matmul(w, delta_r), (v, 3, 3))
    per_vertex_t = ad.matmul(w, trans)
    rotated = ad.reshape(ad.matmul(per_vertex_r, ad.reshape(shaped, (v, 3, 1))), (v, 3))
    return model.template.with_vertices(shaped + rotated + per_vertex_t)


# -- procedural template -------------------------------------------------------------------

_REST_JOINTS = np.array([
    [0.0, 0.92, 0.0], [0.095, 0.87, 0.0], [-0.095, 0.87, 0.0], [0.0, 1.02, 0.0],
    [0.095, 0.49, 0.0], [-0.095, 0.49, 0.0], [0.0, 1.14, 0.0], [0.1, 0.08, -0.01],
    [-0.1, 0.08, -0.01], [0.0, 1.26, 0.0], [0.1, 0.03, 0.12], [-0.1, 0.03, 0.12],
    [0.0, 1.44, 0.0], [0.07, 1.38, 0.0], [-0.07, 1.38, 0.0], [0.0, 1.52, 0.01],
    [0.18, 1.40, 0.0], [-0.18, 1.40, 0.0], [0.45, 1.40, 0.0], [-0.45, 1.40, 0.0],
    [0.69, 1.40, 0.0], [-0.69, 1.40, 0.0], [0.77, 1.40, 0.0], [-0.77, 1.40, 0.0],
])


@dataclass(frozen=True)
class _Segment:
    name: str
    part: str
    start: tuple
    end: tuple
    r_front: float
    r_side: float
    rings: int
    around: int
    knots: tuple  # ((t, joint), ...) piecewise-linear skinning along the axis
    front: tuple = (0.0, 0.0, 1.0)
    exponent: float = 6.0
    cell: tuple = (0, 0, 1, 1)  # atlas grid cell (row, col, rows, cols)


def _segments() -> list[_Segment]:
    def yk(y0, y1, pairs):
        return tuple(((y - y0) / (y1 - y0), j) for y, j in pairs)

    segs = [
        _Segment("torso", "torso", (0, 0.80, 0), (0, 1.47, 0), 0.10, 0.15, 12, 28,
                 yk(0.80, 1.47, [(0.80, 0), (0.92, 0), (1.02, 3), (1.14, 6), (1.26, 9),
                                 (1.38, 9), (1.47, 12)]), cell=(0, 0, 1, 2)),
        _Segment("neck", "torso", (0, 1.40, 0), (0, 1.53, 0), 0.055, 0.055, 3, 8,
                 ((0.0, 12), (0.7, 12), (1.0, 15)), cell=(0, 3, 1, 1)),
        _Segment("head", "head", (0, 1.47, 0.01), (0, 1.70, 0.01), 0.10, 0.085, 7, 12,
                 ((0.0, 15), (1.0, 15)), exponent=2.0, cell=(0, 2, 1, 1)),
    ]
    for side, sgn, col in (("left", 1.0, 0), ("right", -1.0, 1)):
        j = (lambda lj, rj: lj if sgn > 0 else rj)
        xk = (lambda x0, x1, pairs: tuple(((x - x0) / (x1 - x0), jj) for x, jj in pairs))
        segs += [
            _Segment(f"{side}_arm", "arms", (sgn * 0.13, 1.40, 0), (sgn * 0.47, 1.40, 0),
                     0.05, 0.05, 5, 8,
                     xk(0.13, 0.47, [(0.13, j(13, 14)), (0.19, j(16, 17)), (0.42, j(16, 17)),
                                     (0.47, j(18, 19))]), cell=(1, col, 1, 1)),
            _Segment(f"{side}_forearm", "forearms", (sgn * 0.43, 1.40, 0),
                     (sgn * 0.71, 1.40, 0), 0.042, 0.042, 5, 8,
                     xk(0.43, 0.71, [(0.43, j(16, 17)), (0.48, j(18, 19)), (0.66, j(18, 19)),
                                     (0.71, j(20, 21))]), cell=(1, 2 + col, 1, 1)),
            _Segment(f"{side}_hand", "hands", (sgn * 0.68, 1.40, 0), (sgn * 0.86, 1.40, 0),
                     0.02, 0.045, 3, 8,
                     xk(0.68, 0.86, [(0.68, j(20, 21)), (0.74, j(20, 21)), (0.78, j(22, 23)),
                                     (0.86, j(22, 23))]), cell=(2, col, 1, 1)),
            _Segment(f"{side}_thigh", "thighs", (sgn * 0.095, 0.93, 0), (sgn * 0.095, 0.46, 0),
                     0.075, 0.08, 9, 14,
                     yk(0.93, 0.46, [(0.93, 0), (0.85, j(1, 2)), (0.55, j(1, 2)),
                                     (0.46, j(4, 5))]), cell=(3, col, 1, 1)),
            _Segment(f"{side}_calf", "calves", (sgn * 0.095, 0.52, 0), (sgn * 0.10, 0.07, 0),
                     0.058, 0.058, 9, 10,
                     yk(0.52, 0.07, [(0.52, j(1, 2)), (0.47, j(4, 5)), (0.13, j(4, 5)),
                                     (0.07, j(7, 8))]), cell=(3, 2 + col, 1, 1)),
            _Segment(f"{side}_foot", "feet", (sgn * 0.10, 0.04, -0.06), (sgn * 0.10, 0.04, 0.19),
                     0.04, 0.045, 5, 8,
                     tuple(((z + 0.06) / 0.25, jj) for z, jj in
                           [(-0.06, j(7, 8)), (0.06, j(7, 8)), (0.12, j(10, 11)),
                            (0.19, j(10, 11))]),
                     front=(0.0, 1.0, 0.0), cell=(2, 2 + col, 1, 1)),
        ]
    return segs


def _knot_weights(t: float, knots) -> np.ndarray:
    w = np.zeros(N_JOINTS)
    ts = [k[0] for k in knots]
    if t <= ts[0]:
        w[knots[0][1]] = 1.0
        return w
    if t >= ts[-1]:
        w[knots[-1][1]] = 1.0
        return w
    for (t0, j0), (t1, j1) in zip(knots[:-1], knots[1:]):
        if t0 <= t <= t1:
            a = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
            w[j0] += 1.0 - a
            w[j1] += a
            return w
    raise AssertionError("unreachable")


def _build_segment(seg: _Segment, atlas_cells: int, gutter: float):
    a, b = np.array(seg.start, float), np.array(seg.end, float)
    axis = b - a
    length = np.linalg.norm(axis)
    axis /= length
    e1 = np.array(seg.front, float)
    e1 -= axis * np.dot(e1, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    row, col, nrows, ncols = seg.cell
    cell = 1.0 / atlas_cells
    u0, v0 = col * cell + gutter, 1.0 - (row + nrows) * cell + gutter
    du, dv = ncols * cell - 2 * gutter, nrows * cell - 2 * gutter

    verts, uvs, dirs, ts = [], [], [], []
    verts.append(a.copy()), uvs.append([u0 + 0.5 * du, v0 + dv]), dirs.append(-axis), ts.append(0.0)
    phis = 2 * np.pi * np.arange(seg.around) / seg.around
    phis = np.where(phis > np.pi, phis - 2 * np.pi, phis)
    for k in range(seg.rings):
        t = (k + 1) / (seg.rings + 1)
        prof = (1.0 - abs(2 * t - 1) ** seg.exponent) ** (1.0 / seg.exponent)
        for phi in phis:
            d = np.cos(phi) * e1 + np.sin(phi) * e2
            off = prof * (seg.r_front * np.cos(phi) * e1 + seg.r_side * np.sin(phi) * e2)
            verts.append(a + t * length * axis + off)
            # folded around the front-back plane: left/right flanks share texels
            uvs.append([u0 + abs(phi) / np.pi * du, v0 + (1.0 - t) * dv])
            dirs.append(d)
            ts.append(t)
    verts.append(b.copy()), uvs.append([u0 + 0.5 * du, v0]), dirs.append(axis), ts.append(1.0)

    n_ring, last = seg.around, 1 + seg.rings * seg.around
    faces = []
    for j in range(n_ring):
        jn = (j + 1) % n_ring
        faces.append([0, 1 + jn, 1 + j])
        faces.append([last, 1 + (seg.rings - 1) * n_ring + j, 1 + (seg.rings - 1) * n_ring + jn])
    for k in range(seg.rings - 1):
        for j in range(n_ring):
            jn = (j + 1) % n_ring
            p, q = 1 + k * n_ring, 1 + (k + 1) * n_ring
            faces += [[p + j, p + jn, q + jn], [p + j, q + jn, q + j]]
    verts, faces = np.array(verts), np.array(faces)
    # orient outward (positive signed volume)
    c = verts.mean(axis=0)
    vol = np.einsum("ij,ij->i", verts[faces[:, 0]] - c,
                    np.cross(verts[faces[:, 1]] - c, verts[faces[:, 2]] - c)).sum()
    if vol < 0:
        faces = faces[:, [0, 2, 1]]

    part = PART_INDEX[seg.part]
    labels = np.full(len(verts), part)
    dirs, ts = np.array(dirs), np.array(ts)
    if seg.name == "head":
        front = dirs @ np.array([0.0, 0.0, 1.0])
        labels[(front > 0.3) & (ts < 0.6) & (ts > 0.0)] = PART_INDEX["face"]
    if seg.part == "feet":
        labels[dirs @ np.array([0.0, -1.0, 0.0]) > 0.5] = PART_INDEX["footprints"]
    weights = np.array([_knot_weights(t, seg.knots) for t in ts])
    radial = verts - (a + np.outer(ts * length, axis))
    return verts, faces, np.array(uvs), labels, weights, radial


def _shape_modes(verts, radial, seg_of_vertex, segs, joints):
    """Ten displacement fields evaluated on vertices (V×3) and joints (24×3)."""
    nv = len(verts)
    vs = np.zeros((N_BETAS, nv, 3))
    js = np.zeros((N_BETAS, N_JOINTS, 3))
    names = np.array([segs[i].name for i in seg_of_vertex])
    parts = np.array([segs[i].part for i in seg_of_vertex])

    def both(idx, fn):
        vs[idx] = fn(verts)
        js[idx] = fn(joints)

    # 0 global scale about the floor origin
    both(0, lambda p: 0.05 * p)
    # 1 overall girth
    vs[1] = 0.2 * radial
    # 2 shoulder/torso width: torso flanks out, arm chains follow
    arm_mask = lambda p: (np.abs(p[:, 0]) > 0.125) & (p[:, 1] > 1.3)
    vs[2][parts == "torso", 0] = 0.2 * radial[parts == "torso", 0]
    both_arm = lambda p: np.where(arm_mask(p)[:, None], np.sign(p[:, :1]) * [0.03, 0, 0], 0.0)
    armlike = np.isin(parts, ["arms", "forearms", "hands"])
    vs[2][armlike] = both_arm(verts)[armlike]
    js[2] = both_arm(joints)
    js[2][[13, 14]] = 0.0
    # 3 leg length: lower body stretches, upper body rides up
    both(3, lambda p: np.stack([np.zeros(len(p)), 0.08 * np.minimum(p[:, 1], 0.87) / 0.87,
                                np.zeros(len(p))], axis=1))
    # 4 arm length
    both(4, lambda p: np.stack([np.sign(p[:, 0]) * 0.08 * np.clip((np.abs(p[:, 0]) - 0.18) / 0.68,
                                                                  0, 1) * (p[:, 1] > 1.3),
                                np.zeros(len(p)), np.zeros(len(p))], axis=1))
    # 5 belly
    torso = names == "torso"
    bump = np.exp(-((verts[:, 1] - 1.05) / 0.12) ** 2)
    front = np.clip(radial[:, 2] / 0.10, 0, 1)
    vs[5][torso, 2] = (0.04 * front * bump)[torso]
    # 6 hip width
    leg_joints = [1, 2, 4, 5, 7, 8, 10, 11]
    legs = np.isin(parts, ["thighs", "calves", "feet"]) | (parts == "footprints")
    vs[6][legs, 0] = 0.02 * np.sign(verts[legs, 0])
    hips = torso & (verts[:, 1] < 1.0)
    vs[6][hips, 0] = 0.15 * radial[hips, 0]
    js[6][leg_joints, 0] = 0.02 * np.sign(joints[leg_joints, 0])
    # 7 head size about the head joint
    head = names == "head"
    vs[7][head] = 0.3 * (verts[head] - joints[15])
    # 8 neck length
    neck = names == "neck"
    vs[8][head, 1] = 0.03
    vs[8][neck, 1] = 0.03 * np.clip((verts[neck, 1] - 1.40) / 0.13, 0, 1)
    js[8][15, 1] = 0.03
    # 9 limb thickness
    limbs = np.isin(parts, ["arms", "forearms", "thighs", "calves"])
    vs[9][limbs] = 0.25 * radial[limbs]
    return vs, js


def generate_template(seed: int = 0, atlas_cells: int = 4, gutter: float = 1 / 64) -> BodyModel:
    """Capsule humanoid, 1.70 m tall, in SMPL joint order.

    The geometry does not depend on ``seed``; it is accepted so callers can
    thread one scene seed through every constructor.
    """
    del seed
    segs = _segments()
    all_v, all_f, all_uv, all_lab, all_w, all_rad, owner = [], [], [], [], [], [], []
    base = 0
    for i, seg in enumerate(segs):
        v, f, uv, lab, w, rad = _build_segment(seg, atlas_cells, gutter)
        all_v.append(v), all_f.append(f + base), all_uv.append(uv), all_lab.append(lab)
        all_w.append(w), all_rad.append(rad), owner.append(np.full(len(v), i))
        base += len(v)
    verts = np.concatenate(all_v)
    template = Mesh(Tensor(verts), np.concatenate(all_f), np.concatenate(all_uv),
                    np.concatenate(all_lab))
    vs, js = _shape_modes(verts, np.concatenate(all_rad), np.concatenate(owner), segs,
                          _REST_JOINTS)
    return BodyModel(template, SMPL_PARENTS.copy(), _REST_JOINTS.copy(),
                     np.concatenate(all_w), vs, js)


# -- JSON I/O ------------------------------------------------------------------------

_FIELDS = ("vertices", "faces", "uvs", "part_labels", "parents", "joint_rest_positions",
           "skin_weights", "blendshapes", "joint_blendshapes")


def model_to_dict(model: BodyModel) -> dict:
    t = model.template
    return {
        "vertices": t.positions().tolist(), "faces": t.faces.tolist(), "uvs": t.uvs.tolist(),
        "part_labels": t.part_labels.tolist(), "parents": model.parents.tolist(),
        "joint_rest_positions": model.joint_rest_positions.tolist(),
        "skin_weights": model.skin_weights.tolist(), "blendshapes": model.blendshapes.tolist(),
        "joint_blendshapes": model.joint_blendshapes.tolist(),
    }


def model_from_dict(d: dict) -> BodyModel:
    missing = [k for k in _FIELDS if k not in d]
    if missing:
        raise InvariantError(f"body model JSON missing field(s): {', '.join(missing)}")
    template = Mesh(Tensor(np.array(d["vertices"], dtype=np.float64)), np.array(d["faces"]),
                    np.array(d["uvs"], dtype=np.float64), np.array(d["part_labels"]))
    return BodyModel(template, np.array(d["parents"], dtype=np.int64),
                     np.array(d["joint_rest_positions"], dtype=np.float64),
                     np.array(d["skin_weights"], dtype=np.float64),
                     np.array(d["blendshapes"], dtype=np.float64),
                     np.array(d["joint_blendshapes"], dtype=np.float64))


def save_model(model: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> BodyModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def height(mesh: Mesh) -> float:
    y = mesh.positions()[:, 1]
    return float(y.max() - y.min())
