"""Triangle meshes, adjacency, vertex normals and geometric regularizers."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

PARTS = ("face", "footprints", "hands", "head", "torso", "arms", "forearms", "thighs",
         "calves", "feet")
PART_INDEX = {name: i for i, name in enumerate(PARTS)}


class MeshError(ValueError):
    """Structurally invalid mesh or mesh file."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with per-vertex UVs and body-part labels.

    ``vertices`` is a V×3 :class:`Tensor` (it may carry gradients); the other
    fields are plain integer/float arrays shared between derived meshes.
    """

    vertices: Tensor
    faces: np.ndarray
    uvs: np.ndarray = None
    part_labels: np.ndarray = None

    def __post_init__(self):
        v = self.vertices if isinstance(self.vertices, Tensor) else Tensor(self.vertices)
        object.__setattr__(self, "vertices", v)
        faces = np.asarray(self.faces, dtype=np.int64)
        object.__setattr__(self, "faces", faces)
        n = v.shape[0] if v.ndim == 2 else 0
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be V×3, got {v.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be F×3, got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise MeshError("face index out of range")
        degenerate = ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2]))
        if degenerate.any():
            raise MeshError(f"face {int(np.argmax(degenerate))} repeats a vertex index")
        uvs = np.zeros((n, 2)) if self.uvs is None else np.asarray(self.uvs, dtype=np.float64)
        if uvs.shape != (n, 2):
            raise MeshError(f"uvs must be V×2, got {uvs.shape}")
        labels = (np.full(n, PART_INDEX["torso"], dtype=np.int64) if self.part_labels is None
                  else np.asarray(self.part_labels, dtype=np.int64))
        if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= len(PARTS))):
            raise MeshError("part_labels must be V integers in 0..9")
        object.__setattr__(self, "uvs", uvs)
        object.__setattr__(self, "part_labels", labels)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "Mesh":
        """Same topology, UVs and labels with new positions."""
        return replace(self, vertices=vertices)

    def positions(self) -> np.ndarray:
        return self.vertices.data


@dataclass(frozen=True, eq=False)
class Adjacency:
    neighbors: list
    incident_faces: list
    face_pairs: np.ndarray
    edges: np.ndarray
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors])


def _edge_table(faces: np.ndarray):
    corners = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(faces.shape[0]), 3)
    return np.sort(corners, axis=1), owner


def build_adjacency(mesh: Mesh) -> Adjacency:
    """Sorted vertex neighborhoods, incident faces and edge-sharing face pairs.

    Raises MeshError if any edge is shared by more than two faces.
    """
    n, faces = mesh.n_vertices, mesh.faces
    edges, owner = _edge_table(faces)
    order = np.lexsort((owner, edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    uniq, start, counts = np.unique(edges, axis=0, return_index=True, return_counts=True)
    if counts.size and counts.max() > 2:
        bad = uniq[np.argmax(counts)]
        raise MeshError(f"non-manifold edge {tuple(int(x) for x in bad)} shared by "
                        f"{int(counts.max())} faces")
    pair_start = start[counts == 2]
    face_pairs = np.stack([owner[pair_start], owner[pair_start + 1]], axis=1) \
        if pair_start.size else np.zeros((0, 2), dtype=np.int64)

    rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
    cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
    matrix = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    matrix.sort_indices()
    neighbors = [matrix.indices[matrix.indptr[i]:matrix.indptr[i + 1]].copy() for i in range(n)]

    incident = [[] for _ in range(n)]
    for f, tri in enumerate(faces):
        for v in tri:
            incident[v].append(f)
    incident = [np.array(x, dtype=np.int64) for x in incident]
    return Adjacency(neighbors, incident, face_pairs.astype(np.int64), uniq.astype(np.int64),
                     matrix)


# -- differentiable geometry ----------------------------------------------------

def cross(a, b) -> Tensor:
    """Row-wise cross product of two N×3 tensors."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    return ad.make_op(np.cross(a.data, b.data), (a, b),
                      lambda g: (np.cross(b.data, g), np.cross(g, a.data)))


def normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Rows divided by ``max(|row|, eps)``."""
    x = ad.as_tensor(x)
    norm = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.maximum(norm, eps)
    y = x.data / safe
    big = norm > eps

    def backward(g):
        radial = np.where(big, y * np.sum(y * g, axis=1, keepdims=True), 0.0)
        return ((g - radial) / safe,)

    return ad.make_op(y, (x,), backward)


def face_cross(vertices, faces: np.ndarray) -> Tensor:
    """Unnormalized face normals (twice the area, CCW winding)."""
    v0 = ad.take_rows(vertices, faces[:, 0])
    v1 = ad.take_rows(vertices, faces[:, 1])
    v2 = ad.take_rows(vertices, faces[:, 2])
    return cross(v1 - v0, v2 - v0)


def face_normals(vertices, faces: np.ndarray) -> Tensor:
    return normalize_rows(face_cross(vertices, faces))


def _incidence(faces: np.ndarray, n: int) -> sp.csr_matrix:
    rows = faces.reshape(-1)
    cols = np.repeat(np.arange(faces.shape[0]), 3)
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, faces.shape[0]))


def vertex_normals(mesh: Mesh) -> Tensor:
    """Area-weighted unit vertex normals, differentiable in the vertices."""
    fc = face_cross(mesh.vertices, mesh.faces)
    return normalize_rows(ad.spmm(_incidence(mesh.faces, mesh.n_vertices), fc))


def laplacian_matrix(adj: Adjacency) -> tuple[sp.csr_matrix, np.ndarray]:
    deg = adj.degree.astype(np.float64)
    active = deg > 0
    inv = np.where(active, 1.0 / np.maximum(deg, 1.0), 0.0)
    lap = sp.diags(active.astype(np.float64)) - sp.diags(inv) @ adj.matrix
    return lap.tocsr(), active


def laplacian_loss(mesh: Mesh, adj: Adjacency) -> Tensor:
    """Mean squared uniform-Laplacian displacement over non-isolated vertices."""
    lap, active = laplacian_matrix(adj)
    n_active = int(active.sum())
    if n_active < mesh.n_vertices:
        warnings.warn(f"{mesh.n_vertices - n_active} isolated vertices excluded from the "
                      "Laplacian loss", RuntimeWarning, stacklevel=2)
    if n_active == 0:
        return Tensor(0.0)
    delta = ad.spmm(lap, mesh.vertices)
    return ad.square(delta).sum() / float(n_active)


def normal_consistency_loss(mesh: Mesh, adj: Adjacency, eps: float = 1e-12) -> Tensor:
    """Mean of ``1 - cos`` between normals of faces sharing an edge."""
    pairs = adj.face_pairs
    if pairs.shape[0] == 0:
        raise MeshError("normal consistency needs at least one edge-sharing face pair")
    fc = face_cross(mesh.vertices, mesh.faces)
    ok_face = np.linalg.norm(fc.data, axis=1) > eps
    ok = ok_face[pairs[:, 0]] & ok_face[pairs[:, 1]]
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} face pairs with degenerate normals skipped",
                      RuntimeWarning, stacklevel=2)
        pairs = pairs[ok]
        if pairs.shape[0] == 0:
            return Tensor(0.0)
    n = normalize_rows(fc, eps)
    cos = (ad.take_rows(n, pairs[:, 0]) * ad.take_rows(n, pairs[:, 1])).sum(axis=1)
    return (1.0 - cos).mean()


# -- OBJ I/O ------------------------------------------------------------------------

def _labels_path(path: Path) -> Path:
    return path.with_name(path.stem + ".labels.json")


def save_obj(mesh: Mesh, path) -> None:
    """Write v/vt/f records plus a ``<stem>.labels.json`` part-label sidecar."""
    path = Path(path)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.positions().tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in tri) for tri in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n")
    _labels_path(path).write_text(json.dumps(
        {"part_labels": mesh.part_labels.tolist(), "parts": list(PARTS)}))


def load_obj(path) -> Mesh:
    path = Path(path)
    verts, texcoords, faces, face_vt = [], [], [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        tag = tokens[0]
        try:
            if tag == "v":
                verts.append([float(t) for t in tokens[1:4]])
            elif tag == "vt":
                texcoords.append([float(t) for t in tokens[1:3]])
            elif tag == "f":
                corners = tokens[1:]
                if len(corners) != 3:
                    raise MeshError(f"{path}:{lineno}: only triangles are supported "
                                    f"(got {len(corners)} corners)")
                vi, ti = [], []
                for c in corners:
                    parts = c.split("/")
                    if len(parts) < 2 or not parts[1]:
                        raise MeshError(f"{path}:{lineno}: face corner {c!r} lacks a vt index")
                    vi.append(int(parts[0]) - 1)
                    ti.append(int(parts[1]) - 1)
                faces.append(vi)
                face_vt.append(ti)
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"{path}:{lineno}: {exc}") from None
    nv = len(verts)
    uvs = np.full((nv, 2), np.nan)
    for vi, ti in zip(faces, face_vt):
        for v, t in zip(vi, ti):
            uv = texcoords[t]
            if not np.isnan(uvs[v, 0]) and not np.array_equal(uvs[v], uv):
                raise MeshError(f"{path}: vertex {v + 1} has conflicting texture coordinates")
            uvs[v] = uv
    uvs = np.nan_to_num(uvs, nan=0.0)
    labels = None
    side = _labels_path(path)
    if side.exists():
        labels = json.loads(side.read_text())["part_labels"]
    return Mesh(Tensor(np.array(verts, dtype=np.float64).reshape(-1, 3)),
                np.array(faces, dtype=np.int64).reshape(-1, 3), uvs, labels)


# -- reference shapes used by tests and demos ----------------------------------------

def icosphere(subdivisions: int = 1, radius: float = 1.0) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9],
             [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6],
             [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.array(v) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.array(verts[a]) + np.array(verts[b])) / 2.0
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.array(verts) * radius
    uvs = np.stack([0.5 + np.arctan2(v[:, 0], v[:, 2]) / (2 * np.pi),
                    0.5 + np.arcsin(np.clip(v[:, 1] / radius, -1, 1)) / np.pi], axis=1)
    return Mesh(Tensor(v), np.array(faces), uvs)
