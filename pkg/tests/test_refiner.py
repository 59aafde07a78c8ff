import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from drhuman import autodiff as ad
from drhuman.autodiff import DimensionError, Tensor
from drhuman.autodiff.gradcheck import finite_diff_check
from drhuman.body import generate_template, skin
from drhuman.mesh import PART_INDEX, PARTS, Mesh, build_adjacency, icosphere
from drhuman.refiner import (CLAMP_TABLE, RefinerConfig, clamp_offsets, graph_conv, infer_config,
                             init_weights, mesh_loss, refine_block, refine_mesh,
                             validate_clamp_table, vertex_bounds, weight_names)
from drhuman.render import Camera, rasterize

from conftest import front_camera


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    a = np.triu(rng.uniform(size=(n, n)) < p, 1)
    a = (a | a.T).astype(float)
    return sp.csr_matrix(a)


def loop_graph_conv(f, adj, W0, W1):
    out = np.zeros((f.shape[0], W0.shape[1]))
    dense = adj.toarray()
    for i in range(f.shape[0]):
        acc = f[i] @ W0
        for j in range(f.shape[0]):
            if dense[i, j]:
                acc = acc + f[j] @ W1
        out[i] = np.maximum(acc, 0.0)
    return out


def tetra():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(Tensor(v), f)


def labeled_sphere(seed=0):
    """Icosphere whose vertices cycle through all ten part labels."""
    m = icosphere(1, 0.5)
    labels = np.arange(m.n_vertices) % len(PARTS)
    return Mesh(m.vertices, m.faces, m.uvs, labels)


def random_weights(seed, blocks=2, layers=2, width=8, scale=1.0):
    w = init_weights(RefinerConfig(blocks, layers, width, seed, zero_refine=False))
    for t in w.values():
        t.data = t.data * scale
    return w


class TestGraphConv:
    def test_identity_self_weight(self):
        f = np.abs(np.random.default_rng(0).normal(size=(5, 3)))
        adj = random_graph(5, 0.5, 0)
        out = graph_conv(f, adj, np.eye(3), np.zeros((3, 3)))
        assert np.array_equal(out.data, f)

    def test_neighbor_sum(self):
        # vertex 0 with neighbors holding (1, 2) and (3, 4)
        f = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]])
        adj = sp.csr_matrix(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float))
        out = graph_conv(f, adj, np.zeros((2, 2)), np.eye(2))
        assert out.data[0].tolist() == [4.0, 6.0]

    @pytest.mark.parametrize("seed", range(3))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        adj = random_graph(10, 0.3, seed)
        f, W0, W1 = rng.normal(size=(10, 4)), rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        np.testing.assert_allclose(graph_conv(f, adj, W0, W1).data, loop_graph_conv(f, adj, W0, W1),
                                   rtol=0, atol=1e-12)

    def test_accepts_adjacency(self):
        m = tetra()
        adj = build_adjacency(m)
        f = np.random.default_rng(1).normal(size=(4, 3))
        W = np.eye(3)
        np.testing.assert_allclose(graph_conv(f, adj, W, W).data,
                                   graph_conv(f, adj.matrix, W, W).data)

    def test_dimension_errors(self):
        adj = random_graph(4, 0.5, 0)
        with pytest.raises(DimensionError):
            graph_conv(np.zeros((4, 3)), adj, np.zeros((2, 5)), np.zeros((3, 5)))
        with pytest.raises(DimensionError):
            graph_conv(np.zeros((5, 3)), adj, np.zeros((3, 5)), np.zeros((3, 5)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        n = 8
        adj = random_graph(n, 0.4, seed)
        f, W0, W1 = rng.normal(size=(n, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        perm = rng.permutation(n)
        P = sp.csr_matrix(np.eye(n)[perm])
        out = graph_conv(f, adj, W0, W1).data
        out_p = graph_conv(f[perm], P @ adj @ P.T, W0, W1).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        adj = random_graph(6, 0.5, 3)
        f, W1 = rng.normal(size=(6, 3)), rng.normal(size=(3, 4))
        assert finite_diff_check(lambda w: graph_conv(f, adj, w, W1).sum(),
                                 rng.normal(size=(3, 4))) < 1e-6


class TestWeights:
    def test_names_and_shapes(self):
        cfg = RefinerConfig()
        w = init_weights(cfg)
        assert sorted(w) == sorted(weight_names(cfg))
        assert len(w) == 3 * (6 * 2 + 1)
        assert w["gm.b1.l1.W0"].shape == (3, 128)
        assert w["gm.b2.l4.W1"].shape == (128, 128)
        assert w["gm.b3.W"].shape == (131, 3)

    def test_seeded_and_zero_output(self):
        a, b = init_weights(), init_weights()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert all(not a[f"gm.b{i}.W"].data.any() for i in (1, 2, 3))

    def test_init_bound(self):
        w = init_weights(RefinerConfig(layers=2, width=16))
        assert np.abs(w["gm.b1.l1.W0"].data).max() <= 1 / np.sqrt(3 * 7)
        assert np.abs(w["gm.b1.l2.W1"].data).max() <= 1 / np.sqrt(16 * 7)

    def test_infer_config(self):
        cfg = RefinerConfig(blocks=2, layers=3, width=16)
        assert infer_config(init_weights(cfg)) == RefinerConfig(2, 3, 16)
        w = init_weights(cfg)
        del w["gm.b2.l3.W1"]
        with pytest.raises(ValueError, match="missing"):
            infer_config(w)


class TestClamp:
    def test_table_values(self):
        assert CLAMP_TABLE["torso"] == 0.06 and CLAMP_TABLE["face"] == 0.0
        assert CLAMP_TABLE["calves"] == 0.03 and CLAMP_TABLE["arms"] == 0.02

    def test_validation(self):
        with pytest.raises(ValueError, match="lacks"):
            validate_clamp_table({"face": 0.0})
        bad = dict(CLAMP_TABLE, torso=-1.0)
        with pytest.raises(ValueError, match=">= 0"):
            validate_clamp_table(bad)
        with pytest.raises(ValueError, match="unknown"):
            validate_clamp_table(dict(CLAMP_TABLE, tail=0.1))

    def test_torso_example(self):
        u = clamp_offsets(np.array([[0.1, 0.0, 0.0]]), np.array([PART_INDEX["torso"]]))
        assert u.data.tolist() == [[0.06, 0.0, 0.0]]

    def test_face_always_zero(self):
        u = clamp_offsets(np.array([[0.7, -0.3, 0.2]]), np.array([PART_INDEX["face"]]))
        assert not u.data.any()

    def test_inside_unchanged(self):
        u = np.array([[0.01, -0.02, 0.005]])
        assert np.array_equal(clamp_offsets(u, np.array([PART_INDEX["thighs"]])).data, u)

    def test_subgradient(self):
        with ad.session():
            u = Tensor(np.array([[0.1, 0.01, -0.2]]), requires_grad=True)
            clamp_offsets(u, np.array([PART_INDEX["torso"]])).sum().backward()
            assert u.grad.tolist() == [[0.0, 1.0, 0.0]]

    def test_vertex_bounds(self):
        k = vertex_bounds(np.array([PART_INDEX["head"], PART_INDEX["feet"]]))
        assert k.tolist() == [[0.04] * 3, [0.02] * 3]


class TestRefineMesh:
    def test_zero_output_weights_identity(self):
        m = labeled_sphere()
        M = refine_mesh(init_weights(RefinerConfig(blocks=2, layers=2, width=8)), m)
        assert np.array_equal(M.positions(), m.positions())

    def test_block_bounded(self):
        m = labeled_sphere()
        u = refine_block(m, random_weights(0, scale=3.0), build_adjacency(m), 1)
        assert np.abs(u.data).max() < 1.0

    def test_block_zero_W(self):
        m = labeled_sphere()
        w = random_weights(0)
        w["gm.b1.W"].data[...] = 0.0
        assert not refine_block(m, w, build_adjacency(m), 1).data.any()

    def test_topology_preserved(self):
        m = labeled_sphere()
        M = refine_mesh(random_weights(1, scale=5.0), m)
        assert np.array_equal(M.faces, m.faces)
        assert np.array_equal(M.uvs, m.uvs) and np.array_equal(M.part_labels, m.part_labels)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 100.0))
    def test_hard_bound(self, seed, scale):
        m = labeled_sphere(seed)
        P = m.with_vertices(Tensor(m.positions() * (1 + 0.1 * np.random.default_rng(seed).normal(
            size=(m.n_vertices, 1)))))
        M = refine_mesh(random_weights(seed % 97, blocks=3, scale=scale), P)
        off = np.abs(M.positions() - P.positions())
        assert np.all(off <= vertex_bounds(P.part_labels))
        zero = np.isin(P.part_labels, [PART_INDEX[p] for p in ("face", "hands", "footprints")])
        assert np.array_equal(M.positions()[zero], P.positions()[zero])

    def test_no_clamp_exceeds(self):
        m = labeled_sphere()
        M = refine_mesh(random_weights(2, scale=50.0), m, clamp=False)
        off = np.abs(M.positions() - m.positions())
        assert np.any(off > vertex_bounds(m.part_labels))

    def test_body_mesh_bound(self):
        model = generate_template()
        P = skin(model, np.zeros(72), np.zeros(10))
        w = init_weights(RefinerConfig(blocks=2, layers=2, width=16, zero_refine=False))
        M = refine_mesh(w, P)
        assert np.all(np.abs(M.positions() - P.positions()) <= vertex_bounds(P.part_labels))

    def test_gradient_wrt_output_matrix(self):
        m = tetra()
        adj = build_adjacency(m)
        w = random_weights(4, blocks=1, layers=2, width=4)
        f = lambda t: refine_block(m, dict(w, **{"gm.b1.W": t}), adj, 1).sum()
        assert finite_diff_check(f, w["gm.b1.W"].data, eps=1e-6) < 1e-5


def sphere_views(mesh, n=2, size=24):
    cams = [Camera.look_at([2.5 * np.sin(a), 0.3, 2.5 * np.cos(a)], [0, 0, 0], size=(size, size),
                           fov_deg=40.0) for a in np.linspace(0, np.pi, n, endpoint=False)]
    return cams, [rasterize(mesh, c).mask[None] for c in cams]


class TestMeshLoss:
    def test_parts_and_defaults(self):
        m = labeled_sphere()
        cams, targets = sphere_views(m)
        parts = {}
        loss = mesh_loss(m, targets, cams, parts=parts, sigma=1e-4)
        expected = parts["silhouette"] + 1.0 * parts["laplacian"] + 0.5 * parts["normal"]
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_needs_views(self):
        with pytest.raises(ValueError, match="at least one view"):
            mesh_loss(labeled_sphere(), [], [])

    def test_view_average(self):
        m = labeled_sphere()
        cams, targets = sphere_views(m, 2)
        p1, p2, pb = {}, {}, {}
        mesh_loss(m, targets[:1], cams[:1], parts=p1)
        mesh_loss(m, targets[1:], cams[1:], parts=p2)
        mesh_loss(m, targets, cams, parts=pb)
        assert pb["silhouette"] == pytest.approx((p1["silhouette"] + p2["silhouette"]) / 2, rel=1e-12)

    def test_zero_clamp_table_gives_baseline(self):
        m = labeled_sphere()
        cams, targets = sphere_views(m.with_vertices(Tensor(m.positions() * 1.1)))
        table = {p: 0.0 for p in PARTS}
        M = refine_mesh(random_weights(5, scale=10.0), m, table=table)
        assert np.array_equal(M.positions(), m.positions())
        assert mesh_loss(M, targets, cams).item() == mesh_loss(m, targets, cams).item()

    def test_gradient_all_weights(self):
        rng = np.random.default_rng(0)
        P = icosphere(1, 0.6)
        adj = build_adjacency(P)
        w = random_weights(6, blocks=2, layers=2, width=6)
        table = {p: 0.5 for p in PARTS}
        cam = front_camera(16)
        target = (rng.uniform(size=(1, 16, 16)) > 0.5).astype(float)
        for name in sorted(w):
            f = lambda t: mesh_loss(refine_mesh(dict(w, **{name: t}), P, adj, table), [target],
                                    [cam], adj, sigma=1e-3)
            coords = rng.choice(w[name].data.size, size=min(6, w[name].data.size), replace=False)
            assert finite_diff_check(f, w[name].data, eps=1e-6, coords=coords) < 1e-3, name
