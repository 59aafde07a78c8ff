import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drhuman import autodiff as ad
from drhuman._validation import InvariantError
from drhuman.autodiff import Tensor
from drhuman.autodiff.gradcheck import finite_diff_check
from drhuman.body import (SMPL_PARENTS, BodyModel, forward_kinematics, generate_template, height,
                          load_model, model_from_dict, model_to_dict, rodrigues, save_model, skin)
from drhuman.mesh import PARTS, Mesh, build_adjacency, vertex_normals


@pytest.fixture(scope="module")
def model():
    return generate_template(0)


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


class TestRodrigues:
    def test_zero(self):
        np.testing.assert_array_equal(rodrigues(np.zeros(3)).data, np.eye(3))

    def test_quarter_turn(self):
        r = rodrigues([0, 0, np.pi / 2]).data
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_orthonormal_trace(self, seed):
        w = np.random.default_rng(seed).normal(size=3)
        r = rodrigues(w).data
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.trace(r) == pytest.approx(1 + 2 * np.cos(np.linalg.norm(w)), abs=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_tiny_angle(self):
        w = np.array([1e-9, -2e-9, 3e-10])
        r = rodrigues(w).data
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-15)

    def test_gradient_across_series_threshold(self):
        for scale in (1e-3, 9e-3, 1e-2, 0.5, 2.0):
            w = np.array([0.3, -0.5, 0.8]) * scale
            m = np.random.default_rng(1).normal(size=(3, 3))
            assert finite_diff_check(lambda t: (rodrigues(t) * m).sum(), w, eps=1e-7) < 1e-6


class TestKinematics:
    def test_rest(self, model):
        g = forward_kinematics(model, np.zeros(72)).data
        np.testing.assert_allclose(g[:, :3, 3], model.joint_rest_positions, atol=1e-15)
        np.testing.assert_array_equal(g[:, :3, :3], np.broadcast_to(np.eye(3), (24, 3, 3)))

    def test_root_rotation(self, model):
        theta = np.zeros(72)
        theta[:3] = [0.0, 0.0, 0.7]
        g = forward_kinematics(model, theta).data
        j = model.joint_rest_positions
        expected = (j - j[0]) @ rot_z(0.7).T + j[0]
        np.testing.assert_allclose(g[:, :3, 3], expected, atol=1e-12)

    def test_knee_bend_chain(self, model):
        # hip -> knee -> ankle; bend the knee 90 degrees about x
        theta = np.zeros(72)
        theta[4 * 3] = np.pi / 2
        g = forward_kinematics(model, theta).data
        # ankle - knee = (0.005, -0.41, -0.01); Rx(90) maps (x,y,z) -> (x,-z,y)
        np.testing.assert_allclose(g[7, :3, 3], [0.1, 0.49 + 0.01, -0.41], atol=1e-12)
        np.testing.assert_allclose(g[4, :3, 3], model.joint_rest_positions[4], atol=1e-15)


class TestSkin:
    def test_rest_exact(self, model):
        out = skin(model, np.zeros(72), np.zeros(10))
        np.testing.assert_array_equal(out.positions(), model.template.positions())

    def test_blendshape_at_rest(self, model):
        beta = np.zeros(10)
        beta[1] = 1.0
        out = skin(model, np.zeros(72), beta)
        np.testing.assert_array_equal(out.positions(),
                                      model.template.positions() + model.blendshapes[1])

    def test_single_joint_rigid(self):
        tmpl = Mesh(Tensor([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]), np.array([[0, 1, 2]]))
        w = np.zeros((3, 24))
        w[:, 0] = 1
        m = BodyModel(tmpl, SMPL_PARENTS, np.zeros((24, 3)), w, np.zeros((10, 3, 3)),
                      np.zeros((10, 24, 3)))
        theta = np.zeros(72)
        theta[2] = np.pi / 2
        np.testing.assert_allclose(skin(m, theta, np.zeros(10)).positions()[0], [0, 1, 0],
                                   atol=1e-15)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rigid_equivariance(self, seed):
        model = generate_template(0)
        rng = np.random.default_rng(seed)
        theta = rng.normal(scale=0.3, size=72)
        beta = rng.normal(size=10)
        theta[:3] = 0.0
        base = skin(model, theta, beta).positions()
        root = rng.normal(size=3)
        theta[:3] = root
        r = rodrigues(root).data
        from drhuman.body import shaped_joints
        j0 = shaped_joints(model, beta).data[0]
        np.testing.assert_allclose(skin(model, theta, beta).positions(),
                                   (base - j0) @ r.T + j0, atol=1e-9)

    def test_topology_preserved(self, model):
        out = skin(model, np.random.default_rng(0).normal(scale=0.2, size=72), np.ones(10))
        assert out.faces is model.template.faces
        assert out.uvs is model.template.uvs
        assert out.part_labels is model.template.part_labels

    def test_gradients(self, model):
        rng = np.random.default_rng(3)
        theta = rng.normal(scale=0.3, size=72)
        beta = rng.normal(size=10)
        w = rng.normal(size=(model.n_vertices, 3))
        f_theta = lambda t: (skin(model, t, Tensor(beta)).vertices * w).sum()
        f_beta = lambda b: (skin(model, Tensor(theta), b).vertices * w).sum()
        assert finite_diff_check(f_theta, theta) < 1e-5
        assert finite_diff_check(f_beta, beta) < 1e-5


class TestTemplate:
    def test_invariants(self, model):
        t = model.template
        assert 600 <= t.n_vertices <= 1200
        build_adjacency(t)  # raises on non-manifold edges
        assert sorted(set(t.part_labels.tolist())) == list(range(len(PARTS)))
        np.testing.assert_allclose(model.skin_weights.sum(axis=1), 1.0, atol=1e-12)
        assert ((model.skin_weights > 0).sum(axis=1) <= 4).all()
        assert (t.uvs >= 0).all() and (t.uvs <= 1).all()

    def test_closed_and_outward(self, model):
        adj = build_adjacency(model.template)
        # every edge is shared by two faces
        assert len(adj.face_pairs) == len(adj.edges)
        # outward normals: signed volume positive
        p, f = model.template.positions(), model.template.faces
        vol = np.einsum("ij,ij->i", p[f[:, 0]], np.cross(p[f[:, 1]], p[f[:, 2]])).sum() / 6
        assert vol > 0

    def test_height(self, model):
        assert height(model.template) == pytest.approx(1.70, abs=0.01)

    def test_scale_mode(self, model):
        beta = np.zeros(10)
        beta[0] = 1.0
        grown = height(skin(model, np.zeros(72), beta)) - height(model.template)
        # documented scale mode: 5% per unit beta about the floor origin
        assert grown == pytest.approx(0.05 * 1.70, abs=1e-9)

    def test_deterministic(self):
        a, b = generate_template(3), generate_template(3)
        np.testing.assert_array_equal(a.template.positions(), b.template.positions())
        np.testing.assert_array_equal(a.skin_weights, b.skin_weights)


class TestModelIO:
    def test_round_trip(self, model, tmp_path):
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_allclose(back.template.positions(), model.template.positions(), atol=1e-9)
        np.testing.assert_allclose(back.skin_weights, model.skin_weights, atol=1e-9)
        np.testing.assert_allclose(back.blendshapes, model.blendshapes, atol=1e-9)
        np.testing.assert_array_equal(back.template.faces, model.template.faces)
        np.testing.assert_array_equal(back.parents, model.parents)

    def test_missing_field(self, model):
        d = model_to_dict(model)
        del d["skin_weights"]
        with pytest.raises(InvariantError, match="skin_weights"):
            model_from_dict(d)

    def test_bad_weights(self, model):
        d = model_to_dict(model)
        d["skin_weights"][0][0] += 0.5
        with pytest.raises(InvariantError, match="sum to 1"):
            model_from_dict(d)


def test_pose_validation(model):
    with pytest.raises(InvariantError):
        skin(model, np.zeros(71), np.zeros(10))
    theta = np.zeros(72)
    theta[3:6] = [4.0, 0, 0]
    with pytest.warns(RuntimeWarning, match="pi"):
        skin(model, theta, np.zeros(10))
