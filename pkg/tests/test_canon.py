import numpy as np
import pytest

from cagematch import canon, geom, shapes
from cagematch import tensor as T
from cagematch.canon import Canonicalizer, PoseIntrinsics
from cagematch.geom import OcclusionMask, PreconditionError
from cagematch.tensor import Tensor


@pytest.fixture(scope="module")
def net():
    return Canonicalizer(np.random.default_rng(5))


@pytest.fixture(scope="module")
def pts():
    return shapes.random_shape("cabinet", 9, n_points=256).cloud.points


def test_pose_invariance_untrained(net, pts, rng):
    R = geom.random_rotation(rng)
    a, b = net(pts), net(1.7 * pts @ R.T + [0.1, -0.3, 0.2])
    assert np.abs(a.F.data - b.F.data).max() <= 1e-5
    assert np.abs(a.S_c.data - b.S_c.data).max() <= 1e-5


def test_shape_preserved(net, pts):
    res = net(pts)
    assert res.S_c.shape == pts.shape and np.all(np.isfinite(res.S_c.data))


def test_pose_maps_input_to_canonical(net, pts):
    res = net(pts)
    np.testing.assert_allclose(res.pose.apply(pts), res.S_c.data, atol=1e-10)
    np.testing.assert_allclose(res.pose.invert(res.S_c.data), pts, atol=1e-9)


def test_rotation_is_scale_free(net, pts):
    R = net(pts).pose.R
    assert np.linalg.norm(R) == pytest.approx(np.sqrt(3.0))
    np.testing.assert_allclose(net(3.0 * pts).pose.R, R, atol=1e-10)


def test_too_few_points(net):
    with pytest.raises(PreconditionError):
        net(np.random.default_rng(0).normal(size=(8, 3)))


def test_intrinsics_validation():
    with pytest.raises(PreconditionError):
        PoseIntrinsics(np.eye(3), np.zeros(3), -1.0)


def test_decoder_cardinality_and_determinism(net, pts):
    F_star = net(pts).F_star
    a, b = canon.decode(F_star, net.decoder), canon.decode(F_star, net.decoder)
    assert a.shape == (8 * 8 * 8, 3)
    np.testing.assert_array_equal(a.data, b.data)


def test_loss_can_zero(rng):
    S = rng.normal(size=(20, 3))
    assert float(canon.loss_can(Tensor(S), Tensor(S), Tensor(geom.random_rotation(rng))).data) < 1e-20


def test_loss_can_orth_term():
    S = np.random.default_rng(0).normal(size=(10, 3))
    assert float(canon.loss_can(Tensor(S), Tensor(S), Tensor(2 * np.eye(3))).data) == pytest.approx(27.0)


def test_loss_can_grad_R(rng):
    R = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    S, H = Tensor(rng.normal(size=(12, 3))), Tensor(rng.normal(size=(12, 3)))
    assert T.check_gradients(lambda: canon.loss_can(S, H, R), [R]) < 1e-4


class TestCcan:
    def test_identity(self, rng):
        full = rng.normal(size=(30, 3))
        keep = rng.random(30) < 0.6
        keep[:5] = True
        assert float(canon.loss_ccan(Tensor(full[keep]), Tensor(full), OcclusionMask(keep)).data) == 0.0

    def test_all_true(self, rng):
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        val = float(canon.loss_ccan(Tensor(a), Tensor(b), OcclusionMask(np.ones(12, bool))).data)
        assert val == geom.chamfer_value(a, b)

    def test_recomputation(self, rng):
        a, b = rng.normal(size=(9, 3)), rng.normal(size=(25, 3))
        keep = np.zeros(25, bool)
        keep[rng.permutation(25)[:11]] = True
        val = float(canon.loss_ccan(Tensor(a), Tensor(b), OcclusionMask(keep)).data)
        assert val == geom.chamfer_value(a, b[keep])

    def test_bad_mask_length(self, rng):
        with pytest.raises(PreconditionError):
            canon.loss_ccan(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(10, 3))),
                            OcclusionMask(np.ones(9, bool)))


def test_gradient_through_network(rng):
    net = Canonicalizer(np.random.default_rng(2), patches=2, grid=3)
    pts = rng.normal(size=(24, 3))
    params = [net.decoder.b2, net.encoder.rot.W[-1]]

    def f():
        res = net(pts)
        return canon.loss_can(res.S_c, canon.decode(res.F_star, net.decoder), res.enc.R)
    assert T.check_gradients(f, params) < 1e-4
