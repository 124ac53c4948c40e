import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagematch import geom, shapes, vn
from cagematch import tensor as T
from cagematch.tensor import Tensor

seeds = st.integers(0, 2**31 - 1)


def rand_feat(r, n=6, c=4):
    return Tensor(r.normal(size=(n, c, 3)))


def test_linear_identity(rng):
    x = rand_feat(rng)
    np.testing.assert_array_equal(vn.vn_linear(x, Tensor(np.eye(4))).data, x.data)


@given(seeds)
def test_linear_equivariant(seed):
    r = np.random.default_rng(seed)
    x, W, R = rand_feat(r), Tensor(r.normal(size=(5, 4))), geom.random_rotation(r)
    diff = vn.vn_linear(Tensor(x.data @ R.T), W).data - vn.vn_linear(x, W).data @ R.T
    assert np.abs(diff).max() < 1e-10


def test_linear_gradient(rng):
    x = Tensor(rng.normal(size=(3, 4, 3)), requires_grad=True)
    W = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    assert T.check_gradients(lambda: T.reduce_sum(T.square(vn.vn_linear(x, W))), [x, W]) < 1e-4


def test_nonlinear_aligned_passthrough(rng):
    x = rand_feat(rng, c=3)
    np.testing.assert_array_equal(vn.vn_nonlinear(x, Tensor(np.eye(3))).data, x.data)


@given(seeds)
def test_nonlinear_equivariant(seed):
    r = np.random.default_rng(seed)
    x, U, R = rand_feat(r), Tensor(r.normal(size=(4, 4))), geom.random_rotation(r)
    diff = vn.vn_nonlinear(Tensor(x.data @ R.T), U).data - vn.vn_nonlinear(x, U).data @ R.T
    assert np.abs(diff).max() < 1e-10


def test_nonlinear_slope_one_is_identity(rng):
    x = rand_feat(rng)
    out = vn.vn_nonlinear(x, Tensor(rng.normal(size=(4, 4))), slope=1.0)
    np.testing.assert_allclose(out.data, x.data, atol=1e-15)


def test_nonlinear_gradient(rng):
    x = Tensor(rng.normal(size=(3, 4, 3)), requires_grad=True)
    U = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    assert T.check_gradients(lambda: T.reduce_sum(T.square(vn.vn_nonlinear(x, U))), [x, U]) < 1e-4


@pytest.fixture(scope="module")
def enc():
    return vn.VnEncoder(np.random.default_rng(0))


@pytest.fixture(scope="module")
def cloud():
    return shapes.random_shape("chair", 4, n_points=200).cloud.points


def test_translation_decoupling(enc, cloud):
    t = np.array([0.3, -1.2, 2.0])
    T0, V0, _ = vn.vnt_decouple_translation(cloud, enc.offset)
    T1, V1, _ = vn.vnt_decouple_translation(cloud + t, enc.offset)
    np.testing.assert_allclose(T1.data - T0.data, t, atol=1e-9)
    np.testing.assert_allclose(V1.data, V0.data, atol=1e-9)


def test_translation_sane_at_init(enc):
    cube = np.random.default_rng(1).uniform(-0.5, 0.5, size=(300, 3))
    T_pred, _, _ = vn.vnt_decouple_translation(cube, enc.offset)
    radius = np.linalg.norm(cube, axis=1).max()
    assert np.all(np.isfinite(T_pred.data)) and np.linalg.norm(T_pred.data) <= 10 * radius


def test_rotation_equivariance(enc, cloud, rng):
    R = geom.random_rotation(rng)
    _, Vp, _ = vn.vnt_decouple_translation(cloud, enc.offset)
    _, Vr, _ = vn.vnt_decouple_translation(cloud @ R.T, enc.offset)
    R0, VR0 = vn.extract_rotation(Vp, enc.feat, enc.rot)
    R1, VR1 = vn.extract_rotation(Vr, enc.feat, enc.rot)
    np.testing.assert_allclose(VR1.data, VR0.data @ R.T, atol=1e-9)
    np.testing.assert_allclose(R1.data, R0.data @ R.T, atol=1e-9)
    np.testing.assert_allclose(VR1.data.mean(axis=0), VR0.data.mean(axis=0) @ R.T, atol=1e-9)


def test_readout_invariant(enc, rng):
    V = Tensor(rng.normal(size=(10, 64, 3)))
    R = geom.random_rotation(rng)
    a = vn.invariant_readout(V, enc.inv).data
    b = vn.invariant_readout(Tensor(V.data @ R.T), enc.inv).data
    assert a.shape == (10, 64 * 3)
    assert np.abs(a - b).max() < 1e-9


def test_readout_gram_products():
    # one point, three channels; the frame MLP copies channels 0..2 of its input
    v = np.array([[1.0, 0, 0], [0, 2.0, 0], [1.0, 1.0, 1.0]])
    inv = vn.VnMlp([6, 3], np.random.default_rng(0))
    inv.W[0].data[...] = np.hstack([np.eye(3), np.zeros((3, 3))])
    out = vn.invariant_readout(Tensor(v[None]), inv).data.reshape(3, 3)
    np.testing.assert_allclose(out, v @ v.T)


def test_scale_normalize_unit_rows(rng):
    s, F, zero = vn.scale_normalize(Tensor(rng.normal(size=(7, 5))))
    np.testing.assert_allclose(np.linalg.norm(F.data, axis=1), 1.0)
    assert not zero.any() and s.data > 0


def test_scale_normalize_zero_row(rng):
    x = rng.normal(size=(4, 5))
    x[2] = 0
    _, F, zero = vn.scale_normalize(Tensor(x))
    np.testing.assert_array_equal(F.data[2], 0.0)
    assert zero.tolist() == [False, False, True, False]


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_scale_invariance(enc, cloud, lam):
    a, b = enc(cloud), enc(lam * cloud)
    assert np.abs(a.F.data - b.F.data).max() < 1e-6
    assert float(b.s_raw.data) == pytest.approx(float(a.s_raw.data) / lam, rel=1e-9)


@settings(max_examples=8)
@given(seeds)
def test_features_pose_invariant(seed):
    r = np.random.default_rng(seed)
    net = vn.VnEncoder(np.random.default_rng(seed % 7))
    pts = shapes.random_shape("table", seed, n_points=128).cloud.points
    moved = float(r.uniform(0.3, 3)) * pts @ geom.random_rotation(r).T + r.normal(size=3)
    assert np.abs(net(pts).F.data - net(moved).F.data).max() < 1e-5


def test_lift_duplicate_points():
    pts = np.vstack([np.zeros((5, 3)), np.eye(3)])
    edges, deg = vn.lift(pts)
    assert edges.shape == (8, 8, 3) and not deg
    _, deg = vn.lift(np.zeros((6, 3)))
    assert deg


def test_channel_mismatch(enc):
    with pytest.raises(T.DimensionError):
        enc.feat(Tensor(np.zeros((3, 4, 3))))


@given(seeds)
def test_orthonormalize_is_rotation(seed):
    r = np.random.default_rng(seed)
    Q = vn.orthonormalize(Tensor(r.normal(size=(3, 3)))).data
    assert np.abs(Q @ Q.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(Q) - 1) < 1e-12


@given(seeds)
def test_orthonormalize_equivariant(seed):
    r = np.random.default_rng(seed)
    R, G = r.normal(size=(3, 3)), geom.random_rotation(r)
    diff = vn.orthonormalize(Tensor(R @ G.T)).data - vn.orthonormalize(Tensor(R)).data @ G.T
    assert np.abs(diff).max() < 1e-10


def test_orthonormalize_fixes_rotations(rng):
    G = geom.random_rotation(rng)
    np.testing.assert_allclose(vn.orthonormalize(Tensor(G)).data, G, atol=1e-12)


def test_orthonormalize_parallel_rows():
    with pytest.raises(T.NumericError):
        vn.orthonormalize(Tensor(np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1]])))


def test_orthonormalize_gradient(rng):
    R = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    W = Tensor(rng.normal(size=(3, 3)))
    assert T.check_gradients(lambda: T.reduce_sum(vn.orthonormalize(R) * W), [R]) < 1e-4
