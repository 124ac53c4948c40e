import numpy as np
import pytest

from cagematch import geom, parts, shapes
from cagematch import tensor as T
from cagematch.canon import Canonicalizer
from cagematch.geom import PreconditionError
from cagematch.parts import CenterHead, SegHead
from cagematch.tensor import Tensor


@pytest.fixture(scope="module")
def heads():
    r = np.random.default_rng(3)
    return Canonicalizer(r), SegHead(195, 8, r), CenterHead(195, 8, r)


def test_rows_stochastic(heads, rng):
    _, seg_head, _ = heads
    seg = parts.segment(Tensor(rng.normal(size=(20, 195))), seg_head)
    np.testing.assert_allclose(seg.data.sum(axis=1), 1.0, atol=1e-12)


def test_pose_invariant(heads, rng):
    net, seg_head, c_head = heads
    pts = shapes.random_shape("table", 1, n_points=200).cloud.points
    moved = 0.8 * pts @ geom.random_rotation(rng).T + 0.05
    a, b = net(pts), net(moved)
    da, db = parts.point_descriptor(a.F, a.S_c), parts.point_descriptor(b.F, b.S_c)
    assert np.abs(parts.segment(da, seg_head).data - parts.segment(db, seg_head).data).max() <= 1e-5
    Ka, Kb = parts.centers(da, c_head), parts.centers(db, c_head)
    assert Ka.shape == (8, 3) and np.abs(Ka.data - Kb.data).max() <= 1e-5


def test_centers_of_constant_predictions(rng):
    head = CenterHead(4, 2, rng)
    for W in head.W:
        W.data[...] = 0.0
    head.b[-1].data[...] = [1, 2, 3, 4, 5, 6]
    K = parts.centers(Tensor(rng.normal(size=(7, 4))), head)
    np.testing.assert_array_equal(K.data, [[1, 2, 3], [4, 5, 6]])


def test_loss_seg_zero_at_barycenters(rng):
    seg = Tensor(rng.dirichlet(np.ones(3), size=15))
    S = Tensor(rng.normal(size=(15, 3)))
    B, _ = parts.barycenters(seg, S)
    assert float(parts.loss_seg(B, seg, S).data) < 1e-12


def test_single_part_centroid(rng):
    S = rng.normal(size=(10, 3))
    B, valid = parts.barycenters(np.ones((10, 1)), S)
    np.testing.assert_allclose(B.data[0], S.mean(axis=0))
    assert valid.all()


def test_loss_seg_skips_empty_part(rng):
    seg = np.zeros((6, 2))
    seg[:, 0] = 1
    S = Tensor(rng.normal(size=(6, 3)))
    K = Tensor(np.vstack([S.data.mean(axis=0), [100.0, 0, 0]]))
    assert float(parts.loss_seg(K, Tensor(seg), S).data) < 1e-12


def test_loss_seg_gradients(rng):
    K = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    logits = Tensor(rng.normal(size=(12, 3)), requires_grad=True)
    S = Tensor(rng.normal(size=(12, 3)))
    assert T.check_gradients(lambda: parts.loss_seg(K, T.softmax(logits), S), [K, logits]) < 1e-4


class TestCcen:
    def test_identity(self, rng):
        K = rng.normal(size=(8, 3))
        assert float(parts.loss_ccen(Tensor(K), Tensor(K)).data) == 0.0

    def test_single_center(self):
        d = 0.3
        val = float(parts.loss_ccen(Tensor([[0, 0, 0.0]]), Tensor([[d, 0, 0]])).data)
        assert val == pytest.approx(2 * d * d)

    def test_equals_chamfer(self, rng):
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        assert float(parts.loss_ccen(Tensor(a), Tensor(b)).data) == geom.chamfer_value(a, b)


class TestCseg:
    def test_identity(self, rng):
        seg = rng.dirichlet(np.ones(4), size=10)
        ids = np.arange(10)
        assert float(parts.loss_cseg(Tensor(seg), Tensor(seg), ids).data) == 0.0

    def test_one_row_differs(self):
        full = np.tile([1.0, 0.0], (10, 1))
        part = full.copy()
        part[3] = [0.0, 1.0]
        val = float(parts.loss_cseg(Tensor(full), Tensor(part), np.arange(10)).data)
        assert val == pytest.approx(2 / (10 * 2))

    def test_column_permutation(self, rng):
        full = rng.dirichlet(np.ones(4), size=12)
        ids = np.array([0, 3, 4, 7, 11])
        part = rng.dirichlet(np.ones(4), size=5)
        perm = rng.permutation(4)
        a = float(parts.loss_cseg(Tensor(full), Tensor(part), ids).data)
        b = float(parts.loss_cseg(Tensor(full[:, perm]), Tensor(part[:, perm]), ids).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_unmatched_mode(self, rng):
        seg = rng.dirichlet(np.ones(3), size=6)
        assert float(parts.loss_cseg(Tensor(seg), Tensor(seg[::-1]), np.arange(6), matched=False).data) == 0.0

    def test_requires_ids(self, rng):
        with pytest.raises(PreconditionError):
            parts.loss_cseg(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))), None)


def test_descriptor_shape_and_detached(rng):
    F = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
    S = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
    d = parts.point_descriptor(F, S)
    assert d.shape == (9, 7)
    np.testing.assert_array_equal(d.data[:, 4:], S.data)
    T.reduce_sum(d).backward()
    assert S.grad is None and F.grad is not None
    with pytest.raises(T.DimensionError):
        parts.point_descriptor(F, S.data[:5])


def test_compact_uniform_is_one(rng):
    S = rng.normal(size=(30, 3))
    assert abs(float(parts.loss_compact(np.full((30, 4), 0.25), S).data) - 1.0) < 1e-12


def test_compact_hard_clusters(rng):
    centres = np.array([[-5.0, 0, 0], [5.0, 0, 0]])
    lab = np.repeat([0, 1], 20)
    S = centres[lab] + 0.1 * rng.normal(size=(40, 3))
    seg = np.eye(2)[lab]
    assert float(parts.loss_compact(seg, S).data) < 5e-3
    assert float(parts.loss_compact(np.full_like(seg, 0.5), S).data) > 0.99


def test_compact_scale_free(rng):
    S = rng.normal(size=(25, 3))
    seg = rng.dirichlet(np.ones(3), size=25)
    a, b = parts.loss_compact(seg, S).data, parts.loss_compact(seg, 7.0 * S + 2).data
    assert abs(float(a) - float(b)) < 1e-12


def test_compact_gradient(rng):
    logits = Tensor(rng.normal(size=(12, 3)), requires_grad=True)
    S = rng.normal(size=(12, 3))
    assert T.check_gradients(lambda: parts.loss_compact(T.softmax(logits), S), [logits]) < 1e-4


def test_compact_needs_spread():
    with pytest.raises(PreconditionError):
        parts.loss_compact(np.ones((5, 1)), np.zeros((5, 3)))
