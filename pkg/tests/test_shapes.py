import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagematch import shapes
from cagematch.geom import PreconditionError


def test_determinism():
    a = shapes.random_shape("chair", 11)
    b = shapes.random_shape("chair", 11)
    np.testing.assert_array_equal(a.mesh.vertices, b.mesh.vertices)
    np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_table_has_five_parts():
    s = shapes.random_shape("table", 3)
    assert len(s.parts) == 5
    assert s.parts[0] == "top" and sum(p.startswith("leg") for p in s.parts) == 4


@pytest.mark.parametrize("family", shapes.FAMILIES)
def test_point_count_and_labels(family):
    s = shapes.random_shape(family, 5)
    assert len(s.cloud) == shapes.N_POINTS
    assert s.labels.shape == (shapes.N_POINTS,)
    assert set(np.unique(s.labels)) <= set(range(len(s.parts)))


@settings(max_examples=10)
@given(st.sampled_from(shapes.FAMILIES), st.integers(0, 10**6))
def test_unit_diagonal(family, seed):
    pts = shapes.random_shape(family, seed, n_points=500).cloud.points
    diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    assert 0.999 <= diag <= 1.001
    np.testing.assert_allclose((pts.max(axis=0) + pts.min(axis=0)) / 2, 0.0, atol=1e-12)


def test_dataset_cycles_families():
    ds = shapes.dataset(6, seed=0, n_points=100)
    assert [s.family for s in ds] == list(shapes.FAMILIES) * 2


def test_unknown_family():
    with pytest.raises(PreconditionError):
        shapes.gen_shape("sofa", {}, 0)


def test_param_out_of_range():
    good = shapes.sample_params("table", np.random.default_rng(0))
    with pytest.raises(PreconditionError):
        shapes.gen_shape("table", {**good, "leg_h": 10.0}, 0)


def test_cabinet_doors():
    p = shapes.sample_params("cabinet", np.random.default_rng(2))
    one = shapes.gen_shape("cabinet", {**p, "n_doors": 1}, 0, 200)
    two = shapes.gen_shape("cabinet", {**p, "n_doors": 2}, 0, 200)
    assert len(two.parts) == len(one.parts) + 1
