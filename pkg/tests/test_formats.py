import numpy as np
import pytest

from cagematch import formats
from cagematch.formats import FormatError


def roundtrip_bytes(tmp_path, write, read, *payload):
    p1, p2 = tmp_path / "a", tmp_path / "b"
    write(p1, *payload)
    back = read(p1)
    back = back if isinstance(back, tuple) else (back,)
    write(p2, *[b for b in back if b is not None])
    assert p1.read_bytes() == p2.read_bytes()
    return back


def test_cloud_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(17, 3))
    back, ids = roundtrip_bytes(tmp_path, formats.write_cloud, formats.read_cloud, pts)
    np.testing.assert_allclose(back, pts.astype(np.float32))
    assert ids is None


def test_cloud_with_ids(tmp_path, rng):
    pts, ids = rng.normal(size=(5, 3)), np.array([4, 1, 9, 0, 2])
    formats.write_cloud(tmp_path / "c", pts, ids)
    back, ids2 = formats.read_cloud(tmp_path / "c")
    np.testing.assert_array_equal(ids2, ids)


def test_mesh_roundtrip(tmp_path, rng):
    v, f = rng.normal(size=(4, 3)), np.array([[0, 1, 2], [0, 2, 3]])
    bv, bf = roundtrip_bytes(tmp_path, formats.write_mesh, formats.read_mesh, v, f)
    np.testing.assert_array_equal(bf, f)


def test_labels_roundtrip(tmp_path):
    lab = np.array([0, 3, 7, 65535])
    (back,) = roundtrip_bytes(tmp_path, formats.write_labels, formats.read_labels, lab)
    np.testing.assert_array_equal(back, lab)


def test_token_cage_mvc_roundtrip(tmp_path, rng):
    Q, w = rng.normal(size=(8, 4)), rng.dirichlet(np.ones(8))
    bq, bw = roundtrip_bytes(tmp_path, formats.write_token, formats.read_token, Q, w)
    np.testing.assert_array_equal(bq, Q)
    np.testing.assert_array_equal(bw, w)
    v, f = rng.normal(size=(26, 3)), rng.integers(0, 26, size=(48, 3))
    cv, cf = roundtrip_bytes(tmp_path, formats.write_cage, formats.read_cage, v, f)
    np.testing.assert_array_equal(cv, v)
    W = rng.random(size=(10, 26))
    (bW,) = roundtrip_bytes(tmp_path, formats.write_mvc, formats.read_mvc, W)
    np.testing.assert_array_equal(bW, W)


def test_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE!" + b"\0" * 8)
    with pytest.raises(FormatError):
        formats.read_cloud(p)


def test_truncated(tmp_path, rng):
    p = tmp_path / "x"
    formats.write_cloud(p, rng.normal(size=(10, 3)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        formats.read_cloud(p)
