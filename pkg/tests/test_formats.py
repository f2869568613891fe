import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msvm import formats as F


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(allow_nan=True, allow_infinity=False, width=64)))
def test_map_csv_roundtrip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("m") / "m.csv"
    F.write_map_csv(path, values, (0, 1), "row_fwd")
    meta, back = F.read_map_csv(path)
    assert meta == {"H": values.shape[0], "W": values.shape[1], "anchor": (0, 1), "route": "row_fwd"}
    np.testing.assert_array_equal(back, values)


def test_map_csv_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        F.read_map_csv(tmp_path / "x.csv")


def test_pgm(tmp_path):
    v = np.array([[0.0, 0.5], [1.0, np.nan]])
    F.write_pgm(tmp_path / "a.pgm", v, vmax=1.0)
    assert F.read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128], [255, 0]]
    assert (tmp_path / "a.pgm").read_text().startswith("P2\n2 2\n255\n")


def test_pgm_auto_scale(tmp_path):
    F.write_pgm(tmp_path / "b.pgm", np.array([[2.0, 4.0]]))
    assert F.read_pgm(tmp_path / "b.pgm").tolist() == [[128, 255]]


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(3))))
def test_ppm_roundtrip(tmp_path_factory, pix):
    path = tmp_path_factory.mktemp("p") / "i.ppm"
    F.write_ppm(path, pix / 255.0)
    np.testing.assert_array_equal(np.rint(F.read_ppm(path) * 255).astype(np.uint8), pix)


def test_ppm_comment_header(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff")
    np.testing.assert_allclose(F.read_ppm(path)[0, 0], [0, 128 / 255, 1])


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n\x00", b"P6\n1", b"P6\n1 1\n65535\n\x00"])
def test_ppm_errors(tmp_path, blob):
    path = tmp_path / "bad.ppm"
    path.write_bytes(blob)
    with pytest.raises(OSError):
        F.read_ppm(path)


def test_trace_roundtrip(tmp_path):
    F.write_trace_csv(tmp_path / "t.csv", [1.0, 0.5, 0.25], {0: 0.5, 2: 1.0})
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,loss,acc"
    loss, acc = F.read_trace_csv(tmp_path / "t.csv")
    assert loss == [1.0, 0.5, 0.25] and acc == {0: 0.5, 2: 1.0}
