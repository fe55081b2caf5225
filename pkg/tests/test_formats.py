import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shapesync.errors import ParseError
from shapesync.formats import (csv_text, fmat_bytes, parse_fmat, read_csv, read_fmat, read_index_map, read_json,
                               write_csv, write_fmat, write_index_map, write_json)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def test_fmat_header_layout():
    data = fmat_bytes(np.array([[1.0, 2.0, 3.0]]))
    magic, version, rows, cols = struct.unpack_from("<4sHII", data)
    assert (magic, version, rows, cols) == (b"FMAT", 1, 1, 3)
    assert len(data) == 4 + 2 + 4 + 4 + 8 * 3
    assert np.frombuffer(data[14:], "<f8").tolist() == [1.0, 2.0, 3.0]


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=7), elements=finite))
def test_fmat_round_trip_bit_exact(a):
    b = parse_fmat(fmat_bytes(a))
    assert b.shape == a.shape
    assert b.tobytes() == np.ascontiguousarray(a).tobytes()


def test_fmat_file_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((5, 4))
    write_fmat(tmp_path / "a.fmat", a)
    assert np.array_equal(read_fmat(tmp_path / "a.fmat"), a)
    assert read_fmat(tmp_path / "a.fmat").flags.writeable


@pytest.mark.parametrize("blob", [b"FMA", b"XMAT" + bytes(10), fmat_bytes(np.ones((2, 2)))[:-1],
                                  b"FMAT" + struct.pack("<HII", 2, 0, 0)])
def test_fmat_rejects_bad_input(blob):
    with pytest.raises(ParseError):
        parse_fmat(blob)


def test_index_map_round_trip(tmp_path):
    idx = [3, 0, 2, 1]
    write_index_map(tmp_path / "m.txt", idx)
    assert (tmp_path / "m.txt").read_text() == "3\n0\n2\n1\n"
    assert read_index_map(tmp_path / "m.txt").tolist() == idx


@pytest.mark.parametrize("text", ["1\nx\n", "1\n-2\n"])
def test_index_map_errors(tmp_path, text):
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(ParseError):
        read_index_map(tmp_path / "m.txt")


def test_json_and_csv(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5]})
    assert read_json(tmp_path / "a.json") == {"a": [1.5], "b": 1}
    x = 0.1 + 0.2
    write_csv(tmp_path / "a.csv", ["k", "v"], [["x", x]])
    rows = read_csv(tmp_path / "a.csv")
    assert float(rows[0]["v"]) == x
    assert csv_text(["a"], [[1]]) == "a\n1\n"


def test_atomic_write_leaves_no_temp_files(tmp_path):
    for _ in range(3):
        write_fmat(tmp_path / "x.fmat", np.eye(2))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.fmat"]
