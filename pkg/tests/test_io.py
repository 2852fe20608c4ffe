import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mno.datagen import GenSpec, gen_sphere_flow
from mno.geometry import DataError, PointSample
from mno.io import (
    parse_keyvalue,
    read_checkpoint,
    read_keyvalue,
    read_pointset,
    write_checkpoint,
    write_keyvalue,
    write_pointset,
)


def _same(a, b):
    for x, y in ((a.positions, b.positions), (a.features, b.features), (a.targets, b.targets)):
        assert x.shape == y.shape
        assert x.astype(np.float32).tobytes() == y.tobytes()
    assert a.name == b.name


def test_round_trip_bit_exact(tmp_path):
    s = gen_sphere_flow(GenSpec(n=256, seed=1))
    write_pointset(s, tmp_path / "a.mno")
    _same(s, read_pointset(tmp_path / "a.mno"))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 3), st.integers(1, 4), st.integers(0, 2**31 - 1),
       st.text(max_size=12))
def test_round_trip_property(tmp_path_factory, n, f, o, seed, name):
    r = np.random.default_rng(seed)
    s = PointSample(*(r.normal(size=(n, c)).astype(np.float32) * 1e3 for c in (3, f, o)), name=name)
    path = tmp_path_factory.mktemp("rt") / "s.mno"
    write_pointset(s, path)
    _same(s, read_pointset(path))


def test_layout(tmp_path):
    s = PointSample(np.zeros((2, 3), np.float32), np.zeros((2, 1), np.float32),
                    np.ones((2, 1), np.float32), "ab")
    write_pointset(s, tmp_path / "x.mno")
    raw = (tmp_path / "x.mno").read_bytes()
    assert raw[:4] == b"MNO1"
    assert struct.unpack("<III", raw[4:16]) == (2, 1, 1)
    assert len(raw) == 16 + 4 * (6 + 2 + 2) + 4 + 2
    assert raw[-6:] == struct.pack("<I", 2) + b"ab"


def _written(tmp_path):
    s = gen_sphere_flow(GenSpec(n=64, seed=0))
    p = tmp_path / "s.mno"
    write_pointset(s, p)
    return p, p.read_bytes()


def test_bad_magic(tmp_path):
    p, raw = _written(tmp_path)
    p.write_bytes(b"MNO2" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        read_pointset(p)


def test_truncated_names_lengths(tmp_path):
    p, raw = _written(tmp_path)
    p.write_bytes(raw[:1000])
    with pytest.raises(DataError, match=r"expected \d+ bytes, file has 1000"):
        read_pointset(p)
    p.write_bytes(raw[:10])
    with pytest.raises(DataError, match="truncated"):
        read_pointset(p)


def test_non_finite_payload(tmp_path):
    p, raw = _written(tmp_path)
    buf = bytearray(raw)
    buf[16 + 4 * 5:16 + 4 * 6] = struct.pack("<f", float("nan"))
    p.write_bytes(bytes(buf))
    with pytest.raises(DataError, match="byte 36"):
        read_pointset(p)


def test_trailing_bytes(tmp_path):
    p, raw = _written(tmp_path)
    p.write_bytes(raw + b"\0")
    with pytest.raises(DataError, match="trailing"):
        read_pointset(p)


def test_keyvalue(tmp_path):
    write_keyvalue({"a": 1, "b": "x=y"}, tmp_path / "m")
    assert read_keyvalue(tmp_path / "m") == {"a": "1", "b": "x=y"}
    assert parse_keyvalue("# c\n\n k = v \n") == {"k": "v"}
    with pytest.raises(ValueError, match=":2:"):
        parse_keyvalue("a=1\nbroken\n")


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5).reshape(())}
    write_checkpoint(tmp_path / "c", arrays, {"config.dim": 4})
    header, back = read_checkpoint(tmp_path / "c")
    assert header == {"config.dim": "4"}
    np.testing.assert_array_equal(back["w"], arrays["w"])
    assert back["s"].shape == ()
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "d").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "d")
    (tmp_path / "e").write_bytes(raw[:-3])
    with pytest.raises(DataError, match="truncated"):
        read_checkpoint(tmp_path / "e")
