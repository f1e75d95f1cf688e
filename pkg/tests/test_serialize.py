import numpy as np
import pytest

from incdet3d.errors import FormatError
from incdet3d.rng import SeededRng
from incdet3d.serialize import (pack_container, read_container, unpack_container,
                                write_container)

MAGIC = b"TESTBOX\0"


def random_payload(seed):
    rng = SeededRng(seed)
    arrays = {
        "weights": rng.normal((4, 5)),
        "bias": rng.normal((7,)),
        "ids": np.arange(6, dtype=np.int64).reshape(2, 3),
        "scalar": np.float64(rng.uniform()).reshape(()),
    }
    meta = {"seed": seed, "note": "round trip", "nested": {"a": [1, 2, 3]}}
    return arrays, meta


def test_round_trip_values_and_meta():
    for seed in range(10):
        arrays, meta = random_payload(seed)
        buf = pack_container(MAGIC, 3, arrays, meta)
        out, got_meta = unpack_container(buf, MAGIC, 3)
        assert got_meta == meta
        assert set(out) == set(arrays)
        for name in arrays:
            assert out[name].dtype == arrays[name].dtype
            assert np.array_equal(out[name], arrays[name])


def test_pack_is_deterministic_and_order_independent():
    arrays, meta = random_payload(1)
    a = pack_container(MAGIC, 1, arrays, meta)
    b = pack_container(MAGIC, 1, dict(reversed(list(arrays.items()))), meta)
    assert a == b  # names are sorted inside


def test_file_round_trip(tmp_path):
    arrays, meta = random_payload(2)
    path = tmp_path / "payload.bin"
    write_container(path, MAGIC, 2, arrays, meta)
    out, got_meta = read_container(path, MAGIC, 2)
    assert got_meta == meta
    assert all(np.array_equal(out[k], arrays[k]) for k in arrays)
    assert not path.with_suffix(".bin.tmp").exists()


def test_bad_magic_rejected():
    buf = pack_container(MAGIC, 1, {"x": np.zeros(2)}, {})
    with pytest.raises(FormatError, match="magic"):
        unpack_container(buf, b"OTHERBOX", 1)


def test_wrong_version_rejected():
    buf = pack_container(MAGIC, 1, {"x": np.zeros(2)}, {})
    with pytest.raises(FormatError, match="version"):
        unpack_container(buf, MAGIC, 2)


def test_truncation_rejected_everywhere():
    arrays, meta = random_payload(3)
    buf = pack_container(MAGIC, 1, arrays, meta)
    # every strict prefix must fail, never return garbage
    for cut in (0, 4, 15, 16, 40, len(buf) // 2, len(buf) - 1):
        with pytest.raises(FormatError):
            unpack_container(buf[:cut], MAGIC, 1)


def test_trailing_bytes_rejected():
    buf = pack_container(MAGIC, 1, {"x": np.zeros(3)}, {})
    with pytest.raises(FormatError, match="trailing"):
        unpack_container(buf + b"\x00", MAGIC, 1)


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError, match="dtype"):
        pack_container(MAGIC, 1, {"x": np.zeros(2, dtype=np.float32)}, {})


def test_magic_must_be_eight_bytes():
    with pytest.raises(FormatError):
        pack_container(b"SHORT", 1, {}, {})


def test_garbage_header_rejected():
    buf = bytearray(pack_container(MAGIC, 1, {"x": np.zeros(2)}, {}))
    buf[17] = 0xFF  # corrupt the json header
    with pytest.raises(FormatError):
        unpack_container(bytes(buf), MAGIC, 1)


def test_empty_arrays_allowed():
    buf = pack_container(MAGIC, 1, {}, {"only": "meta"})
    arrays, meta = unpack_container(buf, MAGIC, 1)
    assert arrays == {} and meta == {"only": "meta"}
