import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from m2hx import tensorio
from m2hx.tensorio import CorruptContainerError


@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip_bitwise(arr):
    back = tensorio.decode(tensorio.encode(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_file_round_trip(tmp_path, rng):
    arr = rng.standard_normal((2, 3, 4)).astype(np.float32)
    tensorio.save(tmp_path / "a.tns", arr)
    assert np.array_equal(tensorio.load(tmp_path / "a.tns"), arr)


def test_little_endian_header():
    buf = tensorio.encode(np.array([1.0, 2.0]))
    assert buf.startswith(tensorio.MAGIC + b"dtype=f64 shape=2\n")
    assert buf[-8:] == np.array(2.0, "<f8").tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-1],                           # truncated payload
    lambda b: b"X" + b[1:],                     # bad magic
    lambda b: b.replace(b"f64", b"f16"),        # unknown dtype
    lambda b: b[:len(tensorio.MAGIC) + 3],      # header line cut
])
def test_corruption_detected(mutate):
    with pytest.raises(CorruptContainerError):
        tensorio.decode(mutate(tensorio.encode(np.ones((2, 2)))))


def test_ints_stored_as_f64():
    assert tensorio.decode(tensorio.encode(np.arange(3))).dtype == np.float64
