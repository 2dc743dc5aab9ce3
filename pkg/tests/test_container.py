import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from acvae import container


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]),
                                  hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                       max_size=4))
@settings(max_examples=60, deadline=None)
def test_round_trip_is_bit_exact(arrays):
    blob = container.dumps(arrays, {"seed": 3})
    back, meta = container.loads(blob)
    assert meta == {"seed": 3}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    assert container.dumps(back, meta) == blob


def test_magic_and_truncation(tmp_path):
    blob = container.dumps({"w": np.arange(6.0)}, {})
    assert blob.startswith(b"ACVAE1")
    with pytest.raises(container.ContainerError, match="magic"):
        container.loads(b"ACVAE2" + blob[6:])
    for cut in (3, 10, len(blob) - 1):
        with pytest.raises(container.ContainerError):
            container.loads(blob[:cut])


def test_buffers_are_little_endian():
    blob = container.dumps({"x": np.array([1], dtype=">i8")})
    assert blob.endswith((1).to_bytes(8, "little"))
