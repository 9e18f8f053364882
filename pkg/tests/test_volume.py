import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainstrip.volume import Volume3D, VolumeError, as_mask, resample_to_grid, whiten


def _trilinear_oracle(data, target):
    """Per-voxel trilinear sample at corner-aligned coordinates, written out by hand."""
    out = np.zeros(target)
    nin = data.shape

    def coord(i, n_in, n_out):
        return (n_in - 1) / 2.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)

    for i in range(target[0]):
        for j in range(target[1]):
            for k in range(target[2]):
                c = [coord(v, nin[a], target[a]) for a, v in enumerate((i, j, k))]
                total = 0.0
                for corner in range(8):
                    w = 1.0
                    idx = []
                    for a in range(3):
                        lo = min(int(np.floor(c[a])), max(nin[a] - 2, 0))
                        f = c[a] - lo
                        up = (corner >> a) & 1
                        idx.append(min(lo + up, nin[a] - 1))
                        w *= f if up else 1.0 - f
                    total += w * data[tuple(idx)]
                out[i, j, k] = total
    return out


def test_rejects_bad_shapes_and_spacing():
    with pytest.raises(VolumeError):
        Volume3D(np.zeros((3, 3)))
    with pytest.raises(VolumeError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(VolumeError):
        Volume3D(np.zeros((2, 2, 2), dtype=np.int64))


def test_data_is_copied_and_frozen():
    raw = np.zeros((2, 3, 4))
    vol = Volume3D(raw)
    raw[0, 0, 0] = 5
    assert vol.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1
    assert vol.dims == (2, 3, 4)


def test_bool_becomes_mask():
    vol = Volume3D(np.ones((2, 2, 2), dtype=bool))
    assert vol.dtype == np.uint8 and vol.is_binary()


def test_trilinear_matches_oracle():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(5, 6, 4))
    vol = Volume3D(data, (1.0, 2.0, 0.5), (3.0, -1.0, 0.0))
    for target in [(7, 3, 9), (5, 6, 4), (2, 11, 4)]:
        got = resample_to_grid(vol, target).data
        np.testing.assert_allclose(got, _trilinear_oracle(data, target), atol=1e-12)


def test_resample_keeps_extent():
    vol = Volume3D(np.zeros((10, 5, 3)), (2.0, 1.0, 3.0), (1.0, 2.0, 3.0))
    out = resample_to_grid(vol, (19, 9, 5))
    assert out.spacing == (1.0, 0.5, 1.5)
    assert out.origin == vol.origin


def test_identity_resample():
    rng = np.random.default_rng(1)
    vol = Volume3D(rng.normal(size=(4, 5, 6)))
    assert np.array_equal(resample_to_grid(vol, vol.dims).data, vol.data)


def test_nearest_keeps_masks_binary():
    rng = np.random.default_rng(2)
    mask = Volume3D((rng.uniform(size=(9, 8, 7)) > 0.5).astype(np.uint8))
    out = resample_to_grid(mask, (13, 4, 20), "nearest")
    assert out.dtype == np.uint8 and out.is_binary()
    # corners coincide
    assert out.data[0, 0, 0] == mask.data[0, 0, 0]
    assert out.data[-1, -1, -1] == mask.data[-1, -1, -1]


def test_trilinear_to_single_voxel_is_rejected():
    with pytest.raises(VolumeError):
        resample_to_grid(Volume3D(np.zeros((4, 4, 4))), (1, 4, 4))


def test_float32_stays_float32():
    out = resample_to_grid(Volume3D(np.ones((3, 3, 3), dtype=np.float32)), (5, 5, 5))
    assert out.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.integers(2, 6)] * 3),
    st.tuples(*[st.integers(2, 9)] * 3),
    st.integers(0, 2**31 - 1),
)
def test_trilinear_stays_within_input_range(src, dst, seed):
    data = np.random.default_rng(seed).uniform(-3, 3, size=src)
    out = resample_to_grid(Volume3D(data), dst).data
    assert out.min() >= data.min() - 1e-12
    assert out.max() <= data.max() + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 3), st.floats(-100, 100))
def test_constant_volume_resamples_to_constant(dst, value):
    out = resample_to_grid(Volume3D(np.full((4, 4, 4), value)), dst, "nearest" if 1 in dst else "trilinear")
    np.testing.assert_allclose(out.data, value)


def test_whiten_moments():
    rng = np.random.default_rng(3)
    w = whiten(Volume3D(rng.gamma(2.0, 3.0, size=(6, 7, 8)))).data
    assert abs(w.mean()) < 1e-12
    assert abs(w.std() - 1.0) < 1e-12


def test_whiten_constant_fails():
    with pytest.raises(VolumeError):
        whiten(Volume3D(np.full((3, 3, 3), 2.0)))


def test_as_mask_uses_like_grid():
    like = Volume3D(np.zeros((2, 2, 2)), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
    m = as_mask(np.ones((2, 2, 2), dtype=bool), like)
    assert m.spacing == like.spacing and m.origin == like.origin and m.dtype == np.uint8
