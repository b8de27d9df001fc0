import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsynth.errors import DomainError, ShapeError, ValidationError
from ctsynth.volumes import (
    CtVolume,
    Domain,
    Plane,
    clip_and_normalize,
    denormalize_to_hu,
    extract_plane_slices,
    load_volume,
    resample_to_grid,
    save_volume,
)


def hu_volume(data, spacing=(1.0, 1.0, 1.0)):
    return CtVolume(np.asarray(data, dtype=np.float32), spacing, Domain.HU)


def rng_volume(shape=(8, 6, 4), seed=0, domain=Domain.UNIT):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.0, 1.0, shape).astype(np.float32)
    if domain is Domain.HU:
        data = data * 2000.0 - 1000.0
    return CtVolume(data, (1.0, 1.0, 2.0), domain)


class TestCtVolume:
    def test_rejects_non_3d(self):
        with pytest.raises(ShapeError):
            CtVolume(np.zeros((4, 4)), (1, 1, 1), Domain.HU)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValidationError):
            CtVolume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0), Domain.HU)
        with pytest.raises(ValidationError):
            CtVolume(np.zeros((2, 2, 2)), (1.0, math.nan, 1.0), Domain.HU)

    def test_unit_domain_bounds_checked(self):
        with pytest.raises(DomainError):
            CtVolume(np.full((2, 2, 2), 1.5), (1, 1, 1), Domain.UNIT)


class TestClipNormalize:
    @pytest.mark.parametrize(
        "hu,unit",
        [(-1500.0, 0.0), (-1000.0, 0.0), (0.0, 0.5), (1000.0, 1.0), (2000.0, 1.0)],
    )
    def test_fixed_points(self, hu, unit):
        v = clip_and_normalize(hu_volume(np.full((2, 2, 2), hu)))
        assert v.domain is Domain.UNIT
        assert v.data == pytest.approx(unit)

    @pytest.mark.parametrize("unit,hu", [(0.0, -1000.0), (1.0, 1000.0), (0.25, -500.0)])
    def test_denormalize_fixed_points(self, unit, hu):
        v = denormalize_to_hu(
            CtVolume(np.full((2, 2, 2), unit), (1, 1, 1), Domain.UNIT)
        )
        assert v.domain is Domain.HU
        assert v.data == pytest.approx(hu)

    def test_domain_preconditions(self):
        unit = rng_volume()
        with pytest.raises(DomainError):
            clip_and_normalize(unit)
        with pytest.raises(DomainError):
            denormalize_to_hu(rng_volume(domain=Domain.HU))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_identity_on_clipped_range(self, seed):
        v = rng_volume(seed=seed, domain=Domain.HU)
        back = denormalize_to_hu(clip_and_normalize(v))
        np.testing.assert_allclose(back.data, v.data, atol=1e-3)

    def test_idempotent_through_round_trip(self):
        v = rng_volume(seed=3, domain=Domain.HU)
        once = clip_and_normalize(v)
        twice = clip_and_normalize(denormalize_to_hu(once))
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


class TestResample:
    def test_identity_shape_is_noop(self):
        v = rng_volume((6, 5, 4), seed=1)
        out = resample_to_grid(v, (6, 5, 4))
        np.testing.assert_array_equal(out.data, v.data)
        assert out.spacing_mm == v.spacing_mm

    def test_constant_volume_stays_constant(self):
        v = CtVolume(np.full((6, 5, 4), 0.7, dtype=np.float32), (1, 1, 1), Domain.UNIT)
        out = resample_to_grid(v, (9, 3, 7))
        np.testing.assert_array_equal(out.data, np.full((9, 3, 7), np.float32(0.7)))

    def test_spacing_follows_shape_ratio(self):
        v = CtVolume(np.zeros((64, 64, 32), dtype=np.float32), (1.0, 1.0, 2.0), Domain.UNIT)
        out = resample_to_grid(v, (32, 32, 32))
        assert out.spacing_mm == (2.0, 2.0, 2.0)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))
    @settings(max_examples=30, deadline=None)
    def test_bounds_preserved(self, seed, tx, ty, tz):
        v = rng_volume((5, 7, 3), seed=seed)
        out = resample_to_grid(v, (tx, ty, tz))
        assert out.data.min() >= v.data.min() - 1e-6
        assert out.data.max() <= v.data.max() + 1e-6

    def test_unit_domain_survives(self):
        out = resample_to_grid(rng_volume(seed=9), (4, 4, 4))
        assert out.domain is Domain.UNIT


class TestPlaneSlices:
    def test_slice_counts_and_shapes(self):
        v = rng_volume((6, 5, 4))
        assert extract_plane_slices(v, Plane.XY).shape == (4, 6, 5)
        assert extract_plane_slices(v, Plane.YZ).shape == (6, 5, 4)
        assert extract_plane_slices(v, Plane.ZX).shape == (5, 4, 6)

    def test_slices_partition_the_volume(self):
        v = rng_volume((6, 5, 4), seed=5)
        total = v.data.astype(np.float64).sum()
        for plane in Plane:
            stack = extract_plane_slices(v, plane)
            assert stack.shape[0] * stack.shape[1] * stack.shape[2] == v.data.size
            assert np.isclose(stack.astype(np.float64).sum(), total)

    def test_slices_are_views(self):
        v = rng_volume((6, 5, 4))
        for plane in Plane:
            assert np.shares_memory(extract_plane_slices(v, plane), v.data)

    def test_slice_ordering_matches_index(self):
        v = rng_volume((6, 5, 4), seed=2)
        xy = extract_plane_slices(v, Plane.XY)
        np.testing.assert_array_equal(xy[2], v.data[:, :, 2])


class TestVolumeIO:
    @pytest.mark.parametrize("name", ["v.nii", "v.nii.gz", "v.npz"])
    def test_round_trip(self, tmp_path, name):
        v = rng_volume((5, 6, 7), seed=11, domain=Domain.HU)
        path = save_volume(v, tmp_path / name)
        back = load_volume(path)
        np.testing.assert_array_equal(back.data, v.data.astype(np.float32))
        assert back.spacing_mm == pytest.approx(v.spacing_mm)
        assert back.domain is v.domain
        assert back.orientation == v.orientation

    def test_unit_domain_round_trips(self, tmp_path):
        v = rng_volume(seed=13)
        back = load_volume(save_volume(v, tmp_path / "unit.nii.gz"))
        assert back.domain is Domain.UNIT

    def test_writes_are_byte_deterministic(self, tmp_path):
        v = rng_volume(seed=17)
        a = save_volume(v, tmp_path / "a.nii.gz").read_bytes()
        b = save_volume(v, tmp_path / "b.nii.gz").read_bytes()
        assert a == b

    def test_nifti_header_is_standard(self, tmp_path):
        import gzip
        import struct

        path = save_volume(rng_volume((5, 6, 7), seed=1), tmp_path / "h.nii.gz")
        raw = gzip.decompress(path.read_bytes())
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert struct.unpack_from("<8h", raw, 40)[1:4] == (5, 6, 7)
        assert struct.unpack_from("<4s", raw, 344)[0] == b"n+1\x00"

    def test_unknown_suffix_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_volume(rng_volume(), tmp_path / "v.mha")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_volume(tmp_path / "nope.nii.gz")
