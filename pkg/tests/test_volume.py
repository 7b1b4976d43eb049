"""Volume loading, resampling, normalization and quantization."""

import json
import struct

import nibabel as nib
import numpy as np
import pytest
import strategies as strat
from hypothesis import given, settings
from hypothesis import strategies as st

from deepradiomics.core.volume import (
	Modality,
	RoiMask,
	Volume,
	load_volume,
	normalize_unit,
	quantize,
	resample_isotropic,
	write_raw_volume,
)
from deepradiomics.utils.errors import CorruptFile, DegenerateVolume, EmptyRoi, FormatError


def test_raw_volume_keeps_x_fastest_layout(tmp_path):
	data = np.arange(24, dtype=np.float32).reshape((2, 3, 4))
	path = write_raw_volume(data, (1.0, 2.0, 3.0), tmp_path / "v.raw")
	assert path.read_bytes()[:8] == np.array([0, 12], dtype="<f4").tobytes()

	v = load_volume(path, modality="t1ce")
	np.testing.assert_array_equal(v.data, data)
	assert v.spacing == (1.0, 2.0, 3.0)
	assert v.modality is Modality.T1CE


def test_raw_volume_with_z_fastest_order(tmp_path):
	data = np.arange(8, dtype=np.int16).reshape((2, 2, 2))
	(tmp_path / "v.raw").write_bytes(data.astype("<i2").tobytes(order="C"))
	meta = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "i16", "order": "z-fastest"}
	(tmp_path / "v.json").write_text(json.dumps(meta))
	np.testing.assert_array_equal(load_volume(tmp_path / "v.raw").data, data)


def test_raw_payload_size_mismatch_is_corrupt(tmp_path):
	write_raw_volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0), tmp_path / "v.raw")
	(tmp_path / "v.raw").write_bytes(b"\x00" * 7)
	with pytest.raises(CorruptFile):
		load_volume(tmp_path / "v.raw")


def test_raw_unknown_dtype_is_format_error(tmp_path):
	(tmp_path / "v.raw").write_bytes(b"\x00" * 8)
	meta = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "f64"}
	(tmp_path / "v.json").write_text(json.dumps(meta))
	with pytest.raises(FormatError):
		load_volume(tmp_path / "v.raw")


def test_missing_file_and_sidecar(tmp_path):
	with pytest.raises(FileNotFoundError, match="nope.raw"):
		load_volume(tmp_path / "nope.raw")
	(tmp_path / "lonely.raw").write_bytes(b"\x00")
	with pytest.raises(FileNotFoundError):
		load_volume(tmp_path / "lonely.raw")


NIFTI_SLOPE_OFFSET = 112


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_spacing_and_values(tmp_path, suffix):
	data = np.arange(27, dtype=np.float32).reshape((3, 3, 3))
	path = tmp_path / f"v{suffix}"
	nib.save(nib.Nifti1Image(data, np.diag([0.5, 0.5, 2.0, 1.0])), path)

	v = load_volume(path)
	np.testing.assert_allclose(v.data, data)
	assert v.spacing == pytest.approx((0.5, 0.5, 2.0))


def test_nifti_applies_slope_and_intercept(tmp_path):
	data = np.arange(27, dtype=np.int16).reshape((3, 3, 3))
	path = tmp_path / "v.nii"
	nib.save(nib.Nifti1Image(data, np.eye(4)), path)
	raw = bytearray(path.read_bytes())
	raw[NIFTI_SLOPE_OFFSET : NIFTI_SLOPE_OFFSET + 8] = struct.pack("<ff", 2.0, 10.0)
	path.write_bytes(bytes(raw))

	np.testing.assert_allclose(load_volume(path).data, data * 2.0 + 10.0)


def test_nifti_unsupported_datatype(tmp_path):
	img = nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4))
	nib.save(img, tmp_path / "v.nii")
	with pytest.raises(FormatError, match="datatype"):
		load_volume(tmp_path / "v.nii")


def test_resample_to_isotropic_dims():
	v = Volume(np.random.default_rng(0).random((10, 10, 4)), (1.0, 1.0, 2.5))
	m = RoiMask(np.ones((10, 10, 4), dtype=bool), v.spacing)
	rv, rm = resample_isotropic(v, m, 1.0)
	assert rv.dims == (10, 10, 10)
	assert rv.spacing == (1.0, 1.0, 1.0)
	assert rm.data.dtype == bool and rm.data.all()


def test_resample_identity_keeps_data():
	data = np.random.default_rng(1).random((5, 6, 7))
	v = Volume(data)
	m = RoiMask(data > 0.5)
	rv, rm = resample_isotropic(v, m, 1.0)
	np.testing.assert_allclose(rv.data, data, atol=1e-12)
	np.testing.assert_array_equal(rm.data, data > 0.5)


def test_mask_follows_the_volume_grid():
	v = Volume(np.random.default_rng(2).random((20, 20, 5)), (0.5, 0.5, 2.0))
	mask = np.zeros((20, 20, 5), dtype=bool)
	mask[10:20, 10:20, 2:5] = True
	rv, rm = resample_isotropic(v, RoiMask(mask), 1.0)
	assert rv.dims == rm.dims == (10, 10, 10)
	# 300 voxels of 0.5 mm³ each
	assert rm.n_voxels == 150
	assert rm.data[5:10, 5:10, 4:10].all()


def test_misaligned_mask_is_rejected():
	with pytest.raises(ValueError, match="dims"):
		resample_isotropic(Volume(np.zeros((3, 3, 3))), RoiMask(np.ones((3, 3, 2))))


def test_normalize_maps_to_unit_range():
	v = normalize_unit(Volume(np.array([[[-5.0, 0.0], [5.0, 15.0]]])))
	assert v.data.min() == 0.0 and v.data.max() == 1.0
	assert v.data[0, 0, 1] == pytest.approx(0.25)


def test_normalize_constant_volume_raises():
	with pytest.raises(DegenerateVolume):
		normalize_unit(Volume(np.full((2, 2, 2), 3.0)))


def test_quantize_bins_in_mask_range():
	data = np.array([0.0, 0.25, 0.5, 0.75, 1.0, 99.0]).reshape((1, 2, 3))
	mask = np.array([1, 1, 1, 1, 1, 0], dtype=bool).reshape((1, 2, 3))
	q = quantize(Volume(data), RoiMask(mask), levels=4)
	assert q.data.ravel().tolist() == [1, 2, 3, 4, 4, 0]


def test_quantize_constant_region_is_level_one():
	q = quantize(Volume(np.full((3, 3, 3), 7.0)), RoiMask(np.ones((3, 3, 3))), 32)
	assert set(np.unique(q.data)) == {1}


def test_quantize_empty_mask_raises():
	with pytest.raises(EmptyRoi):
		quantize(Volume(np.zeros((2, 2, 2))), RoiMask(np.zeros((2, 2, 2))), 8)


@settings(max_examples=50, deadline=None)
@given(seed=strat.seeds, n_levels=st.integers(min_value=2, max_value=64))
def test_quantized_levels_stay_in_range(seed, n_levels):
	rng = np.random.default_rng(seed)
	data = rng.normal(size=(5, 5, 5))
	mask = rng.random((5, 5, 5)) < 0.5
	mask[2, 2, 2] = True
	q = quantize(Volume(data), RoiMask(mask), n_levels)
	inside = q.data[mask]
	assert inside.min() >= 1 and inside.max() <= n_levels
	assert np.all(q.data[~mask] == 0)
	# monotone in intensity
	order = np.argsort(data[mask], kind="stable")
	assert np.all(np.diff(inside[order]) >= 0)
