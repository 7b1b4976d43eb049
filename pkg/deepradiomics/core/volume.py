import json
import logging
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from scipy import ndimage

from deepradiomics.utils.errors import CorruptFile, DegenerateVolume, EmptyRoi, FormatError

logger = logging.getLogger(__name__)


class Modality(StrEnum):
	"""MRI sequences, in the fixed signature order."""

	T1WI = "t1wi"
	T1CE = "t1ce"
	T2WI = "t2wi"
	FLAIR = "flair"


MODALITY_ORDER: tuple[Modality, ...] = tuple(Modality)


class VolumeFormat(StrEnum):
	"""On-disk volume encodings understood by :func:`load_volume`."""

	NIFTI = "nifti"
	RAW = "raw"


# NIfTI datatype code -> numpy dtype; the only codes accepted.
NIFTI_DTYPES: dict[int, np.dtype] = {
	2: np.dtype("u1"),
	4: np.dtype("<i2"),
	16: np.dtype("<f4"),
}

# Raw sidecar dtype token -> numpy dtype.
RAW_DTYPES: dict[str, np.dtype] = {
	"u8": np.dtype("u1"),
	"i16": np.dtype("<i2"),
	"f32": np.dtype("<f4"),
}


def _as_spacing(spacing: Any) -> tuple[float, float, float]:
	spacing = tuple(float(s) for s in spacing)
	if len(spacing) != 3 or any(not s > 0 for s in spacing):
		raise ValueError(f"spacing must be three positive values, got {spacing!r}")
	return spacing  # ty: ignore[invalid-return-type]


@dataclass(frozen=True, eq=False)
class Volume:
	"""A 3D scalar grid indexed ``data[x, y, z]``.

	``data`` is stored as float64 and frozen read-only after construction;
	flattening it in Fortran order gives the x-fastest voxel sequence.

	Attributes:
		data: 3D intensity array.
		spacing: voxel size in mm along x, y, z.
		modality: acquisition sequence, ``None`` for derived grids such as
			activation maps.
	"""

	data: np.ndarray
	spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
	modality: Modality | None = None

	def __post_init__(self):
		data = np.array(self.data, dtype=np.float64)
		if data.ndim != 3 or min(data.shape) < 1:
			raise ValueError(f"Volume data must be a non-empty 3D array, got shape {data.shape}")
		data.flags.writeable = False
		object.__setattr__(self, "data", data)
		object.__setattr__(self, "spacing", _as_spacing(self.spacing))
		if self.modality is not None:
			object.__setattr__(self, "modality", Modality(self.modality))

	@property
	def dims(self) -> tuple[int, int, int]:
		return self.data.shape  # ty: ignore[invalid-return-type]


@dataclass(frozen=True, eq=False)
class RoiMask:
	"""Binary 3D grid aligned voxel-for-voxel with a companion :class:`Volume`.

	Once paired with a volume the mask lives on that volume's grid: resampling
	and shape measurement use the volume spacing, not ``spacing``.
	"""

	data: np.ndarray
	spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

	def __post_init__(self):
		data = np.array(self.data, dtype=bool)
		if data.ndim != 3 or min(data.shape) < 1:
			raise ValueError(f"RoiMask data must be a non-empty 3D array, got shape {data.shape}")
		data.flags.writeable = False
		object.__setattr__(self, "data", data)
		object.__setattr__(self, "spacing", _as_spacing(self.spacing))

	@property
	def dims(self) -> tuple[int, int, int]:
		return self.data.shape  # ty: ignore[invalid-return-type]

	@property
	def n_voxels(self) -> int:
		return int(self.data.sum())

	def check_aligned(self, volume: Volume) -> None:
		"""Raise ``ValueError`` unless the mask has exactly the volume's dims."""
		if self.dims != volume.dims:
			raise ValueError(f"Mask dims {self.dims} do not match volume dims {volume.dims}")

	def require_nonempty(self) -> None:
		"""Raise :class:`EmptyRoi` when the mask has no foreground voxel."""
		if not self.data.any():
			raise EmptyRoi("ROI mask has no foreground voxel")


@dataclass(frozen=True, eq=False)
class QuantizedRoi:
	"""Integer gray levels inside a mask: 0 outside, 1..levels inside."""

	data: np.ndarray
	levels: int = 32
	spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

	def __post_init__(self):
		data = np.array(self.data, dtype=np.int32)
		if data.ndim != 3:
			raise ValueError(f"QuantizedRoi data must be 3D, got shape {data.shape}")
		if data.min() < 0 or data.max() > self.levels:
			raise ValueError(f"Gray levels must lie in [0, {self.levels}]")
		data.flags.writeable = False
		object.__setattr__(self, "data", data)
		object.__setattr__(self, "spacing", _as_spacing(self.spacing))

	@property
	def dims(self) -> tuple[int, int, int]:
		return self.data.shape  # ty: ignore[invalid-return-type]

	@property
	def mask(self) -> np.ndarray:
		return self.data > 0

	@property
	def n_voxels(self) -> int:
		return int(np.count_nonzero(self.data))


def infer_format(path: str | Path) -> VolumeFormat:
	"""Pick the volume format from the file name (``.nii``/``.nii.gz`` are NIfTI)."""
	name = Path(path).name.lower()
	if name.endswith((".nii", ".nii.gz")):
		return VolumeFormat.NIFTI
	return VolumeFormat.RAW


def sidecar_path(path: str | Path) -> Path:
	"""Location of the JSON sidecar describing a raw volume file."""
	path = Path(path)
	return path.with_suffix(".json")


def load_volume(
	path: str | Path,
	fmt: VolumeFormat | str | None = None,
	modality: Modality | str | None = None,
) -> Volume:
	"""Read a volume from a single-file NIfTI-1 or a raw file with JSON sidecar.

	NIfTI files may be gzip-compressed and must hold uint8, int16 or float32
	little-endian voxels; ``scl_slope``/``scl_inter`` are applied when the slope
	is nonzero and ``vox_offset`` is honoured. Raw files are described by a
	sidecar ``{"dims", "spacing", "dtype", "order"}`` next to them (same stem,
	``.json`` suffix). Voxel order is normalized to ``data[x, y, z]``.

	Args:
		path: volume file.
		fmt: explicit format; inferred from the file name when ``None``.
		modality: sequence tag stored on the returned volume.

	Raises:
		FileNotFoundError: ``path`` (or the raw sidecar) does not exist.
		FormatError: unsupported datatype, byte order or layout.
		CorruptFile: payload size disagrees with the declared dims.

	Returns:
		The loaded volume with header spacing.
	"""
	path = Path(path)
	if not path.is_file():
		raise FileNotFoundError(f"Volume file not found: {path}")

	fmt = infer_format(path) if fmt is None else VolumeFormat(fmt)
	match fmt:
		case VolumeFormat.NIFTI:
			data, spacing = _read_nifti(path)
		case VolumeFormat.RAW:
			data, spacing = _read_raw(path)

	logger.debug("Loaded %s volume %s with dims %s", fmt.value, path, data.shape)
	return Volume(data, spacing, modality)


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, ...]]:
	try:
		img = nib.load(path)
	except ImageFileError as e:
		raise FormatError(f"{path} is not a readable NIfTI-1 file") from e

	header = img.header
	if not isinstance(img, nib.Nifti1Image):
		raise FormatError(f"{path} is not a single-file NIfTI-1 image")
	datatype = int(header["datatype"])
	if datatype not in NIFTI_DTYPES:
		raise FormatError(
			f"{path}: unsupported NIfTI datatype {datatype}; expected one of {sorted(NIFTI_DTYPES)}"
		)
	if header.endianness != "<" and datatype != 2:
		raise FormatError(f"{path}: only little-endian NIfTI files are supported")

	shape = img.shape
	if len(shape) > 3 and any(n != 1 for n in shape[3:]):
		raise FormatError(f"{path}: expected a 3D volume, got shape {shape}")

	try:
		data = np.asarray(img.get_fdata(dtype=np.float64))
	except (EOFError, ValueError, OSError) as e:
		raise CorruptFile(f"{path}: voxel payload shorter than declared dims {shape}") from e

	data = data.reshape(shape[:3] + (1,) * (3 - len(shape[:3])))
	zooms = tuple(header.get_zooms()[:3]) + (1.0,) * (3 - len(shape[:3]))
	return data, zooms


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, ...]]:
	meta_path = sidecar_path(path)
	if meta_path == path or not meta_path.is_file():
		raise FileNotFoundError(f"Raw sidecar not found for {path}: expected {meta_path}")

	with open(meta_path) as f:
		meta: dict[str, Any] = json.load(f)

	try:
		dims = tuple(int(n) for n in meta["dims"])
		spacing = tuple(float(s) for s in meta["spacing"])
		dtype_token = meta["dtype"]
	except (KeyError, TypeError, ValueError) as e:
		raise FormatError(f"{meta_path}: sidecar needs dims, spacing and dtype") from e

	if dtype_token not in RAW_DTYPES:
		raise FormatError(
			f"{meta_path}: unsupported dtype {dtype_token!r}; expected one of {sorted(RAW_DTYPES)}"
		)
	if len(dims) != 3 or min(dims) < 1:
		raise FormatError(f"{meta_path}: dims must be three positive ints, got {dims}")

	order = meta.get("order", "x-fastest")
	match order:
		case "x-fastest":
			np_order = "F"
		case "z-fastest":
			np_order = "C"
		case _:
			raise FormatError(f"{meta_path}: unknown voxel order {order!r}")

	dtype = RAW_DTYPES[dtype_token]
	payload = path.read_bytes()
	expected = int(np.prod(dims)) * dtype.itemsize
	if len(payload) != expected:
		raise CorruptFile(
			f"{path}: {len(payload)} bytes on disk but dims {dims} x {dtype_token} need {expected}"
		)

	data = np.frombuffer(payload, dtype=dtype).reshape(dims, order=np_order)
	return data.astype(np.float64), spacing


def write_raw_volume(
	data: np.ndarray,
	spacing: tuple[float, float, float],
	path: str | Path,
	dtype: str = "f32",
) -> Path:
	"""Write ``data[x, y, z]`` as an x-fastest raw file plus JSON sidecar.

	Returns:
		Path of the raw payload.
	"""
	path = Path(path)
	np_dtype = RAW_DTYPES[dtype]
	path.write_bytes(np.asarray(data).astype(np_dtype).tobytes(order="F"))
	meta = {
		"dims": [int(n) for n in data.shape],
		"spacing": [float(s) for s in spacing],
		"dtype": dtype,
		"order": "x-fastest",
	}
	with open(sidecar_path(path), "w") as f:
		json.dump(meta, f)
	return path


def _resampled_dims(dims: tuple[int, ...], spacing: tuple[float, ...], target: float) -> tuple:
	# Round half up so every implementation agrees on .5 cases.
	return tuple(
		max(1, int(np.floor(n * s / target + 0.5))) for n, s in zip(dims, spacing, strict=True)
	)


def resample_grid(
	data: np.ndarray,
	in_spacing: tuple[float, ...],
	out_spacing: tuple[float, ...],
	out_shape: tuple[int, ...],
	order: int,
) -> np.ndarray:
	"""Resample ``data`` onto a grid with ``out_spacing`` by voxel-center alignment.

	Output voxel ``i`` samples input coordinate ``(i + 0.5) * out / in - 0.5`` along
	each axis; samples past the edge take the nearest edge value. ``order`` 1 is
	trilinear, 0 nearest-neighbor.
	"""
	scale = np.asarray(out_spacing, dtype=np.float64) / np.asarray(in_spacing, dtype=np.float64)
	offset = 0.5 * scale - 0.5
	return ndimage.affine_transform(
		data,
		scale,
		offset=offset,
		output_shape=out_shape,
		order=order,
		mode="nearest",
	)


def resample_isotropic(v: Volume, m: RoiMask, target: float = 1.0) -> tuple[Volume, RoiMask]:
	"""Resample a volume and its mask to isotropic ``target`` mm voxels.

	The volume is interpolated trilinearly and the mask by nearest neighbor, so
	the mask stays binary. Both are read on the volume grid (``v.spacing``).
	Output dims are ``round(dim * spacing / target)`` with a floor of 1.

	Raises:
		ValueError: ``target`` is not positive or the mask is misaligned.
	"""
	if not target > 0:
		raise ValueError(f"target spacing must be positive, got {target}")
	m.check_aligned(v)

	out_spacing = (float(target),) * 3
	out_shape = _resampled_dims(v.dims, v.spacing, target)

	data = resample_grid(v.data, v.spacing, out_spacing, out_shape, order=1)
	mask = resample_grid(m.data.astype(np.uint8), v.spacing, out_spacing, out_shape, order=0)

	return Volume(data, out_spacing, v.modality), RoiMask(mask > 0, out_spacing)


def normalize_unit(v: Volume) -> Volume:
	"""Affinely map intensities to [0, 1] (min -> 0, max -> 1).

	Raises:
		DegenerateVolume: the volume holds a single distinct value.
	"""
	lo, hi = float(v.data.min()), float(v.data.max())
	if hi == lo:
		raise DegenerateVolume(f"Cannot normalize a constant volume (value {lo})")
	data = np.clip((v.data - lo) / (hi - lo), 0.0, 1.0)
	return Volume(data, v.spacing, v.modality)


def quantize(v: Volume, m: RoiMask, levels: int = 32) -> QuantizedRoi:
	"""Bin in-mask intensities uniformly into ``levels`` gray levels.

	Bin edges span the in-mask range only:
	``q = min(levels, 1 + floor(levels * (x - lo) / (hi - lo)))``. A constant
	in-mask region maps every voxel to level 1. Voxels outside the mask are 0.

	Raises:
		EmptyRoi: the mask has no foreground voxel.
		ValueError: ``levels < 2`` or the mask is misaligned.
	"""
	if levels < 2:
		raise ValueError(f"levels must be at least 2, got {levels}")
	m.check_aligned(v)
	m.require_nonempty()

	inside = v.data[m.data]
	lo, hi = float(inside.min()), float(inside.max())

	q = np.zeros(v.dims, dtype=np.int32)
	if hi == lo:
		q[m.data] = 1
	else:
		bins = 1 + np.floor(levels * (inside - lo) / (hi - lo)).astype(np.int64)
		q[m.data] = np.minimum(levels, bins)

	return QuantizedRoi(q, levels, v.spacing)
