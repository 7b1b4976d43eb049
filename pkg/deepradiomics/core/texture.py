"""Texture quantifiers over quantized ROIs and shape features over masks.

Every quantifier group is registered in :data:`feature_registry`; the
registration order below is the canonical column order
(histogram, glcm, ngtdm, glszm, then shape).
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import polars as pl
from scipy import ndimage

from deepradiomics.core.registries import MANIFEST_VERSION, feature_registry
from deepradiomics.core.volume import QuantizedRoi, RoiMask
from deepradiomics.utils.errors import DegenerateMatrix, EmptyRoi

logger = logging.getLogger(__name__)

EPS = 1e-12
COARSENESS_CAP = 1e12
BOX_SIZES: tuple[int, ...] = (1, 2, 4, 8, 16)

HISTOGRAM_NAMES = ("mean", "variance", "skewness", "kurtosis", "energy", "entropy")
GLCM_NAMES = (
	"angular_second_moment",
	"contrast",
	"correlation",
	"sum_of_squares_variance",
	"inverse_difference_moment",
	"sum_average",
	"sum_variance",
	"sum_entropy",
	"entropy",
	"difference_variance",
	"difference_entropy",
	"information_correlation_1",
	"information_correlation_2",
	"autocorrelation",
	"dissimilarity",
	"maximum_probability",
	"cluster_shade",
)
NGTDM_NAMES = ("coarseness", "contrast", "busyness", "complexity", "strength")
GLSZM_NAMES = (
	"small_zone_emphasis",
	"large_zone_emphasis",
	"gray_level_non_uniformity",
	"zone_size_non_uniformity",
	"zone_percentage",
	"low_gray_level_zone_emphasis",
	"high_gray_level_zone_emphasis",
	"small_zone_low_gray_emphasis",
	"small_zone_high_gray_emphasis",
	"large_zone_low_gray_emphasis",
	"large_zone_high_gray_emphasis",
	"gray_level_variance",
	"zone_size_variance",
)
SHAPE_NAMES = ("porosity", "fractal_dimension", "surface_area", "volume")

# 13 unique distance-1 offsets; their negatives complete the 26-neighborhood.
DIRECTIONS: tuple[tuple[int, int, int], ...] = (
	(1, 0, 0),
	(0, 1, 0),
	(0, 0, 1),
	(1, 1, 0),
	(1, -1, 0),
	(1, 0, 1),
	(1, 0, -1),
	(0, 1, 1),
	(0, 1, -1),
	(1, 1, 1),
	(1, 1, -1),
	(1, -1, 1),
	(1, -1, -1),
)


def _entropy(p: np.ndarray) -> float:
	p = p[p > 0]
	return float(-np.sum(p * np.log2(p)))


def _level_probabilities(q: QuantizedRoi) -> np.ndarray:
	if q.n_voxels == 0:
		raise EmptyRoi("Quantized ROI has no foreground voxel")
	counts = np.bincount(q.data[q.mask], minlength=q.levels + 1)[1:]
	return counts / counts.sum()


# --- matrices ------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Glcm:
	"""Symmetric gray-level co-occurrence probabilities (``matrix[i-1, j-1]``)."""

	levels: int
	matrix: np.ndarray

	@classmethod
	def diagonal(cls, levels: int, p: np.ndarray) -> "Glcm":
		"""All co-occurrence mass on the diagonal, following level probabilities ``p``."""
		return cls(levels, np.diag(np.asarray(p, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class Ngtdm:
	"""Neighborhood gray-tone difference columns, indexed by level - 1.

	Attributes:
		s: summed absolute deviation from the neighborhood mean per level.
		n: number of voxels per level having a valid neighborhood.
	"""

	levels: int
	s: np.ndarray
	n: np.ndarray

	@property
	def p(self) -> np.ndarray:
		total = self.n.sum()
		return self.n / total if total > 0 else np.zeros_like(self.s)


@dataclass(frozen=True, eq=False)
class Glszm:
	"""Zone counts ``matrix[g-1, s-1]`` for zones of level ``g`` and size ``s``."""

	levels: int
	matrix: np.ndarray

	@property
	def max_zone_size(self) -> int:
		return self.matrix.shape[1]

	@property
	def n_zones(self) -> int:
		return int(self.matrix.sum())


def _shifted_pair(data: np.ndarray, offset: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
	"""Values at ``x`` and ``x + offset`` for every ``x`` with both inside the grid."""
	src, dst = [], []
	for d, n in zip(offset, data.shape, strict=True):
		if d >= 0:
			src.append(slice(0, n - d))
			dst.append(slice(d, n))
		else:
			src.append(slice(-d, n))
			dst.append(slice(0, n + d))
	return data[tuple(src)], data[tuple(dst)]


def compute_glcm(q: QuantizedRoi) -> Glcm:
	"""Merged symmetric GLCM over the 13 distance-1 directions.

	Raises:
		EmptyRoi: the ROI has no voxel.
		DegenerateMatrix: no pair of in-mask neighbors exists.
	"""
	if q.n_voxels == 0:
		raise EmptyRoi("Quantized ROI has no foreground voxel")
	levels = q.levels
	counts = np.zeros(levels * levels, dtype=np.int64)
	for offset in DIRECTIONS:
		a, b = _shifted_pair(q.data, offset)
		valid = (a > 0) & (b > 0)
		idx = (a[valid].astype(np.int64) - 1) * levels + (b[valid] - 1)
		counts += np.bincount(idx, minlength=levels * levels)

	counts = counts.reshape(levels, levels)
	counts = counts + counts.T
	total = counts.sum()
	if total == 0:
		raise DegenerateMatrix("ROI has no pair of in-mask neighbors")
	return Glcm(levels, counts / total)


def compute_ngtdm(q: QuantizedRoi) -> Ngtdm:
	"""NGTDM over 26-neighborhoods restricted to the mask.

	Raises:
		EmptyRoi: the ROI has no voxel.
		DegenerateMatrix: no in-mask voxel has an in-mask neighbor.
	"""
	if q.n_voxels == 0:
		raise EmptyRoi("Quantized ROI has no foreground voxel")
	mask = q.mask
	kernel = np.ones((3, 3, 3))
	kernel[1, 1, 1] = 0
	values = q.data.astype(np.float64)
	neighbor_sum = ndimage.convolve(values, kernel, mode="constant", cval=0.0)
	neighbor_count = ndimage.convolve(mask.astype(np.float64), kernel, mode="constant", cval=0.0)

	valid = mask & (neighbor_count > 0)
	if not valid.any():
		raise DegenerateMatrix("No in-mask voxel has an in-mask neighbor")

	g = q.data[valid]
	deviation = np.abs(g - neighbor_sum[valid] / neighbor_count[valid])
	s = np.bincount(g, weights=deviation, minlength=q.levels + 1)[1:]
	n = np.bincount(g, minlength=q.levels + 1)[1:].astype(np.float64)
	return Ngtdm(q.levels, s, n)


def compute_glszm(q: QuantizedRoi) -> Glszm:
	"""Zone-size matrix with 26-connected equal-level zones.

	Raises:
		EmptyRoi: the ROI has no voxel.
	"""
	if q.n_voxels == 0:
		raise EmptyRoi("Quantized ROI has no foreground voxel")
	structure = np.ones((3, 3, 3), dtype=bool)
	zone_levels: list[np.ndarray] = []
	zone_sizes: list[np.ndarray] = []
	for level in np.unique(q.data[q.mask]):
		labeled, n_zones = ndimage.label(q.data == level, structure=structure)
		sizes = np.bincount(labeled.ravel(), minlength=n_zones + 1)[1:]
		zone_levels.append(np.full(n_zones, level, dtype=np.int64))
		zone_sizes.append(sizes)

	levels_arr = np.concatenate(zone_levels)
	sizes_arr = np.concatenate(zone_sizes)
	matrix = np.zeros((q.levels, int(sizes_arr.max())), dtype=np.float64)
	np.add.at(matrix, (levels_arr - 1, sizes_arr - 1), 1.0)
	return Glszm(q.levels, matrix)


# --- feature functions ---------------------------------------------------------
def histogram_features(q: QuantizedRoi) -> np.ndarray:
	"""Mean, variance, skewness, kurtosis, energy and entropy of the gray levels.

	Raises:
		EmptyRoi: the ROI has no voxel.
	"""
	p = _level_probabilities(q)
	i = np.arange(1, q.levels + 1, dtype=np.float64)
	mean = float(np.sum(i * p))
	centered = i - mean
	variance = float(np.sum(centered**2 * p))
	if variance > 0:
		skewness = float(np.sum(centered**3 * p) / variance**1.5)
		kurtosis = float(np.sum(centered**4 * p) / variance**2)
	else:
		skewness = kurtosis = 0.0
	energy = float(np.sum(p**2))
	return np.array([mean, variance, skewness, kurtosis, energy, _entropy(p)])


def glcm_features(g: Glcm) -> np.ndarray:
	"""The 17 Haralick-style GLCM features, in canonical order."""
	p = g.matrix
	levels = g.levels
	i, j = np.meshgrid(
		np.arange(1, levels + 1, dtype=np.float64),
		np.arange(1, levels + 1, dtype=np.float64),
		indexing="ij",
	)
	px = p.sum(axis=1)
	py = p.sum(axis=0)
	k = np.arange(1, levels + 1, dtype=np.float64)
	mu_x = float(np.sum(k * px))
	mu_y = float(np.sum(k * py))
	sigma_x = float(np.sqrt(np.sum((k - mu_x) ** 2 * px)))
	sigma_y = float(np.sqrt(np.sum((k - mu_y) ** 2 * py)))

	asm = float(np.sum(p**2))
	contrast = float(np.sum((i - j) ** 2 * p))
	if sigma_x * sigma_y > 0:
		correlation = float((np.sum(i * j * p) - mu_x * mu_y) / (sigma_x * sigma_y))
	else:
		correlation = 0.0
	sos_variance = float(np.sum((i - mu_x) ** 2 * p))
	idm = float(np.sum(p / (1.0 + (i - j) ** 2)))

	# p_{x+y}(k) for k = 2..2L and p_{x-y}(k) for k = 0..L-1
	flat = p.ravel()
	p_sum = np.bincount((i + j).astype(np.int64).ravel(), weights=flat, minlength=2 * levels + 1)
	p_sum = p_sum[2:]
	k_sum = np.arange(2, 2 * levels + 1, dtype=np.float64)
	p_diff = np.bincount(np.abs(i - j).astype(np.int64).ravel(), weights=flat, minlength=levels)
	k_diff = np.arange(levels, dtype=np.float64)

	sum_average = float(np.sum(k_sum * p_sum))
	sum_variance = float(np.sum((k_sum - sum_average) ** 2 * p_sum))
	sum_entropy = _entropy(p_sum)
	hxy = _entropy(p.ravel())
	diff_average = float(np.sum(k_diff * p_diff))
	difference_variance = float(np.sum((k_diff - diff_average) ** 2 * p_diff))
	difference_entropy = _entropy(p_diff)

	hx, hy = _entropy(px), _entropy(py)
	pxpy = np.outer(px, py)
	nz = p > 0
	hxy1 = float(-np.sum(p[nz] * np.log2(pxpy[nz])))
	hxy2 = _entropy(pxpy.ravel())
	h_max = max(hx, hy)
	if h_max > 0:
		imc1 = (hxy - hxy1) / h_max
		imc2 = float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - hxy)))))
	else:
		imc1 = imc2 = 0.0

	autocorrelation = float(np.sum(i * j * p))
	dissimilarity = float(np.sum(np.abs(i - j) * p))
	maximum_probability = float(p.max())
	cluster_shade = float(np.sum((i + j - mu_x - mu_y) ** 3 * p))

	return np.array(
		[
			asm,
			contrast,
			correlation,
			sos_variance,
			idm,
			sum_average,
			sum_variance,
			sum_entropy,
			hxy,
			difference_variance,
			difference_entropy,
			imc1,
			imc2,
			autocorrelation,
			dissimilarity,
			maximum_probability,
			cluster_shade,
		]
	)


def ngtdm_features(n: Ngtdm) -> np.ndarray:
	"""Coarseness, contrast, busyness, complexity and strength.

	Sums over level pairs run over present levels only (``n_i > 0``).
	"""
	p, s = n.p, n.s
	present = np.flatnonzero(p > 0)
	n_present = present.size
	n_valid = float(n.n.sum())
	levels = np.arange(1, n.levels + 1, dtype=np.float64)

	coarseness = min(COARSENESS_CAP, 1.0 / (EPS + float(np.sum(p * s))))

	pi, pj = p[present][:, None], p[present][None, :]
	si, sj = s[present][:, None], s[present][None, :]
	li, lj = levels[present][:, None], levels[present][None, :]
	s_total = float(s.sum())

	if n_present > 1:
		contrast = float(
			np.sum(pi * pj * (li - lj) ** 2) / (n_present * (n_present - 1)) * s_total / n_valid
		)
	else:
		contrast = 0.0

	busy_denominator = float(np.sum(np.abs(li * pi - lj * pj)))
	busyness = float(np.sum(p * s)) / busy_denominator if busy_denominator > 0 else 0.0

	complexity = float(np.sum(np.abs(li - lj) * (pi * si + pj * sj) / (pi + pj)) / n_valid)

	if s_total > 0:
		strength = float(np.sum((pi + pj) * (li - lj) ** 2) / (EPS + s_total))
	else:
		strength = 0.0

	return np.array([coarseness, contrast, busyness, complexity, strength])


def glszm_features(z: Glszm, n_mask_voxels: int) -> np.ndarray:
	"""The 13 zone-size features, in canonical order.

	Raises:
		ValueError: the matrix holds no zone.
	"""
	P = z.matrix
	n_zones = float(P.sum())
	if n_zones == 0:
		raise ValueError("GLSZM holds no zone")
	g = np.arange(1, z.levels + 1, dtype=np.float64)[:, None]
	s = np.arange(1, z.max_zone_size + 1, dtype=np.float64)[None, :]

	sze = np.sum(P / s**2) / n_zones
	lze = np.sum(P * s**2) / n_zones
	gln = np.sum(P.sum(axis=1) ** 2) / n_zones
	zsn = np.sum(P.sum(axis=0) ** 2) / n_zones
	zp = n_zones / n_mask_voxels
	lgze = np.sum(P / g**2) / n_zones
	hgze = np.sum(P * g**2) / n_zones
	szlge = np.sum(P / (g**2 * s**2)) / n_zones
	szhge = np.sum(P * g**2 / s**2) / n_zones
	lzlge = np.sum(P * s**2 / g**2) / n_zones
	lzhge = np.sum(P * g**2 * s**2) / n_zones

	pz = P / n_zones
	mu_g = np.sum(pz * g)
	glv = np.sum(pz * (g - mu_g) ** 2)
	mu_s = np.sum(pz * s)
	zsv = np.sum(pz * (s - mu_s) ** 2)

	return np.array(
		[sze, lze, gln, zsn, zp, lgze, hgze, szlge, szhge, lzlge, lzhge, glv, zsv],
		dtype=np.float64,
	)


def _surface_voxels(mask: np.ndarray) -> np.ndarray:
	padded = np.pad(mask, 1)
	eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
	return mask & ~eroded[1:-1, 1:-1, 1:-1]


def box_counting_dimension(points: np.ndarray, sizes: Sequence[int] = BOX_SIZES) -> float:
	"""Least-squares slope of ``log(count)`` against ``log(1/size)``.

	Args:
		points: ``(n, 3)`` integer voxel coordinates.
		sizes: box edge lengths in voxels.
	"""
	points = points - points.min(axis=0)
	counts = [len(np.unique(points // size, axis=0)) for size in sizes]
	slope, _ = np.polyfit(np.log(1.0 / np.asarray(sizes, dtype=np.float64)), np.log(counts), 1)
	return float(slope)


def shape_features(m: RoiMask, spacing: Sequence[float] | None = None) -> np.ndarray:
	"""Porosity, fractal dimension, surface area (mm²) and volume (mm³).

	Args:
		m: anatomical mask.
		spacing: voxel size overriding ``m.spacing``.

	Raises:
		EmptyRoi: the mask has no foreground voxel.
	"""
	m.require_nonempty()
	sx, sy, sz = (float(s) for s in (spacing if spacing is not None else m.spacing))
	mask = m.data
	n_voxels = int(mask.sum())

	volume = n_voxels * sx * sy * sz

	padded = np.pad(mask, 1).astype(np.int8)
	face_x, face_y, face_z = (int(np.count_nonzero(np.diff(padded, axis=a))) for a in range(3))
	surface_area = face_x * sy * sz + face_y * sx * sz + face_z * sx * sy

	filled = int(ndimage.binary_fill_holes(mask).sum())
	porosity = 1.0 - n_voxels / filled

	fractal_dimension = box_counting_dimension(np.argwhere(_surface_voxels(mask)))

	return np.array([porosity, fractal_dimension, surface_area, volume])


# --- registered quantifier groups ----------------------------------------------
@feature_registry.register("hist", HISTOGRAM_NAMES)
def _histogram_group(q: QuantizedRoi) -> np.ndarray:
	return histogram_features(q)


@feature_registry.register("glcm", GLCM_NAMES)
def _glcm_group(q: QuantizedRoi) -> np.ndarray:
	try:
		g = compute_glcm(q)
	except DegenerateMatrix:
		g = Glcm.diagonal(q.levels, _level_probabilities(q))
	return glcm_features(g)


@feature_registry.register("ngtdm", NGTDM_NAMES)
def _ngtdm_group(q: QuantizedRoi) -> np.ndarray:
	try:
		n = compute_ngtdm(q)
	except DegenerateMatrix:
		# isolated voxels: no deviation measurable
		counts = np.bincount(q.data[q.mask], minlength=q.levels + 1)[1:].astype(np.float64)
		n = Ngtdm(q.levels, np.zeros(q.levels), counts)
	return ngtdm_features(n)


@feature_registry.register("glszm", GLSZM_NAMES)
def _glszm_group(q: QuantizedRoi) -> np.ndarray:
	return glszm_features(compute_glszm(q), q.n_voxels)


@feature_registry.register("shape", SHAPE_NAMES, source="mask")
def _shape_group(m: RoiMask) -> np.ndarray:
	return shape_features(m)


QUANTIFIER_NAMES: tuple[str, ...] = tuple(feature_registry.names("roi"))
DRF_NAMES: tuple[str, ...] = tuple(feature_registry.names())


def quantifier_vector(q: QuantizedRoi) -> np.ndarray:
	"""All 41 quantifiers of one quantized ROI in canonical order.

	Degenerate GLCM/NGTDM matrices (isolated voxels) fall back to their
	zero-distance forms instead of raising.
	"""
	groups = feature_registry.groups("roi")
	values = np.concatenate([feature_registry.compute(g, q) for g in groups])
	if not np.all(np.isfinite(values)):
		bad = [QUANTIFIER_NAMES[i] for i in np.flatnonzero(~np.isfinite(values))]
		raise ValueError(f"Non-finite quantifiers: {bad}")
	return values


def feature_manifest(prefixes: Sequence[str]) -> dict:
	"""Versioned column manifest for the DRF blocks of ``prefixes``."""
	table: pl.DataFrame = feature_registry.manifest(prefixes)
	return {"manifest_version": MANIFEST_VERSION, "columns": table.to_dicts()}
