import dataclasses
import json
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl

from deepradiomics.core import cnn, texture
from deepradiomics.core.cnn import NetworkWeights
from deepradiomics.core.volume import (
	MODALITY_ORDER,
	Modality,
	RoiMask,
	Volume,
	load_volume,
	normalize_unit,
	quantize,
	resample_isotropic,
)
from deepradiomics.utils import auxfun
from deepradiomics.utils.errors import DrfError, EmptyRoi, ManifestError, MissingModality

logger = logging.getLogger(__name__)

METADATA_COLUMNS: tuple[str, ...] = (
	"id",
	"age",
	"gender",
	"grade",
	"survival_days",
	"censorship",
)
METADATA_SCHEMA: dict[str, Any] = {
	"id": pl.String,
	"age": pl.Float64,
	"gender": pl.String,
	"grade": pl.String,
	"survival_days": pl.Float64,
	"censorship": pl.Int64,
}
LAYER_SELECTIONS: dict[str, tuple[int, ...]] = {"1": (1,), "2": (2,), "both": (1, 2)}
GENDERS: dict[str, str] = {"m": "male", "male": "male", "f": "female", "female": "female"}


@dataclass(frozen=True)
class ExtractionSettings:
	"""Per-patient extraction parameters.

	Attributes:
		levels: gray levels for activation-map quantization.
		side: CNN input cube side.
		layers: 1-based activation layers whose maps are averaged.
		target_spacing: isotropic resampling target in mm.
		modalities: modalities extracted, in signature order.
	"""

	levels: int = 32
	side: int = 64
	layers: tuple[int, ...] = (1, 2)
	target_spacing: float = 1.0
	modalities: tuple[Modality, ...] = MODALITY_ORDER

	def __post_init__(self):
		mods = tuple(Modality(m) for m in self.modalities)
		if not mods:
			raise ValueError("At least one modality must be selected")
		object.__setattr__(self, "modalities", tuple(m for m in MODALITY_ORDER if m in mods))
		object.__setattr__(self, "layers", tuple(sorted(set(self.layers))))

	@classmethod
	def from_config(cls, cfg: Mapping[str, Any]) -> "ExtractionSettings":
		"""Build settings from a resolved run config dict."""
		return cls(
			levels=int(cfg.get("levels", 32)),
			side=int(cfg.get("side", 64)),
			layers=LAYER_SELECTIONS[str(cfg.get("layers", "both"))],
			target_spacing=float(cfg.get("target_spacing", 1.0)),
			modalities=tuple(cfg.get("modalities", MODALITY_ORDER)),
		)


@dataclass(frozen=True, eq=False)
class DrfSignature:
	"""Concatenated per-modality DRF blocks of one patient."""

	names: tuple[str, ...]
	values: np.ndarray

	def __post_init__(self):
		values = np.asarray(self.values, dtype=np.float64)
		if values.shape != (len(self.names),):
			raise ValueError(f"{len(self.names)} names for {values.size} DRF values")
		if not np.all(np.isfinite(values)):
			raise ValueError("DRF signature contains non-finite values")
		values.flags.writeable = False
		object.__setattr__(self, "names", tuple(self.names))
		object.__setattr__(self, "values", values)

	def block(self, modality: Modality | str) -> np.ndarray:
		"""The 45 values of one modality."""
		prefix = f"{Modality(modality)}_"
		idx = [i for i, name in enumerate(self.names) if name.startswith(prefix)]
		if not idx:
			raise MissingModality(f"Signature has no {modality} block")
		return self.values[idx]

	def to_dict(self) -> dict[str, float]:
		return dict(zip(self.names, self.values.tolist(), strict=True))


@dataclass(frozen=True)
class PatientRecord:
	"""Clinical, immune and DRF data of one patient (one feature-table row).

	Attributes:
		censorship: 1 when death was observed, 0 for last follow-up.
		immune: 22 marker fractions keyed by snake_case marker name.
	"""

	id: str
	age: float
	gender: str
	survival_days: float
	censorship: int
	immune: dict[str, float]
	drf: DrfSignature | None = None
	grade: str | None = None

	def __post_init__(self):
		expected = auxfun.immune_marker_names()
		if set(self.immune) != set(expected):
			missing = sorted(set(expected) - set(self.immune))
			extra = sorted(set(self.immune) - set(expected))
			raise ValueError(
				f"Patient {self.id}: immune markers must be exactly the {len(expected)} "
				f"configured names (missing {missing}, unexpected {extra})"
			)
		bad = {k: v for k, v in self.immune.items() if not 0.0 <= v <= 1.0}
		if bad:
			raise ValueError(f"Patient {self.id}: immune fractions outside [0, 1]: {bad}")
		if not self.survival_days >= 0:
			raise ValueError(f"Patient {self.id}: survival_days must be >= 0")
		if self.censorship not in (0, 1):
			raise ValueError(f"Patient {self.id}: censorship must be 0 or 1")

	def to_row(self) -> dict[str, Any]:
		row: dict[str, Any] = {
			"id": self.id,
			"age": self.age,
			"gender": self.gender,
			"grade": self.grade,
			"survival_days": self.survival_days,
			"censorship": self.censorship,
		}
		row.update({name: self.immune[name] for name in auxfun.immune_marker_names()})
		if self.drf is not None:
			row.update(self.drf.to_dict())
		return row


@dataclass(frozen=True)
class ManifestEntry:
	"""One patient of the cohort manifest, with paths resolved."""

	record: PatientRecord
	volumes: dict[Modality, Path]
	masks: dict[Modality, Path]


@dataclass
class CohortResult:
	"""Feature table plus the patients that were skipped.

	Attributes:
		table: one row per extracted patient, in manifest order.
		failures: ``(patient_id, message)`` per skipped patient.
	"""

	table: pl.DataFrame
	failures: list[tuple[str, str]] = field(default_factory=list)


def _require(entry: Mapping[str, Any], key: str, where: str) -> Any:
	if key not in entry:
		raise ManifestError(f"{where}: missing field {key!r}")
	return entry[key]


def _parse_entry(entry: Any, base: Path, n: int) -> ManifestEntry:
	where = f"manifest entry {n}"
	if not isinstance(entry, Mapping):
		raise ManifestError(f"{where}: expected an object, got {type(entry).__name__}")
	pid = str(_require(entry, "id", where))
	where = f"manifest entry {n} ({pid})"

	if "censorship" in entry:
		censorship = int(entry["censorship"])
	elif "censored" in entry:
		censorship = 0 if bool(entry["censored"]) else 1
	else:
		raise ManifestError(f"{where}: missing field 'censorship'")

	gender = str(_require(entry, "gender", where)).strip().lower()
	if gender not in GENDERS:
		raise ManifestError(f"{where}: unknown gender {entry['gender']!r}")

	immune = _require(entry, "immune", where)
	if not isinstance(immune, Mapping):
		raise ManifestError(f"{where}: 'immune' must be an object")

	age = _require(entry, "age", where)
	survival_days = _require(entry, "survival_days", where)
	try:
		record = PatientRecord(
			id=pid,
			age=float(age),
			gender=GENDERS[gender],
			survival_days=float(survival_days),
			censorship=censorship,
			immune={str(k): float(v) for k, v in immune.items()},
			grade=None if entry.get("grade") is None else str(entry["grade"]),
		)
	except (TypeError, ValueError) as e:
		raise ManifestError(f"{where}: {e}") from e

	volumes = {m: base / entry[m.value] for m in MODALITY_ORDER if m.value in entry}
	if "masks" in entry:
		masks = {Modality(k): base / v for k, v in entry["masks"].items()}
	elif "mask" in entry:
		masks = dict.fromkeys(volumes, base / entry["mask"])
	else:
		raise ManifestError(f"{where}: needs 'mask' or 'masks'")

	return ManifestEntry(record, volumes, masks)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
	"""Parse a cohort manifest: a JSON array of patient objects.

	Volume and mask paths are resolved relative to the manifest's directory.

	Raises:
		ManifestError: unreadable, not an array, empty, or an entry is malformed.
	"""
	path = Path(path)
	try:
		with open(path) as f:
			entries = json.load(f)
	except (OSError, json.JSONDecodeError) as e:
		raise ManifestError(f"Cannot read manifest {path}: {e}") from e

	if not isinstance(entries, list):
		raise ManifestError(f"Manifest {path} must be a JSON array of patients")
	if not entries:
		raise ManifestError(f"Manifest {path} lists no patient")

	parsed = [_parse_entry(entry, path.parent, n) for n, entry in enumerate(entries)]
	ids = [e.record.id for e in parsed]
	if len(set(ids)) != len(ids):
		raise ManifestError(f"Manifest {path} has duplicate patient ids")
	return parsed


def map_quantifiers(activation: np.ndarray, mask: np.ndarray, levels: int = 32) -> np.ndarray:
	"""41 quantifiers of one activation map quantized inside ``mask``."""
	q = quantize(Volume(activation), RoiMask(mask), levels)
	return texture.quantifier_vector(q)


def extract_modality_drf(
	v: Volume, m: RoiMask, w: NetworkWeights, cfg: ExtractionSettings | Mapping[str, Any]
) -> np.ndarray:
	"""The 45 DRFs of one modality: averaged map quantifiers plus shape.

	Raises:
		EmptyRoi: the mask (or its resampled version) has no foreground voxel.
		ValueError: volume and mask are misaligned.
	"""
	settings = cfg if isinstance(cfg, ExtractionSettings) else ExtractionSettings.from_config(cfg)
	m.check_aligned(v)
	m.require_nonempty()

	rv, rm = resample_isotropic(v, m, settings.target_spacing)
	if not rm.data.any():
		raise EmptyRoi(f"ROI vanished after resampling to {settings.target_spacing} mm")
	nv = normalize_unit(rv)

	cube, cube_mask = cnn.prepare_input(nv, rm, settings.side)
	stacks = cnn.forward_activations(w, cube, cube_mask, settings.layers)

	vectors = [
		map_quantifiers(stack.maps[c], stack.mask, settings.levels)
		for stack in stacks
		for c in range(stack.n_maps)
	]
	averaged = np.mean(vectors, axis=0)
	shape = texture.shape_features(m, v.spacing)
	return np.concatenate([averaged, shape])


def extract_signature(
	inputs: Mapping[Modality | str, tuple[Volume, RoiMask]],
	w: NetworkWeights,
	cfg: ExtractionSettings | Mapping[str, Any],
) -> DrfSignature:
	"""Concatenate per-modality blocks in the fixed modality order.

	Raises:
		MissingModality: a configured modality has no volume/mask pair.
	"""
	settings = cfg if isinstance(cfg, ExtractionSettings) else ExtractionSettings.from_config(cfg)
	inputs = {Modality(k): pair for k, pair in inputs.items()}
	missing = [m.value for m in settings.modalities if m not in inputs]
	if missing:
		raise MissingModality(f"Missing modalities {missing}")

	names: list[str] = []
	blocks: list[np.ndarray] = []
	for modality in settings.modalities:
		v, m = inputs[modality]
		blocks.append(extract_modality_drf(v, m, w, settings))
		names.extend(f"{modality}_{name}" for name in texture.DRF_NAMES)
	return DrfSignature(tuple(names), np.concatenate(blocks))


def drf_column_names(modalities: Sequence[Modality | str]) -> list[str]:
	"""DRF column names for ``modalities`` in signature order."""
	mods = [m for m in MODALITY_ORDER if m in {Modality(x) for x in modalities}]
	return [f"{m}_{name}" for m in mods for name in texture.DRF_NAMES]


def table_schema(modalities: Sequence[Modality | str]) -> dict[str, Any]:
	"""Column -> dtype of the feature table, in column order."""
	schema = dict(METADATA_SCHEMA)
	schema.update(dict.fromkeys(auxfun.immune_marker_names(), pl.Float64))
	schema.update(dict.fromkeys(drf_column_names(modalities), pl.Float64))
	return schema


def column_manifest(modalities: Sequence[Modality | str]) -> dict[str, Any]:
	"""Versioned manifest of every feature-table column."""
	drf = texture.feature_manifest([m.value for m in MODALITY_ORDER if m in set(modalities)])
	columns = [{"name": c, "group": "metadata"} for c in METADATA_COLUMNS]
	columns += [{"name": c, "group": "immune"} for c in auxfun.immune_marker_names()]
	columns += [{"name": c["name"], "group": c["group"]} for c in drf["columns"]]
	for i, col in enumerate(columns):
		col["index"] = i
	return {"manifest_version": drf["manifest_version"], "columns": columns}


def _process_patient(
	entry: ManifestEntry, w: NetworkWeights, settings: ExtractionSettings
) -> PatientRecord:
	inputs: dict[Modality, tuple[Volume, RoiMask]] = {}
	for modality in settings.modalities:
		if modality not in entry.volumes or modality not in entry.masks:
			raise MissingModality(f"Patient {entry.record.id}: no {modality} volume or mask")
		v = load_volume(entry.volumes[modality], modality=modality)
		mask_volume = load_volume(entry.masks[modality])
		if not np.allclose(mask_volume.spacing, v.spacing, rtol=1e-3):
			logger.warning(
				"Patient %s: %s mask spacing %s differs from volume spacing %s",
				entry.record.id,
				modality,
				mask_volume.spacing,
				v.spacing,
			)
		inputs[modality] = (v, RoiMask(mask_volume.data > 0, v.spacing))
	signature = extract_signature(inputs, w, settings)
	return dataclasses.replace(entry.record, drf=signature)


def run_cohort(
	manifest: str | Path | Sequence[ManifestEntry],
	w: NetworkWeights,
	cfg: ExtractionSettings | Mapping[str, Any],
	n_threads: int | None = None,
) -> CohortResult:
	"""Extract every manifest patient into one feature table.

	Patients run in a thread pool; rows come out in manifest order. A patient
	whose extraction fails is logged and skipped.

	Raises:
		ManifestError: the manifest cannot be read or is empty.
	"""
	settings = cfg if isinstance(cfg, ExtractionSettings) else ExtractionSettings.from_config(cfg)
	entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
	if not entries:
		raise ManifestError("Manifest lists no patient")

	workers = n_threads or auxfun.thread_count()
	logger.info("Extracting %d patients with %d workers", len(entries), workers)

	def job(entry: ManifestEntry) -> PatientRecord | str:
		try:
			return _process_patient(entry, w, settings)
		except (DrfError, OSError, ValueError) as e:
			return f"{type(e).__name__}: {e}"

	with ThreadPoolExecutor(max_workers=workers) as pool:
		outcomes = list(pool.map(job, entries))

	rows: list[dict[str, Any]] = []
	failures: list[tuple[str, str]] = []
	for entry, outcome in zip(entries, outcomes, strict=True):
		if isinstance(outcome, str):
			logger.warning("Patient %s skipped: %s", entry.record.id, outcome)
			failures.append((entry.record.id, outcome))
		else:
			rows.append(outcome.to_row())

	table = pl.DataFrame(rows, schema=table_schema(settings.modalities))
	logger.info("Extracted %d of %d patients", table.height, len(entries))
	return CohortResult(table, failures)


def expected_column_count(n_modalities: int) -> int:
	"""Metadata + immune + DRF column count of a feature table."""
	return len(METADATA_COLUMNS) + len(auxfun.immune_marker_names()) + n_modalities * len(
		texture.DRF_NAMES
	)
