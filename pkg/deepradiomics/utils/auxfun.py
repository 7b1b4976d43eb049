import datetime as dt
import functools
import json
import os
import tempfile
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import polars as pl
import toml

from deepradiomics.utils.errors import ConfigError, IngestError

MODALITY_PREFIXES: tuple[str, ...] = ("t1wi", "t1ce", "t2wi", "flair")
CLINICAL_COLUMNS: tuple[str, ...] = ("age", "gender")
REQUIRED_METADATA: tuple[str, ...] = ("id", "age", "gender", "survival_days", "censorship")


def read_config(config_path: str | Path | dict[str, Any]) -> dict:
	"""Auxfun to check validity of the passed config_path variable (config path or dict)."""
	if isinstance(config_path, dict):
		return config_path

	elif isinstance(config_path, (str, Path)):
		with open(config_path) as f:
			config: dict[str, Any] = toml.load(f)
		return config

	else:
		raise TypeError(
			f"config_path should be either a dict, Path or str, but {type(config_path)} provided."
		)


@functools.cache
def load_defaults() -> dict[str, Any]:
	"""Packaged default parameters (``defaults.toml``), grouped by section."""
	with resources.files("deepradiomics.config").joinpath("defaults.toml").open() as f:
		return toml.load(f)


@functools.cache
def immune_marker_labels() -> dict[str, str]:
	"""Marker column name -> display name, in cohort-table order."""
	with resources.files("deepradiomics.config").joinpath("immune_markers.toml").open() as f:
		return dict(toml.load(f)["markers"])


def immune_marker_names() -> tuple[str, ...]:
	"""The 22 immune-marker column names in cohort-table order."""
	return tuple(immune_marker_labels())


def package_version() -> str:
	try:
		return version("deepradiomics")
	except PackageNotFoundError:
		return "0+unknown"


def thread_count() -> int:
	"""Worker count: ``DRF_THREADS`` when set, else the CPU count.

	Raises:
		ConfigError: ``DRF_THREADS`` is not a positive integer.
	"""
	raw = os.environ.get("DRF_THREADS")
	if raw:
		try:
			n = int(raw)
		except ValueError as e:
			raise ConfigError(f"DRF_THREADS must be a positive integer, got {raw!r}") from e
		if n < 1:
			raise ConfigError(f"DRF_THREADS must be a positive integer, got {raw!r}")
		return n
	return os.cpu_count() or 1


def write_atomic(path: str | Path, obj: Any) -> Path:
	"""Write ``obj`` to ``path`` through a temp file in the same directory.

	``pl.DataFrame`` -> CSV, ``dict``/``list`` -> JSON, ``bytes`` -> raw,
	``str`` -> text.
	"""
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
	tmp = Path(tmp_name)
	try:
		with os.fdopen(fd, "wb") as f:
			match obj:
				case pl.DataFrame():
					obj.write_csv(f)
				case dict() | list():
					f.write(json.dumps(obj, indent=1).encode())
				case bytes():
					f.write(obj)
				case str():
					f.write(obj.encode())
				case _:
					raise TypeError(f"Cannot write object of type {type(obj).__name__} to {path}")
		os.replace(tmp, path)
	except BaseException:
		tmp.unlink(missing_ok=True)
		raise
	return path


def load_output(path: str | Path) -> pl.DataFrame | dict | list | str:
	"""Read back a file written by :func:`write_atomic`."""
	path = Path(path)
	match path.suffix:
		case ".csv":
			return pl.read_csv(path)
		case ".json":
			with open(path) as f:
				return json.load(f)
		case _:
			return path.read_text()


def load_features(source: str | Path | dict[str, Any]) -> pl.DataFrame:
	"""Load and validate ``features.csv``.

	Args:
		source: the CSV path, or a run config whose ``out`` directory holds it.

	Raises:
		IngestError: file missing or unparsable, required columns absent, or
			feature columns not numeric.
	"""
	if isinstance(source, dict):
		path = Path(source["out"]) / "features.csv"
	else:
		path = Path(source)
		if path.suffix.lower() != ".csv" and not path.is_file():
			path = read_config(path)["out"]
			path = Path(path) / "features.csv"

	if not path.is_file():
		raise IngestError(f"Feature table not found: {path}. Run 'extract' first.")
	try:
		df = pl.read_csv(path, schema_overrides={"id": pl.String, "grade": pl.String})
	except (pl.exceptions.PolarsError, OSError, UnicodeDecodeError) as e:
		raise IngestError(f"Cannot parse feature table {path}: {e}") from e

	missing = [c for c in (*REQUIRED_METADATA, *immune_marker_names()) if c not in df.columns]
	if missing:
		raise IngestError(f"Feature table {path} lacks required columns: {missing}")

	numeric = ["age", "survival_days", "censorship", *immune_marker_names(), *drf_columns(df)]
	bad = [c for c in numeric if not df.schema[c].is_numeric()]
	if bad:
		raise IngestError(f"Feature table {path} has non-numeric feature columns: {bad}")
	if df.height == 0:
		raise IngestError(f"Feature table {path} has no rows")

	return df.with_columns(pl.col(c).cast(pl.Float64) for c in numeric if c != "censorship")


def drf_columns(df: pl.DataFrame, modalities: list[str] | None = None) -> list[str]:
	"""DRF columns of a feature table, optionally restricted to ``modalities``."""
	prefixes = tuple(f"{m}_" for m in (modalities or MODALITY_PREFIXES))
	return [c for c in df.columns if c.startswith(prefixes)]


def utc_now() -> str:
	return dt.datetime.now(dt.UTC).isoformat(timespec="seconds")


def runinfo(
	cfg: dict[str, Any], started: str, warnings: int, exit_code: int
) -> dict[str, Any]:
	"""Provenance record written next to every run's outputs."""
	return {
		"subcommand": cfg.get("subcommand"),
		"seed": cfg.get("seed"),
		"version": package_version(),
		"started_utc": started,
		"finished_utc": utc_now(),
		"warnings": warnings,
		"exit_code": exit_code,
		"config": cfg,
	}
