import functools
import hashlib
import json
import logging
from collections.abc import Callable, Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "drf-columns/1"


class FeatureRegistry:
	"""Registry of quantifier groups and their canonical feature names.

	Each group is registered once with the ordered names of the scalars its
	function returns. Registration order is the canonical order, so the
	feature vector layout and the CSV column manifest are both derived from
	this registry and cannot drift apart.
	"""

	def __init__(self):
		self._registry: dict[str, Callable[..., np.ndarray]] = {}
		self._names: dict[str, tuple[str, ...]] = {}
		# group -> "roi" (takes a QuantizedRoi) or "mask" (takes an RoiMask).
		self._sources: dict[str, str] = {}

	def register(self, group: str, names: Sequence[str], source: str = "roi"):
		"""Register a quantifier group.

		Every call is checked to return exactly ``len(names)`` scalars.

		Args:
			group: short group key, also the feature-name prefix.
			names: ordered scalar names produced by the function.
			source: ``"roi"`` for functions of a quantized ROI, ``"mask"`` for
				functions of the anatomical mask.
		"""
		if source not in ("roi", "mask"):
			raise ValueError(f"Unknown quantifier source {source!r}")

		def wrapper(func: Callable[..., Any]):
			@functools.wraps(func)
			def checked(*args, **kwargs) -> np.ndarray:
				values = np.asarray(func(*args, **kwargs), dtype=np.float64).ravel()
				if values.size != len(names):
					raise ValueError(
						f"Quantifier group {group!r} returned {values.size} values, "
						f"expected {len(names)}"
					)
				return values

			if group in self._registry:
				raise ValueError(f"Quantifier group {group!r} registered twice")
			self._registry[group] = checked
			self._names[group] = tuple(names)
			self._sources[group] = source
			return checked

		return wrapper

	def groups(self, source: str | None = None) -> list[str]:
		"""Group keys in canonical order, optionally filtered by source."""
		return [g for g in self._registry if source is None or self._sources[g] == source]

	def names(self, source: str | None = None) -> list[str]:
		"""Prefixed feature names (``<group>_<name>``) in canonical order."""
		return [f"{g}_{name}" for g in self.groups(source) for name in self._names[g]]

	def compute(self, group: str, *args, **kwargs) -> np.ndarray:
		"""Run one registered group."""
		if group not in self._registry:
			raise KeyError(f"{group} not registered. Available groups: {self.groups()}")
		return self._registry[group](*args, **kwargs)

	def manifest(self, prefixes: Sequence[str]) -> pl.DataFrame:
		"""Column manifest ``(name, group, index)`` for each prefix block.

		Args:
			prefixes: block prefixes (modality names) in column order.
		"""
		rows: list[dict[str, Any]] = []
		for prefix in prefixes:
			for group in self.groups():
				for name in self._names[group]:
					rows.append(
						{"name": f"{prefix}_{group}_{name}", "group": group, "index": len(rows)}
					)
		return pl.DataFrame(
			rows, schema={"name": pl.String, "group": pl.String, "index": pl.Int64}
		)


class StepRegistry:
	"""Registry of study steps and the dependency graph between them.

	Each step is pure compute: it receives the resolved run config and returns
	a mapping of output file name to table (``pl.DataFrame``) or JSON-ready
	dict. This registry owns the shared lifecycle: cache short-circuit,
	output-directory resolution and atomic writing.

	A run leaves a stamp ``.<step>.step.json`` next to the outputs with the
	fingerprint of what produced them and every file written. Cached outputs
	are reused only while the fingerprint still matches.
	"""

	def __init__(self):
		self._registry: dict[str, Callable] = {}
		# name -> step names it reads from. Defines the dependency graph.
		self._requires: dict[str, list[str]] = {}
		self._outputs: dict[str, list[str]] = {}
		self._params: dict[str, list[str] | None] = {}
		self._input_files: dict[str, list[str]] = {}

	def register_step(
		self,
		name: str,
		requires: Sequence[str] = (),
		outputs: Sequence[str] = (),
		params: Sequence[str] | None = None,
		input_files: Sequence[str] = (),
	):
		"""Register a study step.

		Args:
			name: step key, also the CLI subcommand it backs.
			requires: step names whose outputs this step reads. Names with no
				registered step are external prerequisites and create no edge.
			outputs: fixed output files, always present after a run. Their
				bytes enter the fingerprint of every step requiring this one.
			params: config keys the outputs depend on; ``None`` means the
				whole config except ``out`` and ``subcommand``.
			input_files: config keys naming files whose content enters the
				fingerprint.
		"""

		def wrapper(func: Callable):
			@functools.wraps(func)
			def lifecycle(
				config_path: str | Path | dict,
				*,
				overwrite: bool = False,
				save_data: bool = True,
				**kwargs,
			) -> dict[str, Any]:
				from deepradiomics.utils import auxfun

				cfg: dict[str, Any] = auxfun.read_config(config_path)
				out_dir = Path(cfg["out"])
				fingerprint = self.fingerprint(name, cfg)

				cached = None if overwrite else self._cached_files(name, out_dir, fingerprint)
				if cached is not None:
					logger.info("Step %r: outputs in %s are up to date, skipping", name, out_dir)
					return {o: auxfun.load_output(out_dir / o) for o in cached}

				result: dict[str, Any] = func(cfg, **kwargs)

				if save_data:
					out_dir.mkdir(parents=True, exist_ok=True)
					for stale in self._stamped_files(name, out_dir) - set(result):
						logger.debug("Step %r: removing stale output %s", name, stale)
						(out_dir / stale).unlink(missing_ok=True)
					for fname, obj in result.items():
						auxfun.write_atomic(out_dir / fname, obj)
					stamp = {"step": name, "fingerprint": fingerprint, "files": sorted(result)}
					auxfun.write_atomic(self._stamp_path(name, out_dir), stamp)

				return result

			self._registry[name] = lifecycle
			self._requires[name] = list(requires)
			self._outputs[name] = list(outputs)
			self._params[name] = None if params is None else list(params)
			self._input_files[name] = list(input_files)
			return lifecycle

		return wrapper

	@staticmethod
	def _stamp_path(name: str, out_dir: Path) -> Path:
		return out_dir / f".{name}.step.json"

	def _read_stamp(self, name: str, out_dir: Path) -> dict[str, Any] | None:
		path = self._stamp_path(name, out_dir)
		if not path.is_file():
			return None
		try:
			stamp = json.loads(path.read_text())
		except (OSError, json.JSONDecodeError):
			logger.warning("Step %r: unreadable stamp %s ignored", name, path)
			return None
		return stamp if isinstance(stamp, dict) else None

	def _stamped_files(self, name: str, out_dir: Path) -> set[str]:
		stamp = self._read_stamp(name, out_dir)
		return set(stamp.get("files", [])) if stamp else set()

	def _cached_files(self, name: str, out_dir: Path, fingerprint: str) -> list[str] | None:
		"""Files of a previous run with the same fingerprint, if all still exist."""
		stamp = self._read_stamp(name, out_dir)
		if stamp is None or stamp.get("fingerprint") != fingerprint:
			return None
		files = list(stamp.get("files", []))
		if not set(self._outputs[name]) <= set(files):
			return None
		if not all((out_dir / f).is_file() for f in files):
			return None
		return files

	def fingerprint(self, name: str, cfg: dict[str, Any]) -> str:
		"""Digest of what a step's outputs depend on.

		Covers the step's config values, the content of its input files and
		the bytes of the fixed outputs of the steps it requires.
		"""
		keys = self._params[name]
		if keys is None:
			params = {k: v for k, v in cfg.items() if k not in ("out", "subcommand")}
		else:
			params = {k: cfg.get(k) for k in keys}

		digest = hashlib.sha256()
		digest.update(name.encode())
		digest.update(json.dumps(params, sort_keys=True, default=str).encode())
		for key in self._input_files[name]:
			path = cfg.get(key)
			if path is not None and Path(path).is_file():
				digest.update(Path(path).read_bytes())
		out_dir = Path(cfg["out"])
		for req in self._requires[name]:
			for fname in self._outputs.get(req, []):
				path = out_dir / fname
				if path.is_file():
					digest.update(fname.encode())
					digest.update(path.read_bytes())
		return digest.hexdigest()

	def list_available(self) -> list[str]:
		"""Returns a list of all registered step names."""
		return list(self._registry.keys())

	def get(self, name: str) -> Callable:
		"""The lifecycle-wrapped step registered under ``name``."""
		if name not in self._registry:
			raise KeyError(f"{name} not found. Available steps: {self.list_available()}")
		return self._registry[name]

	def _resolve_order(self, targets: list[str] | None = None) -> list[str]:
		"""Topologically sort the steps.

		Edges run from a step to each of its required keys that is itself a step.
		If ``targets`` is given, only those steps and their transitive
		dependencies are returned.
		"""
		steps = set(self._requires)

		deps: dict[str, set[str]] = {
			name: {req for req in self._requires[name] if req in steps} for name in steps
		}

		if targets is not None:
			unknown = set(targets) - steps
			if unknown:
				raise KeyError(f"Unknown step(s): {sorted(unknown)}")
			wanted: set[str] = set()
			stack = list(targets)
			while stack:
				step = stack.pop()
				if step in wanted:
					continue
				wanted.add(step)
				stack.extend(deps[step])
			deps = {name: (d & wanted) for name, d in deps.items() if name in wanted}

		# Kahn's algorithm; ties broken by registration order.
		rank = {name: i for i, name in enumerate(self._requires)}
		indegree = {name: len(d) for name, d in deps.items()}
		ready = sorted((name for name, n in indegree.items() if n == 0), key=rank.__getitem__)
		order: list[str] = []
		while ready:
			node = ready.pop(0)
			order.append(node)
			for other, d in deps.items():
				if node in d:
					indegree[other] -= 1
					if indegree[other] == 0:
						ready.append(other)
			ready.sort(key=rank.__getitem__)

		if len(order) != len(deps):
			raise ValueError(f"Cycle detected among steps: {sorted(set(deps) - set(order))}")

		return order

	@property
	def study_steps(self) -> list[str]:
		"""A valid topological execution order of all steps."""
		return self._resolve_order()

	def run_pipeline(
		self, config: dict[str, Any], targets: list[str] | None = None, **kwargs
	) -> Iterator[tuple[str, int, int]]:
		"""Runs the steps in dependency order and yields status updates.

		Yields:
			(step_name, current_index, total_steps)
		"""
		order = self._resolve_order(targets)
		total = len(order)
		for i, name in enumerate(order):
			self._registry[name](config, **kwargs)
			yield name, i + 1, total


feature_registry = FeatureRegistry()
step_registry = StepRegistry()
