from dataclasses import asdict, dataclass, field, fields
from typing import Any, ClassVar

from deepradiomics.utils import auxfun
from deepradiomics.utils.errors import ConfigError

MODALITIES: tuple[str, ...] = auxfun.MODALITY_PREFIXES
LAYER_CHOICES: tuple[str, ...] = ("1", "2", "both")
EVAL_MODES: tuple[str, ...] = ("loocv", "split")
STATS_COHORTS: tuple[str, ...] = ("all", "train")
COMBO_BLOCKS: tuple[str, ...] = ("R", "C", "I")
DEFAULT_COMBOS: tuple[str, ...] = ("R", "C", "I", "R+C", "R+I", "C+I", "R+C+I")


def _default(section: str, key: str):
	return field(default_factory=lambda: auxfun.load_defaults()[section][key])


def parse_combo(combo: str) -> tuple[str, ...]:
	"""Split a feature-set combination such as ``"R+C+I"`` into its blocks.

	Blocks come back in canonical R, C, I order.

	Raises:
		ConfigError: empty, repeated or unknown token.
	"""
	tokens = [t.strip().upper() for t in combo.split("+")]
	unknown = [t for t in tokens if t not in COMBO_BLOCKS]
	if not combo.strip() or unknown:
		raise ConfigError(
			f"Unknown feature-set token(s) {unknown or [combo]} in {combo!r}; "
			"use R, C, I joined by '+'"
		)
	if len(set(tokens)) != len(tokens):
		raise ConfigError(f"Repeated feature-set token in {combo!r}")
	return tuple(b for b in COMBO_BLOCKS if b in tokens)


@dataclass
class RunConfig:
	"""Template for a run configuration shared by every subcommand.

	Attributes:
		subcommand: CLI subcommand the config drives.
		out: output directory.
		seed: root seed; required by stochastic subcommands.
		modalities: modality subset, kept in signature order.
	"""

	STOCHASTIC: ClassVar[frozenset[str]] = frozenset({"classify", "markers", "synth", "all"})

	subcommand: str
	out: str
	seed: int | None = None
	modalities: list[str] = field(default_factory=lambda: list(MODALITIES))

	def __post_init__(self):
		unknown = [m for m in self.modalities if m not in MODALITIES]
		if unknown or not self.modalities:
			raise ConfigError(f"Unknown or empty modality selection {self.modalities}")
		self.modalities = [m for m in MODALITIES if m in self.modalities]
		if self.subcommand in self.STOCHASTIC and self.seed is None:
			raise ConfigError(f"Subcommand {self.subcommand!r} needs an explicit --seed")

	def to_dict(self) -> dict[str, Any]:
		"""Serialize the config to a plain dict ready to write to TOML or JSON."""
		return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class ExtractConfig(RunConfig):
	"""Config of the feature-extraction step.

	Attributes:
		manifest: cohort manifest JSON.
		weights: network weight file.
		levels: activation-map quantization levels.
		layers: ``"1"``, ``"2"`` or ``"both"``.
		side: CNN input cube side.
		target_spacing: isotropic resampling target in mm.
	"""

	manifest: str | None = None
	weights: str | None = None
	levels: int = _default("texture", "levels")
	layers: str = _default("cnn", "layers")
	side: int = _default("cnn", "side")
	target_spacing: float = _default("volume", "target_spacing")

	def __post_init__(self):
		super().__post_init__()
		self.layers = str(self.layers)
		if self.layers not in LAYER_CHOICES:
			raise ConfigError(f"layers must be one of {LAYER_CHOICES}, got {self.layers!r}")
		if self.levels < 2:
			raise ConfigError(f"levels must be at least 2, got {self.levels}")
		if self.side < 2:
			raise ConfigError(f"side must be at least 2, got {self.side}")
		if not self.target_spacing > 0:
			raise ConfigError(f"target_spacing must be positive, got {self.target_spacing}")
		if self.subcommand in ("extract", "all") and not (self.manifest and self.weights):
			raise ConfigError(f"Subcommand {self.subcommand!r} needs --manifest and --weights")


@dataclass
class StudyConfig(ExtractConfig):
	"""Config of the statistics and classification steps.

	Attributes:
		combos: feature-set combinations such as ``"R+C+I"``.
		eval: evaluation modes (``"loocv"``, ``"split"``).
		train_n: training-set size of the split evaluation.
		n_trees: trees per forest.
		min_leaf: minimum samples per leaf.
		mtry: candidate features per split, ``"sqrt"`` or an integer.
		score_threshold: predicted-score cut separating the predicted groups.
		alpha: significance level after Holm correction.
		stats_cohort: rows the statistics step uses, ``"all"`` or the split's
			``"train"`` rows.
	"""

	combos: list[str] = field(default_factory=lambda: list(DEFAULT_COMBOS))
	eval: list[str] = field(
		default_factory=lambda: [auxfun.load_defaults()["evaluation"]["mode"]]
	)
	train_n: int = _default("evaluation", "train_n")
	n_trees: int = _default("forest", "n_trees")
	min_leaf: int = _default("forest", "min_leaf")
	mtry: str | int = _default("forest", "mtry")
	score_threshold: float = _default("evaluation", "score_threshold")
	alpha: float = _default("stats", "alpha")
	stats_cohort: str = _default("stats", "cohort")

	def __post_init__(self):
		super().__post_init__()
		for combo in self.combos:
			parse_combo(combo)
		bad = [m for m in self.eval if m not in EVAL_MODES]
		if bad or not self.eval:
			raise ConfigError(f"eval modes must be among {EVAL_MODES}, got {self.eval}")
		if self.train_n < 2:
			raise ConfigError(f"train_n must be at least 2, got {self.train_n}")
		if self.n_trees < 1 or self.min_leaf < 1:
			raise ConfigError("n_trees and min_leaf must be positive")
		if isinstance(self.mtry, str) and self.mtry.isdigit():
			self.mtry = int(self.mtry)
		if self.mtry != "sqrt" and not (isinstance(self.mtry, int) and self.mtry >= 1):
			raise ConfigError(f"mtry must be 'sqrt' or a positive integer, got {self.mtry!r}")
		if not 0.0 < self.alpha < 1.0:
			raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
		if self.stats_cohort not in STATS_COHORTS:
			raise ConfigError(
				f"stats_cohort must be one of {STATS_COHORTS}, got {self.stats_cohort!r}"
			)
		if self.stats_cohort == "train" and self.seed is None:
			raise ConfigError("stats_cohort = 'train' needs an explicit --seed for the split")


@dataclass
class SynthConfig(RunConfig):
	"""Config of the synthetic-cohort generator.

	Attributes:
		n_patients: cohort size.
		dims: volume grid size.
	"""

	n_patients: int = 24
	dims: list[int] = field(default_factory=lambda: [24, 24, 16])

	def __post_init__(self):
		super().__post_init__()
		if self.n_patients < 2:
			raise ConfigError(f"n_patients must be at least 2, got {self.n_patients}")
		if len(self.dims) != 3 or min(self.dims) < 8:
			raise ConfigError(f"dims must be three sizes >= 8, got {self.dims}")


CONFIG_TEMPLATES: dict[str, type[RunConfig]] = {
	"extract": ExtractConfig,
	"stats": StudyConfig,
	"classify": StudyConfig,
	"markers": StudyConfig,
	"all": StudyConfig,
	"synth": SynthConfig,
	"init-weights": ExtractConfig,
}


def make_config(subcommand: str, **values: Any) -> RunConfig:
	"""Build the config template of ``subcommand`` from keyword values.

	Keys the template does not define are ignored; ``None`` values fall back
	to the template default.
	"""
	template = CONFIG_TEMPLATES.get(subcommand)
	if template is None:
		raise ConfigError(f"Unknown subcommand {subcommand!r}")
	names = {f.name for f in fields(template)}
	kwargs = {k: v for k, v in values.items() if k in names and v is not None}
	return template(subcommand=subcommand, **kwargs)
