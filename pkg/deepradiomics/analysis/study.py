"""Study steps: feature extraction, marker statistics, survival and marker classifiers.

Each step is registered in :data:`step_registry` and returns its output files
as a ``{file name: table or JSON dict}`` mapping; the registry lifecycle writes
them into the run's output directory.
"""

import logging
from typing import Any

import numpy as np
import polars as pl

from deepradiomics.analysis import ml, stats
from deepradiomics.core import cnn, pipeline
from deepradiomics.core.registries import step_registry
from deepradiomics.utils import auxfun
from deepradiomics.utils.config_templates import parse_combo
from deepradiomics.utils.errors import (
	ConfigError,
	SingleClassError,
	UndefinedAuc,
	UndefinedCorrelation,
	UndefinedTest,
)

logger = logging.getLogger(__name__)

SPEARMAN_FILE = "spearman_heatmap.csv"
WILCOXON_FILE = "wilcoxon_heatmap.csv"
SURVIVAL_FILE = "survival_scan.csv"
AUC_SUMMARY_FILE = "auc_summary.csv"
MARKER_TOP_FILE = "marker_top_features.csv"
TOP_FEATURES = 10

FOREST_PARAMS = ("n_trees", "mtry", "min_leaf", "seed", "importance", "score_threshold")
EVAL_PARAMS = ("modalities", "eval", "train_n", *FOREST_PARAMS)


def _modalities(cfg: dict[str, Any]) -> list[str]:
	return list(cfg.get("modalities") or auxfun.MODALITY_PREFIXES)


def _forest_config(cfg: dict[str, Any]) -> ml.ForestConfig:
	return ml.ForestConfig.from_config(cfg, n_jobs=auxfun.thread_count())


def combo_slug(combo: str) -> str:
	"""File-name form of a combination: ``"R+C+I"`` -> ``"r_c_i"``."""
	return "_".join(b.lower() for b in parse_combo(combo))


def combo_matrix(
	df: pl.DataFrame, combo: str, modalities: list[str] | None = None
) -> tuple[np.ndarray, list[str]]:
	"""Feature matrix of a combination of R (DRFs), C (age, gender) and I (markers).

	Gender is encoded 1 for male, 0 for female.

	Raises:
		ConfigError: unknown token in ``combo``.
	"""
	columns: list[pl.Expr] = []
	names: list[str] = []
	for block in parse_combo(combo):
		match block:
			case "R":
				drf = auxfun.drf_columns(df, modalities)
				columns += [pl.col(c) for c in drf]
				names += drf
			case "C":
				columns += [
					pl.col("age"),
					(pl.col("gender") == "male").cast(pl.Float64).alias("gender"),
				]
				names += list(auxfun.CLINICAL_COLUMNS)
			case "I":
				markers = list(auxfun.immune_marker_names())
				columns += [pl.col(c) for c in markers]
				names += markers
	X = df.select(columns).cast(pl.Float64).to_numpy()
	return X, names


def survival_dataset(
	df: pl.DataFrame, combo: str, modalities: list[str] | None = None
) -> ml.Dataset:
	"""Dataset whose labels are built per fold from survival days and censorship."""
	X, names = combo_matrix(df, combo, modalities)
	return ml.Dataset(
		X,
		tuple(names),
		times=df["survival_days"].to_numpy(),
		events=df["censorship"].to_numpy(),
		ids=tuple(df["id"].to_list()),
	)


def evaluate(d: ml.Dataset, mode: str, cfg: dict[str, Any]) -> ml.EvalReport:
	"""Run one evaluation mode (``"loocv"`` or ``"split"``) with the run's forest settings."""
	forest_cfg = _forest_config(cfg)
	match mode:
		case "loocv":
			return ml.evaluate_loocv(d, forest_cfg)
		case "split":
			return ml.evaluate_split(d, int(cfg.get("train_n", 100)), forest_cfg.seed, forest_cfg)
		case _:
			raise ValueError(f"Unknown evaluation mode {mode!r}")


# --- marker and survival statistics --------------------------------------------
def _with_holm(df: pl.DataFrame, alpha: float) -> pl.DataFrame:
	"""Append ``p_holm`` and ``significant`` over the non-null ``p_raw`` values."""
	p = df["p_raw"].to_numpy()
	defined = ~np.isnan(p)
	corrected = np.full(p.shape, np.nan)
	corrected[defined] = stats.holm_bonferroni(p[defined], int(defined.sum()))
	return df.with_columns(
		pl.Series("p_holm", corrected).fill_nan(None),
	).with_columns((pl.col("p_holm") < alpha).fill_null(False).alias("significant"))


def spearman_heatmap(
	df: pl.DataFrame, features: list[str], markers: list[str], alpha: float = 0.05
) -> pl.DataFrame:
	"""Spearman rho of every feature against every marker, Holm-corrected as one family.

	Undefined correlations (a constant column) have null ``rho`` and are left
	out of the family.
	"""
	rows: list[dict[str, Any]] = []
	undefined = 0
	for feature in features:
		x = df[feature].to_numpy()
		for marker in markers:
			try:
				res = stats.spearman(x, df[marker].to_numpy())
				rho, p = res.rho, res.p_raw
			except UndefinedCorrelation:
				rho, p = None, np.nan
				undefined += 1
			rows.append({"feature": feature, "marker": marker, "rho": rho, "p_raw": p})
	if undefined:
		logger.info("%d feature-marker correlations undefined (constant column)", undefined)

	table = pl.DataFrame(
		rows,
		schema={"feature": pl.String, "marker": pl.String, "rho": pl.Float64, "p_raw": pl.Float64},
	)
	return _with_holm(table, alpha).with_columns(pl.col("p_raw").fill_nan(None))


def wilcoxon_heatmap(
	df: pl.DataFrame, features: list[str], markers: list[str], alpha: float = 0.05
) -> pl.DataFrame:
	"""Rank-sum test of every feature between high and low groups of every marker.

	Markers are split at their median; a marker whose split is degenerate is
	skipped with a warning.
	"""
	rows: list[dict[str, Any]] = []
	for marker in markers:
		split = stats.median_split(df[marker].to_numpy())
		if split.degenerate:
			logger.warning("Marker %s skipped in rank-sum heatmap: degenerate median split", marker)
			continue
		high = split.labels == 1
		for feature in features:
			x = df[feature].to_numpy()
			try:
				res = stats.wilcoxon_ranksum(x[high], x[~high])
				statistic, p = res.statistic, res.p_raw
			except UndefinedTest:
				statistic, p = None, np.nan
			rows.append({"feature": feature, "marker": marker, "statistic": statistic, "p_raw": p})

	table = pl.DataFrame(
		rows,
		schema={
			"feature": pl.String,
			"marker": pl.String,
			"statistic": pl.Float64,
			"p_raw": pl.Float64,
		},
	)
	table = table.with_columns(
		(-pl.col("p_raw").clip(lower_bound=np.finfo(float).tiny).log10()).alias("neg_log10_p")
	)
	return _with_holm(table, alpha).with_columns(pl.col("p_raw", "neg_log10_p").fill_nan(None))


def survival_scan(df: pl.DataFrame, features: list[str]) -> pl.DataFrame:
	"""Univariate log-rank scan of every feature, age, gender and marker.

	Continuous variables are split at the median ("≥" vs "<" groups); gender is
	split male vs female. Holm correction uses the full scanned family size,
	including variables whose split was degenerate. Rows are sorted by raw p.
	"""
	samples = stats.samples_from(df["survival_days"].to_numpy(), df["censorship"].to_numpy())
	family = [*features, *auxfun.CLINICAL_COLUMNS, *auxfun.immune_marker_names()]

	rows: list[dict[str, Any]] = []
	for name in family:
		if name == "gender":
			high = (df["gender"] == "male").to_numpy()
		else:
			split = stats.median_split(df[name].to_numpy())
			high = split.labels == 1
		ge = [s for s, h in zip(samples, high, strict=True) if h]
		lt = [s for s, h in zip(samples, high, strict=True) if not h]
		row: dict[str, Any] = {"feature": name}
		if ge and lt and any(s.event for s in samples):
			res = stats.logrank(ge, lt)
			row.update(
				median_survival_ge=stats.kaplan_meier(ge).median_survival(),
				median_survival_lt=stats.kaplan_meier(lt).median_survival(),
				p_value=res.p_raw,
				hr=res.hr,
				ci_low=res.ci_low,
				ci_high=res.ci_high,
			)
		else:
			logger.info("Survival scan: %s has a degenerate split, not tested", name)
		rows.append(row)

	schema = {
		"feature": pl.String,
		"median_survival_ge": pl.Float64,
		"median_survival_lt": pl.Float64,
		"p_value": pl.Float64,
		"hr": pl.Float64,
		"ci_low": pl.Float64,
		"ci_high": pl.Float64,
	}
	table = pl.DataFrame(rows, schema=schema)
	p = table["p_value"].to_numpy()
	defined = ~np.isnan(p)
	corrected = np.full(p.shape, np.nan)
	corrected[defined] = stats.holm_bonferroni(p[defined], len(family))
	return (
		table.with_columns(pl.Series("p_corrected", corrected).fill_nan(None))
		.with_columns(pl.col("p_value").fill_nan(None))
		.sort("p_value", nulls_last=True, maintain_order=True)
	)


# --- registered steps ----------------------------------------------------------
@step_registry.register_step(
	"extract",
	outputs=("features.csv", "columns.json"),
	params=("modalities", "manifest", "weights", "levels", "layers", "side", "target_spacing"),
	input_files=("manifest", "weights"),
)
def extract_features(cfg: dict[str, Any]) -> dict[str, Any]:
	"""Extract the cohort feature table and its column manifest."""
	weights = cnn.load_weights(cfg["weights"])
	result = pipeline.run_cohort(cfg["manifest"], weights, cfg)
	if result.failures:
		logger.warning("%d patient(s) skipped during extraction", len(result.failures))
	return {
		"features.csv": result.table,
		"columns.json": pipeline.column_manifest(_modalities(cfg)),
	}


@step_registry.register_step(
	"stats",
	requires=("extract",),
	outputs=(SPEARMAN_FILE, WILCOXON_FILE, SURVIVAL_FILE),
	params=("modalities", "alpha", "stats_cohort", "train_n", "seed"),
)
def marker_statistics(cfg: dict[str, Any]) -> dict[str, pl.DataFrame]:
	"""Spearman and rank-sum heatmaps against the markers plus the survival scan.

	With ``stats_cohort = "train"`` the three tables use only the training rows
	of the seeded single split (``train_n``, ``seed``), the same rows the split
	classifiers train on; the default ``"all"`` uses the whole cohort.
	"""
	df = auxfun.load_features(cfg)
	if cfg.get("stats_cohort", "all") == "train":
		try:
			train, _ = ml.split_indices(df.height, int(cfg.get("train_n", 100)), int(cfg["seed"]))
		except ValueError as e:
			raise ConfigError(f"stats_cohort = 'train': {e}") from e
		df = df.select(pl.all().gather(train))
		logger.info("Statistics on the %d training patients of the split", df.height)
	features = auxfun.drf_columns(df, _modalities(cfg))
	markers = list(auxfun.immune_marker_names())
	alpha = float(cfg.get("alpha", 0.05))
	return {
		SPEARMAN_FILE: spearman_heatmap(df, features, markers, alpha),
		WILCOXON_FILE: wilcoxon_heatmap(df, features, markers, alpha),
		SURVIVAL_FILE: survival_scan(df, features),
	}


@step_registry.register_step(
	"classify",
	requires=("extract",),
	outputs=(AUC_SUMMARY_FILE,),
	params=(*EVAL_PARAMS, "combos"),
)
def survival_classification(cfg: dict[str, Any]) -> dict[str, Any]:
	"""Short vs long survival classifiers for every requested feature-set combination."""
	df = auxfun.load_features(cfg)
	modalities = _modalities(cfg)
	outputs: dict[str, Any] = {}
	summary: list[dict[str, Any]] = []

	for combo in cfg.get("combos", ["R+C+I"]):
		d = survival_dataset(df, combo, modalities)
		slug = combo_slug(combo)
		for mode in cfg.get("eval", ["loocv"]):
			row: dict[str, Any] = {"combo": combo, "eval": mode, "n_features": d.p}
			try:
				report = evaluate(d, mode, cfg)
			except (UndefinedAuc, SingleClassError, ValueError) as e:
				logger.warning("Combination %s (%s) not evaluated: %s", combo, mode, e)
				summary.append(row)
				continue

			outputs[f"report_{slug}_{mode}.json"] = report.to_json_dict(d.ids)
			outputs[f"importance_{slug}_{mode}.csv"] = report.importance_frame()
			if report.km is not None:
				outputs[f"km_{slug}_{mode}.csv"] = report.km
			lr = report.logrank
			row.update(
				auc=report.auc,
				logrank_p=None if lr is None else lr.p_raw,
				hr=None if lr is None else lr.hr,
				ci_low=None if lr is None else lr.ci_low,
				ci_high=None if lr is None else lr.ci_high,
			)
			summary.append(row)
			logger.info("%s (%s): AUC %.3f", combo, mode, report.auc)

	outputs[AUC_SUMMARY_FILE] = pl.DataFrame(
		summary,
		schema={
			"combo": pl.String,
			"eval": pl.String,
			"n_features": pl.Int64,
			"auc": pl.Float64,
			"logrank_p": pl.Float64,
			"hr": pl.Float64,
			"ci_low": pl.Float64,
			"ci_high": pl.Float64,
		},
	)
	return outputs


@step_registry.register_step(
	"markers", requires=("extract",), outputs=(MARKER_TOP_FILE,), params=EVAL_PARAMS
)
def marker_classification(cfg: dict[str, Any]) -> dict[str, pl.DataFrame]:
	"""Predict high vs low level of every immune marker from DRF subsets.

	Subsets are each configured modality plus ``"all"`` (every configured
	modality). Writes one AUC matrix (marker x subset) per evaluation mode and
	the top features of the combined subset.
	"""
	df = auxfun.load_features(cfg)
	modalities = _modalities(cfg)
	subsets = [*modalities, "all"]
	modes = list(cfg.get("eval", ["loocv"]))
	ids = tuple(df["id"].to_list())

	auc_rows: dict[str, list[dict[str, Any]]] = {mode: [] for mode in modes}
	top_rows: list[dict[str, Any]] = []
	for marker in auxfun.immune_marker_names():
		values = df[marker].to_numpy()
		split = stats.median_split(values)
		if np.ptp(values) == 0 or split.degenerate:
			logger.warning("Marker %s skipped: degenerate median split", marker)
			continue

		rows = {mode: {"marker": marker} for mode in modes}
		for subset in subsets:
			columns = auxfun.drf_columns(df, modalities if subset == "all" else [subset])
			X = df.select(columns).to_numpy()
			d = ml.Dataset(X, tuple(columns), labels=split.labels, ids=ids)
			for mode in modes:
				try:
					report = evaluate(d, mode, cfg)
				except (UndefinedAuc, SingleClassError, ValueError) as e:
					logger.warning(
						"Marker %s, subset %s (%s) not evaluated: %s", marker, subset, mode, e
					)
					rows[mode][subset] = None
					continue
				rows[mode][subset] = report.auc
				if subset == "all" and mode == modes[0]:
					top = report.importance_frame().head(TOP_FEATURES)
					top_rows += [{"marker": marker, **r} for r in top.to_dicts()]
		for mode in modes:
			auc_rows[mode].append(rows[mode])

	auc_schema = {"marker": pl.String, **dict.fromkeys(subsets, pl.Float64)}
	outputs: dict[str, pl.DataFrame] = {
		f"marker_auc_{mode}.csv": pl.DataFrame(auc_rows[mode], schema=auc_schema) for mode in modes
	}
	outputs[MARKER_TOP_FILE] = pl.DataFrame(
		top_rows,
		schema={
			"marker": pl.String,
			"rank": pl.Int64,
			"feature": pl.String,
			"importance": pl.Float64,
		},
	)
	return outputs
