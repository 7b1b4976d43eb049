"""Random-forest survival and marker classifiers with leakage-free evaluation."""

import hashlib
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import polars as pl
from sklearn.ensemble import RandomForestClassifier
from sklearn.inspection import permutation_importance
from sklearn.metrics import roc_auc_score

from deepradiomics.analysis import stats
from deepradiomics.analysis.stats import SurvivalSample, TestResult
from deepradiomics.utils.errors import (
	DimensionError,
	SingleClassError,
	UndefinedAuc,
	UndefinedCorrelation,
)

logger = logging.getLogger(__name__)

ImportanceMode = Literal["gini", "permutation"]


@dataclass(frozen=True, eq=False)
class Dataset:
	"""Feature matrix with either binary labels or survival fields.

	When ``labels`` is ``None`` the targets are built per training fold from
	``times`` and ``events`` (imputation then median split).

	Attributes:
		X: ``(n, p)`` feature matrix.
		feature_names: one name per column.
		labels: binary targets, 1 meaning "longer survival" / "high marker".
		times: survival days.
		events: 1 when death was observed.
		ids: sample identifiers.
	"""

	X: np.ndarray
	feature_names: tuple[str, ...]
	labels: np.ndarray | None = None
	times: np.ndarray | None = None
	events: np.ndarray | None = None
	ids: tuple[str, ...] | None = None

	def __post_init__(self):
		X = np.asarray(self.X, dtype=np.float64)
		if X.ndim != 2:
			raise ValueError(f"X must be 2D, got shape {X.shape}")
		n, p = X.shape
		if n < 4:
			raise ValueError(f"A dataset needs at least 4 samples, got {n}")
		if len(self.feature_names) != p:
			raise ValueError(f"{len(self.feature_names)} feature names for {p} columns")
		if np.isnan(X).any():
			raise ValueError("Feature matrix contains missing values")
		object.__setattr__(self, "X", X)
		object.__setattr__(self, "feature_names", tuple(self.feature_names))

		if self.labels is not None:
			labels = np.asarray(self.labels, dtype=np.int64)
			if labels.shape != (n,) or not np.isin(labels, (0, 1)).all():
				raise ValueError("labels must be n values in {0, 1}")
			object.__setattr__(self, "labels", labels)
		elif self.times is None or self.events is None:
			raise ValueError("Dataset needs labels or survival times and events")

		for name in ("times", "events"):
			value = getattr(self, name)
			if value is not None:
				value = np.asarray(value, dtype=np.float64 if name == "times" else np.int64)
				if value.shape != (n,):
					raise ValueError(f"{name} must have {n} values")
				object.__setattr__(self, name, value)
		if self.ids is not None:
			object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

	@property
	def n(self) -> int:
		return self.X.shape[0]

	@property
	def p(self) -> int:
		return self.X.shape[1]

	def samples(self, idx: Sequence[int] | np.ndarray | None = None) -> list[SurvivalSample]:
		if self.times is None or self.events is None:
			raise ValueError("Dataset has no survival fields")
		idx = np.arange(self.n) if idx is None else np.asarray(idx)
		return stats.samples_from(self.times[idx], self.events[idx])


@dataclass(frozen=True)
class ForestConfig:
	"""Random-forest hyperparameters.

	Attributes:
		n_trees: number of trees.
		mtry: candidate features per split; ``"sqrt"`` means ``floor(sqrt(p))``.
		min_leaf: minimum samples per leaf.
		seed: root seed; per-tree seeds derive from it.
		n_jobs: tree-building threads.
		importance: ``"gini"`` or ``"permutation"``.
		threshold: predicted-score cut for the predicted survival groups.
	"""

	n_trees: int = 500
	mtry: str | int = "sqrt"
	min_leaf: int = 1
	seed: int = 0
	n_jobs: int = 1
	importance: ImportanceMode = "gini"
	threshold: float = 0.5

	@classmethod
	def from_config(cls, cfg: dict[str, Any], n_jobs: int = 1) -> "ForestConfig":
		return cls(
			n_trees=int(cfg.get("n_trees", 500)),
			mtry=cfg.get("mtry", "sqrt"),
			min_leaf=int(cfg.get("min_leaf", 1)),
			seed=int(cfg.get("seed") or 0),
			n_jobs=n_jobs,
			importance=cfg.get("importance", "gini"),
			threshold=float(cfg.get("score_threshold", 0.5)),
		)


@dataclass(frozen=True, eq=False)
class ForestModel:
	"""A fitted forest with the config and feature names it was trained on."""

	forest: RandomForestClassifier
	config: ForestConfig
	feature_names: tuple[str, ...]

	@property
	def trees(self) -> list:
		return list(self.forest.estimators_)

	@property
	def n_features(self) -> int:
		return len(self.feature_names)

	@property
	def oob_accuracy(self) -> float | None:
		return getattr(self.forest, "oob_score_", None)

	def fingerprint(self) -> str:
		"""SHA-256 over every tree's split features, thresholds, children and leaf values."""
		h = hashlib.sha256()
		for tree in self.trees:
			t = tree.tree_
			for arr in (t.feature, t.threshold, t.children_left, t.children_right, t.value):
				h.update(np.ascontiguousarray(arr).tobytes())
		return h.hexdigest()


@dataclass
class EvalReport:
	"""Held-out evaluation of one feature set.

	Attributes:
		mode: ``"loocv"`` or ``"split"``.
		auc: AUC over the pooled held-out scores.
		scores: held-out score per evaluated sample.
		labels: held-out labels, built with training-fold rules.
		sample_index: dataset row of each score.
		importance: per-feature importance, summing to 1 (or all zero).
		logrank: predicted groups compared on true survival.
		score_survival: Spearman correlation of scores with true survival days.
		skipped: dataset rows whose fold was skipped.
	"""

	mode: str
	auc: float
	scores: np.ndarray
	labels: np.ndarray
	sample_index: np.ndarray
	feature_names: tuple[str, ...]
	importance: np.ndarray
	logrank: TestResult | None = None
	score_survival: TestResult | None = None
	skipped: list[int] = field(default_factory=list)
	km: pl.DataFrame | None = None

	def importance_frame(self) -> pl.DataFrame:
		"""Importance sorted descending with a 1-based rank."""
		return (
			pl.DataFrame({"feature": list(self.feature_names), "importance": self.importance})
			.sort("importance", descending=True, maintain_order=True)
			.with_row_index("rank", offset=1)
		)

	def to_json_dict(self, ids: Sequence[str] | None = None) -> dict[str, Any]:
		sample_ids = [ids[i] for i in self.sample_index] if ids else self.sample_index.tolist()
		lr = None
		if self.logrank is not None:
			lr = {
				"chi2": self.logrank.statistic,
				"p": self.logrank.p_raw,
				"hr": self.logrank.hr,
				"ci": [self.logrank.ci_low, self.logrank.ci_high],
			}
		return {
			"mode": self.mode,
			"auc": self.auc,
			"scores": [
				{"id": sid, "score": float(s), "label": int(y)}
				for sid, s, y in zip(sample_ids, self.scores, self.labels, strict=True)
			],
			"importance": [
				{"name": n, "value": float(v)}
				for n, v in zip(self.feature_names, self.importance, strict=True)
			],
			"logrank": lr,
			"score_survival": None
			if self.score_survival is None
			else {"rho": self.score_survival.rho, "p": self.score_survival.p_raw},
			"skipped": [
				ids[i] if ids else i for i in self.skipped  # ty: ignore[not-subscriptable]
			],
		}


def impute_censored(
	samples: Sequence[SurvivalSample], reference: Sequence[SurvivalSample] | None = None
) -> np.ndarray:
	"""Replace each censored time by the mean death time at or after it.

	Death times are taken from ``reference`` (defaults to ``samples``). A
	censored time with no eligible death is kept as is.
	"""
	if not samples:
		raise ValueError("impute_censored needs at least one sample")
	reference = samples if reference is None else reference
	deaths = np.array([s.time for s in reference if s.event == 1], dtype=np.float64)

	out = np.empty(len(samples), dtype=np.float64)
	for i, s in enumerate(samples):
		if s.event == 1:
			out[i] = s.time
			continue
		eligible = deaths[deaths >= s.time]
		out[i] = eligible.mean() if eligible.size else s.time
	return out


def make_survival_labels(times: Sequence[float], cutoff: float | None = None) -> np.ndarray:
	"""Label 1 ("longer survival") for times at or above the median (or ``cutoff``)."""
	split = stats.median_split(times, cutoff)
	if split.degenerate:
		logger.warning("Survival median split is degenerate (cut-off %s)", split.median)
	return split.labels


def _mtry(mtry: str | int, p: int) -> int:
	if mtry == "sqrt":
		return max(1, int(np.floor(np.sqrt(p))))
	return min(int(mtry), p)


def _fit(X: np.ndarray, y: np.ndarray, names: Sequence[str], cfg: ForestConfig) -> ForestModel:
	if np.unique(y).size < 2:
		raise SingleClassError(f"Training labels hold a single class ({int(y[0])})")
	forest = RandomForestClassifier(
		n_estimators=cfg.n_trees,
		criterion="gini",
		max_features=_mtry(cfg.mtry, X.shape[1]),
		min_samples_leaf=cfg.min_leaf,
		bootstrap=True,
		oob_score=X.shape[0] >= 10,
		random_state=cfg.seed,
		n_jobs=cfg.n_jobs,
	)
	forest.fit(X, y)
	return ForestModel(forest, cfg, tuple(names))


def rf_train(d: Dataset, cfg: ForestConfig | None = None) -> ForestModel:
	"""Fit a seeded random forest on a labeled dataset.

	Raises:
		ValueError: the dataset carries no labels.
		SingleClassError: the labels hold one class.
	"""
	if d.labels is None:
		raise ValueError("rf_train needs a labeled dataset")
	return _fit(d.X, d.labels, d.feature_names, cfg or ForestConfig())


def rf_predict_score(m: ForestModel, x: np.ndarray) -> np.ndarray | float:
	"""Fraction of trees voting class 1 for one sample or each row of a matrix.

	Raises:
		DimensionError: feature length differs from the training width.
	"""
	x = np.asarray(x, dtype=np.float64)
	single = x.ndim == 1
	X = x[None, :] if single else x
	if X.ndim != 2 or X.shape[1] != m.n_features:
		raise DimensionError(f"Model expects {m.n_features} features, got shape {x.shape}")
	positive = np.flatnonzero(m.forest.classes_ == 1)
	votes = np.zeros(X.shape[0], dtype=np.float64)
	for tree in m.trees:
		# per-tree predictions are class indices into forest.classes_
		pred = np.asarray(tree.predict(X), dtype=np.int64)
		votes += np.isin(pred, positive)
	scores = votes / len(m.trees)
	return float(scores[0]) if single else scores


def rf_importance(
	m: ForestModel,
	mode: ImportanceMode = "gini",
	X: np.ndarray | None = None,
	y: np.ndarray | None = None,
) -> np.ndarray:
	"""Per-feature importance normalized to sum 1 (all zero when no split was made).

	``"gini"`` is the mean impurity decrease; ``"permutation"`` is the mean drop
	in accuracy on ``(X, y)`` when a column is shuffled, negatives clipped.
	"""
	match mode:
		case "gini":
			raw = np.asarray(m.forest.feature_importances_, dtype=np.float64)
		case "permutation":
			if X is None or y is None:
				raise ValueError("Permutation importance needs X and y")
			result = permutation_importance(
				m.forest, X, y, n_repeats=10, random_state=m.config.seed, n_jobs=m.config.n_jobs
			)
			raw = np.clip(result.importances_mean, 0.0, None)
		case _:
			raise ValueError(f"Unknown importance mode {mode!r}")
	total = raw.sum()
	return raw / total if total > 0 else np.zeros_like(raw)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
	"""Area under the ROC curve, ties counted as one half.

	Raises:
		UndefinedAuc: only one class is present.
	"""
	labels = np.asarray(labels)
	if np.unique(labels).size < 2:
		raise UndefinedAuc("AUC undefined: a single class is present")
	return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def _fold_labels(
	d: Dataset, train: np.ndarray, test: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
	"""Training and held-out labels using training-fold imputation and cut-off only."""
	if d.labels is not None:
		return d.labels[train], d.labels[test]
	train_samples = d.samples(train)
	train_times = impute_censored(train_samples)
	cutoff = float(np.median(train_times))
	test_times = impute_censored(d.samples(test), reference=train_samples)
	return (
		stats.median_split(train_times, cutoff).labels,
		(test_times >= cutoff).astype(np.int64),
	)


def fit_fold(d: Dataset, train: Sequence[int] | np.ndarray, cfg: ForestConfig) -> ForestModel:
	"""Train on the rows ``train`` only, with fold-local labels."""
	train = np.asarray(train)
	y_train, _ = _fold_labels(d, train, train[:0])
	return _fit(d.X[train], y_train, d.feature_names, cfg)


def _fit_and_score(
	d: Dataset, train: np.ndarray, test: np.ndarray, cfg: ForestConfig
) -> tuple[np.ndarray, np.ndarray, ForestModel, np.ndarray]:
	y_train, y_test = _fold_labels(d, train, test)
	model = _fit(d.X[train], y_train, d.feature_names, cfg)
	scores = np.atleast_1d(rf_predict_score(model, d.X[test]))
	return scores, y_test, model, y_train


def _survival_summaries(
	d: Dataset, index: np.ndarray, scores: np.ndarray, threshold: float
) -> tuple[TestResult | None, TestResult | None, pl.DataFrame | None]:
	"""Log-rank and KM curves of predicted groups plus score/survival correlation."""
	if d.times is None or d.events is None or index.size == 0:
		return None, None, None
	samples = d.samples(index)
	predicted = scores >= threshold
	long_group = [s for s, g in zip(samples, predicted, strict=True) if g]
	short_group = [s for s, g in zip(samples, predicted, strict=True) if not g]

	logrank = km = None
	if long_group and short_group and any(s.event for s in samples):
		logrank = stats.logrank(long_group, short_group)
		km = pl.concat(
			[
				stats.kaplan_meier(group).to_frame().with_columns(pl.lit(name).alias("group"))
				for name, group in (
					("predicted_long", long_group),
					("predicted_short", short_group),
				)
			]
		).select("group", "time", "survival", "at_risk", "events")
	else:
		logger.warning("Predicted survival groups are degenerate; log-rank skipped")

	try:
		score_survival = stats.spearman(scores, d.times[index]) if index.size >= 3 else None
	except UndefinedCorrelation:
		score_survival = None
	return logrank, score_survival, km


def evaluate_loocv(d: Dataset, cfg: ForestConfig | None = None) -> EvalReport:
	"""Leave-one-out evaluation; the AUC pools all held-out scores.

	Each fold trains with the same seed. A fold whose training labels hold a
	single class is skipped with a warning.

	Raises:
		UndefinedAuc: the held-out labels hold a single class.
	"""
	cfg = cfg or ForestConfig()
	n = d.n
	scores: list[float] = []
	labels: list[int] = []
	index: list[int] = []
	skipped: list[int] = []
	importance = np.zeros(d.p)

	all_rows = np.arange(n)
	for i in range(n):
		train = np.delete(all_rows, i)
		test = np.array([i])
		try:
			s, y, model, y_train = _fit_and_score(d, train, test, cfg)
		except SingleClassError:
			logger.warning("LOOCV fold %d skipped: training labels hold a single class", i)
			skipped.append(i)
			continue
		scores.append(float(s[0]))
		labels.append(int(y[0]))
		index.append(i)
		importance += rf_importance(model, cfg.importance, d.X[train], y_train)

	total = importance.sum()
	importance = importance / total if total > 0 else importance
	score_arr, label_arr = np.array(scores), np.array(labels, dtype=np.int64)
	index_arr = np.array(index, dtype=np.int64)
	logrank, score_survival, km = _survival_summaries(d, index_arr, score_arr, cfg.threshold)
	return EvalReport(
		mode="loocv",
		auc=auc(score_arr, label_arr),
		scores=score_arr,
		labels=label_arr,
		sample_index=index_arr,
		feature_names=d.feature_names,
		importance=importance,
		logrank=logrank,
		score_survival=score_survival,
		skipped=skipped,
		km=km,
	)


def split_indices(n: int, n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
	"""Sorted train and test row indices of the seeded single split.

	Raises:
		ValueError: ``n_train`` outside ``[2, n)``.
	"""
	if not 2 <= n_train < n:
		raise ValueError(f"n_train must lie in [2, {n}), got {n_train}")
	perm = np.random.default_rng(seed).permutation(n)
	return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def evaluate_split(
	d: Dataset, n_train: int, seed: int, cfg: ForestConfig | None = None
) -> EvalReport:
	"""Single seeded train/test split; the AUC uses test scores only.

	Raises:
		ValueError: ``n_train`` outside ``[2, n)``.
		SingleClassError: the training labels hold a single class.
		UndefinedAuc: the test labels hold a single class.
	"""
	cfg = cfg or ForestConfig()
	train, test = split_indices(d.n, n_train, seed)

	scores, y_test, model, _ = _fit_and_score(d, train, test, cfg)
	importance = rf_importance(model, cfg.importance, d.X[test], y_test)
	logrank, score_survival, km = _survival_summaries(d, test, scores, cfg.threshold)
	return EvalReport(
		mode="split",
		auc=auc(scores, y_test),
		scores=scores,
		labels=y_test,
		sample_index=test,
		feature_names=d.feature_names,
		importance=importance,
		logrank=logrank,
		score_survival=score_survival,
		km=km,
	)
