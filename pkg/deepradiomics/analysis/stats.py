"""Rank statistics, multiple-testing correction and univariate survival analysis."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import polars as pl
from scipy import stats

from deepradiomics.utils.errors import UndefinedCorrelation, UndefinedTest

logger = logging.getLogger(__name__)

Z_95 = 1.96


@dataclass(frozen=True)
class SurvivalSample:
	"""Follow-up of one subject.

	Attributes:
		time: days to death or last follow-up.
		event: 1 when death was observed, 0 when censored.
	"""

	time: float
	event: int

	def __post_init__(self):
		if not self.time >= 0:
			raise ValueError(f"Survival time must be >= 0, got {self.time}")
		if self.event not in (0, 1):
			raise ValueError(f"event must be 0 or 1, got {self.event}")


def samples_from(times: Sequence[float], events: Sequence[int]) -> list[SurvivalSample]:
	"""Zip time and event columns into samples."""
	return [SurvivalSample(float(t), int(e)) for t, e in zip(times, events, strict=True)]


@dataclass(frozen=True)
class TestResult:
	"""Outcome of one hypothesis test.

	``rho`` is set by :func:`spearman`; ``hr``/``ci_low``/``ci_high`` by
	:func:`logrank`, where ``hr`` is ``None`` when a group has no event.
	"""

	__test__ = False

	statistic: float
	p_raw: float
	p_corrected: float | None = None
	rho: float | None = None
	hr: float | None = None
	ci_low: float | None = None
	ci_high: float | None = None

	@property
	def hr_defined(self) -> bool:
		return self.hr is not None

	def to_dict(self) -> dict[str, float | None]:
		return {
			"statistic": self.statistic,
			"p": self.p_raw,
			"p_corrected": self.p_corrected,
			"rho": self.rho,
			"hr": self.hr,
			"ci_low": self.ci_low,
			"ci_high": self.ci_high,
		}


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
	"""Spearman rank correlation with a two-sided t-approximation p-value.

	Raises:
		ValueError: lengths differ or fewer than 3 pairs.
		UndefinedCorrelation: either input is constant.
	"""
	x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
	if x.shape != y.shape or x.ndim != 1:
		raise ValueError(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
	if x.size < 3:
		raise ValueError(f"spearman needs at least 3 pairs, got {x.size}")
	if np.ptp(x) == 0 or np.ptp(y) == 0:
		raise UndefinedCorrelation("Spearman correlation undefined for a constant vector")

	res = stats.spearmanr(x, y)
	rho = float(np.clip(res.statistic, -1.0, 1.0))
	p = 0.0 if abs(rho) == 1.0 else float(res.pvalue)
	return TestResult(statistic=rho, p_raw=p, rho=rho)


def wilcoxon_ranksum(a: Sequence[float], b: Sequence[float]) -> TestResult:
	"""Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

	Uses the normal approximation with tie-corrected variance and a 0.5
	continuity correction; ``statistic`` is the U of ``a``.

	Raises:
		ValueError: a group is empty or fewer than 4 values overall.
		UndefinedTest: every value is identical.
	"""
	a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
	if a.size < 1 or b.size < 1 or a.size + b.size < 4:
		raise ValueError(f"rank-sum needs non-empty groups with 4+ values, got {a.size}+{b.size}")
	pooled = np.concatenate([a, b])
	if np.ptp(pooled) == 0:
		raise UndefinedTest("Rank-sum test undefined: all values are identical")

	res = stats.mannwhitneyu(
		a, b, use_continuity=True, alternative="two-sided", method="asymptotic"
	)
	return TestResult(statistic=float(res.statistic), p_raw=float(min(1.0, res.pvalue)))


def holm_bonferroni(p: Sequence[float], m: int) -> np.ndarray:
	"""Holm step-down adjusted p-values, returned in input order.

	Args:
		p: raw p-values.
		m: family size; at least ``len(p)``. Hypotheses of the family that
			were not tested count as the largest p-values.
	"""
	p = np.asarray(p, dtype=np.float64)
	if p.ndim != 1:
		raise ValueError("p must be a 1D vector")
	if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
		raise ValueError("p-values must lie in [0, 1]")
	if m < p.size:
		raise ValueError(f"Family size m={m} is smaller than the {p.size} p-values given")
	if p.size == 0:
		return p.copy()

	order = np.argsort(p, kind="stable")
	rank = np.arange(1, p.size + 1)
	adjusted = np.minimum(1.0, (m - rank + 1) * p[order])
	adjusted = np.maximum.accumulate(adjusted)

	out = np.empty_like(adjusted)
	out[order] = adjusted
	return out


@dataclass(frozen=True, eq=False)
class MedianSplit:
	"""Binary grouping by the sample median.

	Attributes:
		labels: 1 for values ``>=`` median, else 0.
		median: the cut-off.
		degenerate: one of the two groups is empty.
	"""

	labels: np.ndarray
	median: float
	degenerate: bool


def median_split(values: Sequence[float], cutoff: float | None = None) -> MedianSplit:
	"""Label values at or above the median (or ``cutoff``) as 1.

	Raises:
		ValueError: fewer than 2 values.
	"""
	values = np.asarray(values, dtype=np.float64)
	if values.size < 2:
		raise ValueError(f"median_split needs at least 2 values, got {values.size}")
	median = float(np.median(values)) if cutoff is None else float(cutoff)
	labels = (values >= median).astype(np.int64)
	degenerate = bool(labels.min() == labels.max())
	if degenerate:
		logger.debug(
			"Degenerate median split at %s: all %d values on one side", median, values.size
		)
	return MedianSplit(labels, median, degenerate)


@dataclass(frozen=True, eq=False)
class KaplanMeierCurve:
	"""Right-continuous step function of the product-limit estimator.

	Attributes:
		times: distinct event times, ascending.
		survival: S(t) just after each event time.
		at_risk: subjects at risk at each event time.
		events: deaths at each event time.
	"""

	times: np.ndarray
	survival: np.ndarray
	at_risk: np.ndarray
	events: np.ndarray

	def survival_at(self, t: float) -> float:
		idx = np.searchsorted(self.times, t, side="right") - 1
		return 1.0 if idx < 0 else float(self.survival[idx])

	def median_survival(self) -> float | None:
		"""First time S(t) drops to 0.5 or below; ``None`` if it never does."""
		below = np.flatnonzero(self.survival <= 0.5)
		return float(self.times[below[0]]) if below.size else None

	def to_frame(self) -> pl.DataFrame:
		"""Curve points including the ``(0, 1)`` origin."""
		return pl.DataFrame(
			{
				"time": np.concatenate([[0.0], self.times]),
				"survival": np.concatenate([[1.0], self.survival]),
				"at_risk": np.concatenate([[np.nan], self.at_risk]),
				"events": np.concatenate([[0.0], self.events]),
			}
		).with_columns(pl.col("at_risk").fill_nan(None))


def kaplan_meier(samples: Sequence[SurvivalSample]) -> KaplanMeierCurve:
	"""Kaplan-Meier estimate; censored subjects leave the risk set after their time.

	Raises:
		ValueError: no sample.
	"""
	if not samples:
		raise ValueError("kaplan_meier needs at least one sample")
	times = np.array([s.time for s in samples], dtype=np.float64)
	events = np.array([s.event for s in samples], dtype=np.int64)

	event_times = np.unique(times[events == 1])
	at_risk = np.array([np.count_nonzero(times >= t) for t in event_times], dtype=np.float64)
	deaths = np.array(
		[np.count_nonzero((times == t) & (events == 1)) for t in event_times], dtype=np.float64
	)
	survival = np.cumprod(1.0 - deaths / at_risk) if event_times.size else np.empty(0)
	return KaplanMeierCurve(event_times, survival, at_risk, deaths)


def logrank(g1: Sequence[SurvivalSample], g2: Sequence[SurvivalSample]) -> TestResult:
	"""Two-group log-rank test with the Mantel-Haenszel hazard ratio of ``g1`` vs ``g2``.

	``HR = (O1/E1) / (O2/E2)`` and its 95% CI is
	``exp(log HR +- 1.96 sqrt(1/E1 + 1/E2))``. HR and CI are ``None`` when
	either group has no observed death.

	Raises:
		ValueError: a group is empty or no death is observed at all.
	"""
	if not g1 or not g2:
		raise ValueError("logrank needs two non-empty groups")
	t1 = np.array([s.time for s in g1], dtype=np.float64)
	e1 = np.array([s.event for s in g1], dtype=np.int64)
	t2 = np.array([s.time for s in g2], dtype=np.float64)
	e2 = np.array([s.event for s in g2], dtype=np.int64)

	event_times = np.unique(np.concatenate([t1[e1 == 1], t2[e2 == 1]]))
	if event_times.size == 0:
		raise ValueError("logrank needs at least one observed event")

	expected1 = variance = 0.0
	for t in event_times:
		n1 = np.count_nonzero(t1 >= t)
		n2 = np.count_nonzero(t2 >= t)
		d = np.count_nonzero((t1 == t) & (e1 == 1)) + np.count_nonzero((t2 == t) & (e2 == 1))
		n = n1 + n2
		expected1 += d * n1 / n
		if n > 1:
			variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)

	observed1 = float(np.count_nonzero(e1 == 1))
	observed2 = float(np.count_nonzero(e2 == 1))
	expected2 = observed1 + observed2 - expected1

	chi2 = (observed1 - expected1) ** 2 / variance if variance > 0 else 0.0
	p = float(stats.chi2.sf(chi2, df=1))

	if observed1 > 0 and observed2 > 0 and expected1 > 0 and expected2 > 0:
		hr = (observed1 / expected1) / (observed2 / expected2)
		half_width = Z_95 * np.sqrt(1.0 / expected1 + 1.0 / expected2)
		ci_low = float(np.exp(np.log(hr) - half_width))
		ci_high = float(np.exp(np.log(hr) + half_width))
		return TestResult(statistic=chi2, p_raw=p, hr=hr, ci_low=ci_low, ci_high=ci_high)

	logger.debug("Hazard ratio undefined: O1=%s, O2=%s", observed1, observed2)
	return TestResult(statistic=chi2, p_raw=p)
