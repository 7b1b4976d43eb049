"""Rank statistics, Holm correction, Kaplan-Meier and the log-rank test."""

import math

import numpy as np
import pytest
import strategies as strat
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from deepradiomics.analysis import stats
from deepradiomics.analysis.stats import SurvivalSample
from deepradiomics.utils.errors import UndefinedCorrelation, UndefinedTest

# Top rows of a published 204-hypothesis survival scan: raw p -> corrected p.
PUBLISHED_SCAN = [
	(5.45e-8, 0.00001),
	(3.88e-7, 0.00008),
	(1.36e-6, 0.00028),
	(1.40e-6, 0.00028),
	(2.00e-6, 0.00040),
	(2.00e-6, 0.00040),
	(2.09e-6, 0.00041),
	(3.63e-6, 0.00072),
	(4.18e-6, 0.00082),
	(4.42e-6, 0.00086),
]


def _group(*pairs) -> list[SurvivalSample]:
	return [SurvivalSample(float(t), e) for t, e in pairs]


# --- Holm ------------------------------------------------------------------------
def test_holm_reproduces_published_scan_with_204_hypotheses():
	raw = [p for p, _ in PUBLISHED_SCAN]
	corrected = stats.holm_bonferroni(raw, 204)
	for got, (_, printed) in zip(corrected, PUBLISHED_SCAN, strict=True):
		assert f"{got:.0e}" == f"{printed:.0e}"


def test_holm_keeps_input_order_and_is_monotone_in_rank():
	p = [0.04, 0.01, 0.03, 0.5]
	adj = stats.holm_bonferroni(p, 4)
	np.testing.assert_allclose(adj, [0.09, 0.04, 0.09, 0.5])


def test_holm_rejects_small_family():
	with pytest.raises(ValueError):
		stats.holm_bonferroni([0.1, 0.2], 1)


@given(p=strat.p_value_lists, extra=st.integers(min_value=0, max_value=10))
def test_holm_matches_reference(p, extra):
	m = len(p) + extra
	adj = stats.holm_bonferroni(p, m)
	np.testing.assert_allclose(adj, strat.holm_oracle(p, m), rtol=1e-12)
	assert np.all(adj >= np.asarray(p) - 1e-15)
	assert np.all(adj <= 1.0)


# --- Spearman ----------------------------------------------------------------------
def test_spearman_identical_vectors_is_one():
	res = stats.spearman([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
	assert res.rho == pytest.approx(1.0)
	assert res.p_raw == pytest.approx(0.0, abs=1e-9)


def test_spearman_reference_example():
	x, y = [1, 2, 3, 4, 5], [2, 1, 4, 3, 5]
	assert stats.spearman(x, y).rho == pytest.approx(strat.spearman_oracle(x, y))
	assert stats.spearman(x, y).rho == pytest.approx(0.8)


def test_spearman_constant_vector_raises():
	with pytest.raises(UndefinedCorrelation):
		stats.spearman([1, 1, 1, 1], [1, 2, 3, 4])


@settings(max_examples=50)
@given(
	xy=st.lists(
		st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=3, max_size=15
	)
)
def test_spearman_matches_rank_reference(xy):
	x, y = [float(a) for a, _ in xy], [float(b) for _, b in xy]
	assume(len(set(x)) > 1 and len(set(y)) > 1)
	rho = stats.spearman(x, y).rho
	assert rho == pytest.approx(max(-1.0, min(1.0, strat.spearman_oracle(x, y))), abs=1e-9)


# --- rank-sum ----------------------------------------------------------------------
def test_ranksum_separated_groups():
	res = stats.wilcoxon_ranksum([1, 2, 3], [4, 5, 6])
	assert res.statistic == 0.0
	assert res.p_raw == pytest.approx(strat.ranksum_normal_p([1, 2, 3], [4, 5, 6]))


def test_ranksum_identical_values_raise():
	with pytest.raises(UndefinedTest):
		stats.wilcoxon_ranksum([2, 2], [2, 2, 2])


@settings(max_examples=80)
@given(a=strat.small_samples, b=strat.small_samples)
def test_ranksum_matches_pair_enumeration(a, b):
	assume(len(a) + len(b) >= 4 and len(set(a + b)) > 1)
	res = stats.wilcoxon_ranksum(a, b)
	assert res.statistic == pytest.approx(strat.u_statistic(a, b))
	assert res.p_raw == pytest.approx(strat.ranksum_normal_p(a, b), rel=1e-9, abs=1e-12)



@settings(max_examples=80)
@given(
	a=strat.small_samples,
	b=strat.small_samples,
	shift=st.integers(min_value=-50, max_value=50).map(float),
)
def test_ranksum_p_ignores_group_order_and_common_shift(a, b, shift):
	assume(len(a) + len(b) >= 4 and len(set(a + b)) > 1)
	p = stats.wilcoxon_ranksum(a, b).p_raw
	assert stats.wilcoxon_ranksum(b, a).p_raw == pytest.approx(p, rel=1e-9, abs=1e-15)
	shifted = stats.wilcoxon_ranksum([x + shift for x in a], [x + shift for x in b])
	assert shifted.p_raw == pytest.approx(p, rel=1e-9, abs=1e-15)


# --- median split ------------------------------------------------------------------
def test_median_split_ties_go_high():
	split = stats.median_split([1, 2, 2, 3])
	assert split.median == 2.0
	assert split.labels.tolist() == [0, 1, 1, 1]
	assert not split.degenerate


def test_constant_values_give_degenerate_split():
	assert stats.median_split([5, 5, 5]).degenerate


# --- Kaplan-Meier ------------------------------------------------------------------
def test_kaplan_meier_hand_computed():
	curve = stats.kaplan_meier(_group((5, 1), (8, 1), (12, 0), (15, 1), (20, 0)))
	assert curve.times.tolist() == [5.0, 8.0, 15.0]
	np.testing.assert_allclose(curve.survival, [0.8, 0.6, 0.3])
	assert curve.at_risk.tolist() == [5, 4, 2]
	assert curve.survival_at(0) == 1.0
	assert curve.survival_at(10) == pytest.approx(0.6)
	assert curve.median_survival() == 15.0


def test_kaplan_meier_all_censored_never_drops():
	curve = stats.kaplan_meier(_group((3, 0), (4, 0)))
	assert curve.times.size == 0
	assert curve.median_survival() is None
	assert curve.to_frame().height == 1


@given(samples=st.lists(strat.survival_samples, min_size=1, max_size=20))
def test_kaplan_meier_is_non_increasing(samples):
	curve = stats.kaplan_meier(samples)
	assert np.all(np.diff(curve.survival) <= 1e-15)
	assert np.all((curve.survival >= 0) & (curve.survival <= 1))


# --- log-rank ----------------------------------------------------------------------
def test_logrank_hand_computed():
	g1 = _group((1, 1), (3, 1))
	g2 = _group((2, 1), (4, 1))
	res = stats.logrank(g1, g2)
	assert res.statistic == pytest.approx(8 / 13, abs=1e-6)
	assert res.hr == pytest.approx(2.0, abs=1e-6)
	half = 1.96 * math.sqrt(3 / 4 + 3 / 8)
	assert res.ci_low == pytest.approx(2.0 * math.exp(-half))
	assert res.ci_high == pytest.approx(2.0 * math.exp(half))


def test_logrank_with_censoring_hand_computed():
	# at risk (g1, g2): t=2 (3, 2), t=4 (1, 2), t=6 (1, 0)
	g1 = _group((2, 1), (3, 0), (6, 1))
	g2 = _group((4, 1), (5, 0))
	res = stats.logrank(g1, g2)
	e1 = 3 / 5 + 1 / 3 + 1
	v = (3 / 5) * (2 / 5) + (1 / 3) * (2 / 3)
	assert res.statistic == pytest.approx((2 - e1) ** 2 / v, abs=1e-6)
	assert res.hr == pytest.approx((2 / e1) / (1 / (3 - e1)), abs=1e-6)


@given(group=strat.survival_groups)
def test_logrank_of_identical_groups(group):
	assume(any(s.event for s in group))
	res = stats.logrank(group, list(group))
	assert res.p_raw == pytest.approx(1.0)
	assert res.hr == 1.0


@given(g1=strat.survival_groups, g2=strat.survival_groups)
def test_logrank_is_symmetric(g1, g2):
	assume(any(s.event for s in g1) and any(s.event for s in g2))
	ab, ba = stats.logrank(g1, g2), stats.logrank(g2, g1)
	assert ab.statistic == pytest.approx(ba.statistic, rel=1e-9, abs=1e-12)
	if ab.hr is not None and ba.hr is not None:
		assert ab.hr * ba.hr == pytest.approx(1.0, rel=1e-9)


def test_logrank_hr_undefined_without_events_in_a_group():
	res = stats.logrank(_group((1, 1), (2, 1)), _group((3, 0), (4, 0)))
	assert res.hr is None and not res.hr_defined
	assert 0.0 <= res.p_raw <= 1.0


def test_logrank_needs_an_event():
	with pytest.raises(ValueError):
		stats.logrank(_group((1, 0)), _group((2, 0)))


def test_survival_sample_validation():
	with pytest.raises(ValueError):
		SurvivalSample(-1.0, 1)
	with pytest.raises(ValueError):
		SurvivalSample(1.0, 2)
