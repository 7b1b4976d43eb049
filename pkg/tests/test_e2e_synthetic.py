"""Classifier sanity on the synthetic cohort with planted texture.

Extracts a 120-patient single-modality cohort and checks that the forest
recovers the survival groups under leave-one-out, and falls back to chance
once the labels are shuffled.
"""

import numpy as np
import pytest

from deepradiomics.analysis import ml
from deepradiomics.analysis.ml import Dataset, ForestConfig
from deepradiomics.core import cnn, pipeline
from deepradiomics.core.pipeline import ExtractionSettings
from deepradiomics.utils import auxfun, synthetic

pytestmark = pytest.mark.e2e

N_PATIENTS = 120
SIDE = 16
# short survivors live at most 450 days, long survivors at least 600
GROUP_CUT = 500.0


@pytest.fixture(scope="module")
def planted(tmp_path_factory) -> Dataset:
	root = tmp_path_factory.mktemp("planted")
	manifest = synthetic.generate_cohort(root, n_patients=N_PATIENTS, seed=4, dims=(20, 20, 14))
	settings = ExtractionSettings(levels=8, side=SIDE, layers=(1,), modalities=("t1wi",))
	result = pipeline.run_cohort(manifest, cnn.init_weights(0, input_side=SIDE), settings)
	assert not result.failures
	table = result.table
	features = auxfun.drf_columns(table, ["t1wi"])
	labels = (table["survival_days"].to_numpy() < GROUP_CUT).astype(int)
	return Dataset(table.select(features).to_numpy(), features, labels=labels)


def test_loocv_recovers_planted_groups(planted):
	assert planted.n == N_PATIENTS and planted.labels.sum() == N_PATIENTS // 2
	report = ml.evaluate_loocv(planted, ForestConfig(n_trees=50, seed=0))
	assert not report.skipped
	assert report.auc >= 0.90


def test_shuffled_groups_score_near_chance(planted):
	aucs = []
	for seed in range(20):
		labels = np.random.default_rng(seed).permutation(planted.labels)
		shuffled = Dataset(planted.X, planted.feature_names, labels=labels)
		aucs.append(ml.evaluate_loocv(shuffled, ForestConfig(n_trees=15, seed=seed)).auc)
	assert 0.35 <= np.mean(aucs) <= 0.65
	assert 0.35 <= np.median(aucs) <= 0.65
