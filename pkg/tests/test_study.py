"""Study tables: feature-set matrices, heatmaps, the survival scan and the steps."""

import numpy as np
import polars as pl
import pytest
import strategies as strat

from deepradiomics.analysis import ml, study
from deepradiomics.core import pipeline
from deepradiomics.core.registries import step_registry
from deepradiomics.utils import auxfun
from deepradiomics.utils.errors import ConfigError

N_PATIENTS = 12


def _cohort_table(n: int = N_PATIENTS, seed: int = 0, modalities=("t1wi",)) -> pl.DataFrame:
	rng = np.random.default_rng(seed)
	schema = pipeline.table_schema(list(modalities))
	data = {
		"id": [f"P{i:02d}" for i in range(n)],
		"age": rng.integers(30, 80, n).astype(float),
		"gender": ["male" if i % 2 else "female" for i in range(n)],
		"grade": ["GBM"] * n,
		"survival_days": rng.permutation(np.linspace(100.0, 1500.0, n)),
		"censorship": (np.arange(n) % 4 != 0).astype(int),
	}
	immune = [strat.immune_fractions(rng) for _ in range(n)]
	for marker in auxfun.immune_marker_names():
		data[marker] = [row[marker] for row in immune]
	for column in pipeline.drf_column_names(list(modalities)):
		data[column] = rng.normal(size=n)
	return pl.DataFrame(data, schema=schema)


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
	monkeypatch.setenv("DRF_THREADS", "1")
	_cohort_table().write_csv(tmp_path / "features.csv")
	return tmp_path


# --- feature-set matrices -------------------------------------------------------
def test_full_cohort_combination_widths():
	df = _cohort_table(modalities=strat.MODALITIES)
	widths = {combo: study.combo_matrix(df, combo)[0].shape[1] for combo in ("R+C+I", "C", "R+I")}
	assert widths == {"R+C+I": 204, "C": 2, "R+I": 202}


def test_clinical_block_encodes_gender():
	df = _cohort_table()
	X, names = study.combo_matrix(df, "C")
	assert names == ["age", "gender"]
	assert X[:, 1].tolist() == [float(g == "male") for g in df["gender"]]


def test_combination_respects_modalities_and_tokens():
	df = _cohort_table(modalities=strat.MODALITIES)
	X, names = study.combo_matrix(df, "R", ["flair"])
	assert X.shape == (N_PATIENTS, 45) and all(n.startswith("flair_") for n in names)
	assert study.combo_slug("R+C+I") == "r_c_i"
	with pytest.raises(ConfigError):
		study.combo_matrix(df, "R+Z")


def test_survival_dataset_carries_times_and_events():
	df = _cohort_table()
	d = study.survival_dataset(df, "R+C")
	assert d.p == 47 and d.labels is None
	assert d.events.tolist() == df["censorship"].to_list()
	assert d.ids[0] == "P00"


# --- heatmaps -------------------------------------------------------------------------
def test_spearman_heatmap_duplicate_column_has_unit_rho():
	df = _cohort_table().with_columns(pl.col("neutrophils").alias("t1wi_hist_mean"))
	table = study.spearman_heatmap(df, ["t1wi_hist_mean"], ["neutrophils", "monocytes"])
	row = table.filter(pl.col("marker") == "neutrophils").row(0, named=True)
	assert row["rho"] == pytest.approx(1.0)
	assert row["p_holm"] == pytest.approx(min(1.0, 2 * row["p_raw"]))
	assert table.columns == ["feature", "marker", "rho", "p_raw", "p_holm", "significant"]


def test_spearman_heatmap_leaves_constant_features_out_of_the_family():
	df = _cohort_table().with_columns(pl.lit(1.0).alias("t1wi_hist_mean"))
	table = study.spearman_heatmap(df, ["t1wi_hist_mean", "t1wi_hist_variance"], ["neutrophils"])
	const = table.filter(pl.col("feature") == "t1wi_hist_mean").row(0, named=True)
	other = table.filter(pl.col("feature") == "t1wi_hist_variance").row(0, named=True)
	assert const["rho"] is None and const["p_holm"] is None and not const["significant"]
	assert other["p_holm"] == pytest.approx(other["p_raw"])


def test_wilcoxon_heatmap_covers_every_pair():
	df = _cohort_table()
	features = auxfun.drf_columns(df)[:3]
	markers = list(auxfun.immune_marker_names())[:4]
	table = study.wilcoxon_heatmap(df, features, markers)
	assert table.height == 12
	p = table["p_raw"].to_numpy()
	np.testing.assert_allclose(table["neg_log10_p"].to_numpy(), -np.log10(p))
	np.testing.assert_allclose(table["p_holm"].to_numpy(), strat.holm_oracle(p.tolist(), 12))


def test_survival_scan_corrects_over_the_whole_family():
	df = _cohort_table()
	features = auxfun.drf_columns(df)
	table = study.survival_scan(df, features)
	assert table.height == len(features) + 2 + 22
	assert set(table["feature"]) >= {"age", "gender", "neutrophils"}
	p = table["p_value"].drop_nulls().to_numpy()
	assert np.all(np.diff(p) >= 0)
	expected = strat.holm_oracle(table["p_value"].to_list(), table.height)
	np.testing.assert_allclose(table["p_corrected"].to_numpy(), expected, rtol=1e-12)


# --- registered steps ---------------------------------------------------------------------
def test_stats_step_writes_three_tables(run_dir):
	cfg = {"out": str(run_dir), "modalities": ["t1wi"]}
	result = step_registry.get("stats")(cfg)
	assert set(result) == {study.SPEARMAN_FILE, study.WILCOXON_FILE, study.SURVIVAL_FILE}
	assert result[study.SPEARMAN_FILE].height == 45 * 22
	for name in result:
		assert (run_dir / name).is_file()


def test_stats_step_can_use_the_training_rows(run_dir):
	cfg = {"out": str(run_dir), "modalities": ["t1wi"], "stats_cohort": "train"}
	cfg |= {"train_n": 8, "seed": 3}
	result = step_registry.get("stats")(cfg, save_data=False)

	df = auxfun.load_features(run_dir / "features.csv")
	train, _ = ml.split_indices(df.height, 8, 3)
	subset = df.select(pl.all().gather(train))
	features = auxfun.drf_columns(subset, ["t1wi"])
	markers = list(auxfun.immune_marker_names())
	expected = study.spearman_heatmap(subset, features, markers)
	assert result[study.SPEARMAN_FILE]["rho"].to_list() == expected["rho"].to_list()
	whole = study.spearman_heatmap(df, features, markers)
	assert result[study.SPEARMAN_FILE]["rho"].to_list() != whole["rho"].to_list()


def test_stats_training_rows_need_a_valid_split(run_dir):
	cfg = {"out": str(run_dir), "stats_cohort": "train", "train_n": N_PATIENTS, "seed": 0}
	with pytest.raises(ConfigError, match="stats_cohort"):
		step_registry.get("stats")(cfg, save_data=False)


def test_classify_step_summarizes_each_combination(run_dir):
	cfg = {
		"out": str(run_dir),
		"modalities": ["t1wi"],
		"combos": ["C", "R+C"],
		"eval": ["loocv", "split"],
		"train_n": 8,
		"n_trees": 10,
		"seed": 0,
	}
	result = step_registry.get("classify")(cfg)
	summary = result[study.AUC_SUMMARY_FILE]
	assert summary.select("combo", "eval").rows() == [
		("C", "loocv"),
		("C", "split"),
		("R+C", "loocv"),
		("R+C", "split"),
	]
	assert summary["n_features"].to_list() == [2, 2, 47, 47]
	assert summary.filter(pl.col("eval") == "loocv")["auc"].null_count() == 0
	assert (run_dir / "report_r_c_loocv.json").is_file()
	assert (run_dir / "importance_c_loocv.csv").is_file()


def test_markers_step_builds_auc_matrix(run_dir):
	cfg = {"out": str(run_dir), "modalities": ["t1wi"], "eval": ["split"], "train_n": 8}
	cfg.update(n_trees=5, seed=1)
	result = step_registry.get("markers")(cfg)
	matrix = result["marker_auc_split.csv"]
	assert matrix.columns == ["marker", "t1wi", "all"]
	assert matrix.height == 22
	top = result[study.MARKER_TOP_FILE]
	assert top.columns == ["marker", "rank", "feature", "importance"]
	assert top.height <= 22 * study.TOP_FEATURES
	assert set(top["marker"]) <= set(matrix["marker"])


def test_markers_step_skips_constant_markers(tmp_path, monkeypatch):
	monkeypatch.setenv("DRF_THREADS", "1")
	df = _cohort_table().with_columns(pl.lit(0.0).alias("neutrophils"))
	df.write_csv(tmp_path / "features.csv")
	cfg = {"out": str(tmp_path), "modalities": ["t1wi"], "eval": ["split"], "train_n": 8}
	cfg.update(n_trees=5, seed=1)
	matrix = step_registry.get("markers")(cfg)["marker_auc_split.csv"]
	assert matrix.height == 21
	assert "neutrophils" not in matrix["marker"].to_list()
