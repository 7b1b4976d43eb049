"""End-to-end run of the command line on a small synthetic cohort.

Drives ``deepradiomics`` exactly as a user would: write a synthetic cohort and
seeded weights, extract the feature table, then run the statistics, survival
classifiers and marker classifiers on it. Checks exit codes, the feature-table
layout, ``runinfo.json`` provenance and run-to-run determinism.
"""

import json

import polars as pl
import pytest

from deepradiomics.cli.__main__ import main
from deepradiomics.core import cnn, pipeline

pytestmark = pytest.mark.e2e

SIDE = "16"
FAST_EXTRACT = ["--modalities", "t1wi", "--side", SIDE, "--levels", "8", "--layers", "2"]
FAST_STUDY = ["--modalities", "t1wi", "--n-trees", "5", "--seed", "7"]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory, monkeypatch_module):
	monkeypatch_module.setenv("DRF_THREADS", "2")
	root = tmp_path_factory.mktemp("cohort")
	synth = ["synth", "--out", str(root), "--seed", "1", "--n-patients", "8"]
	assert main([*synth, "--dims", "16", "16", "12"]) == 0
	assert main(["init-weights", "--out", str(root), "--side", SIDE]) == 0
	return root


@pytest.fixture(scope="module")
def monkeypatch_module():
	with pytest.MonkeyPatch.context() as mp:
		yield mp


def _extract(cohort, out) -> int:
	return main(
		[
			"extract",
			"--out",
			str(out),
			"--manifest",
			str(cohort / "manifest.json"),
			"--weights",
			str(cohort / "weights.drf"),
			*FAST_EXTRACT,
		]
	)


def test_init_weights_writes_a_checked_file(cohort):
	w = cnn.load_weights(cohort / "weights.drf")
	assert w.input_side == int(SIDE)
	w.check_drf_architecture()
	info = json.loads((cohort / "runinfo.json").read_text())
	assert info["subcommand"] == "init-weights" and info["exit_code"] == 0


def test_extract_then_every_study_step(cohort, tmp_path):
	assert _extract(cohort, tmp_path) == 0
	df = pl.read_csv(tmp_path / "features.csv")
	assert df.height == 8
	assert df.width == pipeline.expected_column_count(1) == 73
	columns = json.loads((tmp_path / "columns.json").read_text())
	assert [c["name"] for c in columns["columns"]] == df.columns

	for step in ("stats", "classify", "markers"):
		code = main([step, "--out", str(tmp_path), *FAST_STUDY, "--combos", "R", "R+C+I"])
		assert code in (0, 2)
		info = json.loads((tmp_path / "runinfo.json").read_text())
		assert info["subcommand"] == step and info["seed"] == 7

	assert (tmp_path / "survival_scan.csv").is_file()
	summary = pl.read_csv(tmp_path / "auc_summary.csv")
	assert summary["combo"].to_list() == ["R", "R+C+I"]
	assert summary["n_features"].to_list() == [45, 69]
	assert (tmp_path / "marker_auc_loocv.csv").is_file()


def test_extraction_is_deterministic(cohort, tmp_path):
	assert _extract(cohort, tmp_path / "a") == 0
	assert _extract(cohort, tmp_path / "b") == 0
	first = (tmp_path / "a" / "features.csv").read_bytes()
	assert first == (tmp_path / "b" / "features.csv").read_bytes()


def test_all_runs_every_step(cohort, tmp_path):
	args = ["all", "--out", str(tmp_path), "--manifest", str(cohort / "manifest.json")]
	args += ["--weights", str(cohort / "weights.drf"), *FAST_EXTRACT, "--n-trees", "5"]
	assert main([*args, "--seed", "3", "--combos", "C", "--eval", "split", "--train-n", "6"]) in (
		0,
		2,
	)
	for name in ("features.csv", "spearman_heatmap.csv", "auc_summary.csv"):
		assert (tmp_path / name).is_file()
	assert (tmp_path / "marker_top_features.csv").is_file()


def test_missing_weights_is_a_hard_error(cohort, tmp_path, capsys):
	missing = tmp_path / "nowhere.drf"
	tmp_path.joinpath("run").mkdir()
	code = main(
		[
			"extract",
			"--out",
			str(tmp_path / "run"),
			"--manifest",
			str(cohort / "manifest.json"),
			"--weights",
			str(missing),
		]
	)
	assert code == 1
	assert "nowhere.drf" in capsys.readouterr().err
	info = json.loads((tmp_path / "run" / "runinfo.json").read_text())
	assert info["exit_code"] == 1


def test_stochastic_step_needs_a_seed(tmp_path, capsys):
	assert main(["classify", "--out", str(tmp_path)]) == 1
	assert "--seed" in capsys.readouterr().err


def test_config_file_is_merged_under_flags(cohort, tmp_path):
	_extract(cohort, tmp_path)
	config = tmp_path / "run.toml"
	config.write_text('combos = ["C"]\nn_trees = 5\neval = ["split"]\ntrain_n = 6\n')
	code = main(["classify", "--out", str(tmp_path), "--config", str(config), "--seed", "2"])
	assert code in (0, 2)
	info = json.loads((tmp_path / "runinfo.json").read_text())
	assert info["config"]["combos"] == ["C"] and info["config"]["seed"] == 2
	assert pl.read_csv(tmp_path / "auc_summary.csv")["eval"].to_list() == ["split"]


def test_bad_thread_count_is_a_hard_error(cohort, tmp_path, monkeypatch, capsys):
	monkeypatch.setenv("DRF_THREADS", "many")
	assert _extract(cohort, tmp_path) == 1
	assert "DRF_THREADS" in capsys.readouterr().err
	assert json.loads((tmp_path / "runinfo.json").read_text())["exit_code"] == 1


def test_rerun_with_other_combos_recomputes(cohort, tmp_path):
	assert _extract(cohort, tmp_path) == 0
	base = ["classify", "--out", str(tmp_path), *FAST_STUDY]
	assert main([*base, "--combos", "R+C+I"]) in (0, 2)
	assert main([*base, "--combos", "C"]) in (0, 2)
	assert pl.read_csv(tmp_path / "auc_summary.csv")["combo"].to_list() == ["C"]
	assert not (tmp_path / "report_r_c_i_loocv.json").exists()
	info = json.loads((tmp_path / "runinfo.json").read_text())
	assert info["config"]["combos"] == ["C"]
