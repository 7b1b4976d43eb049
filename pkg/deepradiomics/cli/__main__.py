import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from deepradiomics.analysis import study  # noqa: F401  registers the study steps
from deepradiomics.core import cnn
from deepradiomics.core.registries import step_registry
from deepradiomics.utils import auxfun, synthetic
from deepradiomics.utils.config_templates import (
	EVAL_MODES,
	LAYER_CHOICES,
	MODALITIES,
	STATS_COHORTS,
	make_config,
)
from deepradiomics.utils.errors import DrfError

logger = logging.getLogger("deepradiomics")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
EXIT_OK, EXIT_ERROR, EXIT_WARNINGS = 0, 1, 2
WEIGHTS_FILE = {"binary": "weights.drf", "json": "weights.json"}


class WarningCounter(logging.Handler):
	"""Tallies WARNING-and-above records emitted during a run."""

	def __init__(self):
		super().__init__(level=logging.WARNING)
		self.count = 0

	def emit(self, record: logging.LogRecord) -> None:
		self.count += 1


def _configure_logging(verbose: bool) -> WarningCounter:
	for handler in list(logger.handlers):
		logger.removeHandler(handler)
	stream = logging.StreamHandler(sys.stderr)
	stream.setFormatter(logging.Formatter(LOG_FORMAT))
	counter = WarningCounter()
	logger.addHandler(stream)
	logger.addHandler(counter)
	logger.setLevel(logging.DEBUG if verbose else logging.INFO)
	logger.propagate = False
	return counter


def build_parser() -> argparse.ArgumentParser:
	"""Argument parser with one subparser per subcommand."""
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument("--out", required=True, help="Output directory.")
	common.add_argument("--seed", type=int, default=None)
	common.add_argument("--config", default=None, help="TOML file with run parameters.")
	common.add_argument("--modalities", nargs="+", choices=MODALITIES, default=None)
	common.add_argument("--overwrite", action="store_true", help="Recompute cached outputs.")
	common.add_argument("--verbose", action="store_true")

	extract = argparse.ArgumentParser(add_help=False)
	extract.add_argument("--manifest", default=None, help="Cohort manifest JSON.")
	extract.add_argument("--weights", default=None, help="Network weight file.")
	extract.add_argument("--levels", type=int, default=None)
	extract.add_argument("--layers", choices=LAYER_CHOICES, default=None)
	extract.add_argument("--side", type=int, default=None)

	analysis = argparse.ArgumentParser(add_help=False)
	analysis.add_argument("--combos", nargs="+", default=None, help='e.g. "R" "R+C+I".')
	analysis.add_argument("--eval", nargs="+", choices=EVAL_MODES, default=None)
	analysis.add_argument("--train-n", dest="train_n", type=int, default=None)
	analysis.add_argument("--n-trees", dest="n_trees", type=int, default=None)
	analysis.add_argument(
		"--stats-cohort",
		dest="stats_cohort",
		choices=STATS_COHORTS,
		default=None,
		help="Rows used by the stats step: the whole cohort or the split's training rows.",
	)

	parser = argparse.ArgumentParser(
		prog="deepradiomics",
		description="Deep radiomic features from brain MRI and their survival and immune studies.",
	)
	sub = parser.add_subparsers(dest="subcommand", required=True)
	sub.add_parser("extract", parents=[common, extract], help="Extract the feature table.")
	for name, text in (
		("stats", "Marker correlation, rank-sum and survival scans."),
		("classify", "Short vs long survival classifiers per feature set."),
		("markers", "High vs low immune-marker classifiers."),
	):
		sub.add_parser(name, parents=[common, analysis], help=text)
	sub.add_parser("all", parents=[common, extract, analysis], help="Run every step in order.")

	synth = sub.add_parser("synth", parents=[common], help="Write a synthetic cohort.")
	synth.add_argument("--n-patients", dest="n_patients", type=int, default=None)
	synth.add_argument("--dims", nargs=3, type=int, default=None)

	weights = sub.add_parser("init-weights", parents=[common], help="Write seeded network weights.")
	weights.add_argument(
		"--format", dest="weight_format", choices=tuple(WEIGHTS_FILE), default="binary"
	)
	weights.add_argument("--side", type=int, default=None, help="Input cube side.")
	return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
	"""Merge the optional TOML config with CLI flags (flags win) and validate."""
	values: dict[str, Any] = {}
	if args.config:
		values.update(auxfun.read_config(args.config))
	values.update({k: v for k, v in vars(args).items() if v is not None})
	values.pop("subcommand", None)
	return make_config(args.subcommand, **values).to_dict()


def _run(subcommand: str, cfg: dict[str, Any], args: argparse.Namespace) -> None:
	out = Path(cfg["out"])
	match subcommand:
		case "synth":
			manifest = synthetic.generate_cohort(
				out, n_patients=cfg["n_patients"], seed=cfg["seed"], dims=cfg["dims"]
			)
			logger.info("Synthetic manifest written to %s", manifest)
		case "init-weights":
			out.mkdir(parents=True, exist_ok=True)
			seed = cfg.get("seed", 42)
			weights = cnn.init_weights(seed, input_side=cfg["side"])
			path = cnn.save_weights(
				weights, out / WEIGHTS_FILE[args.weight_format], args.weight_format
			)
			logger.info("Seeded weights (seed %d) written to %s", seed, path)
		case "all":
			for name, i, total in step_registry.run_pipeline(cfg, overwrite=args.overwrite):
				logger.info("Step %d/%d done: %s", i, total, name)
		case _:
			step_registry.get(subcommand)(cfg, overwrite=args.overwrite)
			logger.info("Step %s done, outputs in %s", subcommand, out)


def main(argv: list[str] | None = None) -> int:
	"""Parse CLI arguments, run the subcommand and write ``runinfo.json``.

	Returns:
		0 on success, 1 on a hard error, 2 when the run completed with warnings.
	"""
	args = build_parser().parse_args(argv)
	counter = _configure_logging(args.verbose)
	started = auxfun.utc_now()

	cfg: dict[str, Any] | None = None
	try:
		cfg = resolve_config(args)
		_run(args.subcommand, cfg, args)
		exit_code = EXIT_WARNINGS if counter.count else EXIT_OK
	except (DrfError, FileNotFoundError) as e:
		print(f"error: {e}", file=sys.stderr)
		exit_code = EXIT_ERROR

	if cfg is not None and Path(cfg["out"]).is_dir():
		auxfun.write_atomic(
			Path(cfg["out"]) / "runinfo.json",
			auxfun.runinfo(cfg, started, counter.count, exit_code),
		)
	return exit_code


if __name__ == "__main__":
	sys.exit(main())
