import argparse
from pathlib import Path

from pee import experiment, utils
from pee.cli import COLOR, CommandGroup, argument, command
from pee.config import ExperimentSpec
from pee.exceptions import ConfigurationError
from pee.experiment.report import FLOAT_FORMAT


class Experiment(CommandGroup):
    """Experiment runs and their reports."""

    @command(
        argument("spec", nargs="?", help="experiment config file, same as --config"),
        argument("--out", help="output directory"),
    )
    def experiment(self, args: argparse.Namespace) -> int:
        """Run stages, ablations and sweeps of an experiment config."""
        path = args.spec or getattr(args, "config", None)
        if path is None:
            raise ConfigurationError("Experiment needs a config file.")
        spec = ExperimentSpec.load(path)
        if getattr(args, "seed", None) is not None:
            spec.config.seed = args.seed
            spec.seeds = [args.seed]
        if getattr(args, "threads", 1) > 1:
            spec.threads = args.threads
        if args.out is not None:
            spec.output = args.out

        result = experiment.run_experiment(spec)
        for name, report in sorted(result.reports.items()):
            print(f"{name}: {COLOR.green}{report}{COLOR.none}")
        print(
            f"Manifest {COLOR.green}{result.manifest}{COLOR.none}, "
            f"{result.optimizer_steps} optimizer steps."
        )
        return 0

    @command(
        argument("report_a", help="first report CSV"),
        argument("report_b", help="second report CSV"),
        argument("--out", help="write the deltas into this CSV"),
    )
    def compare(self, args: argparse.Namespace) -> int:
        """Per-metric deltas between two reports of the same schema."""
        comparison = experiment.compare_runs(args.report_a, args.report_b)
        header = {c: c for c in comparison.columns}
        rows = comparison.to_dict("records")
        print(utils.text.create_table(rows, header, rich=bool(COLOR.none)), end="")
        counts = experiment.summarize(comparison)
        print(
            f"{COLOR.green}{counts['improved']} improved{COLOR.none}, "
            f"{COLOR.red}{counts['regressed']} regressed{COLOR.none}, "
            f"{counts['tied']} tied."
        )
        if args.out:
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
            comparison.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return 0

    @command(
        argument("manifest", help="manifest.json or the run directory"),
        name="verify-manifest",
    )
    def verify_manifest(self, args: argparse.Namespace) -> int:
        """Check that all files of a run manifest are intact."""
        problems = experiment.verify_manifest(args.manifest)
        for problem in problems:
            print(f"{COLOR.red}{problem}{COLOR.none}")
        if problems:
            return 1
        print(f"Manifest {COLOR.green}{args.manifest}{COLOR.none} is intact.")
        return 0


def setup(cli) -> None:
    cli.add_group(Experiment(cli))
