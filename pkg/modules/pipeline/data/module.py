import argparse
from pathlib import Path

from pee import data, utils
from pee.cli import COLOR, CommandGroup, argument, command, load_config
from pee.experiment import stages


class Data(CommandGroup):
    """Interaction data."""

    @command(
        argument("--input", help="TSV file of interactions, or 'synthetic'"),
        argument("--min-interactions", type=int, help="k of the k-core filter"),
        argument("--ratios", help="train,validation,test fractions, e.g. 0.7,0.1,0.2"),
        argument("--out", required=True, help="snapshot directory"),
    )
    def ingest(self, args: argparse.Namespace) -> int:
        """Load, filter and split interactions into a snapshot."""
        config = load_config(args)
        if args.input is not None:
            config.data.input = args.input
        if args.min_interactions is not None:
            config.data.min_interactions = args.min_interactions
        if args.ratios is not None:
            config.set("data.ratios", args.ratios)
        config.validate()

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        log = stages.run_ingest(config, out)
        print(data.format_stats(log), end="")
        print(
            f"Snapshot written to {COLOR.green}{out / data.SNAPSHOT_FILE}{COLOR.none} "
            f"({utils.text.format_list(config.data.ratios)} split)."
        )
        return 0


def setup(cli) -> None:
    cli.add_group(Data(cli))
