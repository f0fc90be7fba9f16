import argparse
from pathlib import Path
from typing import List, Optional

from pee import data, finetune, pretrain, utils
from pee.cli import COLOR, CommandGroup, argument, command, load_config
from pee.exceptions import ConfigurationError
from pee.experiment import stages
from pee.finetune import storage
from pee.pretrain import checkpoint


def _parse_groups(value: str) -> Optional[List[int]]:
    if value.strip().lower() == "all":
        return None
    try:
        return utils.text.parse_list(value, int)
    except ValueError:
        raise ConfigurationError(
            f"'--groups' has to be 'all' or a list of indices, got {value}."
        )


class Training(CommandGroup):
    """Pretraining, clustering and per-group fine-tuning."""

    @command(
        argument("--data", required=True, help="snapshot directory"),
        argument("--out", required=True, help="checkpoint file"),
    )
    def pretrain(self, args: argparse.Namespace) -> int:
        """Train the item block grid and user embeddings."""
        config = load_config(args)
        log = data.load_snapshot(args.data)
        result = pretrain.run_pretrain(log, config)
        path = checkpoint.save(args.out, result.grid, result.users)
        print(
            f"Checkpoint {COLOR.green}{path}{COLOR.none} written after "
            f"{len(result.history)} epochs."
        )
        return 0

    @command(
        argument("--checkpoint", required=True, help="pretrained checkpoint file"),
        argument("--groups", type=int, help="number of user groups"),
        argument("--out", required=True, help="output directory"),
    )
    def cluster(self, args: argparse.Namespace) -> int:
        """Partition users into groups by their embeddings."""
        config = load_config(args)
        if args.groups is not None:
            config.cluster.user_groups = args.groups
        _, users = checkpoint.load(args.checkpoint)
        out = Path(args.out)
        stages.run_cluster(users, config, out, args.threads)
        state = stages.load_clusters(out)
        sizes = [len(members) for members in state.groups()]
        print(
            f"Users split into {COLOR.green}{state.n_groups}{COLOR.none} groups "
            f"of sizes {utils.text.format_list(sizes)}."
        )
        return 0

    @command(
        argument("--data", required=True, help="snapshot directory"),
        argument("--checkpoint", required=True, help="pretrained checkpoint file"),
        argument("--clusters", required=True, help="output directory of 'cluster'"),
        argument("--groups", default="all", help="'all' or comma separated indices"),
        argument("--out", required=True, help="group model directory"),
    )
    def finetune(self, args: argparse.Namespace) -> int:
        """Fine-tune the block grid and learn block weights per user group."""
        config = load_config(args)
        groups = _parse_groups(args.groups)
        log = data.load_snapshot(args.data)
        grid, users = checkpoint.load(args.checkpoint)
        clusters = stages.load_clusters(Path(args.clusters))
        grouping = stages.grouping_of(log, grid, clusters)
        models = finetune.optimize_groups(
            log,
            grouping,
            grid,
            users,
            config,
            groups=groups,
            threads=args.threads,
        )
        for group, model in sorted(models.items()):
            path = storage.save(args.out, model)
            steps = sum(1 for record in model.history if "iteration" in record)
            print(
                f"Group {group}: {len(model.members)} users, {steps} iterations, "
                f"model {COLOR.green}{path}{COLOR.none}."
            )
        return 0


def setup(cli) -> None:
    cli.add_group(Training(cli))
