import argparse
from pathlib import Path

from pee import data, deploy, device, utils
from pee.cli import COLOR, CommandGroup, argument, command, load_config
from pee.core import Role
from pee.deploy import package as package_file
from pee.finetune import storage

REPORT_HEADER = {
    "budgetMB": "Budget (MB)",
    "recallAtK": "Recall",
    "ndcgAtK": "NDCG",
    "shrinkMicros": "Shrink (us)",
    "rankMicros": "Rank (us)",
    "paramCount": "Parameters",
}


def _describe(package: deploy.PeePackage) -> str:
    return (
        f"{package.block_count} blocks, {package.param_count} parameters, "
        f"{deploy.budget_megabytes(package.byte_size):.6f} MB"
    )


class Deployment(CommandGroup):
    """Packages for on-device inference."""

    @command(
        argument("--group-model", required=True, help="fine-tuned group model file"),
        argument("--user", required=True, type=int, help="user index"),
        argument("--budget-mb", required=True, type=float, help="memory budget"),
        argument(
            "--random-selection", action="store_true", help="ignore block weights"
        ),
        argument("--out", required=True, help="package file"),
    )
    def deploy(self, args: argparse.Namespace) -> int:
        """Build the package of one user within a memory budget."""
        config = load_config(args)
        model = storage.load(args.group_model)
        alpha = None
        if args.random_selection:
            layout = model.layout
            alpha = deploy.random_scores(
                layout.blocks, layout.n_groups, config.seed, model.group
            )
        package = deploy.build_package(
            model, args.user, deploy.budget_bytes(args.budget_mb), alpha=alpha
        )
        path = package_file.save(args.out, package)
        print(f"Package {COLOR.green}{path}{COLOR.none}: {_describe(package)}.")
        return 0

    @command(
        argument("--package", required=True, help="package file"),
        argument("--budget-mb", required=True, type=float, help="new memory budget"),
        argument("--out", help="output file, the package is rewritten by default"),
    )
    def shrink(self, args: argparse.Namespace) -> int:
        """Drop the least important blocks of a package."""
        package = package_file.load(args.package)
        before = package.block_count
        deploy.shrink_package(package, deploy.budget_bytes(args.budget_mb))
        path = package_file.save(args.out or args.package, package)
        print(
            f"Removed {COLOR.yellow}{before - package.block_count}{COLOR.none} blocks, "
            f"package {COLOR.green}{path}{COLOR.none}: {_describe(package)}."
        )
        return 0

    @command(
        argument("--package", required=True, help="package file"),
        argument("--data", required=True, help="snapshot directory"),
        argument("--k", type=int, default=50, help="ranking cutoff"),
    )
    def rank(self, args: argparse.Namespace) -> int:
        """Rank all items for the package's user."""
        package = package_file.load(args.package)
        log = data.load_snapshot(args.data)
        ranking = device.rank_items(package, args.threads)
        seen = log.items_of(package.user_id, Role.TRAIN, Role.VALIDATION)
        top = [int(i) for i in ranking.ordered_items if int(i) not in seen][: args.k]
        rows = [
            {
                "rank": r + 1,
                "item": log.item_ids[i],
                "score": f"{ranking.scores[i]:.6f}",
            }
            for r, i in enumerate(top)
        ]
        header = {"rank": "#", "item": "Item", "score": "Score"}
        print(utils.text.create_table(rows, header, rich=bool(COLOR.none)), end="")
        result = device.evaluate_ranking(ranking, log, package.user_id, args.k)
        if result is not None:
            recall, ndcg = result
            print(f"Recall@{args.k} {recall:.6f}, NDCG@{args.k} {ndcg:.6f}.")
        print(f"Ranked in {ranking.latency_micros:.0f} microseconds.")
        return 0

    @command(
        argument("--package", required=True, help="package file"),
        argument("--data", required=True, help="snapshot directory"),
        argument(
            "--budgets", required=True, help="decreasing budgets in MB, e.g. 25,10,5"
        ),
        argument("--k", type=int, default=50, help="ranking cutoff"),
        argument("--report", help="CSV report file"),
    )
    def simulate(self, args: argparse.Namespace) -> int:
        """Shrink a package through a budget timeline and evaluate each step."""
        package = package_file.load(args.package)
        log = data.load_snapshot(args.data)
        budgets = [
            deploy.budget_bytes(b) for b in utils.text.parse_list(args.budgets, float)
        ]
        report = device.simulate_budget_timeline(
            package, budgets, log, args.k, threads=args.threads
        )
        rows = report.frame().to_dict("records")
        table = utils.text.create_table(rows, REPORT_HEADER, rich=bool(COLOR.none))
        print(table, end="")
        if args.report:
            path = report.to_csv(Path(args.report))
            print(f"Report written to {COLOR.green}{path}{COLOR.none}.")
        return 0


def setup(cli) -> None:
    cli.add_group(Deployment(cli))
