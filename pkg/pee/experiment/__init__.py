"""Experiment runner.

Runs the stages of every variant, sweep point and seed of an
:class:`~pee.config.ExperimentSpec`, caches stage outputs by config hash and
writes CSV reports together with a run manifest into the output directory.
"""

from __future__ import annotations

import dataclasses
import itertools
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pee import data, deploy, device, logger, utils
from pee import database as stage_database
from pee.cluster import ClusterState
from pee.config import STAGES, Ablations, ExperimentSpec, PipelineConfig
from pee.core import BlockGrid, InteractionLog, Role, UserEmbeddingTable
from pee.exceptions import PeelException, StageError
from pee.experiment import stages
from pee.experiment.manifest import verify_manifest, write_manifest
from pee.experiment.report import compare_runs, summarize, write_csv
from pee.finetune import GroupModel

pipeline_log = logger.Pipeline.logger()

METRIC_COLUMNS = ("budgetMB", "recallAtK", "ndcgAtK", "paramCount")
TIMING_COLUMNS = ("budgetMB", "shrinkMicros", "rankMicros")
SWEEP_COLUMNS = ("parameter", "value", "budgetMB", "recallAtK", "ndcgAtK")
ABLATION_COLUMNS = ("variant", "seed") + METRIC_COLUMNS
OVERLAP_COLUMNS = ("groupA", "groupB", "sharedBlocks", "centroidDistance")

SWEEPS = {
    "item_groups": "model.item_groups",
    "user_groups": "cluster.user_groups",
    "blocks": "model.blocks",
}

__all__ = (
    "ExperimentResult",
    "PipelineRun",
    "compare_runs",
    "run_experiment",
    "run_pipeline",
    "summarize",
    "verify_manifest",
)


@dataclasses.dataclass
class PipelineRun:
    """Outputs of the stages run for one configuration."""

    config: PipelineConfig
    log: Optional[InteractionLog] = None
    grid: Optional[BlockGrid] = None
    users: Optional[UserEmbeddingTable] = None
    clusters: Optional[ClusterState] = None
    models: Dict[int, GroupModel] = dataclasses.field(default_factory=dict)
    directories: List[Path] = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class BudgetMetrics:
    """Per-budget means over the evaluated users."""

    budgets: List[int]
    recall: List[float]
    ndcg: List[float]
    param_count: List[float]
    shrink_micros: List[float]
    rank_micros: List[float]
    users: int

    def rows(self) -> List[dict]:
        return [
            {
                "budgetMB": deploy.budget_megabytes(self.budgets[i]),
                "recallAtK": self.recall[i],
                "ndcgAtK": self.ndcg[i],
                "paramCount": int(round(self.param_count[i])),
                "shrinkMicros": self.shrink_micros[i],
                "rankMicros": self.rank_micros[i],
            }
            for i in range(len(self.budgets))
        ]

    @staticmethod
    def mean(results: Sequence[BudgetMetrics]) -> BudgetMetrics:
        """Mean over seeds, budget by budget."""

        def average(name: str) -> List[float]:
            values = np.array([getattr(r, name) for r in results], dtype=np.float64)
            return values.mean(axis=0).tolist()

        return BudgetMetrics(
            budgets=[int(round(b)) for b in average("budgets")],
            recall=average("recall"),
            ndcg=average("ndcg"),
            param_count=average("param_count"),
            shrink_micros=average("shrink_micros"),
            rank_micros=average("rank_micros"),
            users=int(sum(r.users for r in results)),
        )


@dataclasses.dataclass
class ExperimentResult:
    output: Path
    reports: Dict[str, Path]
    manifest: Path
    cache_hits: Dict[str, int]
    cache_misses: Dict[str, int]
    optimizer_steps: int


def _last_stage(spec: ExperimentSpec) -> int:
    return max(STAGES.index(s) for s in spec.stages)


def run_pipeline(
    config: PipelineConfig,
    cache: stages.StageCache,
    *,
    until: str = "finetune",
    threads: int = 1,
) -> PipelineRun:
    """Run (or load from cache) the training stages up to ``until``."""
    keys = stages.StageKeys.of(config)
    last = STAGES.index(until)
    run = PipelineRun(config=config)

    run.log = cache.run(
        "ingest",
        keys.ingest,
        lambda d: stages.run_ingest(config, d),
        data.load_snapshot,
    )
    run.directories.append(cache.directory("ingest", keys.ingest))
    if last < STAGES.index("pretrain"):
        return run

    log = run.log
    run.grid, run.users = cache.run(
        "pretrain",
        keys.pretrain,
        lambda d: stages.run_pretrain(log, config, d),
        stages.load_pretrained,
    )
    run.directories.append(cache.directory("pretrain", keys.pretrain))
    if last < STAGES.index("cluster"):
        return run

    users = run.users
    run.clusters = cache.run(
        "cluster",
        keys.cluster,
        lambda d: stages.run_cluster(users, config, d, threads),
        stages.load_clusters,
    )
    run.directories.append(cache.directory("cluster", keys.cluster))
    if last < STAGES.index("finetune"):
        return run

    grouping = stages.grouping_of(log, run.grid, run.clusters)
    grid = run.grid
    run.models = cache.run(
        "finetune",
        keys.finetune,
        lambda d: stages.run_finetune(log, grouping, grid, users, config, d, threads),
        stages.load_models,
    )
    run.directories.append(cache.directory("finetune", keys.finetune))
    return run


def selection_weights(model: GroupModel, config: PipelineConfig) -> np.ndarray:
    """Frozen weights of the model, or seeded random scores without them."""
    if config.deploy.importance_weights:
        return model.alpha
    layout = model.layout
    return deploy.random_scores(
        layout.blocks, layout.n_groups, config.seed, model.group
    )


def budget_timeline(
    values: Sequence[float], config: PipelineConfig, layout
) -> List[int]:
    """Distinct budgets in bytes, largest first."""
    budgets = deploy.parse_budgets(values, config.deploy.budget_unit, layout)
    return sorted(set(budgets), reverse=True)


def evaluate_models(
    run: PipelineRun, budget_values: Sequence[float]
) -> BudgetMetrics:
    """Build one package per test user at the largest budget, then shrink
    it through the remaining budgets and evaluate every step.
    """
    config, log = run.config, run.log
    k = config.device.k
    layout = next(iter(run.models.values())).layout
    budgets = budget_timeline(budget_values, config, layout)

    names = ("recall", "ndcg", "params", "shrink", "rank")
    sums = {name: np.zeros(len(budgets)) for name in names}
    evaluated = 0
    for group in sorted(run.models):
        model = run.models[group]
        table = deploy.normalized_table(model)
        alpha = selection_weights(model, config)
        for user in model.members.tolist():
            if not log.items_of(user, Role.TEST):
                continue
            package = deploy.build_package(
                model, user, budgets[0], alpha=alpha, table=table
            )
            report = device.simulate_budget_timeline(
                package, budgets, log, k, threads=config.device.threads
            )
            for index, row in enumerate(report.rows):
                sums["recall"][index] += row.recall
                sums["ndcg"][index] += row.ndcg
                sums["params"][index] += row.param_count
                sums["shrink"][index] += row.shrink_micros
                sums["rank"][index] += row.rank_micros
            evaluated += 1

    if evaluated == 0:
        raise StageError("evaluate", ValueError("No user has test interactions."))
    means = {name: (values / evaluated).tolist() for name, values in sums.items()}
    pipeline_log.info(
        "evaluate",
        f"Evaluated {evaluated} users at {len(budgets)} budgets, "
        f"recall@{k} {means['recall'][0]:.4f} at the largest budget.",
    )
    return BudgetMetrics(
        budgets=budgets,
        recall=means["recall"],
        ndcg=means["ndcg"],
        param_count=means["params"],
        shrink_micros=means["shrink"],
        rank_micros=means["rank"],
        users=evaluated,
    )


def group_overlap(run: PipelineRun, budget_values: Sequence[float]) -> List[dict]:
    """Shared selected blocks of every pair of user groups at the tightest
    budget, next to the distance of their cluster centroids."""
    config = run.config
    layout = next(iter(run.models.values())).layout
    budget = budget_timeline(budget_values, config, layout)[-1]
    user_bytes = deploy.user_embedding_bytes(layout)
    selections = {
        group: deploy.select_blocks_within(
            selection_weights(model, config), layout, budget, user_bytes
        )
        for group, model in run.models.items()
    }
    centroids = run.clusters.centroids.astype(np.float64)
    rows: List[dict] = []
    for a, b in itertools.combinations(sorted(selections), 2):
        rows.append(
            {
                "groupA": a,
                "groupB": b,
                "sharedBlocks": deploy.selection_overlap(selections[a], selections[b]),
                "centroidDistance": float(np.linalg.norm(centroids[a] - centroids[b])),
            }
        )
    return rows


def _variants(spec: ExperimentSpec) -> List[Ablations]:
    variants = [spec.ablations]
    for name in spec.compare_ablations:
        variant = dataclasses.replace(spec.ablations, **{name: False})
        if variant not in variants:
            variants.append(variant)
    return variants


def _evaluate(
    config: PipelineConfig,
    cache: stages.StageCache,
    spec: ExperimentSpec,
    until: str,
) -> Tuple[PipelineRun, Optional[BudgetMetrics]]:
    run = run_pipeline(config, cache, until=until, threads=spec.threads)
    if not run.models or "evaluate" not in spec.stages:
        return run, None
    try:
        metrics = evaluate_models(run, spec.budget_list)
    except StageError:
        raise
    except PeelException as exc:
        raise StageError("evaluate", exc) from exc
    return run, metrics


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run all stages, variants, sweeps and seeds of the spec.

    Writes ``budgets.csv``, ``timings.csv``, ``ablations.csv``,
    ``group_overlap.csv``, one ``sweep_<param>.csv`` per swept parameter and
    ``manifest.json``.
    """
    spec.validate()
    output = Path(spec.output)
    output.mkdir(parents=True, exist_ok=True)
    # Evaluation needs the fine-tuned models, every other stage implies its predecessors
    until = STAGES[min(_last_stage(spec), STAGES.index("finetune"))]

    steps_before = utils.instrumentation.get(utils.instrumentation.OPTIMIZER_STEP)
    watch = utils.time.Stopwatch().start()
    db = stage_database.connect(output)
    cache = stages.StageCache(output, db)
    reports: Dict[str, Path] = {}
    directories: List[Path] = []
    try:
        variants = _variants(spec)
        per_variant: Dict[str, List[BudgetMetrics]] = {}
        ablation_rows: List[dict] = []
        first_run: Optional[PipelineRun] = None

        for variant in variants:
            label = variant.label()
            per_variant[label] = []
            for seed in spec.seed_list:
                config = variant.apply(spec.config).set("seed", seed)
                pipeline_log.info("experiment", f"Variant '{label}', seed {seed}.")
                run, metrics = _evaluate(config, cache, spec, until)
                directories.extend(run.directories)
                if first_run is None:
                    first_run = run
                if metrics is None:
                    continue
                per_variant[label].append(metrics)
                for row in metrics.rows():
                    ablation_rows.append({"variant": label, "seed": seed, **row})

        full = per_variant[variants[0].label()]
        if full:
            mean = BudgetMetrics.mean(full)
            mean_rows = mean.rows()
            reports["budgets"] = write_csv(
                output / "budgets.csv", mean_rows, METRIC_COLUMNS
            )
            reports["timings"] = write_csv(
                output / "timings.csv", mean_rows, TIMING_COLUMNS
            )
            if len(variants) > 1:
                reports["ablations"] = write_csv(
                    output / "ablations.csv", ablation_rows, ABLATION_COLUMNS
                )
            if first_run is not None and first_run.clusters is not None:
                reports["group_overlap"] = write_csv(
                    output / "group_overlap.csv",
                    group_overlap(first_run, spec.budget_list),
                    OVERLAP_COLUMNS,
                )

        base = spec.ablations.apply(spec.config)
        for parameter, key in SWEEPS.items():
            values = getattr(spec, f"sweep_{parameter}")
            if not values or "evaluate" not in spec.stages:
                continue
            rows: List[dict] = []
            for value in values:
                results: List[BudgetMetrics] = []
                for seed in spec.seed_list:
                    config = base.copy().set(key, value).set("seed", seed).validate()
                    pipeline_log.info(
                        "experiment", f"Sweep {parameter}={value}, seed {seed}."
                    )
                    run, metrics = _evaluate(config, cache, spec, until)
                    directories.extend(run.directories)
                    results.append(metrics)
                for row in BudgetMetrics.mean(results).rows():
                    rows.append({"parameter": parameter, "value": value, **row})
            reports[f"sweep_{parameter}"] = write_csv(
                output / f"sweep_{parameter}.csv", rows, SWEEP_COLUMNS
            )
        used = {d.relative_to(output).as_posix() for d in directories}
        cached = [r for r in cache.records() if r["path"] in used]
    finally:
        db.close()

    artifacts: List[Path] = list(reports.values())
    for directory in sorted(set(directories)):
        artifacts.extend(p for p in directory.rglob("*") if p.is_file())
    inputs: List[Path] = []
    if spec.config.data.input != "synthetic":
        inputs.append(Path(spec.config.data.input))
    manifest = write_manifest(
        output,
        config=spec.config.render(),
        seeds=spec.seed_list,
        inputs=inputs,
        artifacts=artifacts,
        extra={
            "stages": list(spec.stages),
            "variants": [v.label() for v in _variants(spec)],
            "cache": cached,
        },
    )
    steps = (
        utils.instrumentation.get(utils.instrumentation.OPTIMIZER_STEP) - steps_before
    )
    pipeline_log.info(
        "experiment",
        f"Finished in {utils.time.format_seconds(watch.stop() / 1e9)} "
        f"with {len(reports)} reports, {steps} optimizer steps, "
        f"cached stages reused {sum(cache.hits.values())} times.",
    )
    return ExperimentResult(
        output=output,
        reports=reports,
        manifest=manifest,
        cache_hits=dict(cache.hits),
        cache_misses=dict(cache.misses),
        optimizer_steps=steps,
    )
