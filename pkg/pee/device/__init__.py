"""On-device inference simulation.

Scores follow the parameter-free similarity of the deployed package: for
an item with selected block set ``S`` in its item group,
``r = maxS / |S| * sum_{n in S} u . repeat(e^n, N)``, where ``maxS`` is the
largest selected set of the package. The repetition is never built:
``u . repeat(e, N)`` equals ``(sum_m u_m) . e`` over the ``d``-long chunks
``u_m`` of ``u``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from pee import logger, metrics, utils
from pee.core import InteractionLog, Role
from pee.deploy import PeePackage, budget_megabytes, check_budget, shrink_package
from pee.exceptions import ConfigurationError, InstrumentationError

pipeline_log = logger.Pipeline.logger()

REPORT_COLUMNS = (
    "budgetMB",
    "recallAtK",
    "ndcgAtK",
    "shrinkMicros",
    "rankMicros",
    "paramCount",
)
FLOAT_FORMAT = "%.6f"


@dataclasses.dataclass
class RankingResult:
    ordered_items: np.ndarray
    scores: np.ndarray
    latency_micros: float


def item_scores(package: PeePackage) -> np.ndarray:
    """Score of every item id."""
    layout = package.layout
    d = layout.block_dim
    user = package.user_embedding.astype(np.float64)
    user_sum = user.reshape(layout.blocks, d).sum(axis=0)
    max_selected = package.max_selected

    scores = np.zeros(layout.n_items, dtype=np.float64)
    for group, selected in enumerate(package.selection):
        rows = np.asarray(layout.group_items[group], dtype=np.int64)
        total = np.zeros((len(rows), d), dtype=np.float64)
        for block in selected:
            total += package.blocks[(group, block)]
        scores[rows] = (max_selected / len(selected)) * (total @ user_sum)
    return scores


def rank_items(package: PeePackage, threads: int = 1) -> RankingResult:
    """Rank all items of the package for its user, best first.

    Equal scores are ordered by ascending item id. BLAS runs on at most
    ``threads`` threads while the ranking is timed.
    """
    with threadpool_limits(limits=threads, user_api="blas"):
        with utils.time.Stopwatch() as watch:
            scores = item_scores(package)
            ordered = np.lexsort((np.arange(len(scores)), -scores))
    return RankingResult(ordered, scores, watch.micros)


def evaluate_ranking(
    ranking: RankingResult, log: InteractionLog, user: int, k: int
) -> Optional[Tuple[float, float]]:
    truth: Set[int] = log.items_of(user, Role.TEST)
    if not truth:
        return None
    seen = log.items_of(user, Role.TRAIN, Role.VALIDATION)
    candidates = [int(i) for i in ranking.ordered_items if int(i) not in seen]
    return metrics.evaluate_ranking(candidates, truth, k)


def evaluate_package(
    package: PeePackage, log: InteractionLog, k: int, threads: int = 1
) -> Optional[Tuple[float, float]]:
    """Recall@K and NDCG@K of the package's user against the test items.

    Train and validation items of the user are not candidates. Returns
    ``None`` when the user has no test item.
    """
    result = evaluate_ranking(rank_items(package, threads), log, package.user_id, k)
    if result is None:
        pipeline_log.info(
            "device", f"User {package.user_id} has no test items, skipped."
        )
    return result


# Reports


@dataclasses.dataclass
class EvalRow:
    budget: int
    recall: float
    ndcg: float
    shrink_micros: float
    rank_micros: float
    param_count: int
    removed_blocks: int = 0

    def dump(self) -> dict:
        return {
            "budgetMB": budget_megabytes(self.budget),
            "recallAtK": self.recall,
            "ndcgAtK": self.ndcg,
            "shrinkMicros": self.shrink_micros,
            "rankMicros": self.rank_micros,
            "paramCount": self.param_count,
        }


@dataclasses.dataclass
class EvalReport:
    k: int
    rows: List[EvalRow] = dataclasses.field(default_factory=list)

    def frame(self, columns: Sequence[str] = REPORT_COLUMNS) -> pd.DataFrame:
        frame = pd.DataFrame(
            [row.dump() for row in self.rows], columns=list(REPORT_COLUMNS)
        )
        return frame[list(columns)]

    def to_csv(
        self, path: Union[str, Path], columns: Sequence[str] = REPORT_COLUMNS
    ) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame(columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path


def simulate_budget_timeline(
    package: PeePackage,
    budgets: Sequence[int],
    log: InteractionLog,
    k: int,
    threads: int = 1,
) -> EvalReport:
    """Shrink the package through decreasing budgets, evaluating each step.

    All budgets are checked before the package is touched. The shrink path
    must not run an optimizer step or rebuild a package.
    """
    budgets = [int(b) for b in budgets]
    if not budgets:
        raise ConfigurationError("Budget timeline is empty.")
    if any(b >= a for a, b in zip(budgets, budgets[1:])):
        raise ConfigurationError(
            f"Budgets have to be strictly decreasing, got {budgets}."
        )
    if budgets[0] > package.budget:
        raise ConfigurationError(
            f"First budget {budgets[0]} exceeds the package budget {package.budget}."
        )
    for budget in budgets:
        check_budget(budget, package.layout)

    report = EvalReport(k=k)
    guarded = (
        utils.instrumentation.OPTIMIZER_STEP,
        utils.instrumentation.PACKAGE_BUILD,
    )
    for budget in budgets:
        before = utils.instrumentation.snapshot()
        blocks_before = package.block_count
        with utils.time.Stopwatch() as watch:
            shrink_package(package, budget)
        ranking = rank_items(package, threads)
        result = evaluate_ranking(ranking, log, package.user_id, k)
        for name in guarded:
            if utils.instrumentation.delta(before, name):
                raise InstrumentationError(
                    f"Shrinking to {budget} bytes triggered '{name}'."
                )
        recall, ndcg = result if result is not None else (float("nan"), float("nan"))
        report.rows.append(
            EvalRow(
                budget=budget,
                recall=recall,
                ndcg=ndcg,
                shrink_micros=watch.micros,
                rank_micros=ranking.latency_micros,
                param_count=package.param_count,
                removed_blocks=blocks_before - package.block_count,
            )
        )
    return report
