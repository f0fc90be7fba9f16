"""Pipeline stages with on-disk artifacts and a config-hash keyed cache."""

from __future__ import annotations

import dataclasses
import hashlib
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, TypeVar

from pee import cluster, data, logger, pretrain
from pee.cluster import ClusterState
from pee.config import PipelineConfig
from pee.core import BlockGrid, GroupingPlan, InteractionLog, UserEmbeddingTable
from pee.data import synthetic
from pee.database import Database
from pee.exceptions import PeelException, StageError
from pee.experiment.database import StageRecord
from pee.experiment.manifest import blob_hash, tree_hash
from pee.finetune import GroupModel, optimize_groups, storage
from pee.pretrain import checkpoint

pipeline_log = logger.Pipeline.logger()

T = TypeVar("T")

INPUT_FILE = "input.tsv"
CHECKPOINT_FILE = "checkpoint.bin"
ASSIGNMENT_FILE = "assignment.tsv"
CENTROIDS_FILE = "centroids.bin"


def chain(*parts: str) -> str:
    return hashlib.sha1("/".join(parts).encode("utf-8")).hexdigest()


@dataclasses.dataclass
class StageKeys:
    ingest: str
    pretrain: str
    cluster: str
    finetune: str

    @staticmethod
    def of(config: PipelineConfig) -> StageKeys:
        if config.data.input == "synthetic":
            source = "synthetic"
        else:
            source = blob_hash(config.data.input)
        ingest = chain(config.hash(["data", "seed"]), source)
        pretrain_key = chain(ingest, config.hash(["model", "pretrain"]))
        cluster_key = chain(pretrain_key, config.hash(["cluster"]))
        finetune_key = chain(cluster_key, config.hash(["finetune"]))
        return StageKeys(ingest, pretrain_key, cluster_key, finetune_key)


class StageCache:
    """Stage artifacts under ``<root>/stages/<stage>/<key>``, indexed in the
    database.

    A record whose artifact directory is missing or whose content hash does
    not match is stale; the stage is recomputed.
    """

    def __init__(self, root: Path, database: Database):
        self.root: Path = Path(root)
        self.database: Database = database
        self.hits: Dict[str, int] = {}
        self.misses: Dict[str, int] = {}

    def directory(self, stage: str, key: str) -> Path:
        return self.root / "stages" / stage / key[:16]

    def fresh(self, stage: str, key: str) -> Optional[Path]:
        record = StageRecord.get(self.database.session, stage, key)
        if record is None:
            return None
        directory = self.root / record.path
        if directory.is_dir() and tree_hash(directory) == record.content_hash:
            return directory
        pipeline_log.warning(
            stage, f"Cached output '{record.path}' is stale, recomputing."
        )
        StageRecord.remove(self.database.session, stage, key)
        return None

    def run(
        self,
        stage: str,
        key: str,
        compute: Callable[[Path], None],
        load: Callable[[Path], T],
    ) -> T:
        """Load the cached stage output, or compute, store and load it."""
        directory = self.fresh(stage, key)
        if directory is not None:
            self.hits[stage] = self.hits.get(stage, 0) + 1
            pipeline_log.info(stage, f"Reusing cached output {key[:8]}.")
            return load(directory)

        self.misses[stage] = self.misses.get(stage, 0) + 1
        directory = self.directory(stage, key)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        try:
            compute(directory)
        except StageError:
            raise
        except PeelException as exc:
            raise StageError(stage, exc) from exc
        except Exception as exc:
            pipeline_log.error(stage, "Stage failed.", exception=exc)
            raise StageError(stage, exc) from exc
        StageRecord.set(
            self.database.session,
            stage,
            key,
            directory.relative_to(self.root).as_posix(),
            tree_hash(directory),
        )
        return load(directory)

    def records(self, stage: Optional[str] = None) -> List[dict]:
        """Index entries, ordered by stage and creation time."""
        return [r.dump() for r in StageRecord.get_all(self.database.session, stage)]


# Stage bodies, each writes into its artifact directory


def run_ingest(config: PipelineConfig, directory: Path) -> InteractionLog:
    settings = config.data
    if settings.input == "synthetic":
        pairs, _, _ = synthetic.generate_planted(
            settings.synthetic_users,
            settings.synthetic_items,
            settings.synthetic_clusters,
            settings.synthetic_p_in,
            settings.synthetic_p_out,
            config.seed,
        )
        source = synthetic.write_tsv(directory / INPUT_FILE, pairs)
    else:
        source = Path(settings.input)
    log = data.load_and_filter(source, settings.min_interactions)
    log = data.split_roles(log, settings.ratios, config.seed, mode=settings.split)
    data.save_snapshot(log, directory)
    pipeline_log.info("ingest", f"{log!r} from '{source}'.")
    return log


def load_pretrained(directory: Path) -> Tuple[BlockGrid, UserEmbeddingTable]:
    return checkpoint.load(directory / CHECKPOINT_FILE)


def run_pretrain(log: InteractionLog, config: PipelineConfig, directory: Path) -> None:
    result = pretrain.run_pretrain(log, config)
    checkpoint.save(directory / CHECKPOINT_FILE, result.grid, result.users)


def run_cluster(
    users: UserEmbeddingTable, config: PipelineConfig, directory: Path, threads: int = 1
) -> None:
    settings = config.cluster
    state = cluster.kmeans_users(
        users.rows,
        settings.user_groups,
        config.seed,
        max_iters=settings.max_iters,
        tol=settings.tol,
        restarts=settings.restarts,
        threads=threads,
    )
    cluster.save_assignment(directory / ASSIGNMENT_FILE, state)
    cluster.save_centroids(directory / CENTROIDS_FILE, state.centroids)


def load_clusters(directory: Path) -> ClusterState:
    assignment = cluster.load_assignment(directory / ASSIGNMENT_FILE)
    centroids = cluster.load_centroids(directory / CENTROIDS_FILE)
    return ClusterState(centroids, assignment, float("nan"))


def grouping_of(
    log: InteractionLog, grid: BlockGrid, state: ClusterState
) -> GroupingPlan:
    """Item groups of the checkpoint with the user groups of the partition."""
    plan = GroupingPlan(item_groups=grid.layout.group_items, popularity=log.popularity)
    return plan.with_user_groups(state.groups())


def run_finetune(
    log: InteractionLog,
    grouping: GroupingPlan,
    grid: BlockGrid,
    users: UserEmbeddingTable,
    config: PipelineConfig,
    directory: Path,
    threads: int = 1,
) -> None:
    models = optimize_groups(log, grouping, grid, users, config, threads=threads)
    for model in models.values():
        storage.save(directory, model)


def load_models(directory: Path) -> Dict[int, GroupModel]:
    return storage.load_all(directory)
