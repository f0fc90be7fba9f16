"""Per user group fine-tuning with learned block importance weights.

Each user group refines its own copy of the pretrained tables (the model
parameters W: item table, the group's user rows and the scorer) while a
controller (parameters V) produces the importance weights ``alpha``. V is
descended on validation batches through the one-step lookahead of W, W is
descended on training batches.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pee import logger, utils
from pee.config import FinetuneConfig, PipelineConfig
from pee.core import (
    BlockGrid,
    BlockLayout,
    GroupingPlan,
    InteractionLog,
    Role,
    UserEmbeddingTable,
)
from pee.data import BprBatch, BprSampler
from pee.exceptions import ConfigurationError, NotFoundError, TrainingDivergedError
from pee.finetune.network import (
    INFERENCE,
    TRAIN,
    LossResult,
    NormStats,
    Structure,
    _controller_pass,
    controller_backward,
    controller_forward,
    init_mlp,
    loss_and_grads,
    normalize_blocks,
    score_rows,
    uniform_alpha,
)
from pee.optim import Adam, Parameters, all_finite, global_norm

group_log = logger.Group.logger()
pipeline_log = logger.Pipeline.logger()

__all__ = (
    "GroupModel",
    "controller_forward",
    "first_order_gradient",
    "group_popularity_vector",
    "group_train_loss",
    "hypergradient",
    "init_group_model",
    "normalize_blocks",
    "optimize_group",
    "optimize_groups",
    "score_interaction",
    "validation_pass",
    "validation_sampler",
)

# Perturbation size of the finite-difference Hessian-vector product
HVP_SCALE = 1e-2


@dataclasses.dataclass
class GroupModel:
    """Fine-tuning state of one user group.

    ``params`` is W, ``controller`` is V. ``alpha`` is the latest controller
    output until the model is frozen, then the frozen snapshot.
    """

    group: int
    layout: BlockLayout
    members: np.ndarray
    params: Parameters
    controller: Parameters
    norm: NormStats
    popularity: np.ndarray
    alpha: np.ndarray
    settings: FinetuneConfig = dataclasses.field(default_factory=FinetuneConfig)
    history: List[dict] = dataclasses.field(default_factory=list)
    frozen: bool = False

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} group={self.group} "
            f"users={len(self.members)} frozen={self.frozen}>"
        )

    @property
    def grid(self) -> BlockGrid:
        return BlockGrid(self.layout, self.params["items"])

    @property
    def user_rows(self) -> np.ndarray:
        return self.params["users"]

    @property
    def structure(self) -> Structure:
        n_users = int(self.members.max()) + 1 if len(self.members) else 0
        local = np.full(n_users, -1, dtype=np.int64)
        local[self.members] = np.arange(len(self.members))
        return Structure(
            blocks=self.layout.blocks,
            block_dim=self.layout.block_dim,
            item_group=self.layout.item_group,
            local_user=local,
        )

    def user_row(self, user: int) -> int:
        """Row of ``user`` in the group's user table."""
        index = int(np.searchsorted(self.members, user))
        if index >= len(self.members) or self.members[index] != user:
            raise NotFoundError(f"User {user} is not a member of group {self.group}.")
        return index

    def user_embedding(self, user: int) -> np.ndarray:
        return self.params["users"][self.user_row(user)]

    def astype(self, dtype) -> GroupModel:
        """Copy with every parameter cast, gradient checks run in float64."""

        def cast(values: Parameters) -> Parameters:
            return {k: v.astype(dtype) for k, v in values.items()}

        norm = NormStats(
            self.norm.mean.astype(dtype),
            self.norm.var.astype(dtype),
            self.norm.epsilon,
            self.norm.momentum,
        )
        return dataclasses.replace(
            self,
            params=cast(self.params),
            controller=cast(self.controller),
            norm=norm,
            alpha=self.alpha.astype(dtype),
            popularity=self.popularity.astype(dtype),
            history=[],
        )

    def current_alpha(self, loss_value: float) -> np.ndarray:
        if not self.settings.controller or not self.controller:
            layout = self.layout
            return uniform_alpha(layout.blocks, layout.n_groups, self.alpha.dtype)
        return controller_forward(self.controller, self.popularity, loss_value)

    def normalized_block(self, group: int, block: int) -> np.ndarray:
        """Inference-mode normalized ``(itemsInGroup x d)`` block."""
        d = self.layout.block_dim
        rows = np.asarray(self.layout.group_items[group], dtype=np.int64)
        normalized = normalize_blocks(self.params["items"][rows], self.norm, INFERENCE)
        return normalized[:, block * d : (block + 1) * d]


def group_popularity_vector(
    log: InteractionLog, grouping: GroupingPlan, group: int
) -> np.ndarray:
    """Share of the group's train interactions falling into every item group."""
    members = np.asarray(grouping.user_groups[group], dtype=np.int64)
    return _popularity_of(log, grouping, members, group)


def _popularity_of(
    log: InteractionLog, grouping: GroupingPlan, members: np.ndarray, group: int
) -> np.ndarray:
    users, items = log.pairs(Role.TRAIN)
    local = items[np.isin(users, members)]
    if not len(local):
        raise ConfigurationError(f"User group {group} has no train interactions.")
    item_group = np.full(log.n_items, -1, dtype=np.int64)
    for index, group_items in enumerate(grouping.item_groups):
        item_group[list(group_items)] = index
    counts = np.bincount(item_group[local], minlength=len(grouping.item_groups))
    return counts / counts.sum()


def init_group_model(
    group: int,
    grouping: GroupingPlan,
    grid: BlockGrid,
    users: UserEmbeddingTable,
    log: InteractionLog,
    config: PipelineConfig,
) -> GroupModel:
    """Copy the pretrained tables and initialize scorer and controller."""
    settings = config.finetune
    layout = grid.layout
    members = np.asarray(sorted(grouping.user_groups[group]), dtype=np.int64)
    dim = layout.dim
    rng = utils.random.generator(config.seed, utils.random.STREAM_FINETUNE, group, 0)

    params: Parameters = {
        "items": grid.table.copy(),
        "users": users.rows[members].copy(),
    }
    params.update(
        init_mlp(
            "scorer",
            [2 * dim] + [settings.scorer_width] * settings.scorer_layers + [1],
            rng,
            std=settings.init_std,
        )
    )
    controller = init_mlp(
        "controller",
        [layout.n_groups + 1]
        + [settings.controller_width] * settings.controller_layers
        + [layout.blocks * layout.n_groups],
        rng,
        std=settings.init_std,
    )
    popularity = _popularity_of(log, grouping, members, group).astype(np.float32)
    norm = NormStats.of(
        grid.table, epsilon=settings.epsilon, momentum=settings.momentum
    )
    model = GroupModel(
        group=group,
        layout=layout,
        members=members,
        params=params,
        controller=controller if settings.controller else {},
        norm=norm,
        popularity=popularity,
        alpha=uniform_alpha(layout.blocks, layout.n_groups),
        settings=settings,
    )
    model.alpha = model.current_alpha(math.log(2.0))
    return model


def score_interaction(
    model: GroupModel, user: int, item: int, alpha: Optional[np.ndarray] = None
) -> float:
    """Scorer output for one (user, item) pair, in (0, 1)."""
    model.layout.membership(item)
    structure = model.structure
    row = np.array([model.user_row(user)])
    if alpha is None:
        alpha = model.alpha
    score = score_rows(
        model.params, alpha, row, np.array([item]), structure, model.norm
    )
    return float(score[0])


def _train_loss(
    model: GroupModel,
    params: Parameters,
    alpha: np.ndarray,
    batch: BprBatch,
    structure: Structure,
) -> LossResult:
    return loss_and_grads(
        params,
        alpha,
        batch,
        structure,
        model.norm,
        reg=model.settings.reg,
        weight_decay=model.settings.weight_decay,
        mode=TRAIN,
    )


def _validation_loss(
    model: GroupModel,
    params: Parameters,
    alpha: np.ndarray,
    batch: BprBatch,
    structure: Structure,
    mode: str = TRAIN,
) -> LossResult:
    return loss_and_grads(params, alpha, batch, structure, model.norm, mode=mode)


def group_train_loss(model: GroupModel, batch: BprBatch, alpha: np.ndarray) -> float:
    """BPR of the scorer minus ``reg`` times block diversity, plus decay."""
    return _train_loss(model, model.params, alpha, batch, model.structure).loss


def first_order_gradient(
    model: GroupModel, val_batch: BprBatch, loss_value: float
) -> Parameters:
    """Gradient of the validation loss w.r.t. V at the current W."""
    structure = model.structure
    alpha, cache = _controller_pass(model.controller, model.popularity, loss_value)
    result = _validation_loss(model, model.params, alpha, val_batch, structure)
    return controller_backward(model.controller, cache, result.grad_alpha)


def hypergradient(
    model: GroupModel,
    train_batch: BprBatch,
    val_batch: BprBatch,
    xi: float,
    loss_value: float,
) -> Parameters:
    """One-step approximation of the validation gradient w.r.t. V.

    Computes ``grad_V L_val(W', V) - xi * H grad_W' L_val(W', V)`` with
    ``W' = W - xi * grad_W L_train(W, V)``, where the mixed second
    derivative ``H`` of the train loss is replaced by a central difference
    of ``grad_V L_train`` at ``W +- r * grad_W' L_val``.
    """
    structure = model.structure
    alpha, cache = _controller_pass(model.controller, model.popularity, loss_value)

    train = _train_loss(model, model.params, alpha, train_batch, structure)
    lookahead = {
        name: value - xi * train.grads[name] for name, value in model.params.items()
    }
    val = _validation_loss(model, lookahead, alpha, val_batch, structure)
    grads = controller_backward(model.controller, cache, val.grad_alpha)
    if xi == 0.0:
        return grads

    norm = global_norm(val.grads)
    if norm == 0.0:
        return grads
    r = HVP_SCALE / norm
    plus = {name: value + r * val.grads[name] for name, value in model.params.items()}
    minus = {name: value - r * val.grads[name] for name, value in model.params.items()}
    at_plus = _train_loss(model, plus, alpha, train_batch, structure)
    at_minus = _train_loss(model, minus, alpha, train_batch, structure)
    grad_alpha_plus, grad_alpha_minus = at_plus.grad_alpha, at_minus.grad_alpha
    # The controller backward pass is linear in the alpha gradient
    second = controller_backward(
        model.controller, cache, (grad_alpha_plus - grad_alpha_minus) / (2.0 * r)
    )
    return {name: grads[name] - xi * second[name] for name in grads}


def _check_finite(
    model: GroupModel, step: int, what: str, loss: float, grads: Parameters
) -> None:
    if np.isfinite(loss) and all_finite(grads.values()):
        return
    diagnostics = {"part": what, "loss": loss}
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            diagnostics["tensor"] = name
            break
    group_log.error(model.group, f"Non-finite {what} at step {step}: {diagnostics}.")
    raise TrainingDivergedError("finetune", step, diagnostics)


def validation_pass(
    model: GroupModel, sampler: BprSampler, seed: int, loss_value: float
) -> Tuple[float, np.ndarray]:
    """One pass over all validation triples of the group.

    Every batch is scored with the controller output for that batch, the
    controller input being the mean validation BPR of the previous batch
    (``loss_value`` for the first one). Normalization uses the running
    statistics. Returns the mean BPR per triple and the mean ``alpha``.
    """
    rng = utils.random.generator(seed, utils.random.STREAM_FINETUNE, model.group, 1)
    structure = model.structure
    total = 0.0
    count = 0
    alpha_sum = np.zeros(model.alpha.shape, dtype=np.float64)
    batches = 0
    for batch in sampler.epoch(model.settings.batch_size, rng):
        alpha = model.current_alpha(loss_value)
        alpha_sum += alpha
        batches += 1
        result = _validation_loss(
            model, model.params, alpha, batch, structure, INFERENCE
        )
        total += result.bpr
        count += len(batch)
        loss_value = result.bpr / len(batch)
    mean_alpha = (alpha_sum / max(batches, 1)).astype(model.alpha.dtype)
    return total / max(count, 1), mean_alpha


def validation_sampler(model: GroupModel, log: InteractionLog) -> BprSampler:
    """Validation positives of the group's users, known items never negatives."""
    return BprSampler(
        log,
        role=Role.VALIDATION,
        exclude=(Role.TRAIN, Role.VALIDATION),
        users=model.members,
    )


def optimize_group(
    model: GroupModel, log: InteractionLog, config: PipelineConfig
) -> GroupModel:
    """Run the bi-level loop on one group and freeze ``alpha``.

    Every iteration samples a training batch and a validation batch. V is
    descended on the validation batch (through the lookahead of W on the
    training batch); then W is descended on the training batch with alpha
    from the updated controller. Each epoch ends with a full validation
    pass. W, V and the running statistics of the epoch with the best
    validation loss are restored, and the frozen alpha is the mean
    controller output over one last full validation pass.
    """
    settings = model.settings
    train_sampler = BprSampler(
        log, role=Role.TRAIN, exclude=(Role.TRAIN,), users=model.members
    )
    val_sampler = validation_sampler(model, log)
    if not len(val_sampler):
        raise ConfigurationError(
            f"User group {model.group} has no validation interactions."
        )

    rng = utils.random.generator(
        config.seed, utils.random.STREAM_FINETUNE, model.group, 2
    )
    w_optimizer = Adam(settings.learning_rate)
    v_optimizer = Adam(settings.controller_learning_rate)
    use_controller = settings.controller and bool(model.controller)
    xi = settings.lookahead_rate
    structure = model.structure

    iterations = max(1, math.ceil(len(train_sampler) / settings.batch_size))
    loss_value = math.log(2.0)

    def snapshot(val_loss: float) -> dict:
        return {
            "loss": val_loss,
            "loss_value": loss_value,
            "params": {k: v.copy() for k, v in model.params.items()},
            "controller": {k: v.copy() for k, v in model.controller.items()},
            "norm": model.norm.copy(),
        }

    best = snapshot(math.inf)
    stale = 0
    step = 0

    for epoch in range(settings.epochs):
        for iteration in range(iterations):
            step += 1
            train_batch = train_sampler.sample(settings.batch_size, rng)
            val_batch = val_sampler.sample(settings.batch_size, rng)

            if use_controller:
                grads_v = hypergradient(model, train_batch, val_batch, xi, loss_value)
                _check_finite(model, step, "controller gradient", 0.0, grads_v)
                v_optimizer.step(model.controller, grads_v)

            alpha = model.current_alpha(loss_value)
            model.alpha = alpha

            result = _train_loss(model, model.params, alpha, train_batch, structure)
            _check_finite(model, step, "train loss", result.loss, result.grads)
            w_optimizer.step(model.params, result.grads)
            if result.batch_mean is not None:
                model.norm.update(result.batch_mean, result.batch_var)
            # Detached controller input for the next iteration
            loss_value = result.bpr / len(train_batch)

            model.history.append(
                {
                    "epoch": epoch + 1,
                    "iteration": iteration + 1,
                    "v_batch": val_batch.role if use_controller else None,
                    "w_batch": train_batch.role,
                    "loss": result.loss,
                }
            )

        val_loss, _ = validation_pass(model, val_sampler, config.seed, loss_value)
        model.history.append({"epoch": epoch + 1, "validation_loss": val_loss})
        group_log.debug(
            model.group, f"Epoch {epoch + 1}: validation loss {val_loss:.5f}."
        )
        if val_loss < best["loss"]:
            best = snapshot(val_loss)
            stale = 0
        else:
            stale += 1
            if stale >= settings.patience:
                group_log.info(model.group, f"Early stopping after epoch {epoch + 1}.")
                break

    model.params = best["params"]
    model.controller = best["controller"]
    model.norm = best["norm"]
    val_loss, alpha = validation_pass(
        model, val_sampler, config.seed, best["loss_value"]
    )
    model.alpha = alpha
    model.history.append(
        {
            "freeze": True,
            "loss_value": best["loss_value"],
            "validation_loss": val_loss,
        }
    )
    model.frozen = True
    group_log.info(
        model.group,
        f"Frozen after {step} steps, validation loss {val_loss:.5f}.",
    )
    return model


def optimize_groups(
    log: InteractionLog,
    grouping: GroupingPlan,
    grid: BlockGrid,
    users: UserEmbeddingTable,
    config: PipelineConfig,
    *,
    groups: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> Dict[int, GroupModel]:
    """Fine-tune the listed user groups, independently and in parallel."""
    if groups is None:
        groups = range(len(grouping.user_groups))
    groups = list(groups)
    for group in groups:
        if not 0 <= group < len(grouping.user_groups):
            raise ConfigurationError(f"User group {group} does not exist.")

    def job(group: int) -> GroupModel:
        model = init_group_model(group, grouping, grid, users, log, config)
        return optimize_group(model, log, config)

    pipeline_log.info(
        "finetune", f"Fine-tuning {len(groups)} user groups on {threads} threads."
    )
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(job, groups))
    else:
        models = [job(group) for group in groups]
    return dict(zip(groups, models))
