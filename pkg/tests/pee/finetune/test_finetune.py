import numpy as np
import pytest

from pee import finetune, utils
from pee.config import PipelineConfig
from pee.core import BlockGrid, BlockLayout, GroupingPlan, Role, UserEmbeddingTable
from pee.exceptions import ConfigurationError, FormatError, NotFoundError
from pee.finetune import network, storage
from pee.finetune.network import INFERENCE, TRAIN, NormStats

from tests.pee.helpers import batch_of, check_gradients, group_model, toy_log

ITEM_GROUPS = ((0, 1, 2), (3, 4, 5))


def _log():
    edges, roles = [], []
    for user in range(4):
        for offset, role in enumerate(
            [Role.TRAIN, Role.TRAIN, Role.TRAIN, Role.VALIDATION, Role.TEST]
        ):
            edges.append((user, (user + offset) % 6))
            roles.append(role)
    return toy_log(4, 6, edges, roles=roles)


def _config(**settings) -> PipelineConfig:
    config = PipelineConfig()
    config.model.blocks = 2
    config.model.block_dim = 2
    config.model.item_groups = 2
    config.finetune.scorer_width = 5
    config.finetune.controller_width = 4
    config.finetune.init_std = 0.5
    config.finetune.reg = 0.1
    config.finetune.weight_decay = 0.01
    config.finetune.batch_size = 4
    config.finetune.epochs = 3
    for key, value in settings.items():
        setattr(config.finetune, key, value)
    return config.validate()


def _setup(**settings):
    log = _log()
    grouping = GroupingPlan(item_groups=ITEM_GROUPS, popularity=log.popularity)
    grouping = grouping.with_user_groups([[0, 1], [2, 3]])
    rng = np.random.default_rng(0)
    table = rng.standard_normal((6, 4)).astype(np.float32)
    grid = BlockGrid(grouping.layout(2, 2), table)
    users = UserEmbeddingTable(rng.standard_normal((4, 4)).astype(np.float32))
    config = _config(**settings)
    return log, grouping, grid, users, config


def _model(**settings) -> finetune.GroupModel:
    log, grouping, grid, users, config = _setup(**settings)
    return finetune.init_group_model(0, grouping, grid, users, log, config)


TRAIN_BATCH = batch_of([(0, 0, 3), (1, 1, 4), (0, 2, 5), (1, 2, 0)])
VAL_BATCH = batch_of([(0, 3, 4), (1, 4, 0)], Role.VALIDATION)


def test_normalize_constant_batch_is_zero():
    stats = NormStats(np.zeros(3), np.ones(3))
    rows = np.tile(np.array([[2.0, -1.0, 5.0]]), (4, 1))
    assert np.allclose(0.0, network.normalize_blocks(rows, stats, TRAIN))


def test_normalize_two_rows():
    stats = NormStats(np.zeros(1), np.ones(1))
    normalized = network.normalize_blocks(np.array([[-1.0], [1.0]]), stats, TRAIN)
    assert np.allclose([[-0.76159], [0.76159]], normalized, atol=1e-5)
    # Batch statistics are folded into the running values
    assert np.allclose([0.0], stats.mean)
    assert np.allclose([1.0], stats.var)


def test_normalize_inference_uses_running_values():
    stats = NormStats(np.array([1.0]), np.array([4.0]), epsilon=0.0)
    normalized = network.normalize_blocks(np.array([[3.0]]), stats, INFERENCE)
    assert np.allclose(np.tanh(1.0), normalized)
    with pytest.raises(ValueError):
        network.normalize_blocks(np.array([[3.0]]), stats, "eval")


def test_popularity_vector():
    users = [u for u in range(6)] + [0, 1, 0, 1]
    items = [1] * 6 + [0, 0, 2, 2]
    log = toy_log(6, 3, list(zip(users, items)))
    grouping = GroupingPlan(
        item_groups=((0,), (1,), (2,)), popularity=log.popularity
    ).with_user_groups([range(6)])
    vector = finetune.group_popularity_vector(log, grouping, 0)
    assert np.allclose([0.2, 0.6, 0.2], vector)


def test_popularity_vector_without_interactions():
    log = toy_log(2, 2, [(0, 0)])
    grouping = GroupingPlan(item_groups=((0,), (1,)), popularity=log.popularity)
    grouping = grouping.with_user_groups([[0], [1]])
    with pytest.raises(ConfigurationError):
        finetune.group_popularity_vector(log, grouping, 1)


def test_controller_zero_weights_give_uniform_alpha():
    model = _model()
    zero = {name: np.zeros_like(value) for name, value in model.controller.items()}
    alpha = finetune.controller_forward(zero, model.popularity, 0.3)
    assert (2, 2) == alpha.shape
    assert np.allclose(0.25, alpha)


def test_controller_output_is_distribution():
    model = _model()
    alpha = finetune.controller_forward(model.controller, model.popularity, 0.3)
    assert np.isclose(1.0, alpha.sum())
    assert np.all(alpha > 0)


def test_scorer_zero_weights_score_half():
    model = _model()
    for name in model.params:
        if name.startswith("scorer."):
            model.params[name] = np.zeros_like(model.params[name])
    assert np.isclose(0.5, finetune.score_interaction(model, 0, 4))
    assert 0.0 < finetune.score_interaction(_model(), 1, 2) < 1.0


def test_score_interaction_unknown_user():
    with pytest.raises(NotFoundError):
        finetune.score_interaction(_model(), 3, 0)


def test_controller_one_hidden_layer_by_hand():
    params = {
        "controller.0.weight": np.array(
            [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        ),
        "controller.0.bias": np.zeros(3),
        "controller.out.weight": np.array(
            [
                [0.0, 2.0 * np.log(2.0), 2.0 * np.log(3.0), 2.0 * np.log(4.0)],
                [5.0, -5.0, 5.0, -5.0],
                [-5.0, 5.0, -5.0, 5.0],
            ]
        ),
        "controller.out.bias": np.zeros(4),
    }
    # Hidden layer is (0.5, 0, 0), logits are log(1), log(2), log(3), log(4)
    alpha = finetune.controller_forward(
        params, np.array([0.4, 0.6]), float(np.arctanh(0.5))
    )
    assert np.allclose([[0.1, 0.2], [0.3, 0.4]], alpha)


def test_score_interaction_layer_by_layer():
    model = _model().astype(np.float64)
    user, item = 1, 4
    alpha = np.array([[0.1, 0.2], [0.3, 0.4]])
    group, _ = model.layout.membership(item)

    norm = model.norm
    e = model.params["items"][item]
    normalized = np.tanh((e - norm.mean) / np.sqrt(norm.var + norm.epsilon))
    scale = np.repeat(alpha[:, group], model.layout.block_dim)
    u = model.params["users"][list(model.members).index(user)]
    h = np.concatenate([u, normalized * scale])
    for index in range(model.settings.scorer_layers):
        weight = model.params[f"scorer.{index}.weight"]
        h = np.tanh(h @ weight + model.params[f"scorer.{index}.bias"])
    logit = h @ model.params["scorer.out.weight"] + model.params["scorer.out.bias"]
    expected = 1.0 / (1.0 + np.exp(-logit[0]))

    score = finetune.score_interaction(model, user, item, alpha)
    assert abs(expected - score) < 1e-6


def test_alpha_of_zero_block_does_not_change_score():
    model = _model().astype(np.float64)
    user, item = 0, 2
    group, _ = model.layout.membership(item)
    d = model.layout.block_dim
    # Block 1 of the item sits at the running mean and normalizes to zero
    model.params["items"][item, d : 2 * d] = model.norm.mean[d : 2 * d]
    alpha = np.array([[0.1, 0.2], [0.3, 0.4]])

    doubled = alpha.copy()
    doubled[1, group] *= 2.0
    score = finetune.score_interaction(model, user, item, alpha)
    assert score == finetune.score_interaction(model, user, item, doubled)

    doubled = alpha.copy()
    doubled[0, group] *= 2.0
    assert score != finetune.score_interaction(model, user, item, doubled)


def test_model_gradients():
    model = _model().astype(np.float64)
    structure = model.structure
    alpha = model.alpha

    def evaluate():
        return network.loss_and_grads(
            model.params,
            alpha,
            TRAIN_BATCH,
            structure,
            model.norm,
            reg=0.1,
            weight_decay=0.01,
        )

    def loss() -> float:
        return evaluate().loss

    result = evaluate()
    check_gradients(loss, model.params, result.grads)
    check_gradients(loss, {"alpha": alpha}, {"alpha": result.grad_alpha})


def test_model_gradients_inference_mode():
    model = _model().astype(np.float64)
    structure = model.structure

    def loss() -> float:
        return network.loss_and_grads(
            model.params, model.alpha, VAL_BATCH, structure, model.norm, mode=INFERENCE
        ).loss

    result = network.loss_and_grads(
        model.params, model.alpha, VAL_BATCH, structure, model.norm, mode=INFERENCE
    )
    check_gradients(loss, model.params, result.grads)


def test_controller_gradients():
    model = _model().astype(np.float64)
    structure = model.structure

    def loss() -> float:
        alpha = finetune.controller_forward(model.controller, model.popularity, 0.4)
        return network.loss_and_grads(
            model.params, alpha, VAL_BATCH, structure, model.norm
        ).loss

    grads = finetune.first_order_gradient(model, VAL_BATCH, 0.4)
    check_gradients(loss, model.controller, grads)


def test_hypergradient_matches_lookahead_derivative():
    model = _model().astype(np.float64)
    structure = model.structure
    xi = 0.1

    def loss() -> float:
        alpha = finetune.controller_forward(model.controller, model.popularity, 0.4)
        train = network.loss_and_grads(
            model.params,
            alpha,
            TRAIN_BATCH,
            structure,
            model.norm,
            reg=model.settings.reg,
            weight_decay=model.settings.weight_decay,
        )
        lookahead = {k: v - xi * train.grads[k] for k, v in model.params.items()}
        return network.loss_and_grads(
            lookahead, alpha, VAL_BATCH, structure, model.norm
        ).loss

    grads = finetune.hypergradient(model, TRAIN_BATCH, VAL_BATCH, xi, 0.4)
    check_gradients(loss, model.controller, grads, tolerance=1e-3)


def test_hypergradient_without_lookahead_is_first_order():
    model = _model().astype(np.float64)
    second = finetune.hypergradient(model, TRAIN_BATCH, VAL_BATCH, 0.0, 0.4)
    first = finetune.first_order_gradient(model, VAL_BATCH, 0.4)
    for name in first:
        assert np.allclose(first[name], second[name])


def test_group_train_loss_with_uniform_alpha():
    model = _model(reg=0.0, weight_decay=0.0)
    loss = finetune.group_train_loss(model, TRAIN_BATCH, network.uniform_alpha(2, 2))
    assert np.isfinite(loss)
    assert loss > 0.0


def test_optimize_group_freezes_alpha():
    log, grouping, grid, users, config = _setup()
    model = finetune.init_group_model(0, grouping, grid, users, log, config)
    before = model.params["items"].copy()
    model = finetune.optimize_group(model, log, config)
    assert model.frozen
    assert (2, 2) == model.alpha.shape
    assert np.isclose(1.0, model.alpha.sum(), atol=1e-5)
    assert not np.array_equal(before, model.params["items"])
    # Pretrained tables are copied, not shared
    assert np.array_equal(before, grid.table)
    steps = [record for record in model.history if "iteration" in record]
    assert all(Role.VALIDATION == record["v_batch"] for record in steps)
    assert all(Role.TRAIN == record["w_batch"] for record in steps)


def test_optimize_group_freezes_last_validation_pass():
    log, grouping, grid, users, config = _setup()
    model = finetune.init_group_model(0, grouping, grid, users, log, config)
    model = finetune.optimize_group(model, log, config)
    freeze = model.history[-1]
    assert freeze["freeze"]
    # W and V of the best epoch are restored before the last pass
    epochs = [
        r["validation_loss"]
        for r in model.history
        if "validation_loss" in r and "freeze" not in r
    ]
    assert min(epochs) == freeze["validation_loss"]

    sampler = finetune.validation_sampler(model, log)
    rng = utils.random.generator(config.seed, utils.random.STREAM_FINETUNE, 0, 1)
    batches = sampler.epoch(config.finetune.batch_size, rng)
    loss_value = freeze["loss_value"]
    total = np.zeros((2, 2))
    for batch in batches:
        alpha = finetune.controller_forward(
            model.controller, model.popularity, loss_value
        )
        total += alpha
        result = network.loss_and_grads(
            model.params, alpha, batch, model.structure, model.norm, mode=INFERENCE
        )
        loss_value = result.bpr / len(batch)
    assert np.allclose(total / len(batches), model.alpha, atol=1e-6)


def test_optimize_group_without_controller_keeps_uniform_alpha():
    log, grouping, grid, users, config = _setup(controller=False)
    model = finetune.init_group_model(0, grouping, grid, users, log, config)
    assert {} == model.controller
    model = finetune.optimize_group(model, log, config)
    assert np.allclose(0.25, model.alpha)


def test_optimize_groups_is_deterministic_across_threads():
    log, grouping, grid, users, config = _setup()
    serial = finetune.optimize_groups(log, grouping, grid, users, config)
    parallel = finetune.optimize_groups(log, grouping, grid, users, config, threads=2)
    assert [0, 1] == sorted(serial)
    for group in serial:
        assert np.array_equal(serial[group].alpha, parallel[group].alpha)
        assert np.array_equal(
            serial[group].params["items"], parallel[group].params["items"]
        )


def test_optimize_groups_unknown_group():
    log, grouping, grid, users, config = _setup()
    with pytest.raises(ConfigurationError):
        finetune.optimize_groups(log, grouping, grid, users, config, groups=[2])


def test_storage_roundtrip(tmp_path):
    log, grouping, grid, users, config = _setup(epochs=1)
    model = finetune.optimize_groups(log, grouping, grid, users, config, groups=[1])[1]
    path = storage.save(tmp_path, model)
    assert "group_001.bin" == path.name
    loaded = storage.load(path)
    assert 1 == loaded.group
    assert loaded.frozen
    assert model.layout.group_items == loaded.layout.group_items
    assert np.array_equal(model.members, loaded.members)
    assert np.array_equal(model.alpha, loaded.alpha)
    assert np.array_equal(model.params["items"], loaded.params["items"])
    assert np.array_equal(model.params["users"], loaded.params["users"])
    assert np.allclose(model.norm.mean, loaded.norm.mean)
    assert [1] == list(storage.load_all(tmp_path))


def test_storage_rejects_damaged_files(tmp_path):
    model = _model()
    data = storage.encode(model)
    with pytest.raises(FormatError):
        storage.decode(data[:-3])
    with pytest.raises(FormatError):
        storage.decode(data + b"\x00")
    with pytest.raises(FormatError):
        storage.decode(b"PEEX" + data[4:])
    with pytest.raises(FormatError):
        storage.load(tmp_path)


def test_storage_keeps_bytes_per_parameter():
    layout = BlockLayout(
        blocks=2, block_dim=2, group_items=ITEM_GROUPS, bytes_per_parameter=2
    )
    model = group_model(layout, np.full((2, 2), 0.25))
    loaded = storage.decode(storage.encode(model))
    assert 2 == loaded.layout.bytes_per_parameter
    assert layout == loaded.layout
