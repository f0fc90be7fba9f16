import numpy as np

from pee import optim, utils


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.0])}
    grads = {"w": np.array([0.5, -3.0, 0.0])}
    adam = optim.Adam(0.1)
    adam.step(params, grads)
    # Bias corrected first step is lr * sign(grad)
    assert np.allclose([0.9, -1.9, 0.0], params["w"], atol=1e-6)
    assert 1 == adam.steps


def test_adam_keeps_dtype_and_counts_steps():
    params = {"w": np.ones(3, dtype=np.float32)}
    before = utils.instrumentation.get(utils.instrumentation.OPTIMIZER_STEP)
    adam = optim.Adam(1e-3)
    for _ in range(3):
        adam.step(params, {"w": np.ones(3, dtype=np.float32)})
    assert params["w"].dtype == np.float32
    assert 3 == utils.instrumentation.get(utils.instrumentation.OPTIMIZER_STEP) - before


def test_adam_minimizes_quadratic():
    params = {"w": np.array([3.0, -4.0])}
    adam = optim.Adam(0.1)
    for _ in range(500):
        adam.step(params, {"w": 2.0 * params["w"]})
    assert np.all(np.abs(params["w"]) < 0.1)


def test_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    assert 5.0 == optim.global_norm(grads)


def test_all_finite():
    assert optim.all_finite([np.zeros(2), np.ones((2, 2))])
    assert not optim.all_finite([np.zeros(2), np.array([np.nan])])
    assert not optim.all_finite([np.array([np.inf])])
