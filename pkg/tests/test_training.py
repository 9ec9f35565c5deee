import numpy as np
import pytest

from hdlc.errors import ContractError, InputError, NonFiniteError, ShapeError
from hdlc.tensor_core import layers as L
from hdlc.tensor_core.network import (Conv, Dropout, FullConnect, MaxPool, NetworkSpec, ReLU, Softmax, init_model,
                                      network_forward)
from hdlc.training import (LEAF_SCRATCH, LEAF_WARM, ROOT_WARM, OptimState, TrainRecipe, accuracy, load_recipe,
                           save_recipe, sgd_step, train_model, warm_start)


def scalar_model():
    spec = NetworkSpec((1, 1, 1), (FullConnect(1, 2), Softmax(2)), 2)
    return init_model(spec, np.random.default_rng(0))


def test_sgd_zero_grad_zero_velocity_is_fixed_point():
    m = scalar_model()
    before = [p.copy() for p in m.flat_params()]
    optim = OptimState.zeros_like(m, 0.1, 0.9)
    sgd_step(m, {0: [np.zeros_like(p) for p in m.params[0]]}, optim)
    for a, b in zip(before, m.flat_params()):
        np.testing.assert_array_equal(a, b)


def test_sgd_single_step_arithmetic():
    m = scalar_model()
    w0 = m.params[0][0].copy()
    optim = OptimState.zeros_like(m, 0.01, 0.9)
    sgd_step(m, {0: [np.ones_like(p) for p in m.params[0]]}, optim)
    np.testing.assert_allclose(optim.velocity[0][0], -0.01, rtol=1e-6)
    np.testing.assert_allclose(m.params[0][0], w0 - 0.01, rtol=1e-6)


def test_sgd_recurrence_matches_direct_evaluation():
    lr, mu, g = 0.05, 0.8, 1.5
    m = scalar_model()
    w0 = m.params[0][0].astype(np.float64)
    optim = OptimState.zeros_like(m, lr, mu)
    v, total = 0.0, 0.0
    for _ in range(6):
        sgd_step(m, {0: [np.full_like(p, g) for p in m.params[0]]}, optim)
        v = mu * v - lr * g
        total += v
    np.testing.assert_allclose(m.params[0][0], w0 + total, rtol=1e-5)
    # the first two steps alone move by -lr*g*(2 + mu)
    assert np.isclose(-lr * g - (mu * lr * g + lr * g), -lr * g * (2 + mu))


def test_sgd_rejects_bad_gradients():
    m = scalar_model()
    optim = OptimState.zeros_like(m, 0.1, 0.9)
    with pytest.raises(ShapeError):
        sgd_step(m, {0: [np.zeros((3, 3)), np.zeros(2)]}, optim)
    bad = [np.full_like(p, np.nan) for p in m.params[0]]
    with pytest.raises(NonFiniteError, match="layer 0"):
        sgd_step(m, {0: bad}, optim)


# -- synthetic separable data ---------------------------------------------------


def separable(n=200, seed=0):
    """Bright left half vs bright right half on 8x8, with noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    x = rng.normal(0.2, 0.1, (n, 1, 8, 8))
    for i, y in enumerate(labels):
        x[i, 0, :, 4 * y:4 * y + 4] += 0.6
    return x.astype(np.float32), labels


def small_spec(classes=2):
    return NetworkSpec((1, 8, 8), (Conv(1, 4, 3, 3), ReLU(), MaxPool(2, 2), FullConnect(36, 16), ReLU(),
                                   Dropout(0.5), FullConnect(16, classes), Softmax(classes)), classes, "small")


def test_lr_zero_leaves_parameters_unchanged():
    data = separable(40)
    start = init_model(small_spec(), np.random.default_rng(3))
    model, history = train_model(small_spec(), data, TrainRecipe(epochs=1, lr=0.0), init_model_state=start)
    assert len(history) == 1
    for a, b in zip(start.flat_params(), model.flat_params()):
        np.testing.assert_array_equal(a, b)


def test_separable_data_is_learned():
    data = separable(200)
    model, history = train_model(small_spec(), data, TrainRecipe(epochs=20, lr=0.05, momentum=0.9, batch_size=16))
    assert history[-1].top1 >= 0.95
    top1, _ = accuracy(model, *separable(200, seed=9))
    assert top1 >= 0.95


def test_loss_mostly_decreases():
    for seed in range(5):
        data = separable(200, seed)
        _, history = train_model(small_spec(), data, TrainRecipe(epochs=10, lr=0.02, momentum=0.9, seed=seed))
        losses = [h.mean_loss for h in history]
        down = sum(b <= a for a, b in zip(losses, losses[1:]))
        assert down >= 0.8 * (len(losses) - 1), losses


def test_training_is_reproducible(tmp_path):
    data = separable(60)
    recipe = TrainRecipe(epochs=2, lr=0.05, seed=4)
    a, ha = train_model(small_spec(), data, recipe, log_path=tmp_path / "a.log")
    b, hb = train_model(small_spec(), data, recipe)
    for x, y in zip(a.flat_params(), b.flat_params()):
        np.testing.assert_array_equal(x, y)
    assert [h.line() for h in ha] == [h.line() for h in hb]
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("1, ")


def test_train_rejects_bad_labels():
    x, _ = separable(10)
    with pytest.raises(ContractError):
        train_model(small_spec(), (x, np.full(10, 5)), TrainRecipe(epochs=1))


# -- warm starts ----------------------------------------------------------------


def test_warm_start_identical_specs_copies_everything():
    src = init_model(small_spec(), np.random.default_rng(1))
    dst = warm_start(small_spec(), src)
    for a, b in zip(src.flat_params(), dst.flat_params()):
        np.testing.assert_array_equal(a, b)
    assert dst.meta["transferred"] == small_spec().param_layers()


def test_warm_start_first_layer_only_and_activation_probe():
    src = init_model(small_spec(2), np.random.default_rng(1))
    dst = warm_start(small_spec(5), src, layer_count=1, seed=7)
    np.testing.assert_array_equal(dst.params[0][0], src.params[0][0])
    assert not np.array_equal(dst.params[6][0][:2], src.params[6][0])
    assert dst.params[6][0].shape == (5, 16)
    x, _ = separable(8)
    a = network_forward(src, x).activations[1]
    b = network_forward(dst, x).activations[1]
    np.testing.assert_array_equal(a, b)


def test_warm_start_shape_mismatch():
    src = init_model(small_spec(2), np.random.default_rng(1))
    with pytest.raises(ShapeError):
        warm_start(small_spec(5), src)


def test_warm_start_from_recipe_path(tmp_path):
    from hdlc.dataio import save_model

    src = init_model(small_spec(), np.random.default_rng(1))
    save_model(src, tmp_path / "src.hdlc")
    recipe = TrainRecipe(epochs=1, lr=0.0, init={"path": str(tmp_path / "src.hdlc")})
    model, _ = train_model(small_spec(), separable(20), recipe)
    np.testing.assert_array_equal(model.params[0][0], src.params[0][0])


# -- recipes ------------------------------------------------------------------------


def test_preset_recipes():
    assert (LEAF_SCRATCH.epochs, LEAF_SCRATCH.lr, LEAF_SCRATCH.momentum) == (15, 0.01, 0.9)
    assert (LEAF_WARM.epochs, LEAF_WARM.lr) == (15, 0.001)
    assert (ROOT_WARM.epochs, ROOT_WARM.lr) == (32, 0.001)


def test_recipe_file_round_trip(tmp_path):
    save_recipe(LEAF_WARM, tmp_path / "r.json")
    assert load_recipe(tmp_path / "r.json") == LEAF_WARM
    assert load_recipe(tmp_path / "r.json", lr=0.5).lr == 0.5
    with pytest.raises(InputError):
        load_recipe(None, bogus=1)
    with pytest.raises(InputError):
        TrainRecipe(momentum=1.0)


def test_infer_mode_needs_no_rng():
    model = init_model(small_spec(), np.random.default_rng(0))
    x, _ = separable(4)
    assert network_forward(model, x, L.INFER).probs.shape == (4, 2)
