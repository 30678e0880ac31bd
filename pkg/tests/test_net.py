import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kylelab import net
from kylelab.net import AdamState, Mlp


def linear(w, b):
    """Single affine layer, no hidden units."""
    return Mlp((1, 1), np.array([w, b], dtype=float), "relu")


def perturbed(sizes, activation, seed):
    rng = np.random.default_rng(seed)
    m = net.init_mlp(sizes, activation, rng)
    m.params += rng.normal(0, 0.1, m.params.shape)
    return m


def test_parameter_count_and_shapes(rng):
    ins = net.init_mlp((1, 10, 1), "relu", rng)
    mm = net.init_mlp((1, 10, 10, 1), "relu", rng)
    assert ins.params.size == net.n_params((1, 10, 1)) == 31
    assert mm.params.size == 141
    assert [w.shape for w in mm.weights] == [(10, 1), (10, 10), (1, 10)]
    assert all(np.all(b == 0) for b in mm.biases)
    bound = np.sqrt(6 / 11)
    assert np.all(np.abs(mm.weights[0]) <= bound)


def test_init_is_deterministic():
    a = net.init_mlp((1, 10, 1), "tanh", np.random.default_rng(3))
    b = net.init_mlp((1, 10, 1), "tanh", np.random.default_rng(3))
    assert a == b


@pytest.mark.parametrize("sizes", [(2, 1), (1, 3), (1, 0, 1), (1,)])
def test_bad_layer_sizes(sizes):
    with pytest.raises(ValueError):
        net.init_mlp(sizes)


def test_zero_network_outputs_zero():
    m = Mlp((1, 10, 10, 1), np.zeros(141))
    assert np.all(m(np.linspace(-5, 5, 11)) == 0.0)


def test_relu_kills_negative_preactivations():
    m = Mlp((1, 1, 1), np.array([1.0, 0.0, 2.0, 0.5]))
    assert net.forward(m, -3.0) == 0.5
    assert net.forward(m, 3.0) == 6.5


def test_forward_matches_hand_tanh():
    w1, b1, w2, b2 = 0.7, -0.2, 1.5, 0.1
    m = Mlp((1, 1, 1), np.array([w1, b1, w2, b2]), "tanh")
    assert net.forward(m, 0.4) == pytest.approx(w2 * np.tanh(w1 * 0.4 + b1) + b2, rel=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_numpy_reference(activation):
    m = perturbed((1, 10, 10, 1), activation, 1)
    for x in np.linspace(-3, 3, 13):
        h = net.preactivations(m, x)[-1]
        h = np.maximum(h, 0) if activation == "relu" else np.tanh(h)
        ref = float((m.weights[-1] @ h + m.biases[-1])[0])
        assert net.forward(m, x) == pytest.approx(ref, rel=1e-13, abs=1e-14)


def test_predict_equals_forward():
    m = perturbed((1, 10, 10, 1), "relu", 2)
    xs = np.linspace(-4, 4, 9)
    assert np.array_equal(m(xs), np.array([net.forward(m, x) for x in xs]))
    assert isinstance(m(0.3), float)
    assert m(xs.reshape(3, 3)).shape == (3, 3)


def test_loss_examples():
    zero_mm = Mlp((1, 10, 10, 1), np.zeros(141))
    assert net.mm_loss_grad(zero_mm, 2.0, 0.7)[0] == 4.0
    zero_ins = Mlp((1, 10, 1), np.zeros(31))
    loss, grad = net.insider_loss_grad(zero_ins, linear(1.0, 0.0), 2.0, 0.3, epsilon=0.5)
    assert loss == 0.0
    # I = 1, M(v) = v, z = 2, y = 0: profit (2 - 1) * 1
    assert net.insider_loss_grad(linear(0.0, 1.0), linear(1.0, 0.0), 2.0, 0.0)[0] == -1.0
    assert net.insider_loss_grad(linear(0.0, 1.0), linear(1.0, 0.0), 2.0, 0.0, 0.25)[0] == -0.75


def test_insider_gradient_closed_form():
    # I(z) = a z + b against M(v) = v: loss = -(z - (I + y)) I + eps |I|
    a, b, z, y, eps = 0.3, 0.2, 1.5, -0.4, 0.1
    x = a * z + b
    dldx = x - (z - x - y) + eps * np.sign(x)
    _, g = net.insider_loss_grad(linear(a, b), linear(1.0, 0.0), z, y, eps)
    np.testing.assert_allclose(g, [dldx * z, dldx], rtol=1e-14)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(activation, seed):
    ins = perturbed((1, 10, 1), activation, seed)
    mm = perturbed((1, 10, 10, 1), activation, 100 + seed)
    y = 0.3
    # first input whose forward pass stays clear of ReLU kinks
    z = next(z for z in np.linspace(-3, 3, 61) + 0.1 * seed
             if not (net._near_kink(ins, z, 1e-3)
                     or net._near_kink(mm, net.forward(ins, z) + y, 1e-3)
                     or abs(net.forward(ins, z)) < 1e-3))
    _, g = net.mm_loss_grad(mm, z, 1.1)
    fd = net.finite_diff_grad(lambda m: net.mm_loss_grad(m, z, 1.1)[0], mm)
    assert net.relative_error(g, fd).max() < 1e-5
    _, g = net.insider_loss_grad(ins, mm, z, y, 0.5)
    fd = net.finite_diff_grad(lambda m: net.insider_loss_grad(m, mm, z, y, 0.5)[0], ins)
    assert net.relative_error(g, fd).max() < 1e-5


def test_finite_difference_error_is_second_order():
    mm = perturbed((1, 10, 10, 1), "tanh", 4)
    _, g = net.mm_loss_grad(mm, 0.7, 1.3)

    def err(h):
        fd = net.finite_diff_grad(lambda m: net.mm_loss_grad(m, 0.7, 1.3)[0], mm, h)
        return np.max(np.abs(fd - g))

    ratio = err(1e-2) / err(5e-3)
    assert 3.0 < ratio < 5.0


def test_gradient_check_passes():
    for act, tol in (("tanh", 1e-5), ("relu", 1e-4)):
        res = net.gradient_check(n_draws=10, seed=1, activation=act)
        assert res["max_rel_error_mm"] < tol
        assert res["max_rel_error_insider"] < tol


def test_insider_gradient_leaves_market_maker_untouched():
    ins = perturbed((1, 10, 1), "relu", 5)
    mm = perturbed((1, 10, 10, 1), "relu", 6)
    before = mm.params.copy()
    net.insider_loss_grad(ins, mm, 1.0, 0.2, 0.3)
    state = AdamState.fresh(ins, learning_rate=1e-3)
    net.train_insider_epochs(ins, mm, state, np.linspace(-2, 2, 50), np.zeros(50), 0.3, 2)
    assert np.array_equal(mm.params, before)


def test_adam_zero_gradient_is_noop():
    m = perturbed((1, 10, 1), "relu", 0)
    new, st_ = net.adam_step(m, np.zeros_like(m.params), AdamState.fresh(m))
    assert new == m
    assert st_.step_count == 1


def test_adam_first_step_closed_form():
    m = perturbed((1, 10, 1), "relu", 0)
    g = np.random.default_rng(1).normal(size=m.params.shape)
    state = AdamState.fresh(m, learning_rate=1e-3)
    new, _ = net.adam_step(m, g, state)
    # bias-corrected moments equal g and g^2 after one step
    np.testing.assert_allclose(m.params - new.params, 1e-3 * g / (np.abs(g) + 1e-7), rtol=1e-12)
    assert np.all(state.first_moment == 0) and state.step_count == 0


def test_adam_rejects_shape_mismatch():
    m = perturbed((1, 10, 1), "relu", 0)
    with pytest.raises(ValueError):
        net.adam_step(m, np.zeros(3), AdamState.fresh(m))


def test_training_kernel_matches_stepwise_adam():
    mm = perturbed((1, 4, 1), "tanh", 8)
    zs, vs = np.array([0.5, -1.0, 2.0]), np.array([0.1, -0.7, 1.4])
    ref, st_ = mm.copy(), AdamState.fresh(mm, learning_rate=1e-2)
    for _ in range(2):
        for z, v in zip(zs, vs):
            ref, st_ = net.adam_step(ref, net.mm_loss_grad(ref, z, v)[1], st_)
    fast, st2 = mm.copy(), AdamState.fresh(mm, learning_rate=1e-2)
    net.train_mm_epochs(fast, st2, zs, vs, 2)
    np.testing.assert_allclose(fast.params, ref.params, rtol=1e-12, atol=1e-15)
    assert st2.step_count == 6


def test_divergence_raises():
    mm = perturbed((1, 10, 10, 1), "relu", 0)
    with pytest.raises(net.TrainingDiverged):
        net.train_mm_epochs(mm, AdamState.fresh(mm), np.array([np.inf]), np.array([1.0]), 1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), act=st.sampled_from(["relu", "tanh"]))
def test_checkpoint_round_trip_bit_exact(tmp_path_factory, seed, act):
    m = perturbed((1, 10, 10, 1), act, seed)
    path = tmp_path_factory.mktemp("ckpt") / "m.json"
    net.save(m, path, {"seed": seed})
    back, meta = net.load(path)
    assert back == m and meta == {"seed": seed}


def test_checkpoint_rejects_other_versions():
    data = net.to_checkpoint(linear(1.0, 0.0))
    data["version"] = 99
    with pytest.raises(ValueError):
        net.from_checkpoint(json.loads(json.dumps(data)))
