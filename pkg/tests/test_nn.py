import math

import numpy as np
import pytest

from cvflow import nn
from conftest import central_diff, rel_err


def test_zero_network_outputs_zero(rng):
    net = nn.zero_mlp([3, 8, 8, 2])
    for _ in range(5):
        assert np.array_equal(nn.mlp_forward(net, rng.normal(size=3)), np.zeros(2))


def test_identity_single_layer():
    net = nn.Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -1.2, 5.0])
    assert np.array_equal(nn.mlp_forward(net, x), x)


def test_tanh_composition():
    net = nn.Mlp([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    assert nn.mlp_forward(net, np.array([0.0]))[0] == 0.0
    assert nn.mlp_forward(net, np.array([0.7]))[0] == pytest.approx(math.tanh(0.7), abs=1e-15)
    assert nn.mlp_forward(net, np.array([40.0]))[0] == pytest.approx(1.0, abs=1e-12)


def test_batch_matches_single_rows(rng):
    net = nn.init_mlp([4, 16, 3], seed=2)
    x = rng.normal(size=(7, 4))
    batch = nn.mlp_forward(net, x)
    for i in range(7):
        assert np.allclose(batch[i], nn.mlp_forward(net, x[i]), rtol=0, atol=1e-14)


def test_forward_is_deterministic(rng):
    net = nn.init_mlp([2, 32, 32, 2], seed=5)
    x = rng.normal(size=(10, 2))
    assert nn.mlp_forward(net, x).tobytes() == nn.mlp_forward(net, x).tobytes()


def test_shape_errors():
    net = nn.init_mlp([2, 4, 1])
    with pytest.raises(nn.ShapeError):
        nn.mlp_forward(net, np.zeros(3))
    with pytest.raises(nn.ShapeError):
        nn.mlp_backward(net, np.zeros(2), np.zeros(2))
    with pytest.raises(nn.ShapeError):
        nn.Mlp([2, 3], [np.zeros((2, 3))], [np.zeros(3)])


def test_backward_zero_network_input_gradient(rng):
    net = nn.zero_mlp([3, 5, 2])
    _, g_in = nn.mlp_backward(net, rng.normal(size=3), rng.normal(size=2))
    assert np.array_equal(g_in, np.zeros(3))


def test_backward_linear_layer(rng):
    w = rng.normal(size=(2, 3))
    net = nn.Mlp([3, 2], [w], [np.zeros(2)])
    x, go = rng.normal(size=3), rng.normal(size=2)
    grads, g_in = nn.mlp_backward(net, x, go)
    assert np.allclose(g_in, w.T @ go, atol=1e-15)
    assert np.allclose(grads.weights[0], np.outer(go, x), atol=1e-15)
    assert np.allclose(grads.biases[0], go, atol=1e-15)


def _check_fd(net, x, go, step=1e-5):
    grads, g_in = nn.mlp_backward(net, x, go)

    def loss_in(xx):
        return float(nn.mlp_forward(net, xx) @ go)

    worst = rel_err(g_in, central_diff(loss_in, x, step))
    arrays = net.arrays()
    for a_idx, (a, ga) in enumerate(zip(arrays, grads.arrays())):
        def loss_p(val, a_idx=a_idx):
            trial = [b.copy() for b in arrays]
            trial[a_idx] = val
            return float(nn.mlp_forward(nn.Mlp.from_arrays(net.layer_dims, trial), x) @ go)

        worst = max(worst, rel_err(ga, central_diff(loss_p, a, step)))
    return worst


def test_backward_matches_finite_differences_2_16_2():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([2, 16, 2], seed=0)
    assert _check_fd(net, rng.normal(size=2), rng.normal(size=2)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_backward_random_architectures(seed):
    rng = np.random.default_rng(seed)
    n_hidden = rng.integers(0, 4)
    dims = [int(rng.integers(1, 33)) for _ in range(n_hidden + 2)]
    net = nn.init_mlp(dims, seed=seed)
    assert _check_fd(net, rng.normal(size=dims[0]), rng.normal(size=dims[-1])) < 1e-5


def test_batched_backward_sums_over_rows(rng):
    net = nn.init_mlp([3, 8, 2], seed=1)
    x, go = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    grads, g_in = nn.mlp_backward(net, x, go)
    acc = [np.zeros_like(a) for a in net.arrays()]
    for i in range(5):
        gi, g_row = nn.mlp_backward(net, x[i], go[i])
        acc = [s + a for s, a in zip(acc, gi.arrays())]
        assert np.allclose(g_in[i], g_row, atol=1e-14)
    for s, a in zip(acc, grads.arrays()):
        assert np.allclose(s, a, atol=1e-12)


def test_input_jacobian_matches_backward(rng):
    net = nn.init_mlp([3, 10, 2], seed=3)
    x = rng.normal(size=3)
    jac = nn.input_jacobian(net, x)
    for j in range(2):
        _, g = nn.mlp_backward(net, x, np.eye(2)[j])
        assert np.allclose(jac[:, j], g)


def _scalar_net(value):
    return nn.Mlp([1, 1], [np.array([[value]])], [np.zeros(1)])


def test_adam_first_step_magnitude():
    params = _scalar_net(0.0)
    grads = _scalar_net(2.0)
    state = nn.adam_init(params, lr=1e-3)
    new, state = nn.adam_step(params, grads, state)
    # first bias-corrected step is lr * g / (|g| + eps)
    assert new.weights[0][0, 0] == pytest.approx(-1e-3 * 2.0 / (2.0 + 1e-8), rel=1e-12)
    assert state.step_count == 1


def test_adam_zero_gradient_is_identity():
    params = nn.init_mlp([2, 4, 1], seed=0)
    state = nn.adam_init(params)
    new, state = nn.adam_step(params, params.zeros_like(), state)
    assert state.step_count == 1
    for a, b in zip(new.arrays(), params.arrays()):
        assert np.array_equal(a, b)


def test_adam_does_not_mutate_inputs():
    params = nn.init_mlp([2, 3, 1], seed=0)
    before = [a.copy() for a in params.arrays()]
    state = nn.adam_init(params, weight_decay=1e-2)
    nn.adam_step(params, params, state)
    assert state.step_count == 0 and all(np.array_equal(a, b) for a, b in zip(before, params.arrays()))


def test_adam_minimizes_quadratic():
    p = _scalar_net(1.0)
    state = nn.adam_init(p, lr=1e-3)
    trace = [abs(p.weights[0][0, 0])]
    for _ in range(5000):
        w = p.weights[0][0, 0]
        p, state = nn.adam_step(p, _scalar_net(2 * w), state)
        trace.append(abs(p.weights[0][0, 0]))
        if trace[-1] < 1e-2:
            break
    assert trace[-1] < 1e-2
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_adam_weight_decay_is_added_to_gradient():
    p = _scalar_net(1.0)
    state = nn.adam_init(p, lr=0.1, weight_decay=0.5)
    new, _ = nn.adam_step(p, _scalar_net(0.0), state)
    # effective gradient 0.5 * 1.0 -> first step lr * sign
    assert new.weights[0][0, 0] == pytest.approx(1.0 - 0.1, abs=1e-7)


def test_adam_rejects_non_finite():
    p = _scalar_net(1.0)
    with pytest.raises(nn.DivergenceError):
        nn.adam_step(p, _scalar_net(np.nan), nn.adam_init(p))


def test_init_bounds():
    net = nn.init_mlp([4, 64, 9], seed=0)
    assert np.max(np.abs(net.weights[0])) <= 0.5
    assert np.max(np.abs(net.weights[1])) <= 1 / 8
    assert nn.init_mlp([4, 64, 9], seed=0).weights[0].tobytes() == net.weights[0].tobytes()


def test_checkpoint_roundtrip(tmp_path):
    net = nn.init_mlp([4, 7, 2], seed=9)
    nn.save_checkpoint(tmp_path / "c.json", "flow", {"vector_field": net}, {"note": 1})
    kind, nets, extra = nn.load_checkpoint(tmp_path / "c.json")
    assert kind == "flow" and extra == {"note": 1}
    for a, b in zip(net.arrays(), nets["vector_field"].arrays()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_row_major_layout(tmp_path):
    w = np.arange(6.0).reshape(2, 3)
    net = nn.Mlp([3, 2], [w], [np.zeros(2)])
    assert nn.mlp_to_dict(net)["weights"][0] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
