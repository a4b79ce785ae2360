import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from dcdc.net import AdamState, ConstantFunction, NetSpec, ValueNet, adam_step, load_checkpoint, save_checkpoint


def random_net(seed, d=None, widths=None):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 4))
    widths = widths or tuple(int(w) for w in rng.integers(2, 9, size=rng.integers(1, 3)))
    net = ValueNet.init(NetSpec(d, widths, input_lower=(-2.0,) * d, input_upper=(3.0,) * d), rng)
    x = rng.uniform(-2, 3, d)
    return net, x


def central_difference(net, x, h=1e-5):
    g = np.empty(net.param_count)
    for i in range(net.param_count):
        plus, minus = net.copy(), net.copy()
        plus.theta[i] += h
        minus.theta[i] -= h
        g[i] = (plus(x) - minus(x)) / (2 * h)
    return g


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NetSpec(0, (4,))
        with pytest.raises(ValueError):
            NetSpec(1, ())
        with pytest.raises(ValueError):
            NetSpec(1, (4,), activation="relu")
        with pytest.raises(ValueError):
            NetSpec(2, (4,), input_lower=(0.0,), input_upper=(1.0,))

    def test_param_count(self):
        assert NetSpec(2, (40, 40)).param_count == 2 * 40 + 40 + 40 * 40 + 40 + 40 + 1
        assert NetSpec(2, (1000,)).param_count == 4001

    def test_dict_round_trip(self):
        s = NetSpec(2, (3, 4), input_lower=(0, 0), input_upper=(1, 2))
        assert NetSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestForward:
    def test_zero_weights(self):
        net = ValueNet(NetSpec(3, (5,)))
        assert net(np.array([0.3, -1.0, 2.0])) == pytest.approx(math.log(2) + 0.01)

    def test_deterministic_and_batch_consistent(self):
        net, _ = random_net(1, d=2)
        x = np.random.default_rng(0).uniform(-2, 3, (10, 2))
        batch = net(x)
        assert np.array_equal(batch, net(x))
        # BLAS may sum in a different order for one row; agreement to round-off
        assert np.allclose(batch, [net(x[i]) for i in range(10)], rtol=1e-14, atol=0)

    def test_dimension_mismatch(self):
        net = ValueNet(NetSpec(2, (3,)))
        with pytest.raises(ValueError):
            net(np.zeros(3))
        with pytest.raises(ValueError):
            net(np.zeros((4, 3)))

    def test_one_dimensional_shapes(self):
        net = ValueNet(NetSpec(1, (3,)))
        assert isinstance(net(np.array([0.1])), float)
        assert net(np.array([0.1, 0.2, 0.3])).shape == (3,)
        assert net(np.zeros((4, 1))).shape == (4,)

    @given(st.integers(0, 10_000))
    def test_positive_for_random_parameters(self, seed):
        rng = np.random.default_rng(seed)
        net = ValueNet(NetSpec(2, (6, 6)), rng.normal(scale=5.0, size=NetSpec(2, (6, 6)).param_count))
        v = net(rng.uniform(-10, 10, (1000, 2)))
        assert np.all(v >= 0.01)

    def test_positive_on_many_domain_points(self, rng):
        net = ValueNet.init(NetSpec(2, (16,), input_lower=(0, 0), input_upper=(1, 1)), rng)
        assert np.all(net(rng.random((100_000, 2))) > 0)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_grad_params_vs_central_differences(self, seed):
        net, x = random_net(seed)
        g = net.grad_params(x)
        fd = central_difference(net, x)
        # relative 1e-4, absolute 1e-7 for near-zero entries
        assert np.all(np.abs(g - fd) <= np.maximum(1e-4 * np.abs(fd), 1e-7))

    def test_zero_first_layer_zero_input(self):
        spec = NetSpec(2, (4, 3))
        net = ValueNet.init(spec, np.random.default_rng(0))
        W0, _ = net.layers()[0]
        W0[:] = 0.0
        g = net.grad_params(np.zeros(2))
        wsl = net._slices[0][0]
        assert np.all(g[wsl] == 0.0)

    def test_doubling_output_weights(self):
        net, x = random_net(3, d=2, widths=(5,))
        wsl, bsl, _ = net._slices[-1]
        g1 = net.grad_params(x)
        twice = net.copy()
        twice.theta[wsl] *= 2
        twice.theta[bsl] *= 2
        # output layer gradient is h * softplus'(z): scaling z by 2 keeps h and changes only the sigmoid factor
        _, z1 = net._forward(net._inputs(x)[0])
        _, z2 = twice._forward(twice._inputs(x)[0])
        assert np.allclose(twice.grad_params(x)[wsl] / expit(z2[0]), g1[wsl] / expit(z1[0]))

    def test_vjp_matches_grad_params(self, rng):
        net, _ = random_net(4, d=2)
        x = rng.uniform(-2, 3, (7, 2))
        cot = rng.normal(size=7)
        assert np.allclose(net.vjp(x, cot), cot @ net.grad_params(x))

    def test_input_gradient(self, rng):
        net, _ = random_net(5, d=2)
        x = rng.uniform(-1, 2, (5, 2))
        h = 1e-6
        fd = np.stack([(net(x + h * e) - net(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        assert np.allclose(net.input_gradient(x), fd, rtol=1e-6, atol=1e-9)


class TestAdam:
    def test_zero_gradient_leaves_theta(self):
        theta = np.array([1.0, -2.0, 3.0])
        state = AdamState.fresh(3)
        for _ in range(10):
            theta2, state = adam_step(state, theta, np.zeros(3))
            assert np.array_equal(theta2, theta)

    def test_first_step_closed_form(self):
        theta = np.array([0.5, -1.0, 2.0])
        g = np.array([0.3, -4.0, 1e-9])
        state = AdamState.fresh(3, lr=1e-3)
        new, state2 = adam_step(state, theta, g)
        assert np.allclose(new, theta - 1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        assert state2.t == 1 and state.t == 0  # pure

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.fresh(2), np.zeros(3), np.zeros(3))

    def test_deterministic_trajectory(self):
        rng = np.random.default_rng(0)
        gs = rng.normal(size=(20, 4))

        def run():
            theta, st_ = np.zeros(4), AdamState.fresh(4)
            for g in gs:
                theta, st_ = adam_step(st_, theta, g)
            return theta

        assert np.array_equal(run(), run())


class TestCheckpoint:
    def test_lossless_round_trip(self, tmp_path):
        net, x = random_net(7, d=2)
        save_checkpoint(tmp_path / "c.json", net, seed=3, config_hash="abc")
        back, rec = load_checkpoint(tmp_path / "c.json")
        assert np.array_equal(back.theta, net.theta)
        assert back.spec == net.spec and back(x) == net(x)
        assert rec["seed"] == 3 and rec["training_config_hash"] == "abc"
        assert back.fingerprint() == net.fingerprint()

    def test_rejects_other_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{}")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.json")


def test_constant_function():
    v = ConstantFunction(1.0, 2)
    assert v(np.zeros(2)) == 1.0
    assert np.all(v(np.zeros((3, 2))) == 1.0)
    with pytest.raises(ValueError):
        ConstantFunction(0.0)
