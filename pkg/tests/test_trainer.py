import csv
import math

import numpy as np
import pytest
from oracles import FrozenProblem

from dcdc.certifier import CertConfig
from dcdc.chains import constant_u, identity_chain, quad_sgd_1d, regulated_walk, sample_transition_pair
from dcdc.net import AdamState, NetSpec, ValueNet
from dcdc.rng import Streams
from dcdc.trainer import (ResidualProbe, TrainConfig, TrainingDiverged, batch_loss_grad, loss_grad_estimate,
                          probe_residuals, train, train_chain_sequence)


def constant_net(chain, c, widths=(4,)):
    """Network with zero weights and output bias chosen so that V == c."""
    spec = NetSpec(chain.domain.dim, widths, input_lower=chain.domain.lower, input_upper=chain.domain.upper)
    net = ValueNet(spec)
    net.theta[-1] = math.log(math.expm1(c - spec.offset))
    return net


def quad_net(seed=0, widths=(16,)):
    ch = quad_sgd_1d()
    spec = NetSpec(1, widths, input_lower=ch.domain.lower, input_upper=ch.domain.upper)
    return ch, ValueNet.init(spec, np.random.default_rng(seed))


class TestEstimator:
    def test_identity_chain_gives_zero(self, rng):
        ch = identity_chain()
        net = ValueNet.init(NetSpec(1, (5,)), rng)
        x0, f1, fm = sample_transition_pair(ch, rng, 1)
        g = loss_grad_estimate(net, constant_u(0.1), x0[0], f1, fm)
        assert np.array_equal(g, np.zeros(net.param_count))

    @pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
    def test_quad_constant_net_residual_factor(self, c, rng):
        ch = quad_sgd_1d(0.1)
        net = constant_net(ch, c)
        x0, f1, fm = sample_transition_pair(ch, rng, 64)
        p1, d1 = f1.apply_with_lipschitz(x0)
        pm, dm = fm.apply_with_lipschitz(x0)
        _, s = batch_loss_grad(net, x0, p1, d1, pm, dm, np.full(64, 0.1))
        assert np.allclose(s, 0.1 - 0.1 * c, atol=1e-12)

    def test_zero_at_analytic_solution(self, rng):
        ch = quad_sgd_1d(0.1)
        net = constant_net(ch, 1.0)
        x0, f1, fm = sample_transition_pair(ch, rng, 1)
        g = loss_grad_estimate(net, constant_u(0.1), x0[0], f1, fm)
        assert np.abs(g).max() < 1e-12

    def test_batch_is_mean_of_single_estimates(self, rng):
        ch = regulated_walk()
        net = ValueNet.init(NetSpec(1, (6,), input_lower=(-0.5,), input_upper=(0.5,)), rng)
        u = constant_u(0.1)
        x0, f1, fm = sample_transition_pair(ch, rng, 16)
        p1, d1 = f1.apply_with_lipschitz(x0)
        pm, dm = fm.apply_with_lipschitz(x0)
        g, _ = batch_loss_grad(net, x0, p1, d1, pm, dm, u(x0))
        singles = [loss_grad_estimate(net, u, x0[i], f1[i], fm[i]) for i in range(16)]
        assert np.allclose(g, np.mean(singles, axis=0), rtol=1e-10, atol=1e-14)

    def test_rejects_point_outside(self, rng):
        ch = quad_sgd_1d()
        net = ValueNet(NetSpec(1, (3,)))
        _, f1, fm = sample_transition_pair(ch, rng, 1)
        with pytest.raises(ValueError):
            loss_grad_estimate(net, constant_u(0.1), np.array([2.0]), f1, fm)

    def test_expectation_equals_loss_gradient(self):
        prob = FrozenProblem(5, n_points=40, n_maps=200)
        coords = np.arange(prob.net.param_count)
        assert np.allclose(prob.exact_gradient(), prob.fd_gradient(coords), rtol=1e-5, atol=1e-9)

    def test_small_monte_carlo_unbiased(self):
        prob = FrozenProblem(6, n_points=40, n_maps=200)
        s = prob.estimator_samples(4000, np.random.default_rng(0))
        z = np.abs(s.mean(axis=0) - prob.exact_gradient()) / (s.std(axis=0, ddof=1) / np.sqrt(len(s)))
        assert np.median(z) < 1.5 and z.max() < 4.5


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(probe_maps=50)
        with pytest.raises(ValueError):
            ResidualProbe(np.zeros((1, 1)), 99)

    def test_lr_schedule(self):
        cfg = TrainConfig(iterations=101, lr=1e-3, lr_final=1e-5)
        assert cfg.lr_at(0) == pytest.approx(1e-3)
        assert cfg.lr_at(50) == pytest.approx(1e-4)
        assert cfg.lr_at(100) == pytest.approx(1e-5)
        assert TrainConfig(lr=2e-3).lr_at(10) == 2e-3


class TestTrain:
    def test_single_step_matches_manual_update(self):
        ch, net = quad_net(1)
        cfg = TrainConfig(iterations=1, batch_size=8, seed=4, chunk=1, probe_every=0, lr=1e-3)
        trained, _ = train(net, ch, cfg)
        rng = Streams(4).generator("train", 0)
        x0 = ch.sample_initial(rng, 8)
        f1, fm = ch.sample_maps(rng, 8), ch.sample_maps(rng, 8)
        p1, d1 = f1.apply_with_lipschitz(x0)
        pm, dm = fm.apply_with_lipschitz(x0)
        g, _ = batch_loss_grad(net, x0, p1, d1, pm, dm, np.full(8, 0.1))
        theta = net.theta.copy()
        AdamState.fresh(net.param_count).update_(theta, g)
        assert np.allclose(trained.theta, theta, rtol=1e-12, atol=1e-15)
        assert not np.array_equal(trained.theta, net.theta)  # input net untouched, copy updated

    def test_deterministic(self):
        ch, net = quad_net(2)
        cfg = TrainConfig(iterations=600, batch_size=8, seed=9, probe_every=300, chunk=200)
        a, pa = train(net, ch, cfg)
        b, pb = train(net, ch, cfg)
        assert np.array_equal(a.theta, b.theta)
        assert pa.history == pb.history

    def test_loss_decreases(self):
        ch, net = quad_net(3)
        cfg = TrainConfig(iterations=6000, batch_size=32, seed=1, probe_every=0, log_every=500)
        _, probe = train(net, ch, cfg)
        losses = [l for _, l in probe.loss_log]
        assert losses[-1] <= 0.5 * losses[0]

    def test_early_stop(self):
        ch = quad_sgd_1d()
        net = constant_net(ch, 2.0)  # K V - V + U = -0.1 everywhere
        cfg = TrainConfig(iterations=10_000, batch_size=4, seed=0, lr=1e-12, probe_every=100,
                          early_stop_patience=3, probe_points=16)
        _, probe = train(net, ch, cfg)
        assert probe.stopped_early
        assert [h[0] for h in probe.history] == [100, 200, 300]
        assert probe.final[1] == pytest.approx(-0.1, abs=1e-9)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_snapshot(self):
        ch, net = quad_net(4)
        cfg = TrainConfig(iterations=200, batch_size=4, seed=0, lr=1e308, probe_every=0)
        with pytest.raises(TrainingDiverged) as info:
            train(net, ch, cfg)
        assert info.value.iteration < 200
        assert "x0" in info.value.last_batch

    def test_checkpoints_and_log(self, tmp_path):
        ch, net = quad_net(5)
        cfg = TrainConfig(iterations=300, batch_size=4, seed=0, probe_every=100, checkpoint_every=150,
                          log_every=50, probe_points=8)
        _, probe = train(net, ch, cfg, out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("checkpoint_*.json")) == [
            "checkpoint_00000150.json", "checkpoint_00000300.json"]
        probe.write_csv(tmp_path / "log.csv")
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert list(rows[0]) == ["iteration", "loss", "probe_max_residual", "probe_mean_residual",
                                 "probe_std_residual"]
        assert [int(r["iteration"]) for r in rows] == list(range(50, 301, 50))
        assert rows[1]["probe_max_residual"] != "" and rows[0]["probe_max_residual"] == ""

    def test_probe_points_grid(self):
        ch, net = quad_net(6)
        _, probe = train(net, ch, TrainConfig(iterations=10, batch_size=2, probe_every=10, probe_points=64))
        assert np.allclose(np.sort(probe.points[:, 0]), np.linspace(-0.5, 0.5, 64))

    def test_probe_residuals_constant_net(self, rng):
        ch = quad_sgd_1d(0.1)
        net = constant_net(ch, 1.0)
        r = probe_residuals(net, ch, constant_u(0.1), ch.domain.grid(9), 100, rng)
        assert np.abs(r).max() < 1e-12


class TestSequence:
    def test_m1_reduces_to_train(self):
        ch, _ = quad_net()
        cfg = TrainConfig(iterations=200, batch_size=4, seed=3, probe_every=0)

        def make(k):
            return quad_net(10 + k)[1]

        nets, certs, us = train_chain_sequence(ch, 1, constant_u(0.1), cfg, make, CertConfig(M=11, N=100))
        direct, _ = train(make(1), ch, cfg)
        assert len(nets) == len(certs) == len(us) == 1
        assert np.array_equal(nets[0].theta, direct.theta)
        assert us[0].label == "constant(0.1)"

    def test_rejects_m0(self):
        with pytest.raises(ValueError):
            train_chain_sequence(quad_sgd_1d(), 0, constant_u(0.1), TrainConfig(iterations=1), None, CertConfig())

    def test_walk_two_stages(self):
        ch = regulated_walk()
        cfg = TrainConfig(iterations=40_000, batch_size=32, seed=1, lr=3e-3, lr_final=1e-4, probe_every=0)

        def make(k):
            spec = NetSpec(1, (32,), input_lower=ch.domain.lower, input_upper=ch.domain.upper)
            return ValueNet.init(spec, Streams(1).generator("init", k))

        nets, certs, us = train_chain_sequence(ch, 2, constant_u(0.1), cfg, make, CertConfig(M=101, N=4000))
        assert us[1].inf_value == pytest.approx(certs[0].inf_v_widened)
        x = ch.domain.grid(101)
        assert np.allclose(us[1](x), np.maximum(nets[0](x), certs[0].inf_v_widened))
        # the second stage accumulates the first: sup V2 > inf V1
        assert certs[1].sup_v > certs[0].inf_v
        assert all(c.valid for c in certs), [c.summary() for c in certs]
