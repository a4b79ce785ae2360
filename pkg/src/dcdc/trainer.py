"""Neural solver for the contractive drift equation ``KV = V - U``.

``KV(x) = E[Df(x) V(f(x))]``.  Training minimises the integrated squared
residual ``E[(KV - V + U)(X0)^2]`` over ``X0 ~ uniform(domain)``.  The
gradient of that objective is a product of two conditional expectations,
so each term is estimated from its own independent map (``f1`` for the
residual, ``f_-1`` for the derivative factor), which makes the per-sample
gradient unbiased.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chains import ChainModel, SampledMap, UFunction, constant_u
from .net import AdamState, ValueNet, save_checkpoint, _softplus
from .rng import Streams

__all__ = [
    "TrainConfig",
    "ResidualProbe",
    "TrainingDiverged",
    "loss_grad_estimate",
    "batch_loss_grad",
    "probe_residuals",
    "train",
    "train_chain_sequence",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, theta_norm: float, last_batch: dict):
        self.iteration = iteration
        self.theta_norm = theta_norm
        self.last_batch = last_batch
        super().__init__(f"non-finite loss or parameters at iteration {iteration} (|theta| = {theta_norm:.3g})")


@dataclass
class TrainConfig:
    iterations: int = 1_000_000
    batch_size: int = 32
    u: UFunction = field(default_factory=lambda: constant_u(0.1))
    seed: int = 0
    lr: float = 1e-3
    # geometric decay from lr to lr_final over the run; None keeps lr fixed
    lr_final: float | None = None
    checkpoint_every: int = 0
    probe_every: int = 10_000
    probe_points: int = 64
    probe_maps: int = 200
    early_stop_patience: int = 5
    x0: tuple[float, ...] | None = None
    chunk: int = 500
    log_every: int = 1000

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be at least 1")
        if self.probe_maps < 100:
            raise ValueError("probe_maps must be at least 100")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")

    def lr_at(self, t: int) -> float:
        if self.lr_final is None:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (t / max(1, self.iterations - 1))


@dataclass
class ResidualProbe:
    points: np.ndarray
    maps_per_point: int
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    loss_log: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False
    elapsed: float = 0.0

    def __post_init__(self):
        if self.maps_per_point < 100:
            raise ValueError("maps_per_point must be at least 100")

    @property
    def final(self) -> tuple[int, float, float, float] | None:
        return self.history[-1] if self.history else None

    def write_csv(self, path) -> None:
        """Rows ``(iteration, loss, probe_max, probe_mean, probe_std)``; probe columns blank between probes."""
        probes = {h[0]: h[1:] for h in self.history}
        rows = {it: [loss, "", "", ""] for it, loss in self.loss_log}
        for it, stats in probes.items():
            rows.setdefault(it, ["", "", "", ""])[1:] = [repr(s) for s in stats]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "probe_max_residual", "probe_mean_residual", "probe_std_residual"])
            for it in sorted(rows):
                loss = rows[it][0]
                w.writerow([it, repr(loss) if loss != "" else ""] + rows[it][1:])


def loss_grad_estimate(net: ValueNet, u: UFunction, x0, f1: SampledMap, fm1: SampledMap) -> np.ndarray:
    """Single-triple unbiased estimate of the gradient of the integrated squared residual.

    ``2 [Df1(x0) V(f1(x0)) - V(x0) + U(x0)] [Df_-1(x0) V'(f_-1(x0)) - V'(x0)]``
    """
    x0 = np.asarray(x0, dtype=float)
    p1, d1 = f1[0].apply_with_lipschitz(x0)
    pm, dm = fm1[0].apply_with_lipschitz(x0)
    x0 = x0.reshape(1, -1)
    s = d1[0] * net(p1)[0] - net(x0)[0] + u(x0)[0]
    return 2.0 * s * (dm[0] * net.grad_params(pm)[0] - net.grad_params(x0)[0])


def batch_loss_grad(net: ValueNet, x0, p1, d1, pm, dm, u0) -> tuple[np.ndarray, np.ndarray]:
    """Average of the single-triple estimator over a batch of precomputed triples.

    Arrays hold ``X0``, ``f1(X0)``, ``Df1(X0)``, ``f_-1(X0)``, ``Df_-1(X0)``,
    ``U(X0)`` row-wise.  Returns ``(gradient, residual samples)``.
    """
    b = len(x0)
    v1 = net(p1)
    holder = {}

    def cot(v):
        s = d1 * v1 - v[:b] + u0
        holder["s"] = s
        return (2.0 / b) * np.concatenate([-s, s * dm])

    _, g = net.value_and_vjp(np.concatenate([x0, pm]), cot)
    return g, holder["s"]


def probe_residuals(net, chain: ChainModel, u: UFunction, points: np.ndarray, n_maps: int,
                    rng: np.random.Generator) -> np.ndarray:
    """``K_N V(x) - V(x) + U(x)`` at each probe point with fresh maps."""
    out = np.empty(len(points))
    for i, x in enumerate(points):
        maps = chain.sample_maps(rng, n_maps)
        y, d = maps.apply_with_lipschitz(x)
        out[i] = np.mean(d * net(y))
    return out - net(points) + u(points)


def _probe_points(chain: ChainModel, n: int, rng: np.random.Generator) -> np.ndarray:
    d = chain.domain.dim
    per = int(round(n ** (1.0 / d)))
    if per**d == n and per >= 2:
        return chain.domain.grid(per)
    return chain.domain.uniform(rng, n)


def train(net: ValueNet, chain: ChainModel, cfg: TrainConfig, out_dir: Path | None = None,
          progress: bool = False) -> tuple[ValueNet, ResidualProbe]:
    """Adam on the unbiased gradient estimator; returns the trained copy and probe history."""
    streams = Streams(cfg.seed)
    net = net.copy()
    theta = net.theta
    adam = AdamState.fresh(net.param_count, lr=cfg.lr)
    u = cfg.u
    probe = ResidualProbe(_probe_points(chain, cfg.probe_points, streams.generator("probe-points")),
                          cfg.probe_maps)
    B = cfg.batch_size
    offset = net.spec.offset
    below = 0
    t0 = time.perf_counter()
    loss_acc, loss_n = 0.0, 0
    x0_fixed = None if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)

    def record_probe(it: int) -> float:
        r = probe_residuals(net, chain, u, probe.points, probe.maps_per_point,
                            streams.generator("probe", it))
        probe.history.append((it, float(r.max()), float(r.mean()), float(r.std())))
        log.info("iter %d  probe max %.4g mean %.4g std %.4g", it, *probe.history[-1][1:])
        return float(r.max())

    it = 0
    n_chunks = math.ceil(cfg.iterations / cfg.chunk)
    for c in range(n_chunks):
        k = min(cfg.chunk, cfg.iterations - c * cfg.chunk)
        rng = streams.generator("train", c)
        X0, f1, fm = (x for x in _chunk_triples(chain, rng, k * B, x0_fixed))
        P1, D1 = f1.apply_with_lipschitz(X0)
        PM, DM = fm.apply_with_lipschitz(X0)
        U0 = u(X0)
        # normalise once per chunk
        X0n, _ = net._inputs(X0)
        P1n, _ = net._inputs(P1)
        PMn, _ = net._inputs(PM)
        for j in range(k):
            sl = slice(j * B, (j + 1) * B)
            _, z1 = net._forward(P1n[sl])
            v1 = _softplus(z1) + offset
            acts, z = net._forward(np.concatenate([X0n[sl], PMn[sl]]))
            v = _softplus(z) + offset
            s = D1[sl] * v1 - v[:B] + U0[sl]
            loss = float(s @ s) / B
            if not math.isfinite(loss):
                raise TrainingDiverged(it, float(np.linalg.norm(theta)),
                                       {"x0": X0[sl].tolist(), "residual": s.tolist()})
            g = net._backward(acts, z, (2.0 / B) * np.concatenate([-s, s * DM[sl]]))
            adam.update_(theta, g, cfg.lr_at(it))
            it += 1
            loss_acc += loss
            loss_n += 1
            if it % cfg.log_every == 0 or it == cfg.iterations:
                probe.loss_log.append((it, loss_acc / loss_n))
                loss_acc, loss_n = 0.0, 0
            if cfg.probe_every and (it % cfg.probe_every == 0 or it == cfg.iterations):
                if not np.all(np.isfinite(theta)):
                    raise TrainingDiverged(it, float("nan"), {"x0": X0[sl].tolist()})
                mx = record_probe(it)
                below = below + 1 if mx < 0 else 0
                if progress:
                    print(f"iter {it:>8d}  loss {probe.loss_log[-1][1]:.4g}  probe max {mx:+.4g}", flush=True)
            if cfg.checkpoint_every and out_dir is not None and it % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"checkpoint_{it:08d}.json", net, seed=cfg.seed)
            if cfg.early_stop_patience and below >= cfg.early_stop_patience:
                probe.stopped_early = True
                break
        if probe.stopped_early:
            break
    if not probe.history or probe.history[-1][0] != it:
        record_probe(it)
    probe.elapsed = time.perf_counter() - t0
    return net, probe


def _chunk_triples(chain, rng, n, x0_fixed):
    if x0_fixed is None:
        X0 = chain.sample_initial(rng, n)
    else:
        X0 = np.tile(x0_fixed, (n, 1))
    return X0, chain.sample_maps(rng, n), chain.sample_maps(rng, n)


def train_chain_sequence(chain: ChainModel, m: int, v0: UFunction, cfg: TrainConfig, make_net,
                         cert_cfg, out_dir: Path | None = None):
    """Solve ``K V_k = V_k - V_{k-1}`` for ``k = 1..m`` in turn.

    ``make_net(k)`` returns the initial network for stage ``k``.  Stage ``k``
    trains against ``U_k(x) = max(V_{k-1}(x), inf_{k-1})`` where ``inf_{k-1}`` is
    the certified lower bound of the previous stage's network.  Returns
    ``(nets, certificates, u_functions)``.
    """
    from dataclasses import replace

    from .certifier import certify

    if m < 1:
        raise ValueError("m must be at least 1")
    nets, certs, us = [], [], []
    u = v0
    for k in range(1, m + 1):
        stage_cfg = replace(cfg, u=u, seed=Streams(cfg.seed).child("stage", k).seed if k > 1 else cfg.seed)
        stage_dir = None
        if out_dir is not None:
            stage_dir = Path(out_dir) / f"stage{k}"
            stage_dir.mkdir(parents=True, exist_ok=True)
        net, _ = train(make_net(k), chain, stage_cfg, stage_dir)
        cert = certify(net, chain, u, replace(cert_cfg, seed=cert_cfg.seed + k))
        nets.append(net)
        certs.append(cert)
        us.append(u)
        inf_k = cert.inf_v_widened
        if not inf_k > 0:
            raise ValueError(f"stage {k}: certified inf of V is {inf_k:.4g} <= 0")
        u = _clamped_u(net, inf_k, k)
    return nets, certs, us


def _clamped_u(net: ValueNet, floor: float, k: int) -> UFunction:
    return UFunction(lambda x: np.maximum(net(x), floor), floor, label=f"stage{k}-value")
