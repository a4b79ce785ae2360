"""Train -> certify -> bound pipeline over a run directory.

Run directory layout::

    config.cfg          copy of the experiment config
    seed                the seed actually used
    train_log.csv       loss and residual-probe history
    checkpoint.json     trained network
    certificate.json    empirical drift certificate
    surface.csv         V and residuals on the certificate points
    bound.{json,txt,csv}
    summary.json        measured numbers vs reproduction targets

Polynomial mode adds ``checkpoint_stage{k}.json`` / ``certificate_stage{k}.json``
for every stage of the chained equations.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bounds import (DriftInputs, InvalidCertificate, bound_report, coupling_distance, exponential_bound,
                     polynomial_bound, write_report)
from .certifier import Certificate, certify
from .chains import ChainModel, UFunction
from .config import ExperimentConfig
from .net import ConstantFunction, ValueNet, load_checkpoint, save_checkpoint
from .rng import Streams
from .trainer import ResidualProbe, train, train_chain_sequence

__all__ = [
    "HashMismatch",
    "Check",
    "prepare_run_dir",
    "run_train",
    "run_certify",
    "run_bound",
    "analytic_bound",
    "reproduction_checks",
    "plane_fit_residual",
    "symmetry_defect",
    "write_summary",
]

log = logging.getLogger(__name__)


class HashMismatch(ValueError):
    pass


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g}  (target {self.target})"


def prepare_run_dir(cfg: ExperimentConfig, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.text)
    (out / "seed").write_text(f"{cfg.seed}\n")
    return out


def _init_net(cfg: ExperimentConfig, chain: ChainModel, stage: int = 1) -> ValueNet:
    spec = cfg.net_spec(chain)
    return ValueNet.init(spec, Streams(cfg.seed).generator("init", stage))


def run_train(cfg: ExperimentConfig, out: Path, progress: bool = False) -> tuple[ValueNet, ResidualProbe | None]:
    """Train (every stage, in polynomial mode) and write checkpoints plus the training log."""
    chain = cfg.build_chain()
    if cfg.bound.mode == "polynomial":
        nets, certs, _ = train_chain_sequence(chain, cfg.bound.order, cfg.train.u, cfg.train,
                                              lambda k: _init_net(cfg, chain, k), cfg.certify, out)
        for k, (net, cert) in enumerate(zip(nets, certs), start=1):
            save_checkpoint(out / f"checkpoint_stage{k}.json", net, seed=cfg.seed,
                            config_hash=cfg.training_hash(), extra={"stage": k})
            cert.write_json(out / f"certificate_stage{k}.json")
        save_checkpoint(out / "checkpoint.json", nets[-1], seed=cfg.seed, config_hash=cfg.training_hash(),
                        extra={"stage": len(nets)})
        return nets[-1], None
    net, probe = train(_init_net(cfg, chain), chain, cfg.train, out_dir=out, progress=progress)
    probe.write_csv(out / "train_log.csv")
    it, mx, mean, std = probe.final
    save_checkpoint(out / "checkpoint.json", net, seed=cfg.seed, config_hash=cfg.training_hash(),
                    extra={"iterations": it, "probe_max_residual": mx, "probe_mean_residual": mean,
                           "probe_std_residual": std, "stopped_early": probe.stopped_early,
                           "seconds": probe.elapsed})
    return net, probe


def _stage_u(out: Path, k: int, cfg: ExperimentConfig) -> UFunction:
    """Drift target of stage ``k``: the constant for stage 1, else the clamped previous stage."""
    if k == 1:
        return cfg.train.u
    prev, _ = load_checkpoint(out / f"checkpoint_stage{k - 1}.json")
    floor = Certificate.read_json(out / f"certificate_stage{k - 1}.json").inf_v_widened
    return UFunction(lambda x: np.maximum(prev(x), floor), floor, label=f"stage{k - 1}-value")


def run_certify(cfg: ExperimentConfig, net: ValueNet, out: Path, threads: int = 1) -> Certificate:
    chain = cfg.build_chain()
    u = cfg.train.u
    if cfg.bound.mode == "polynomial":
        u = _stage_u(out, cfg.bound.order, cfg)
    cert = certify(net, chain, u, replace(cfg.certify, threads=threads))
    cert.write_json(out / "certificate.json")
    cert.write_surface_csv(out / "surface.csv")
    return cert


def check_hashes(cert: Certificate, chain: ChainModel, net) -> None:
    if cert.chain_hash != chain.fingerprint():
        raise HashMismatch(f"certificate was issued for chain {cert.chain_hash}, config builds {chain.fingerprint()}")
    if cert.net_hash != net.fingerprint():
        raise HashMismatch(f"certificate was issued for network {cert.net_hash}, checkpoint is {net.fingerprint()}")


def _bound_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return Streams(cfg.seed).generator("bound")


def analytic_bound(cfg: ExperimentConfig):
    """Exponential bound from a constant value function given in the config.

    The constant must satisfy ``KV <= V - U`` on the certificate points; with
    a deterministic Lipschitz factor (as in the quadratic SGD chain) the
    check is exact.
    """
    chain = cfg.build_chain()
    v = ConstantFunction(cfg.bound.analytic_v, chain.domain.dim)
    u = cfg.train.u
    cert = certify(v, chain, u, replace(cfg.certify, N=max(2, min(cfg.certify.N, 1000))))
    slack = 3.0 * float(cert.k_se.max())
    if cert.max_residual_u > slack + 1e-12:
        raise InvalidCertificate(f"analytic V = {v.value:g} violates KV <= V - U "
                                 f"(max KV - V + U = {cert.max_residual_u:.4g})")
    drift = DriftInputs(u.inf_value, v.value, v.value, source="analytic")
    return exponential_bound(drift, chain, v, cfg.bound.x0, cfg.bound.mc_paths, _bound_rng(cfg))


def run_bound(cfg: ExperimentConfig, cert: Certificate | None, net, out: Path, stem: str = "bound") -> dict:
    """Write the bound report and return it.  Raises :class:`InvalidCertificate` or :class:`HashMismatch`."""
    chain = cfg.build_chain()
    if cfg.bound.analytic_v is not None and cert is None:
        bound = analytic_bound(cfg)
    elif cfg.bound.mode == "polynomial":
        certs = [Certificate.read_json(out / f"certificate_stage{k}.json") for k in range(1, cfg.bound.order)]
        certs.append(cert)
        check_hashes(cert, chain, net)
        bound = polynomial_bound(certs, net, chain, cfg.train.u.inf_value, cfg.bound.x0, cfg.bound.mc_paths,
                                 _bound_rng(cfg))
    else:
        check_hashes(cert, chain, net)
        bound = exponential_bound(cert, chain, net, cfg.bound.x0, cfg.bound.mc_paths, _bound_rng(cfg))
    report = bound_report(bound, cfg.bound.horizon)
    write_report(report, out, stem)
    return report


# -- reproduction targets ---------------------------------------------------


def plane_fit_residual(points: np.ndarray, values: np.ndarray) -> float:
    """Relative L2 residual ``|V - plane| / |V|`` of the least-squares affine fit."""
    A = np.column_stack([np.ones(len(points)), points])
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return float(np.linalg.norm(values - A @ coef) / np.linalg.norm(values))


def symmetry_defect(net, chain: ChainModel, n: int = 201) -> float:
    """``max |V(x) - V(-x)| / max V`` over a grid of the (origin-symmetric) domain."""
    x = chain.domain.grid(n)
    v = net(x)
    return float(np.max(np.abs(v - net(-x))) / np.max(v))


def _within(name, value, lo, hi) -> Check:
    return Check(name, float(value), f"[{lo:g}, {hi:g}]", bool(lo <= value <= hi))


def _at_most(name, value, hi) -> Check:
    return Check(name, float(value), f"<= {hi:g}", bool(value <= hi))


def _rate_gap(report):
    return 1.0 - report["bound"]["rate"]


def reproduction_checks(name: str, cfg: ExperimentConfig, net, cert: Certificate, report: dict | None,
                        analytic_report: dict | None = None) -> list[Check]:
    """Measured numbers vs each experiment's targets and tolerances."""
    chain = cfg.build_chain()
    checks = [Check("certificate valid", cert.u_tilde - cert.eps, "> 0", cert.valid)]
    if name == "quad1d":
        grid = chain.domain.grid(512)
        checks.append(_at_most("max |V - 1| at 512 grid points", np.max(np.abs(net(grid) - 1.0)), 0.1))
        checks.append(_at_most("max |K_N V - V + U|", np.max(np.abs(cert.residuals_u)), 0.02))
        if analytic_report is not None:
            r = analytic_report["bound"]["rate"]
            checks.append(Check("analytic-V rate", r, "== 0.9", r == 0.9))
            checks.append(_coupling_check(cfg, chain, analytic_report["bound"]["C"], r, "analytic-V"))
        if report is not None:
            checks.append(_coupling_check(cfg, chain, report["bound"]["C"], report["bound"]["rate"], "trained-V"))
    elif name == "logistic":
        checks.append(_at_most("max residual K_N V - V", cert.max_residual, -0.08))
        checks += _bound_checks(report, lambda g: _within("1 - r", g, 0.7e-3, 1.6e-3), (6.0, 11.0))
    elif name == "tandem":
        checks += _bound_checks(report, lambda g: _at_most("|1 - r - 0.017|", abs(g - 0.017), 0.006), (4.2, 7.2))
        checks.append(_at_most("plane-fit relative residual", plane_fit_residual(cert.points, cert.values), 0.15))
        checks.append(_at_most("residual std", cert.std_residual, 0.02))
        checks.append(_within("max V", cert.sup_v, 3.0, 4.6))
    elif name == "walk":
        i = int(np.argmax(cert.values))
        checks.append(_within("max V", cert.values[i], 0.7, 1.3))
        checks.append(_at_most("|argmax V|", float(np.linalg.norm(cert.points[i])), 0.15))
        checks.append(_at_most("symmetry defect / max V", symmetry_defect(net, chain), 0.10))
    return checks


def _bound_checks(report, rate_check, c_range) -> list[Check]:
    if report is None:
        return [Check("bound produced", 0.0, "a bound report", False)]
    return [rate_check(_rate_gap(report)), _within("C", report["bound"]["C"], *c_range)]


def _coupling_check(cfg, chain, C, r, label, horizon=100, paths=20_000) -> Check:
    """``C r^n`` must dominate the synchronous-coupling distance for ``n <= horizon`` within 3 SE."""
    x0 = cfg.bound.x0 if cfg.bound.x0 is not None else "uniform"
    means, ses = coupling_distance(chain, x0, horizon, paths, Streams(cfg.seed).generator("coupling"))
    n = np.arange(horizon + 1)
    worst = float(np.max(means - 3.0 * ses - C * r**n))
    return Check(f"{label} bound dominates coupling estimate (max excess)", worst, "<= 0", worst <= 0)


def write_summary(out: Path, name: str, cfg: ExperimentConfig, checks: list[Check], cert: Certificate | None,
                  report: dict | None, timings: dict, extra: dict | None = None) -> dict:
    summary = {
        "experiment": name,
        "seed": cfg.seed,
        "headline": None if report is None else report["headline"],
        "certificate": None if cert is None else {k: (v if not isinstance(v, float) or math.isfinite(v) else None)
                                                  for k, v in cert.summary().items()},
        "checks": [{"name": c.name, "value": c.value, "target": c.target, "passed": c.passed} for c in checks],
        "all_passed": all(c.passed for c in checks),
        "seconds": timings,
    }
    if extra:
        summary.update(extra)
    (Path(out) / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0
