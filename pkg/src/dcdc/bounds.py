"""Convert certified drift inequalities into Wasserstein convergence bounds.

Exponential rate: from ``KV <= V - U`` on a convex domain,
``W(X_n, X_inf) <= C r^n`` with ``r = 1 - inf U / sup V`` and
``C = E[|X1 - X0| V(X0 + W (X1 - X0))] / (inf U * inf V / sup V)``, where
``W ~ U[0, 1]`` is independent of the first transition.

Polynomial rate: from a chain ``K V_k <= V_k - V_{k-1}``, ``k = 1..m``,
``W(X_n, X_inf) <= E[|X1 - X0| V_m(...)] / (inf V_0 * prod_{k<m} (1 + n/k))``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .chains import ChainModel
from .certifier import Certificate

__all__ = [
    "InvalidCertificate",
    "DriftInputs",
    "drift_inputs",
    "ExponentialBound",
    "PolynomialBound",
    "exponential_bound",
    "polynomial_bound",
    "first_transition_moment",
    "bound_report",
    "format_report",
    "write_report",
    "coupling_distance",
]

THRESHOLDS = (1.0, 0.1, 0.01)


class InvalidCertificate(ValueError):
    def __init__(self, message: str, stage: int | None = None):
        self.stage = stage
        super().__init__(message)


@dataclass
class DriftInputs:
    """Plug-in constants for the exponential bound."""

    inf_u: float
    inf_v: float
    sup_v: float
    raw_inf_v: float | None = None
    raw_sup_v: float | None = None
    source: str = "analytic"


def drift_inputs(cert: Certificate) -> DriftInputs:
    """Effective ``inf U = u_tilde - eps``; V extrema widened by ``DV * covering radius``."""
    if not cert.valid:
        raise InvalidCertificate(f"certificate invalid: u_tilde {cert.u_tilde:.4g} <= eps {cert.eps:g}")
    inf_v = cert.inf_v_widened
    if not inf_v > 0:
        raise InvalidCertificate(f"widened inf V is {inf_v:.4g}; refine the point set")
    return DriftInputs(cert.effective_inf_u, inf_v, cert.sup_v_widened, cert.inf_v, cert.sup_v, "certificate")


def _initial_points(chain: ChainModel, x0, n: int, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    if x0 is None or (isinstance(x0, str) and x0 in ("uniform", "reference")):
        return chain.sample_initial(rng, n), "uniform on domain"
    p = np.asarray(x0, dtype=float).reshape(chain.domain.dim)
    chain.domain.check(p)
    return np.tile(p, (n, 1)), f"point {p.tolist()}"


def first_transition_moment(chain: ChainModel, value, x0, paths: int, rng: np.random.Generator,
                            sup_v: float | None = None):
    """Monte Carlo of ``E[|X1 - X0| V(X0 + W (X1 - X0))]``, distances in the chain's metric.

    Returns ``(mean, standard error, interpolants outside the domain, description of X0)``.
    Interpolants outside the box (impossible for a box, kept as a guard) are
    charged ``sup_v``.
    """
    X0, desc = _initial_points(chain, x0, paths, rng)
    X1 = chain.sample_maps(rng, paths).apply(X0)
    w = rng.random(paths)[:, None]
    Y = X0 + w * (X1 - X0)
    inside = chain.domain.contains(Y)
    vals = np.empty(paths)
    if inside.any():
        vals[inside] = value(Y[inside])
    fallback = int((~inside).sum())
    if fallback:
        if sup_v is None:
            raise ValueError("interpolant left the domain and no sup V fallback was given")
        vals[~inside] = sup_v
    terms = chain.distance(X1, X0) * vals
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(paths)), fallback, desc


@dataclass
class ExponentialBound:
    rate: float
    C: float  # shipped value: estimate + 2 standard errors
    C_estimate: float
    C_se: float
    inf_u: float
    inf_v: float
    sup_v: float
    raw_inf_v: float | None
    raw_sup_v: float | None
    initial: str
    mc_paths: int
    interpolant_fallbacks: int = 0
    kind: str = "exponential"

    def __call__(self, n):
        return self.C * self.rate ** np.asarray(n, dtype=float)

    def headline(self) -> str:
        return f"W(X_n, X_inf) <= {self.C:.6g} * {self.rate:.8g}^n"

    def first_below(self, threshold: float) -> int:
        if self.C < threshold:
            return 0
        n = max(0, math.floor(math.log(threshold / self.C) / math.log(self.rate)))
        while self(n) >= threshold:
            n += 1
        while n > 0 and self(n - 1) < threshold:
            n -= 1
        return n

    def to_dict(self) -> dict:
        return asdict(self)


def exponential_bound(drift, chain: ChainModel, value, x0=None, mc_paths: int = 100_000,
                      rng: np.random.Generator | None = None) -> ExponentialBound:
    """Build ``C r^n`` from a :class:`Certificate` or explicit :class:`DriftInputs`."""
    if isinstance(drift, Certificate):
        drift = drift_inputs(drift)
    rate = 1.0 - drift.inf_u / drift.sup_v
    if not 0 < rate < 1:
        raise InvalidCertificate(f"degenerate rate r = {rate:.6g}")
    rng = rng or np.random.default_rng(0)
    mean, se, fb, desc = first_transition_moment(chain, value, x0, mc_paths, rng, drift.sup_v)
    denom = drift.inf_u * (drift.inf_v / drift.sup_v)
    c_est, c_se = mean / denom, se / denom
    return ExponentialBound(rate=rate, C=c_est + 2.0 * c_se, C_estimate=c_est, C_se=c_se,
                            inf_u=drift.inf_u, inf_v=drift.inf_v, sup_v=drift.sup_v,
                            raw_inf_v=drift.raw_inf_v, raw_sup_v=drift.raw_sup_v,
                            initial=desc, mc_paths=mc_paths, interpolant_fallbacks=fb)


@dataclass
class PolynomialBound:
    order: int
    numerator: float  # shipped value: estimate + 2 standard errors
    numerator_estimate: float
    numerator_se: float
    inf_v0: float
    stage_scales: list[float] = field(default_factory=list)
    initial: str = ""
    mc_paths: int = 0
    kind: str = "polynomial"

    def denominator(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        prod = np.ones_like(n)
        for k in range(1, self.order):
            prod = prod * (1.0 + n / k)
        return self.inf_v0 * prod

    def __call__(self, n):
        return self.numerator / self.denominator(n)

    def headline(self) -> str:
        prod = " * ".join(f"(1 + n/{k})" for k in range(1, self.order)) or "1"
        return f"W(X_n, X_inf) <= {self.numerator:.6g} / ({self.inf_v0:.6g} * {prod})"

    def first_below(self, threshold: float) -> int | None:
        if self(0) < threshold:
            return 0
        if self.order == 1:
            return None
        hi = 1
        while self(hi) >= threshold:
            hi *= 2
            if hi > 2**62:
                return None
        lo = hi // 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self(mid) < threshold:
                hi = mid
            else:
                lo = mid
        return hi

    def to_dict(self) -> dict:
        return asdict(self)


def polynomial_bound(certs: list[Certificate], value_m, chain: ChainModel, inf_v0: float, x0=None,
                     mc_paths: int = 100_000, rng: np.random.Generator | None = None) -> PolynomialBound:
    """Bound from stage certificates of ``K V_k <= V_k - U_k``, ``k = 1..m``.

    Stage ``k`` certifies ``K V_k <= V_k - s_k U_k`` with
    ``s_k = inf_M (V_k - K_N V_k - eps) / U_k``.  Rescaling the sequence by
    these factors yields an exact chain of drift inequalities whose base
    function has infimum ``inf_v0 * prod_k s_k``.  ``value_m`` is the last
    stage's value function.
    """
    if not certs:
        raise ValueError("need at least one stage certificate")
    scales = []
    for k, c in enumerate(certs, start=1):
        if not c.valid or not c.margin_ratio > 0:
            raise InvalidCertificate(f"stage {k} certificate invalid (u_tilde {c.u_tilde:.4g}, eps {c.eps:g})", k)
        scales.append(float(c.margin_ratio))
    rng = rng or np.random.default_rng(0)
    mean, se, _, desc = first_transition_moment(chain, value_m, x0, mc_paths, rng, certs[-1].sup_v_widened)
    return PolynomialBound(order=len(certs), numerator=mean + 2.0 * se, numerator_estimate=mean,
                           numerator_se=se, inf_v0=float(inf_v0 * np.prod(scales)), stage_scales=scales,
                           initial=desc, mc_paths=mc_paths)


def bound_report(bound, horizon) -> dict:
    """Table of ``(n, bound(n))`` plus the first ``n`` with the bound below 1, 0.1 and 0.01."""
    rows = [(int(n), float(bound(n))) for n in horizon]
    return {
        "kind": bound.kind,
        "headline": bound.headline(),
        "bound": bound.to_dict(),
        "rows": rows,
        "first_below": {str(t): bound.first_below(t) for t in THRESHOLDS},
    }


def format_report(report: dict) -> str:
    lines = [report["headline"], "", f"{'n':>10}  {'bound':>14}"]
    lines += [f"{n:>10d}  {v:>14.6g}" for n, v in report["rows"]]
    lines.append("")
    for t, n in report["first_below"].items():
        lines.append(f"bound < {t}: first at n = {n if n is not None else 'never'}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, stem: str = "bound") -> None:
    out = Path(out_dir)
    (out / f"{stem}.json").write_text(json.dumps(report, indent=1))
    (out / f"{stem}.txt").write_text(format_report(report))
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "bound"])
        w.writerows((n, repr(v)) for n, v in report["rows"])


def coupling_distance(chain: ChainModel, x0, horizon: int, paths: int, rng: np.random.Generator,
                      burn_in: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Synchronous-coupling estimate of ``E|X_n - Y_n|`` for ``n = 0..horizon``.

    ``Y_0`` is approximately stationary (``burn_in`` steps from the reference
    sampler) and both copies use the same maps, so the estimate upper-bounds
    ``W(X_n, X_inf)`` up to burn-in error.  Returns ``(mean, standard error)``.
    """
    X, _ = _initial_points(chain, x0, paths, rng)
    Y = chain.sample_initial(rng, paths)
    for _ in range(burn_in):
        Y = chain.sample_maps(rng, paths).apply(Y)
    means, ses = np.empty(horizon + 1), np.empty(horizon + 1)
    for n in range(horizon + 1):
        dist = chain.distance(X, Y)
        means[n], ses[n] = dist.mean(), dist.std(ddof=1) / math.sqrt(paths)
        maps = chain.sample_maps(rng, paths)
        X, Y = maps.apply(X), maps.apply(Y)
    return means, ses
