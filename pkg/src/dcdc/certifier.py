"""Empirical certification of a trained drift solution.

On a point set ``M`` the operator ``K`` is replaced by its ``N``-map
average ``K_N V(x) = mean_k Df_k(x) V(f_k(x))``.  The certified drift level
is ``u_tilde = inf_M [V - K_N V]``; with probability at least ``1 - delta``
(for ``M``, ``N`` at the recommended sizes) the drift inequality
``KV <= V - (u_tilde - eps)`` then holds on the whole domain.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .chains import ChainModel, UFunction
from .rng import Streams

__all__ = [
    "CertConfig",
    "Certificate",
    "ComplexityEstimate",
    "LipschitzInputs",
    "empirical_K",
    "certify",
    "certificate_points",
    "covering_radius",
    "recommend_sample_sizes",
    "estimate_lipschitz_inputs",
    "discounted_reward",
    "NonConvergenceWarning",
]

# cap on map evaluations held in memory per chunk
_CHUNK_EVALS = 200_000


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class CertConfig:
    M: int = 2601
    N: int = 10_000
    eps: float = 0.01
    delta: float = 0.05
    point_source: str = "auto"  # "lattice", "uniform" or "auto" (lattice for d <= 2)
    seed: int = 0
    threads: int = 1
    lipschitz_probes: int = 10_000

    def __post_init__(self):
        if self.M < 1 or self.N < 2:
            raise ValueError("need M >= 1 and N >= 2")
        if not self.eps > 0 or not 0 < self.delta < 1:
            raise ValueError("need eps > 0 and 0 < delta < 1")
        if self.point_source not in ("lattice", "uniform", "auto"):
            raise ValueError(f"unknown point source {self.point_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LipschitzInputs:
    dv: float
    dv_se: float
    e_df2: float
    e_df2_se: float
    e_d2f: float
    e_d2f_se: float
    caveats: list[str] = field(default_factory=list)


@dataclass
class Certificate:
    points: np.ndarray
    values: np.ndarray
    residuals: np.ndarray  # K_N V - V
    residuals_u: np.ndarray  # K_N V - V + U
    k_se: np.ndarray  # Monte-Carlo standard error of K_N V per point
    u_values: np.ndarray
    max_residual: float
    mean_residual: float
    std_residual: float
    max_residual_u: float
    mean_residual_u: float
    std_residual_u: float
    u_tilde: float
    margin_ratio: float  # inf_M (V - K_N V - eps) / U
    inf_v: float
    sup_v: float
    dv: float
    covering_radius: float
    eps: float
    delta: float
    seed: int
    config: dict
    chain_hash: str
    net_hash: str
    chain: str
    u_label: str
    caveats: list[str] = field(default_factory=list)
    timestamp: float = field(default_factory=time.time)

    @property
    def valid(self) -> bool:
        return bool(self.u_tilde - self.eps > 0)

    @property
    def effective_inf_u(self) -> float:
        return self.u_tilde - self.eps

    @property
    def inf_v_widened(self) -> float:
        return self.inf_v - self.dv * self.covering_radius

    @property
    def sup_v_widened(self) -> float:
        return self.sup_v + self.dv * self.covering_radius

    def summary(self) -> dict:
        keys = ["max_residual", "mean_residual", "std_residual", "max_residual_u", "mean_residual_u",
                "std_residual_u", "u_tilde", "margin_ratio", "inf_v", "sup_v", "dv", "covering_radius",
                "eps", "delta"]
        out = {k: getattr(self, k) for k in keys}
        out.update(valid=self.valid, effective_inf_u=self.effective_inf_u,
                   inf_v_widened=self.inf_v_widened, sup_v_widened=self.sup_v_widened)
        return out

    def to_dict(self) -> dict:
        return {
            "format": "dcdc-certificate/1",
            "chain": self.chain,
            "chain_hash": self.chain_hash,
            "net_hash": self.net_hash,
            "u": self.u_label,
            "seed": self.seed,
            "config": self.config,
            "valid": self.valid,
            "statistics": {k: v for k, v in self.summary().items() if k != "valid"},
            "caveats": list(self.caveats),
            "points": self.points.tolist(),
            "values": self.values.tolist(),
            "residuals": self.residuals.tolist(),
            "residuals_u": self.residuals_u.tolist(),
            "k_standard_error": self.k_se.tolist(),
            "u_values": self.u_values.tolist(),
            "timestamp": self.timestamp,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        s = d["statistics"]
        return cls(
            points=np.array(d["points"]), values=np.array(d["values"]),
            residuals=np.array(d["residuals"]), residuals_u=np.array(d["residuals_u"]),
            k_se=np.array(d["k_standard_error"]), u_values=np.array(d["u_values"]),
            max_residual=s["max_residual"], mean_residual=s["mean_residual"], std_residual=s["std_residual"],
            max_residual_u=s["max_residual_u"], mean_residual_u=s["mean_residual_u"],
            std_residual_u=s["std_residual_u"], u_tilde=s["u_tilde"], margin_ratio=s["margin_ratio"],
            inf_v=s["inf_v"], sup_v=s["sup_v"], dv=s["dv"], covering_radius=s["covering_radius"],
            eps=s["eps"], delta=s["delta"], seed=d["seed"], config=d["config"],
            chain_hash=d["chain_hash"], net_hash=d["net_hash"], chain=d["chain"], u_label=d["u"],
            caveats=list(d.get("caveats", [])), timestamp=d.get("timestamp", 0.0),
        )

    @classmethod
    def read_json(cls, path) -> "Certificate":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_surface_csv(self, path) -> None:
        d = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["V", "KV_minus_V", "KV_minus_V_plus_U"])
            for p, v, r, ru in zip(self.points, self.values, self.residuals, self.residuals_u):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v)), repr(float(r)), repr(float(ru))])


def empirical_K(net, chain: ChainModel, x, N: int, rng: np.random.Generator) -> float:
    """``(1/N) sum_k Df_k(x) V(f_k(x))`` over ``N`` fresh maps."""
    if N < 1:
        raise ValueError("N must be at least 1")
    maps = chain.sample_maps(rng, N)
    y, d = maps.apply_with_lipschitz(np.asarray(x, dtype=float).reshape(chain.domain.dim))
    return float(np.mean(d * net(y)))


def _k_chunk(net, chain, pts, N, rng):
    p = len(pts)
    maps = chain.sample_maps(rng, p * N)
    X = np.repeat(pts, N, axis=0)
    y, d = maps.apply_with_lipschitz(X)
    w = (d * net(y)).reshape(p, N)
    return w.mean(axis=1), w.std(axis=1, ddof=1) / math.sqrt(N)


def _resolve_source(cfg: CertConfig, dim: int) -> str:
    if cfg.point_source == "auto":
        return "lattice" if dim <= 2 else "uniform"
    return cfg.point_source


def certificate_points(chain: ChainModel, cfg: CertConfig) -> np.ndarray:
    d = chain.domain.dim
    if _resolve_source(cfg, d) == "lattice":
        per = max(2, int(round(cfg.M ** (1.0 / d))))
        return chain.domain.grid(per)
    return chain.domain.uniform(Streams(cfg.seed).generator("cert-points"), cfg.M)


def covering_radius(chain: ChainModel, points: np.ndarray, source: str, probes: int = 20_000,
                    rng: np.random.Generator | None = None) -> float:
    """Radius within which every domain point has a neighbour in ``points``.

    Exact for a lattice (half the cell diagonal); for random points it is
    estimated as the largest nearest-neighbour distance from ``probes``
    uniform domain points.
    """
    d = chain.domain.dim
    if source == "lattice":
        per = round(len(points) ** (1.0 / d))
        h = chain.domain.width / (per - 1)
        return float(0.5 * np.sqrt(np.sum(h**2)))
    rng = rng or np.random.default_rng(0)
    dist, _ = cKDTree(points).query(chain.domain.uniform(rng, probes))
    return float(dist.max())


def certify(net, chain: ChainModel, u: UFunction, cfg: CertConfig, lipschitz: LipschitzInputs | None = None
            ) -> Certificate:
    """Evaluate the empirical drift residual on ``M`` points with ``N`` maps each.

    Failure to certify (``u_tilde <= eps``) is reported through
    :attr:`Certificate.valid`, not raised.
    """
    streams = Streams(cfg.seed)
    source = _resolve_source(cfg, chain.domain.dim)
    pts = certificate_points(chain, cfg)
    per_chunk = max(1, _CHUNK_EVALS // cfg.N)
    chunks = [(i, pts[s:s + per_chunk]) for i, s in enumerate(range(0, len(pts), per_chunk))]

    def work(item):
        i, p = item
        return _k_chunk(net, chain, p, cfg.N, streams.generator("certify", i))

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    kv = np.concatenate([r[0] for r in results])
    kse = np.concatenate([r[1] for r in results])
    v = np.asarray(net(pts), dtype=float).reshape(len(pts))
    uv = u(pts)
    res = kv - v
    res_u = res + uv
    u_tilde = float(-res.max())
    if lipschitz is None:
        lipschitz = estimate_lipschitz_inputs(net, chain, cfg.lipschitz_probes, streams.generator("lipschitz"))
    rho = covering_radius(chain, pts, source, rng=streams.generator("covering"))
    caveats = list(lipschitz.caveats)
    if source == "uniform":
        caveats.append("covering radius of uniform points is a Monte-Carlo estimate")
    return Certificate(
        points=pts, values=v, residuals=res, residuals_u=res_u, k_se=kse, u_values=uv,
        max_residual=float(res.max()), mean_residual=float(res.mean()), std_residual=float(res.std()),
        max_residual_u=float(res_u.max()), mean_residual_u=float(res_u.mean()),
        std_residual_u=float(res_u.std()),
        u_tilde=u_tilde, margin_ratio=float(np.min((-res - cfg.eps) / uv)),
        inf_v=float(v.min()), sup_v=float(v.max()), dv=lipschitz.dv, covering_radius=rho,
        eps=cfg.eps, delta=cfg.delta, seed=cfg.seed,
        config=dict(cfg.to_dict(), point_source_resolved=source, M_actual=len(pts)),
        chain_hash=chain.fingerprint(), net_hash=net.fingerprint(), chain=chain.name,
        u_label=u.label, caveats=caveats,
    )


@dataclass
class ComplexityEstimate:
    lipschitz: float  # L-tilde, in unit-cube coordinates
    subcubes: float | None  # C-tilde
    recommended_M: int | None
    recommended_N: int
    n_exact: Fraction  # 8 supV^2 E Df^2 / (delta eps^2) before rounding up
    symbolic: str | None
    inputs: dict


def recommend_sample_sizes(eps: float, delta: float, *, sup_v: float, e_df2: float, dim: int,
                           dv: float = 0.0, du: float = 0.0, e_d2f: float = 0.0, scale: float = 1.0,
                           lipschitz: float | None = None) -> ComplexityEstimate:
    """Point count ``M`` and map count ``N`` that make an empirical certificate hold w.p. ``1 - delta``.

    The residual ``KV - V + U`` is Lipschitz with constant
    ``L = DV E Df^2 + supV E D2f + DV + DU``; on the unit cube (``scale`` is the
    longest domain edge) a covering at radius ``eps / (2L)`` needs
    ``C = (2 L sqrt(d) / eps)^d`` sub-cubes, and uniform sampling collects all of
    them with probability ``1 - delta/2`` once ``M >= 2 C ln(e C) / delta``.
    Chebyshev gives ``N >= 8 supV^2 E Df^2 / (delta eps^2)``.
    """
    if not (eps > 0 and 0 < delta < 1 and sup_v > 0 and e_df2 >= 0 and dim >= 1):
        raise ValueError("invalid inputs to recommend_sample_sizes")
    if lipschitz is None:
        lipschitz = (dv * e_df2 + sup_v * e_d2f + dv + du) * scale
    # exact in the binary inputs, so halving eps multiplies it by exactly 4
    n_exact = 8 * Fraction(sup_v) ** 2 * Fraction(e_df2) / (Fraction(delta) * Fraction(eps) ** 2)
    rec_n = max(2, math.ceil(n_exact))
    subcubes = (2.0 * lipschitz * math.sqrt(dim) / eps) ** dim if lipschitz > 0 else 1.0
    symbolic = None
    if not math.isfinite(subcubes) or subcubes > 1e15:
        symbolic = f"C = (2*{lipschitz:.4g}*sqrt({dim})/{eps:g})^{dim}; M = 2*C*ln(e*C)/{delta:g}"
        rec_m = None
        subcubes = None
    else:
        c = max(subcubes, 1.0)
        rec_m = math.ceil(2.0 * c * math.log(c * math.e) / delta)
    return ComplexityEstimate(
        lipschitz=float(lipschitz), subcubes=subcubes, recommended_M=rec_m, recommended_N=rec_n,
        n_exact=n_exact, symbolic=symbolic,
        inputs=dict(eps=eps, delta=delta, sup_v=sup_v, e_df2=e_df2, dv=dv, du=du, e_d2f=e_d2f,
                    dim=dim, scale=scale),
    )


def estimate_lipschitz_inputs(net, chain: ChainModel, probes: int = 10_000,
                              rng: np.random.Generator | None = None) -> LipschitzInputs:
    """``DV`` from finite-difference slopes over random close pairs; ``E Df^2`` and
    ``E D2f`` from the chain's closed-form per-map bounds."""
    if probes < 1000:
        raise ValueError("use at least 1000 probes")
    rng = rng or np.random.default_rng(0)
    dom = chain.domain
    h = 1e-5 * float(dom.width.max())
    x = dom.uniform(rng, probes)
    v = rng.normal(size=x.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # step inward when the forward point would leave the box
    y = x + h * v
    out = ~dom.contains(y, tol=0.0)
    y[out] = x[out] - h * v[out]
    slopes = np.abs(np.asarray(net(y)) - np.asarray(net(x))) / h
    blocks = slopes[: (probes // 10) * 10].reshape(10, -1).max(axis=1)
    caveats = []
    df = chain.df_bound()
    d2 = chain.d2f_bound()
    if d2 is None:
        d2 = 0.0
        caveats.append("Df is piecewise constant with jumps; E D2f declared 0 and the smoothness "
                       "assumption behind the sample-size guarantee does not hold literally")
    return LipschitzInputs(dv=float(slopes.max()), dv_se=float(blocks.std(ddof=1) / math.sqrt(10)),
                           e_df2=df * df, e_df2_se=0.0, e_d2f=float(d2), e_d2f_se=0.0, caveats=caveats)


def discounted_reward(chain: ChainModel, u: UFunction, x, horizon: int, paths: int,
                      rng: np.random.Generator, tol: float | None = None) -> tuple[float, float]:
    """Monte-Carlo value of ``E_x sum_k U(X_k) prod_{l<=k} Df_l(X_{l-1})`` truncated at ``horizon``.

    Returns ``(estimate, standard error)``.  Warns with
    :class:`NonConvergenceWarning` when the neglected tail, bounded by
    ``sup U * mean running product / (1 - df_bound)`` (or ``sup U * mean
    product * horizon`` when the chain has no uniform contraction), exceeds
    ``tol`` (default: the standard error).
    """
    x = np.asarray(x, dtype=float).reshape(chain.domain.dim)
    chain.domain.check(x)
    X = np.tile(x, (paths, 1))
    prod = np.ones(paths)
    total = np.zeros(paths)
    u_max = 0.0
    for _ in range(horizon):
        uv = u(X)
        u_max = max(u_max, float(uv.max()))
        total += uv * prod
        maps = chain.sample_maps(rng, paths)
        X, d = maps.apply_with_lipschitz(X)
        prod = prod * d
        if not prod.any():
            break
    est = float(total.mean())
    se = float(total.std(ddof=1) / math.sqrt(paths)) if paths > 1 else float("inf")
    rate = chain.df_bound()
    mean_prod = float(prod.mean())
    tail = u_max * mean_prod * (1.0 / (1.0 - rate) if rate < 1 else horizon)
    limit = se if tol is None else tol
    if tail > max(limit, 1e-15):
        warnings.warn(f"truncated tail estimate {tail:.3g} exceeds tolerance {limit:.3g} at horizon {horizon}",
                      NonConvergenceWarning, stacklevel=2)
    return est, se
