"""Random-mapping representation of Markov chains on boxes.

A chain is ``X_{n+1} = f_{n+1}(X_n)`` with iid random maps ``f``.  A
:class:`SampledMap` stores the randomness of ``n`` realised maps and can
evaluate them (and their local Lipschitz constants ``Df``) at ``n`` paired
points, or at a single point broadcast over all maps.

Built-in chains:

* :func:`quad_sgd_1d` -- constant step-size SGD on ``E(x - Z)^2 / 2``.
* :func:`logistic_sgd` -- mini-batch SGD for L2-regularised logistic regression.
* :func:`tandem_fluid` -- workload after each arrival in a two-station fluid tandem.
* :func:`regulated_walk` -- random walk clipped to ``[-1/2, 1/2]``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

__all__ = [
    "DomainError",
    "DomainBox",
    "Uniform",
    "SampledMap",
    "ChainModel",
    "UFunction",
    "constant_u",
    "sample_transition_pair",
    "LogisticDataset",
    "quad_sgd_1d",
    "logistic_sgd",
    "tandem_fluid",
    "regulated_walk",
    "identity_chain",
    "build_chain",
]


class DomainError(ValueError):
    """A point lies outside the chain's state box."""


@dataclass(frozen=True)
class DomainBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must be non-empty and of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"need lower < upper componentwise, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        """Boolean mask over the rows of ``x``."""
        x = np.atleast_2d(x)
        slack = tol * np.maximum(1.0, np.abs(self.width))
        return np.all((x >= self.lo - slack) & (x <= self.hi + slack), axis=-1)

    def check(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"point dimension {x.shape[-1]} != domain dimension {self.dim}")
        inside = self.contains(x.reshape(-1, self.dim))
        if not inside.all():
            bad = x.reshape(-1, self.dim)[~inside][0]
            raise DomainError(f"point {bad.tolist()} lies outside {self.lower}..{self.upper}")

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + self.width * rng.random((n, self.dim))

    def grid(self, per_dim: int) -> np.ndarray:
        """Lattice with ``per_dim`` points per axis, endpoints included."""
        axes = [np.linspace(a, b, per_dim) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Uniform:
    """Uniform law on ``[low, high]``; ``low == high`` gives a point mass."""

    low: float
    high: float

    def __post_init__(self):
        if self.high < self.low:
            raise ValueError(f"Uniform needs low <= high, got {self.low}, {self.high}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random(n)

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def to_dict(self) -> dict:
        return {"uniform": [self.low, self.high]}

    @classmethod
    def parse(cls, spec) -> "Uniform":
        if isinstance(spec, Uniform):
            return spec
        if isinstance(spec, dict) and "uniform" in spec:
            lo, hi = spec["uniform"]
            return cls(float(lo), float(hi))
        if isinstance(spec, (list, tuple)) and len(spec) == 2:
            return cls(float(spec[0]), float(spec[1]))
        if isinstance(spec, (int, float)):
            return cls(float(spec), float(spec))
        raise ValueError(f"cannot parse distribution {spec!r}; use {{'uniform': [lo, hi]}}")


@dataclass
class SampledMap:
    """``n`` realised random maps of one chain.

    ``draws`` maps a name to an array whose leading axis has length ``n``.
    Evaluation is pure given the stored draws.
    """

    chain: "ChainModel"
    draws: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(next(iter(self.draws.values())))

    def __getitem__(self, idx) -> "SampledMap":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return SampledMap(self.chain, {k: v[idx] for k, v in self.draws.items()})

    def _points(self, x) -> np.ndarray:
        d = self.chain.domain.dim
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and x.shape[0] == d:
            x = np.broadcast_to(x, (len(self), d))
        elif x.ndim == 2 and x.shape == (len(self), d):
            pass
        elif d == 1 and x.ndim == 1 and x.shape[0] == len(self):
            x = x[:, None]
        else:
            raise DomainError(f"expected a point of dimension {d} or {len(self)} paired points, got shape {x.shape}")
        self.chain.domain.check(x)
        return x

    def apply(self, x) -> np.ndarray:
        """Image of ``x`` under each map; shape ``(n, d)``."""
        return self.chain._apply(self.draws, self._points(x))

    def lipschitz(self, x) -> np.ndarray:
        """Local Lipschitz constant ``Df(x)`` of each map; shape ``(n,)``."""
        return self.chain._lipschitz(self.draws, self._points(x))

    def apply_with_lipschitz(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._points(x)
        return self.chain._apply(self.draws, x), self.chain._lipschitz(self.draws, x)


@dataclass
class UFunction:
    """Positive drift target ``U`` with a known lower bound."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    inf_value: float
    label: str = "custom"

    def __post_init__(self):
        if not self.inf_value > 0:
            raise ValueError(f"U must be bounded away from zero, got inf_value={self.inf_value}")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.evaluator(x), dtype=float).reshape(len(x))

    @property
    def is_constant(self) -> bool:
        return self.label.startswith("constant")


def constant_u(value: float) -> UFunction:
    value = float(value)
    return UFunction(lambda x: np.full(len(x), value), value, label=f"constant({value!r})")


class ChainModel:
    """Base class: subclasses set ``name``/``domain`` and implement the hooks."""

    name: str = "chain"
    domain: DomainBox
    # True when Df is piecewise constant with jumps (indicator-valued).
    indicator_lipschitz: bool = False
    # order of the vector norm in which Df is the local Lipschitz constant;
    # bounds are Wasserstein bounds in this metric
    metric_ord: int = 2

    def distance(self, a, b) -> np.ndarray:
        """Row-wise distance in the chain's metric."""
        diff = np.atleast_2d(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
        return np.linalg.norm(diff, ord=self.metric_ord, axis=1)

    def sample_maps(self, rng: np.random.Generator, n: int) -> SampledMap:
        return SampledMap(self, self._draw(rng, int(n)))

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Reference sampler: uniform on the domain box."""
        return self.domain.uniform(rng, int(n))

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"name": self.name, "domain": self.domain.to_dict(), "params": self.params(),
                "metric": f"l{self.metric_ord}"}

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, default=_jsonable).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def df_bound(self) -> float:
        """Deterministic bound on ``Df`` valid for every map and point."""
        raise NotImplementedError

    def d2f_bound(self) -> float | None:
        """Bound on the Lipschitz constant of ``x -> Df(x)``; None when ``Df`` jumps."""
        return None

    # hooks
    def _draw(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _apply(self, draws: dict, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _lipschitz(self, draws: dict, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params()})"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"not serialisable: {obj!r}")


def sample_transition_pair(chain: ChainModel, rng: np.random.Generator, n: int = 1, x0=None):
    """Draw ``(X0, f1, f_-1)``: ``n`` starting points and two independent map batches.

    ``x0=None`` draws X0 from the reference (uniform) sampler; otherwise every
    draw starts at the fixed point ``x0``.
    """
    if x0 is None:
        X0 = chain.sample_initial(rng, n)
    else:
        x0 = np.asarray(x0, dtype=float).reshape(chain.domain.dim)
        chain.domain.check(x0)
        X0 = np.tile(x0, (n, 1))
    return X0, chain.sample_maps(rng, n), chain.sample_maps(rng, n)


# ----------------------------------------------------------------------------
# 1-D quadratic SGD


class QuadSGD1D(ChainModel):
    """``f(x) = x - alpha (x - Z)`` on the support box of ``Z``."""

    name = "quad1d"

    def __init__(self, alpha: float = 0.1, z: Uniform = Uniform(-0.5, 0.5)):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.alpha = float(alpha)
        self.z = Uniform.parse(z)
        if self.z.low == self.z.high:
            raise ValueError("Z must have a non-degenerate support to define the domain")
        self.domain = DomainBox((self.z.low,), (self.z.high,))

    def params(self):
        return {"alpha": self.alpha, "z": self.z.to_dict()}

    def df_bound(self):
        return 1.0 - self.alpha

    def d2f_bound(self):
        return 0.0

    def _draw(self, rng, n):
        return {"z": self.z.sample(rng, n)}

    def _apply(self, draws, x):
        out = x - self.alpha * (x - draws["z"][:, None])
        # convex combination of two box points; clip round-off
        return np.clip(out, self.domain.lo, self.domain.hi)

    def _lipschitz(self, draws, x):
        return np.full(len(x), 1.0 - self.alpha)


def quad_sgd_1d(alpha: float = 0.1, z=Uniform(-0.5, 0.5)) -> QuadSGD1D:
    return QuadSGD1D(alpha, z)


# ----------------------------------------------------------------------------
# logistic regression SGD


@dataclass
class LogisticDataset:
    x: np.ndarray  # (m, 2)
    y: np.ndarray  # (m,) in {0, 1}

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("dataset shapes do not match")

    @property
    def m(self) -> int:
        return len(self.y)

    @classmethod
    def generate(cls, rng: np.random.Generator, m: int = 100, p_hi: float = 0.9, p_lo: float = 0.1):
        """Features uniform on ``[-1/2, 1/2]^2``; ``P(y=1)`` is ``p_hi`` when x1 > x2, else ``p_lo``."""
        x = rng.uniform(-0.5, 0.5, size=(m, 2))
        p = np.where(x[:, 0] > x[:, 1], p_hi, p_lo)
        y = (rng.random(m) < p).astype(float)
        return cls(x, y)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        x = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        return cls(x, y)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "y"])
            for (a, b), c in zip(self.x, self.y):
                w.writerow([repr(float(a)), repr(float(b)), int(c)])

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist()}


class LogisticSGD(ChainModel):
    """Mini-batch SGD on the L2-regularised cross-entropy loss.

    ``f(b) = b (1 - lam*alpha/m) + (alpha/beta) sum_{i in B} (y_i - sigma(b.x_i)) x_i``
    with ``B`` a uniform size-``beta`` subset drawn without replacement.

    The default state box ``[-R, R]^2`` uses ``R = max|x_ij| * m / lam``; each
    coordinate then satisfies ``|f(b)_j| <= (1 - lam*alpha/m) R + alpha max|x_ij| <= R``,
    so the box is absorbing.
    """

    name = "logistic"

    def __init__(self, data: LogisticDataset, lam: float = 1.0, alpha: float = 0.1,
                 beta: int = 10, radius: float | None = None):
        self.data = data
        self.lam, self.alpha, self.beta = float(lam), float(alpha), int(beta)
        if not 1 <= self.beta <= data.m:
            raise ValueError("batch size must lie in 1..m")
        self.shrink = 1.0 - self.lam * self.alpha / data.m
        if not 0 < self.shrink < 1:
            raise ValueError("need 0 < lam*alpha/m < 1")
        xmax = float(np.abs(data.x).max())
        if radius is None:
            radius = xmax * data.m / self.lam
        self.radius = float(radius)
        self.domain = DomainBox((-self.radius,) * 2, (self.radius,) * 2)

    def params(self):
        return {"lam": self.lam, "alpha": self.alpha, "beta": self.beta, "radius": self.radius,
                "data_sha": hashlib.sha256(np.concatenate([self.data.x.ravel(), self.data.y]).tobytes()).hexdigest()[:16]}

    def df_bound(self):
        return self.shrink

    def d2f_bound(self):
        # |sigma''| <= 1/(6 sqrt 3); the spectral norm is 1-Lipschitz in the matrix
        xmax = float(np.linalg.norm(self.data.x, axis=1).max())
        return self.alpha * xmax**3 / (6.0 * np.sqrt(3.0))

    def _draw(self, rng, n):
        keys = rng.random((n, self.data.m))
        return {"batch": np.argpartition(keys, self.beta - 1, axis=1)[:, : self.beta]}

    def _batch_terms(self, draws, b):
        xb = self.data.x[draws["batch"]]  # (n, beta, 2)
        s = expit(np.einsum("nbk,nk->nb", xb, b))
        return xb, s

    def _apply(self, draws, b):
        xb, s = self._batch_terms(draws, b)
        yb = self.data.y[draws["batch"]]
        out = b * self.shrink + (self.alpha / self.beta) * np.einsum("nb,nbk->nk", yb - s, xb)
        return np.clip(out, self.domain.lo, self.domain.hi)

    def _lipschitz(self, draws, b):
        xb, s = self._batch_terms(draws, b)
        w = (self.alpha / self.beta) * s * (1.0 - s)
        # symmetric Jacobian [[p, q], [q, r]]; spectral norm = max |eigenvalue|
        p = self.shrink - np.einsum("nb,nb->n", w, xb[..., 0] ** 2)
        r = self.shrink - np.einsum("nb,nb->n", w, xb[..., 1] ** 2)
        q = -np.einsum("nb,nb,nb->n", w, xb[..., 0], xb[..., 1])
        mid = 0.5 * (p + r)
        rad = np.sqrt(0.25 * (p - r) ** 2 + q**2)
        return np.maximum(np.abs(mid + rad), np.abs(mid - rad))

    def jacobian(self, draws, b) -> np.ndarray:
        """Full Jacobian of each map at ``b``; shape ``(n, 2, 2)``."""
        xb, s = self._batch_terms(draws, np.asarray(b, dtype=float))
        w = (self.alpha / self.beta) * s * (1.0 - s)
        return self.shrink * np.eye(2) - np.einsum("nb,nbi,nbj->nij", w, xb, xb)


def logistic_sgd(data: LogisticDataset, lam: float = 1.0, alpha: float = 0.1, beta: int = 10,
                 radius: float | None = None) -> LogisticSGD:
    return LogisticSGD(data, lam, alpha, beta, radius)


# ----------------------------------------------------------------------------
# tandem fluid network


class TandemFluid(ChainModel):
    """Remaining workload ``(x1, x2)`` after each arrival, on ``[0, c]^2``.

    Between arrivals station 1 drains at ``r1`` while station 2 fills at
    ``r1 - r2``; once station 1 is empty, station 2 drains at ``r2``.  After
    ``T`` time units an amount ``Z`` joins station 1.
    """

    name = "tandem"
    indicator_lipschitz = True
    # once station 1 empties, the map's Jacobian is [[0, 0], [1, 1]]; the
    # indicator Df is its l1 operator norm (the Euclidean one is sqrt 2)
    metric_ord = 1

    def __init__(self, c: float = 1.0, r1: float = 1.1, r2: float = 1.0,
                 t=Uniform(0.0, 0.2), z=Uniform(0.0, 0.1)):
        if not r1 > r2 > 0:
            raise ValueError("need r1 > r2 > 0")
        self.c, self.r1, self.r2 = float(c), float(r1), float(r2)
        self.t, self.z = Uniform.parse(t), Uniform.parse(z)
        if self.t.low < 0 or self.z.low < 0:
            raise ValueError("T and Z must be non-negative")
        self.domain = DomainBox((0.0, 0.0), (self.c, self.c))

    def params(self):
        return {"c": self.c, "r1": self.r1, "r2": self.r2, "t": self.t.to_dict(), "z": self.z.to_dict()}

    def df_bound(self):
        return 1.0

    def _draw(self, rng, n):
        return {"t": self.t.sample(rng, n), "z": self.z.sample(rng, n)}

    def _apply(self, draws, x):
        T, Z = draws["t"], draws["z"]
        x1, x2 = x[:, 0], x[:, 1]
        y1 = np.minimum(np.maximum(x1 - self.r1 * T, 0.0) + Z, self.c)
        empty_at = x1 / self.r1
        y2 = np.minimum(x2 + (self.r1 - self.r2) * np.minimum(T, empty_at), self.c)
        y2 = np.maximum(y2 - self.r2 * np.maximum(T - empty_at, 0.0), 0.0)
        return np.stack([y1, y2], axis=1)

    def _lipschitz(self, draws, x):
        return (draws["t"] <= (x[:, 0] + x[:, 1]) / self.r2).astype(float)


def tandem_fluid(c: float = 1.0, r1: float = 1.1, r2: float = 1.0, t=Uniform(0.0, 0.2),
                 z=Uniform(0.0, 0.1)) -> TandemFluid:
    return TandemFluid(c, r1, r2, t, z)


# ----------------------------------------------------------------------------
# two-sided regulated random walk


class RegulatedWalk(ChainModel):
    """``f(x) = max(min(x + Z, 1/2), -1/2)``; ``Df = 1`` off saturation, else 0."""

    name = "walk"
    indicator_lipschitz = True

    def __init__(self, z=Uniform(-1 / 3, 1 / 3)):
        self.z = Uniform.parse(z)
        self.domain = DomainBox((-0.5,), (0.5,))

    def params(self):
        return {"z": self.z.to_dict()}

    def df_bound(self):
        return 1.0

    def _draw(self, rng, n):
        return {"z": self.z.sample(rng, n)}

    def _apply(self, draws, x):
        return np.clip(x + draws["z"][:, None], -0.5, 0.5)

    def _lipschitz(self, draws, x):
        return (np.abs(x[:, 0] + draws["z"]) < 0.5).astype(float)


def regulated_walk(z=Uniform(-1 / 3, 1 / 3)) -> RegulatedWalk:
    return RegulatedWalk(z)


class IdentityChain(ChainModel):
    """Degenerate chain ``f(x) = x`` with ``Df = 1``; a test fixture."""

    name = "identity"

    def __init__(self, domain: DomainBox = DomainBox((-0.5,), (0.5,))):
        self.domain = domain

    def df_bound(self):
        return 1.0

    def d2f_bound(self):
        return 0.0

    def _draw(self, rng, n):
        return {"dummy": np.zeros(n)}

    def _apply(self, draws, x):
        return np.array(x, dtype=float, copy=True)

    def _lipschitz(self, draws, x):
        return np.ones(len(x))


def identity_chain(domain: DomainBox | None = None) -> IdentityChain:
    return IdentityChain(domain or DomainBox((-0.5,), (0.5,)))


def build_chain(name: str, params: dict | None = None, *, seed: int = 0,
                base_dir: Path | None = None) -> ChainModel:
    """Construct a built-in chain from its config name and parameters.

    The logistic chain's dataset comes from ``dataset_csv`` when given,
    otherwise it is regenerated from ``dataset_seed`` (default: ``seed``).
    """
    params = dict(params or {})
    if name == "quad1d":
        return quad_sgd_1d(params.get("alpha", 0.1), Uniform.parse(params.get("z", {"uniform": [-0.5, 0.5]})))
    if name == "logistic":
        if "dataset_csv" in params:
            path = Path(params["dataset_csv"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            data = LogisticDataset.from_csv(path)
        else:
            from .rng import Streams

            rng = Streams(int(params.get("dataset_seed", seed))).generator("dataset")
            data = LogisticDataset.generate(rng, int(params.get("m", 100)))
        return logistic_sgd(data, params.get("lam", 1.0), params.get("alpha", 0.1),
                            int(params.get("beta", 10)), params.get("radius"))
    if name == "tandem":
        return tandem_fluid(params.get("c", 1.0), params.get("r1", 1.1), params.get("r2", 1.0),
                            Uniform.parse(params.get("t", {"uniform": [0.0, 0.2]})),
                            Uniform.parse(params.get("z", {"uniform": [0.0, 0.1]})))
    if name == "walk":
        return regulated_walk(Uniform.parse(params.get("z", {"uniform": [-1 / 3, 1 / 3]})))
    if name == "identity":
        return identity_chain()
    raise ValueError(f"unknown chain {name!r}; expected one of quad1d, logistic, tandem, walk")
