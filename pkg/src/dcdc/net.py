"""Small sigmoid MLP ``V_theta`` with hand-written backpropagation and Adam.

Parameters live in one flat float64 vector.  The output passes through
``softplus(z) + offset`` so the network is strictly positive and
``inf V >= offset`` holds for every parameter value.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "NetSpec",
    "ValueNet",
    "ConstantFunction",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "dcdc-valuenet/1"


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    widths: tuple[int, ...]
    activation: str = "sigmoid"
    output_transform: str = "softplus-offset"
    offset: float = 0.01
    # inputs are mapped affinely from this box onto [-1, 1]^d before layer one
    input_lower: tuple[float, ...] | None = None
    input_upper: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("need at least one hidden layer of positive width")
        if self.activation != "sigmoid":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_transform != "softplus-offset":
            raise ValueError(f"unsupported output transform {self.output_transform!r}")
        if not self.offset > 0:
            raise ValueError("offset must be positive")
        for name in ("input_lower", "input_upper"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(a) for a in v)
                if len(v) != self.input_dim:
                    raise ValueError(f"{name} must have length input_dim")
                object.__setattr__(self, name, v)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.widths + (1,)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activation": self.activation,
            "output_transform": self.output_transform,
            "offset": self.offset,
            "input_lower": None if self.input_lower is None else list(self.input_lower),
            "input_upper": None if self.input_upper is None else list(self.input_upper),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        for k in ("input_lower", "input_upper"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _softplus(z):
    return np.logaddexp(0.0, z)


class ValueNet:
    """Feed-forward network evaluated on batches of points."""

    def __init__(self, spec: NetSpec, theta: np.ndarray | None = None):
        self.spec = spec
        if theta is None:
            theta = np.zeros(spec.param_count)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (spec.param_count,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({spec.param_count},)")
        self.theta = theta
        self._slices = []
        pos = 0
        for i, o in spec.layer_shapes:
            w = slice(pos, pos + i * o)
            b = slice(w.stop, w.stop + o)
            self._slices.append((w, b, (i, o)))
            pos = b.stop
        if spec.input_lower is not None:
            lo = np.asarray(spec.input_lower)
            hi = np.asarray(spec.input_upper)
            self._center, self._scale = 0.5 * (lo + hi), 2.0 / (hi - lo)
        else:
            self._center, self._scale = None, None

    @classmethod
    def init(cls, spec: NetSpec, rng: np.random.Generator) -> "ValueNet":
        """Uniform weights and biases in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        parts = []
        for i, o in spec.layer_shapes:
            bound = 1.0 / math.sqrt(i)
            parts.append(rng.uniform(-bound, bound, i * o))
            parts.append(rng.uniform(-bound, bound, o))
        return cls(spec, np.concatenate(parts))

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def copy(self) -> "ValueNet":
        return ValueNet(self.spec, self.theta.copy())

    def layers(self, theta: np.ndarray | None = None):
        th = self.theta if theta is None else theta
        return [(th[w].reshape(s), th[b]) for w, b, s in self._slices]

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.theta.tobytes())
        return h.hexdigest()[:16]

    # -- evaluation -----------------------------------------------------

    def _inputs(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1 and (self.spec.input_dim > 1 or x.shape == (1,))
        if single:
            x = x[None, :]
        elif x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected points of dimension {self.spec.input_dim}, got shape {x.shape}")
        if self._center is not None:
            x = (x - self._center) * self._scale
        return x, single

    def _forward(self, x: np.ndarray):
        acts = [x]
        h = x
        layers = self.layers()
        for W, b in layers[:-1]:
            h = expit(h @ W + b)
            acts.append(h)
        W, b = layers[-1]
        z = h @ W[:, 0] + b[0]
        return acts, z

    def forward(self, x) -> np.ndarray | float:
        """``V(x)`` for a point (returns float) or a batch ``(n, d)`` (returns ``(n,)``)."""
        x, single = self._inputs(x)
        _, z = self._forward(x)
        v = _softplus(z) + self.spec.offset
        return float(v[0]) if single else v

    __call__ = forward

    def vjp(self, x, cotangent) -> np.ndarray:
        """``sum_i cotangent_i * dV(x_i)/dtheta`` as a flat vector."""
        x, _ = self._inputs(x)
        cot = np.asarray(cotangent, dtype=np.float64).reshape(len(x))
        acts, z = self._forward(x)
        return self._backward(acts, z, cot)

    def _backward(self, acts, z, cot):
        grads = np.empty_like(self.theta)
        layers = self.layers()
        dz = cot * expit(z)  # d softplus / dz
        (wsl, bsl, _) = self._slices[-1]
        W, _ = layers[-1]
        grads[wsl] = acts[-1].T @ dz
        grads[bsl] = dz.sum()
        dh = np.outer(dz, W[:, 0])
        for k in range(len(layers) - 2, -1, -1):
            h = acts[k + 1]
            da = dh * h * (1.0 - h)
            wsl, bsl, _ = self._slices[k]
            grads[wsl] = (acts[k].T @ da).ravel()
            grads[bsl] = da.sum(axis=0)
            if k:
                dh = da @ layers[k][0].T
        return grads

    def value_and_vjp(self, x, cotangent_fn):
        """Evaluate ``V`` once, then backpropagate ``cotangent_fn(V)``."""
        x, _ = self._inputs(x)
        acts, z = self._forward(x)
        v = _softplus(z) + self.spec.offset
        cot = cotangent_fn(v)
        return v, self._backward(acts, z, cot)

    def grad_params(self, x) -> np.ndarray:
        """Per-point parameter gradient: ``(param_count,)`` for a point, ``(n, param_count)`` for a batch."""
        x, single = self._inputs(x)
        acts, z = self._forward(x)
        n = len(x)
        out = np.empty((n, self.param_count))
        layers = self.layers()
        dz = expit(z)
        wsl, bsl, _ = self._slices[-1]
        out[:, wsl] = acts[-1] * dz[:, None]
        out[:, bsl] = dz[:, None]
        dh = dz[:, None] * layers[-1][0][:, 0][None, :]
        for k in range(len(layers) - 2, -1, -1):
            h = acts[k + 1]
            da = dh * h * (1.0 - h)
            wsl, bsl, _ = self._slices[k]
            out[:, wsl] = np.einsum("ni,no->nio", acts[k], da).reshape(n, -1)
            out[:, bsl] = da
            if k:
                dh = da @ layers[k][0].T
        return out[0] if single else out

    def input_gradient(self, x) -> np.ndarray:
        """``dV/dx`` for a batch of points, shape ``(n, d)``."""
        xn, _ = self._inputs(x)
        acts, z = self._forward(xn)
        layers = self.layers()
        g = expit(z)[:, None] * layers[-1][0][:, 0][None, :]
        for k in range(len(layers) - 2, -1, -1):
            h = acts[k + 1]
            g = (g * h * (1.0 - h)) @ layers[k][0].T
        if self._scale is not None:
            g = g * self._scale
        return g


class ConstantFunction:
    """``V(x) = value`` everywhere; stands in for an analytic solution."""

    def __init__(self, value: float, input_dim: int = 1):
        if not value > 0:
            raise ValueError("value must be positive")
        self.value = float(value)
        self.input_dim = int(input_dim)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and (self.input_dim > 1 or x.shape == (1,)):
            return self.value
        return np.full(len(x), self.value)

    __call__ = forward

    def fingerprint(self) -> str:
        return f"const-{self.value!r}"


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def update_(self, theta: np.ndarray, g: np.ndarray, lr: float | None = None) -> None:
        """In-place version of :func:`adam_step`, used by the trainer."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        step = (self.lr if lr is None else lr) / (1.0 - self.beta1**self.t)
        denom = np.sqrt(self.v / (1.0 - self.beta2**self.t))
        denom += self.eps
        theta -= step * self.m / denom


def adam_step(state: AdamState, theta: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if theta.shape != g.shape or state.m.shape != theta.shape:
        raise ValueError(f"length mismatch: theta {theta.shape}, g {g.shape}, state {state.m.shape}")
    new = replace(state, m=state.m.copy(), v=state.v.copy())
    theta = theta.copy()
    new.update_(theta, g)
    return theta, new


def save_checkpoint(path, net: ValueNet, *, seed: int | None = None, config_hash: str | None = None,
                    extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so they round-trip exactly."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "spec": net.spec.to_dict(),
        "theta": net.theta.tolist(),
        "seed": seed,
        "training_config_hash": config_hash,
        "net_hash": net.fingerprint(),
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path) -> tuple[ValueNet, dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a value-net checkpoint")
    net = ValueNet(NetSpec.from_dict(record["spec"]), np.array(record["theta"], dtype=np.float64))
    return net, record
