"""Experiment configuration files.

A config is an INI file whose values are JSON literals::

    [experiment]
    name = "quad1d"
    seed = 1

    [chain]
    name = "quad1d"
    alpha = 0.1

    [net]
    widths = [64]

Sections: ``experiment``, ``chain``, ``net``, ``train``, ``certify`` and
``bound``.  Unknown keys are rejected so typos fail loudly.  Relative paths
(``experiment.out``, ``chain.dataset_csv``) resolve against the config
file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .certifier import CertConfig
from .chains import ChainModel, build_chain, constant_u
from .net import NetSpec
from .trainer import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "BoundConfig", "load_config", "builtin_config_path",
           "BUILTIN_EXPERIMENTS"]

BUILTIN_EXPERIMENTS = ("quad1d", "logistic", "tandem", "walk")
CHAINS = ("quad1d", "logistic", "tandem", "walk", "identity")

_TRAIN_KEYS = {"iterations", "batch_size", "u", "lr", "lr_final", "checkpoint_every", "probe_every",
               "probe_points", "probe_maps", "early_stop_patience", "x0", "chunk", "log_every"}
_CERT_KEYS = {"M", "N", "eps", "delta", "point_source", "seed", "lipschitz_probes"}
_NET_KEYS = {"widths", "offset"}
_BOUND_KEYS = {"mode", "x0", "mc_paths", "horizon", "order", "analytic_v"}
_EXPERIMENT_KEYS = {"name", "seed", "out"}


class ConfigError(ValueError):
    pass


@dataclass
class BoundConfig:
    mode: str = "exponential"  # or "polynomial"
    x0: list[float] | str | None = None  # a point, or "uniform"
    mc_paths: int = 100_000
    horizon: list[int] = field(default_factory=lambda: [0, 10, 100, 1000, 10_000])
    order: int = 2  # number of chained stages in polynomial mode
    # constant value function to use instead of a trained network
    analytic_v: float | None = None

    def __post_init__(self):
        if self.mode not in ("exponential", "polynomial"):
            raise ConfigError(f"bound.mode must be 'exponential' or 'polynomial', got {self.mode!r}")
        if self.mc_paths < 2:
            raise ConfigError("bound.mc_paths must be at least 2")
        if self.order < 1:
            raise ConfigError("bound.order must be at least 1")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    chain_name: str
    chain_params: dict
    net_widths: tuple[int, ...]
    net_offset: float
    train: TrainConfig
    certify: CertConfig
    bound: BoundConfig
    out: Path
    source: Path | None = None
    text: str = ""

    def build_chain(self) -> ChainModel:
        base = self.source.parent if self.source is not None else None
        return build_chain(self.chain_name, self.chain_params, seed=self.seed, base_dir=base)

    def net_spec(self, chain: ChainModel) -> NetSpec:
        return NetSpec(chain.domain.dim, self.net_widths, offset=self.net_offset,
                       input_lower=chain.domain.lower, input_upper=chain.domain.upper)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed),
                       certify=replace(self.certify, seed=seed))

    def training_hash(self) -> str:
        """Hash of everything that determines the trained network."""
        blob = json.dumps({"seed": self.seed, "chain": self.chain_name, "chain_params": self.chain_params,
                           "widths": list(self.net_widths), "offset": self.net_offset,
                           "train": _train_dict(self.train)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _train_dict(t: TrainConfig) -> dict:
    return {"iterations": t.iterations, "batch_size": t.batch_size, "u": t.u.label, "lr": t.lr,
            "lr_final": t.lr_final, "probe_every": t.probe_every, "probe_points": t.probe_points,
            "probe_maps": t.probe_maps, "early_stop_patience": t.early_stop_patience,
            "x0": None if t.x0 is None else list(t.x0), "chunk": t.chunk}


def _section(cp: configparser.ConfigParser, name: str, allowed: set[str] | None, path) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if allowed is not None and key not in allowed:
            raise ConfigError(f"{path}: unknown key {name}.{key}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {name}.{key} is not a JSON value ({raw!r})") from exc
    return out


def parse_config(text: str, source: Path | None = None) -> ExperimentConfig:
    where = str(source) if source is not None else "<config>"
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (M, N)
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    extra = set(cp.sections()) - {"experiment", "chain", "net", "train", "certify", "bound"}
    if extra:
        raise ConfigError(f"{where}: unknown section(s) {sorted(extra)}")

    exp = _section(cp, "experiment", _EXPERIMENT_KEYS, where)
    if "seed" not in exp:
        raise ConfigError(f"{where}: experiment.seed is required")
    seed = exp["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{where}: experiment.seed must be a non-negative integer")

    chain = _section(cp, "chain", None, where)
    chain_name = chain.pop("name", None)
    if chain_name not in CHAINS:
        raise ConfigError(f"{where}: chain.name must be one of {', '.join(CHAINS)}, got {chain_name!r}")

    net = _section(cp, "net", _NET_KEYS, where)
    train = _section(cp, "train", _TRAIN_KEYS, where)
    cert = _section(cp, "certify", _CERT_KEYS, where)
    bound = _section(cp, "bound", _BOUND_KEYS, where)

    u = train.pop("u", 0.1)
    if not isinstance(u, (int, float)) or not u > 0:
        raise ConfigError(f"{where}: train.u must be a positive number")
    if train.get("x0") is not None:
        train["x0"] = tuple(float(a) for a in train["x0"])
    cert.setdefault("seed", seed)
    try:
        train_cfg = TrainConfig(u=constant_u(float(u)), seed=seed, **train)
        cert_cfg = CertConfig(**cert)
        bound_cfg = BoundConfig(**bound)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc

    out = Path(exp.get("out", f"runs/{exp.get('name', chain_name)}"))
    if source is not None and not out.is_absolute():
        out = source.parent / out
    return ExperimentConfig(
        name=exp.get("name", chain_name), seed=seed, chain_name=chain_name, chain_params=chain,
        net_widths=tuple(net.get("widths", [64])), net_offset=float(net.get("offset", 0.01)),
        train=train_cfg, certify=cert_cfg, bound=bound_cfg, out=out, source=source, text=text,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, path.resolve())


def builtin_config_path(name: str) -> Path:
    if name not in BUILTIN_EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {', '.join(BUILTIN_EXPERIMENTS)}")
    return Path(str(resources.files("dcdc") / "configs" / f"{name}.cfg"))
