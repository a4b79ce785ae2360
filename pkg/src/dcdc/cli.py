"""``dcdc`` command line: train, certify, bound, reproduce, report.

Exit statuses: 0 ok, 2 configuration error, 3 training divergence,
4 certification failure (invalid certificate or mismatched inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bounds import InvalidCertificate, bound_report, format_report, write_report
from .certifier import Certificate
from .config import BUILTIN_EXPERIMENTS, ConfigError, ExperimentConfig, builtin_config_path, load_config
from .experiments import (HashMismatch, analytic_bound, prepare_run_dir, reproduction_checks, run_bound,
                          run_certify, run_train, timed, write_summary)
from .net import load_checkpoint
from .trainer import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INVALID = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(message)


def _load(args) -> ExperimentConfig:
    path = args.config or args.config_pos
    if path is None:
        raise _Fail(EXIT_CONFIG, "no config given (positional argument or --config)")
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else cfg.out


def _load_net(path: Path):
    try:
        net, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise _Fail(EXIT_CONFIG, f"cannot load checkpoint {path}: {exc}") from exc
    return net


def _load_cert(path: Path) -> Certificate:
    try:
        return Certificate.read_json(path)
    except (OSError, ValueError, KeyError) as exc:
        raise _Fail(EXIT_CONFIG, f"cannot load certificate {path}: {exc}") from exc


def _print_stats(cert: Certificate) -> None:
    for k, v in cert.summary().items():
        print(f"  {k}: {v}")


def _train(cfg: ExperimentConfig, out: Path, quiet: bool):
    try:
        net, probe = run_train(cfg, out, progress=not quiet)
    except TrainingDiverged as exc:
        raise _Fail(EXIT_DIVERGED, f"training diverged: {exc}") from exc
    except ValueError as exc:  # a polynomial stage whose certified infimum collapsed
        raise _Fail(EXIT_INVALID, str(exc)) from exc
    if probe is not None:
        it, mx, mean, std = probe.final
        print(f"trained {it} iterations in {probe.elapsed:.1f}s; probe residual max {mx:+.4g} "
              f"mean {mean:+.4g} std {std:.3g}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return net


def _certify(cfg, net, out, threads) -> Certificate:
    cert = run_certify(cfg, net, out, threads)
    print(f"certificate: {out / 'certificate.json'}")
    _print_stats(cert)
    if not cert.valid:
        raise _Fail(EXIT_INVALID, f"certificate invalid: u_tilde {cert.u_tilde:.4g} <= eps {cert.eps:g}")
    return cert


def _bound(cfg, cert, net, out) -> dict:
    try:
        report = run_bound(cfg, cert, net, out)
    except (InvalidCertificate, HashMismatch) as exc:
        raise _Fail(EXIT_INVALID, str(exc)) from exc
    print(report["headline"])
    return report


def cmd_train(args) -> int:
    cfg = _load(args)
    out = prepare_run_dir(cfg, _out(args, cfg))
    _train(cfg, out, args.quiet)
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _load(args)
    out = prepare_run_dir(cfg, _out(args, cfg))
    net = _load_net(Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json")
    _certify(cfg, net, out, args.threads)
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _load(args)
    out = prepare_run_dir(cfg, _out(args, cfg))
    if cfg.bound.analytic_v is not None and not args.certificate:
        try:
            report = bound_report(analytic_bound(cfg), cfg.bound.horizon)
        except InvalidCertificate as exc:
            raise _Fail(EXIT_INVALID, str(exc)) from exc
        write_report(report, out)
        print(report["headline"])
        return EXIT_OK
    cert = _load_cert(Path(args.certificate) if args.certificate else out / "certificate.json")
    net = _load_net(Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json")
    _bound(cfg, cert, net, out)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.experiment not in BUILTIN_EXPERIMENTS:
        raise _Fail(EXIT_CONFIG, f"unknown experiment {args.experiment!r}; "
                                 f"expected one of {', '.join(BUILTIN_EXPERIMENTS)}")
    args.config_pos = args.config or str(builtin_config_path(args.experiment))
    cfg = _load(args)
    out = prepare_run_dir(cfg, Path(args.out) if args.out else Path("runs") / args.experiment)
    summary = reproduce(args.experiment, cfg, out, args.threads, args.quiet)
    print(f"summary: {out / 'summary.json'}")
    return EXIT_OK if summary["all_passed"] else EXIT_INVALID


def reproduce(name: str, cfg: ExperimentConfig, out: Path, threads: int = 1, quiet: bool = True) -> dict:
    """Full pipeline plus target checks; raises :class:`_Fail` on divergence or an invalid certificate."""
    net, t_train = timed(_train, cfg, out, quiet)
    cert, t_cert = timed(run_certify, cfg, net, out, threads)
    _print_stats(cert)
    timings = {"train": t_train, "certify": t_cert}
    report = None
    if cert.valid:
        try:
            report, timings["bound"] = timed(run_bound, cfg, cert, net, out)
        except (InvalidCertificate, HashMismatch) as exc:
            print(f"bound: {exc}", file=sys.stderr)
        else:
            print(report["headline"])
    analytic = None
    if cfg.bound.analytic_v is not None:
        analytic = bound_report(analytic_bound(cfg), cfg.bound.horizon)
        write_report(analytic, out, "bound_analytic")
        print(f"analytic V: {analytic['headline']}")
    checks = reproduction_checks(name, cfg, net, cert, report, analytic)
    for c in checks:
        print(c.line())
    return write_summary(out, name, cfg, checks, cert, report, timings,
                         {"analytic_headline": None if analytic is None else analytic["headline"]})


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    summary = run / "summary.json"
    found = False
    cert_path = run / "certificate.json"
    if cert_path.exists():
        found = True
        print(f"certificate {cert_path}:")
        _print_stats(_load_cert(cert_path))
    for stem in ("bound", "bound_analytic"):
        p = run / f"{stem}.json"
        if p.exists():
            found = True
            print(format_report(json.loads(p.read_text())))
    if summary.exists():
        found = True
        for c in json.loads(summary.read_text())["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']:.6g}  (target {c['target']})")
    if not found:
        raise _Fail(EXIT_CONFIG, f"{run}: no run artefacts found")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcdc", description="Neural contractive-drift convergence bounds "
                                                         "for Markov chains.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config_pos", nargs="?", metavar="CONFIG", help="experiment config file")
            sp.add_argument("--config", help="experiment config file (alternative to the positional)")
        sp.add_argument("--out", help="run directory (default: experiment.out from the config)")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for certification")
        sp.add_argument("--quiet", action="store_true", help="suppress training progress lines")

    sp = sub.add_parser("train", help="train the value network")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("certify", help="empirically certify a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint JSON (default: <out>/checkpoint.json)")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("bound", help="convert a certificate into a convergence bound")
    common(sp)
    sp.add_argument("--certificate", help="certificate JSON (default: <out>/certificate.json)")
    sp.add_argument("--checkpoint", help="checkpoint JSON (default: <out>/checkpoint.json)")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("reproduce", help="run a built-in experiment end to end and check its targets")
    sp.add_argument("experiment", help=f"one of {', '.join(BUILTIN_EXPERIMENTS)}")
    sp.add_argument("--config", help="use this config instead of the built-in one")
    common(sp, config=False)
    sp.set_defaults(func=cmd_reproduce)

    sp = sub.add_parser("report", help="print the certificate, bound and checks of a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"dcdc: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
