"""Command-line entry point: ``fasm {run,compare,sweep,validate,certificate}``.

Exit codes: 0 success, 1 a run collided, 2 configuration error, 3 some
solver step hit the iteration cap.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import harness
from .harness import ConfigError, RunResult, ScenarioConfig
from .observer import GpioConfig, spectral_radius

EXIT_OK, EXIT_COLLISION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

log = logging.getLogger("fasm")


def _setup_logging() -> None:
    level = os.environ.get("FASM_LOG_LEVEL", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _overrides(args) -> list[str]:
    sets = list(args.set or [])
    if getattr(args, "mode", None):
        sets.append(f"controller.mode={json.dumps(args.mode)}")
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    return sets


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", text).strip("_") or "run"


def _status(results: Sequence[RunResult]) -> int:
    if any(r.metrics.collision for r in results):
        return EXIT_COLLISION
    if any(r.metrics.n_max_iter for r in results):
        return EXIT_SOLVER
    return EXIT_OK


def _write_run(res: RunResult, out: Path, args) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    harness.write_csv(res.log, out / "log.csv", timing=args.timing)
    metrics = res.metrics.as_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    if args.plot:
        from . import report
        report.render_run(res.log, out)
    return metrics


def _add_common(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--scenario", action="append", required=True, help="scenario JSON (repeatable)")
    else:
        p.add_argument("--scenario", required=True, help="scenario JSON path or packaged name")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
    p.add_argument("--mode", choices=("fasm", "baseline"))
    p.add_argument("--seed", type=int)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=Path("fasm_out"))
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV")
    p.add_argument("--timing", action="store_true", help="write wall-clock solve times into the CSV")
    p.add_argument("--twin", action="store_true", help="also run obstacle-free to get deviation_moment")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fasm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="simulate one scenario")
    _add_common(p)
    _add_output(p)

    p = sub.add_parser("compare", help="run several configurations on the same grid")
    _add_common(p, multi=True)
    _add_output(p)
    p.add_argument("--variant", action="append", default=[],
                   help="space-separated overrides applied to each scenario, e.g. "
                        "'controller.mode=baseline controller.N=7' (repeatable)")

    p = sub.add_parser("sweep", help="vary one key and summarise the trends")
    _add_common(p)
    _add_output(p)
    p.add_argument("--key", default="controller.P_gamma")
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("validate", help="check a scenario file without running it")
    _add_common(p)

    p = sub.add_parser("certificate", help="observer error-bound certificate")
    p.add_argument("--scenario", help="take the observer block from this scenario")
    p.add_argument("--alphas", default="5,10,2")
    p.add_argument("--t-s", type=float, default=0.04)
    p.add_argument("--eta", type=float, default=0.9999)
    p.add_argument("--delta", type=float, default=0.8)
    return parser


def cmd_run(args) -> int:
    cfg = harness.load_scenario(args.scenario, _overrides(args))
    res = harness.run_many([cfg], with_twin=args.twin)[0]
    metrics = _write_run(res, args.out, args)
    print(json.dumps(metrics, indent=2))
    return _status([res])


def _compare_configs(args) -> list[tuple[str, ScenarioConfig]]:
    variants = [v.split() for v in args.variant] or [[]]
    out = []
    for scen in args.scenario:
        for extra in variants:
            cfg = harness.load_scenario(scen, _overrides(args) + extra)
            label = _slug("_".join([cfg.name] + extra)) if extra else _slug(f"{cfg.name}_{cfg.mode}_N{cfg.N}")
            out.append((label, cfg))
    return out


def cmd_compare(args) -> int:
    labelled = _compare_configs(args)
    results = harness.compare_runs([c for _, c in labelled], workers=args.workers, with_twin=args.twin)
    rows = {label: _write_run(res, args.out / label, args) for (label, _), res in zip(labelled, results)}
    (args.out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    if args.plot:
        from . import report
        report.save(report.comparison_figure(results, [lab for lab, _ in labelled]), args.out / "comparison.png")
    print(harness.comparison_table(results))
    return _status(results)


def trend_summary(values: Sequence, results: Sequence[RunResult]) -> dict:
    def direction(seq):
        if any(v is None or not np.isfinite(v) for v in seq):
            return "undefined"
        d = np.diff(np.asarray(seq, float))
        if np.all(d > 0):
            return "strictly increasing"
        if np.all(d < 0):
            return "strictly decreasing"
        return "not monotone"

    summary = {"values": list(values)}
    for name in ("trigger_moment", "deviation_moment", "highest_altitude", "max_gamma", "min_clearance"):
        seq = [getattr(r.metrics, name) for r in results]
        summary[name] = {"series": seq, "trend": direction(seq)}
    return summary


def cmd_sweep(args) -> int:
    values = [json.loads(v) if re.fullmatch(r"[-+0-9.eE]+", v) else v for v in args.values.split(",")]
    base = _overrides(args)
    configs = [harness.load_scenario(args.scenario, base + [f"{args.key}={json.dumps(v)}"]) for v in values]
    results = harness.run_many(configs, workers=args.workers, with_twin=args.twin)
    for v, res in zip(values, results):
        _write_run(res, args.out / _slug(f"{args.key}={v}"), args)
    summary = trend_summary(values, results)
    summary["key"] = args.key
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if args.plot:
        from . import report
        report.save(report.comparison_figure(results, [f"{args.key}={v}" for v in values]), args.out / "sweep.png")
    print(json.dumps(summary, indent=2))
    return _status(results)


def cmd_validate(args) -> int:
    cfg = harness.load_scenario(args.scenario, _overrides(args))
    print(json.dumps({"name": cfg.name, "steps": cfg.steps, "mode": cfg.mode, "N": cfg.N,
                      "obstacles": len(cfg.obstacles), "r_d": cfg.r_d, "valid": True}))
    return EXIT_OK


def cmd_certificate(args) -> int:
    if args.scenario:
        cfg = harness.load_scenario(args.scenario)
        gpio = cfg.observer
    else:
        try:
            alphas = tuple(float(a) for a in args.alphas.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --alphas: {exc}") from exc
        gpio = GpioConfig(alphas=alphas, t_s=args.t_s, eta=args.eta, delta=args.delta)
    try:
        cert = gpio.certificate
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    np.set_printoptions(precision=6, suppress=True)
    print(f"Phi =\n{cert.Phi}")
    print(f"rho(Phi) = {spectral_radius(cert.Phi):.6f}")
    print(f"eta = {cert.eta}")
    print(f"W =\n{cert.W}")
    print(f"c1 = {cert.c1:.6f}")
    print(f"c2 = {cert.c2:.6f}")
    print(f"phi_0 = sqrt(c2/c1) = {cert.phi0:.6f}")
    print(f"r_d = delta * phi_0 = {gpio.tolerance_distance:.6g} (delta = {gpio.delta})")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep,
            "validate": cmd_validate, "certificate": cmd_certificate}


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
