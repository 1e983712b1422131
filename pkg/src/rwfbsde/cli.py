"""Command-line entry point: ``rwfbsde {solve,converge,zhat,skorohod,validate}``.

Exit codes: 0 success, 1 validation violations, 2 configuration error,
3 capacity error, 4 rate-band failure under ``--assert-rates``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .errors import (
    CapacityError,
    ConfigurationError,
    DomainError,
    NoReferenceError,
    RegistryError,
    ValidationError,
)
from .harness import ExperimentConfig, emit_report, non_increasing, run_convergence, run_zn_vs_zhat
from .problems import builtin_problem, validate_problem
from .skorohod import DEFAULT_FINE_FACTOR, embedding_error_stats
from .solver import solve_grid, solve_tree
from .walk import WalkGrid

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_CAPACITY, EXIT_BAND = 0, 1, 2, 3, 4
# one-sided tolerance below the theoretical exponent
BAND = 0.1
EMBEDDING_BAND = (0.17, 0.33)

log = logging.getLogger("rwfbsde")


def _load(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return raw


def _write(args, stem: str, payload: dict | None = None, csv_text: str | None = None) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "csv" and csv_text is not None:
        path = out / f"{stem}.csv"
        path.write_text(csv_text)
    else:
        path = out / f"{stem}.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def cmd_solve(args) -> int:
    cfg = _load(args.config)
    name = args.problem or cfg.get("problem")
    if name is None:
        raise ConfigurationError("solve needs a problem (config 'problem' or --problem)")
    p = builtin_problem(name, cfg.get("params") or {})
    n = int(args.n or cfg.get("n", 8))
    grid = WalkGrid(n, p.T)
    backend = cfg.get("backend", "tree")
    if backend == "tree":
        sol = solve_tree(p, grid, float(cfg.get("x0", 0.0)))
    elif backend == "grid":
        xg = cfg.get("xgrid") or {}
        sol = solve_grid(p, grid, xg.get("x_min", -8.0), xg.get("x_max", 8.0), int(xg.get("points", 4001)))
    else:
        raise ConfigurationError(f"unknown backend {backend!r}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "solution.csv").write_text(sol.to_csv())
    (out / "diagnostics.json").write_text(sol.diagnostics_json() + "\n")
    print(f"solved {p.name} n={n} backend={sol.backend}; wrote {out / 'solution.csv'}")
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    raw = _load(args.config)
    if args.problem:
        raw["problem"] = args.problem
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.samples is not None:
        raw["samples"] = args.samples
    return ExperimentConfig.from_dict(raw)


def cmd_converge(args) -> int:
    cfg = _experiment(args)
    report = run_convergence(cfg, threads=args.threads)
    path = emit_report(report, args.format, Path(args.out_dir) / f"converge.{args.format}")
    print(f"wrote {path}")
    for name, fit in sorted(report.slopes.items()):
        print(f"slope[{name}] = {fit['slope']:.4f}  ci=({fit['ci'][0]:.4f}, {fit['ci'][1]:.4f})")
    if args.assert_rates:
        expected = report.metadata["expected_exponents"]
        bad = [k for k, fit in report.slopes.items() if k in expected and fit["slope"] < expected[k] - BAND]
        if bad:
            print(f"rate band failure: {bad}", file=sys.stderr)
            return EXIT_BAND
    return EXIT_OK


def cmd_zhat(args) -> int:
    cfg = _experiment(args)
    rows = run_zn_vs_zhat(cfg, threads=args.threads)
    csv_text = "n,h,k,estimate,std_error,inner\n" + "".join(
        f"{r['n']},{r['h']!r},{r['k']},{r['estimate']!r},{r['std_error']!r},{r['inner']}\n" for r in rows
    )
    path = _write(args, "zhat", {"config": cfg.to_dict(), "rows": rows}, csv_text)
    print(f"wrote {path}")
    if args.assert_rates and not non_increasing(rows):
        print("Z^n - Z-hat^n gap increases beyond 2 SE", file=sys.stderr)
        return EXIT_BAND
    return EXIT_OK


def cmd_skorohod(args) -> int:
    raw = _load(args.config)
    ns = raw.get("ns", [16, 32, 64, 128, 256])
    T = float(raw.get("T", 1.0))
    samples = args.samples if args.samples is not None else int(raw.get("samples", 10_000))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    stats = embedding_error_stats(
        None, [WalkGrid(int(n), T) for n in ns], samples=samples, p_norm=float(raw.get("p_norm", 2.0)),
        seed=seed, fine_factor=int(raw.get("fine_factor", DEFAULT_FINE_FACTOR)), threads=args.threads,
        crossing=raw.get("crossing", "corrected"),
    )
    path = _write(args, "skorohod", stats.as_dict(), stats.to_csv())
    print(f"wrote {path}")
    for name, fit in sorted(stats.slopes.items()):
        print(f"slope[{name}] = {fit.slope:.4f}  ci=({fit.ci[0]:.4f}, {fit.ci[1]:.4f})")
    if args.assert_rates:
        fit = stats.slopes.get("sup_error")
        if fit is None or not EMBEDDING_BAND[0] <= fit.slope <= EMBEDDING_BAND[1]:
            print(f"embedding slope outside {EMBEDDING_BAND}", file=sys.stderr)
            return EXIT_BAND
    return EXIT_OK


def cmd_validate(args) -> int:
    raw = _load(args.config)
    name = args.problem or raw.get("problem")
    if name is None:
        raise ConfigurationError("validate needs a problem (config 'problem' or --problem)")
    p = builtin_problem(name, raw.get("params") or {})
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    probes = args.samples if args.samples is not None else int(raw.get("probes", 1000))
    report = validate_problem(p, probes=probes, seed=seed, x0=float(raw.get("x0", 0.0)))
    path = _write(args, f"validate-{p.name}", report.as_dict())
    status = "passed" if report.passed else f"{len(report.violations)} violations"
    print(f"{p.name}: {status}; wrote {path}")
    return EXIT_OK if report.passed else EXIT_INVALID


COMMANDS = {
    "solve": cmd_solve,
    "converge": cmd_converge,
    "zhat": cmd_zhat,
    "skorohod": cmd_skorohod,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rwfbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--problem", help="registry problem name (overrides the config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--samples", type=int)
        sp.add_argument("--out-dir", default="out")
        sp.add_argument("--format", choices=("csv", "json"), default="json")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--assert-rates", action="store_true")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "solve":
            sp.add_argument("--n", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConfigurationError, RegistryError, ValidationError, NoReferenceError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
