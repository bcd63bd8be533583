"""Command-line runner: named experiments, seeded execution, report files.

Every run writes a JSON report, CSV term tables, and a manifest echoing
the resolved configuration; re-running a manifest reproduces the numeric
payloads byte for byte.  Exit status is 0 when all pass flags are set,
1 on a tolerance violation (reports are still written), and 2 on usage
errors (nothing is written).
"""

import argparse
import sys
from pathlib import Path
from types import SimpleNamespace

import yaml

from . import __version__
from .chainrule import convergence_sweep
from .errors import InvalidArgumentError
from .output import csv_text, json_text
from .paths import RngStream
from .registry import get_experiment, list_registry

__all__ = ["load_config", "resolve_params", "run", "main", "UsageError"]

USAGE_EXIT = 2
FAILURE_EXIT = 1

_SUBCOMMAND_DEFAULTS = {
    "verify-ito": "ito-telescoping",
    "verify-wentzell": "wentzell-ablation",
    "verify-brownian": "brownian-corollary",
    "verify-factor": "factor-linear",
    "lemma-qv": "lemma-qv-bm",
    "deriv-check": "deriv-battery",
    "hjb-lq": "lq-common-noise",
    "dpp-check": "dpp-lq",
    "modulus": "modulus-lq",
}

_TOLERANCE_KEYS = {"C", "tol_hjb", "tol_exact", "perturbation_floor", "quadrature_tol", "l1_threshold"}
_TOP_KEYS = {"experiment", "seed", "out", "n", "N", "M", "horizon", "tolerance", "coefficients", "functional", "control", "grid", "threads"}


class UsageError(Exception):
    pass


def load_config(path: str | Path) -> dict:
    """Read a YAML config; a manifest (with a ``config`` key) replays its echo."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping")
    if "config" in raw and isinstance(raw["config"], dict):
        return raw["config"]
    return raw


def resolve_params(config: dict) -> tuple[str, int, dict, dict]:
    """Validate a config against its experiment's parameter set.

    Returns (experiment name, seed, resolved params, extras) where extras
    carries out/grid/threads.  Unknown keys anywhere are usage errors.
    """
    unknown = set(config) - _TOP_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "experiment" not in config:
        raise UsageError("config must name an experiment")
    if "seed" not in config:
        raise UsageError("config must carry a seed (no wall-clock default)")
    name = config["experiment"]
    try:
        exp = get_experiment(name)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    params = dict(exp.defaults)

    def apply(key, value):
        if key not in params:
            raise UsageError(f"experiment {name!r} does not accept parameter {key!r}")
        params[key] = value

    for key in ("n", "N", "M", "horizon", "functional", "control"):
        if key in config:
            apply(key, config[key])
    tol = config.get("tolerance", {})
    if not isinstance(tol, dict):
        raise UsageError("tolerance must be a mapping")
    for key, value in tol.items():
        if key not in _TOLERANCE_KEYS:
            raise UsageError(f"unknown tolerance key {key!r}")
        apply(key, value)
    coeffs = config.get("coefficients", {})
    if not isinstance(coeffs, dict):
        raise UsageError("coefficients must be a mapping")
    for key, value in coeffs.items():
        apply(key, value)
    extras = {
        "out": config.get("out"),
        "grid": config.get("grid"),
        "threads": int(config.get("threads", 1)),
    }
    return name, int(config["seed"]), params, extras


def _run_sweep(name: str, params: dict, seed: int, grid: dict, threads: int):
    exp = get_experiment(name)
    if exp.kind not in ("verify-ito", "verify-wentzell", "verify-brownian", "verify-factor"):
        raise UsageError("sweep needs a verification experiment")
    if not isinstance(grid, dict) or not grid:
        raise UsageError("sweep needs a nonempty grid mapping")
    unknown = set(grid) - {"n", "N", "M"}
    if unknown:
        raise UsageError(f"unknown grid keys: {sorted(unknown)}")
    ns = [int(v) for v in grid.get("n", [params["n"]])]
    big_ns = [int(v) for v in grid.get("N", [params["N"]])]
    ms = [int(v) for v in grid.get("M", [params["M"]])]
    cells = [(n, bn, m) for bn in big_ns for m in ms for n in ns]

    def run_cell(n, bn, m, rng):
        cell_params = dict(params, n=n, N=bn, M=m)
        out = exp.runner(cell_params, rng)
        return SimpleNamespace(aggregate=out.report["aggregate"])

    table = convergence_sweep(run_cell, cells, RngStream(seed, 0), threads=threads)
    header = ["n", "N", "M", "mean_abs_residual", "stderr", "ratio", "ratio_flag"]
    rows = []
    for r in table.rows:
        flag = "" if r.ratio_ok is None else ("ok" if r.ratio_ok else "out-of-band")
        ratio = r.ratio_vs_coarser if r.ratio_vs_coarser is not None else ""
        rows.append([r.n, r.N, r.M, r.mean_abs_residual, r.stderr, ratio, flag])
    passed = table.flagged_ok()
    report = {"experiment": name, "mode": "sweep", "passed": passed}
    return passed, report, {"sweep.csv": (header, rows)}


def run(config: dict, out_dir: str | Path | None = None, write: bool = True):
    """Execute a config; returns (exit_code, payloads) with file contents.

    ``payloads`` maps file names to their exact text, so callers can
    check reproducibility without touching the filesystem.
    """
    name, seed, params, extras = resolve_params(config)
    rng = RngStream(seed, 0)
    if extras["grid"] is not None:
        passed, report, tables = _run_sweep(name, params, seed, extras["grid"], extras["threads"])
    else:
        out = get_experiment(name).runner(params, rng)
        passed, report, tables = out.passed, out.report, out.tables
    manifest = {
        "version": __version__,
        "config": config,
        "resolved_params": params,
        "streams": {"root": rng.key()},
        "outputs": sorted(["report.json", *tables.keys(), "manifest.json"]),
        "passed": passed,
    }
    payloads = {"report.json": json_text(report)}
    for fname, (header, rows) in tables.items():
        payloads[fname] = csv_text(header, rows)
    payloads["manifest.json"] = json_text(manifest)
    if write:
        target = Path(out_dir or extras["out"] or Path("out") / name)
        target.mkdir(parents=True, exist_ok=True)
        for fname, text in payloads.items():
            (target / fname).write_text(text)
    return (0 if passed else FAILURE_EXIT), payloads


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in [*sorted(_SUBCOMMAND_DEFAULTS), "sweep"]:
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--threads", type=int, default=None)
    sub.add_parser("list")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "list":
        for name in list_registry():
            print(name)
        return 0
    try:
        if args.config is not None:
            config = load_config(args.config)
        else:
            if args.command == "sweep":
                raise UsageError("sweep requires --config with a grid")
            config = {"experiment": _SUBCOMMAND_DEFAULTS[args.command]}
        if args.seed is not None:
            config["seed"] = args.seed
        if args.out is not None:
            config["out"] = args.out
        if args.threads is not None:
            config["threads"] = args.threads
        name, _, _, _ = resolve_params(config)
        expected_kind = None if args.command == "sweep" else args.command
        if expected_kind is not None and get_experiment(name).kind != expected_kind:
            raise UsageError(
                f"experiment {name!r} belongs to subcommand {get_experiment(name).kind!r}"
            )
        if args.command == "sweep" and config.get("grid") is None:
            raise UsageError("sweep requires a grid in the config")
        code, _ = run(config)
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
