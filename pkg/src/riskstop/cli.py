"""Command-line front end: ``riskstop {lower,upper,table1,oracle,simulate}``.

Exit codes are 0 on success, 1 for configuration errors and 2 when an
oracle check fails. Results go to ``output.dir``: a JSON document per run
and CSV rows written with shortest round-trip floats.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import oracle as _oracle
from .config import ConfigError, RunConfig
from .dual import upper_bound_search
from .market import GbmModel, dump_paths
from .primal import BoundEstimate, lower_bound_search

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2

RESULT_FIELDS = ["command", "family", "param", "value", "stderr", "n", "kappa_star", "x_star", "seed"]
TABLE_FIELDS = ["c", "lower", "lower_se", "upper", "upper_se"]

# flag -> (section, field, type)
_FLAGS = {
    "n_train": ("sampling", "n_train", int),
    "n_test": ("sampling", "n_test", int),
    "n_outer": ("sampling", "n_outer", int),
    "n_inner": ("sampling", "n_inner", int),
    "seed_train": ("sampling", "seed_train", int),
    "seed_test": ("sampling", "seed_test", int),
    "seed_outer": ("sampling", "seed_outer", int),
    "seed_inner": ("sampling", "seed_inner", int),
    "risk_family": ("risk", "family", str),
    "c": ("risk", "c", float),
    "alpha": ("risk", "alpha", float),
    "sigma": ("model", "sigma", float),
    "s0": ("model", "s0", float),
    "J": ("model", "J", int),
    "n_trees": ("oracle", "n_trees", int),
    "max_depth": ("oracle", "max_depth", int),
    "oracle_seed": ("oracle", "seed", int),
    "out_dir": ("output", "dir", str),
}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    for flag, (_, _, typ) in _FLAGS.items():
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
    common.add_argument("--threads", type=int, default=None, help="overrides RISKSTOP_THREADS")

    p = argparse.ArgumentParser(prog="riskstop", description="Bounds for optimal stopping under distorted expectations.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("lower", parents=[common], help="regression lower bound with family/level search")
    up = sub.add_parser("upper", parents=[common], help="nested-simulation upper bound at the primal argmax")
    up.add_argument("--anchor", help="JSON written by a previous 'lower' run")
    up.add_argument("--refine", action="store_true", help="also try four neighbouring levels")
    sub.add_parser("table1", parents=[common], help="lower and upper bounds for every c in table.c")
    orc = sub.add_parser("oracle", parents=[common], help="exact identities on random trees")
    orc.add_argument("--corrupt", action="store_true", help="perturb the dual martingale (negative test)")
    sim = sub.add_parser("simulate", parents=[common], help="dump simulated paths")
    sim.add_argument("--n-paths", dest="n_paths", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--format", dest="fmt", choices=("csv", "bin"), default=None)
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for flag, (section, name, _) in _FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(section, name, value)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- #
# output helpers
# --------------------------------------------------------------------------- #
def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _append_csv(path: Path, fields, row) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(fields)
        w.writerow([_fmt(row[f]) for f in fields])


def _result(command, cfg, est: BoundEstimate, seed, param=None) -> dict:
    arg = est.argmax or {}
    return {
        "command": command,
        "family": cfg.risk.family,
        "param": cfg.family_param() if param is None else param,
        "value": est.value,
        "stderr": est.stderr,
        "stderr_defined": est.stderr_defined,
        "n": est.n,
        "kappa_star": arg.get("param"),
        "x_star": arg.get("x"),
        "x_max": arg.get("x_max"),
        "seed": seed,
        "bias": est.bias_tag,
        "table": est.table,
    }


def _paths(cfg: RunConfig, which):
    model = GbmModel(cfg.model)
    s = cfg.sampling
    return [model.simulate(getattr(s, "n_" + w), getattr(s, "seed_" + w)) for w in which]


def _seeds(cfg):
    s = cfg.sampling
    return {k: getattr(s, k) for k in ("seed_train", "seed_test", "seed_outer", "seed_inner")}


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #
def run_lower(cfg: RunConfig, family=None, train=None, test=None) -> BoundEstimate:
    if train is None:
        train, test = _paths(cfg, ("train", "test"))
    return lower_bound_search(train, test, family or cfg.family(), cfg.search_config())


def run_upper(cfg: RunConfig, anchor, family=None, train=None, outer=None, refine=None) -> BoundEstimate:
    if train is None:
        train, outer = _paths(cfg, ("train", "outer"))
    s = cfg.sampling
    refine = cfg.search.refine if refine is None else refine
    return upper_bound_search(outer, train, family or cfg.family(), anchor, s.n_inner, s.seed_inner,
                              cfg.search_config(), refine=refine)


def cmd_lower(cfg: RunConfig) -> int:
    est = run_lower(cfg)
    res = _result("lower", cfg, est, cfg.sampling.seed_test)
    res["seeds"] = _seeds(cfg)
    _write_json(cfg.out_path("json"), res)
    _write_json(cfg.out_path("anchor"), res)
    _append_csv(cfg.out_path("csv"), RESULT_FIELDS, res)
    _report(res)
    return EXIT_OK


def _read_anchor(cfg: RunConfig, path) -> BoundEstimate:
    path = Path(path) if path else cfg.out_path("anchor")
    if not path.exists():
        raise ConfigError(f"anchor file {path} not found; run 'lower' first")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if raw.get("family") != cfg.risk.family or raw.get("param") != cfg.family_param():
        raise ConfigError(f"{path}: anchor is for {raw.get('family')}({raw.get('param')}), "
                          f"config asks for {cfg.risk.family}({cfg.family_param()})")
    if raw.get("seeds", {}).get("seed_train") != cfg.sampling.seed_train:
        raise ConfigError(f"{path}: anchor was trained with a different seed_train")
    if not raw.get("table"):
        raise ConfigError(f"{path}: anchor has no search table")
    return BoundEstimate(raw["value"], raw["stderr"], raw["n"], "low",
                         argmax={"param": raw["kappa_star"], "x": raw["x_star"], "x_max": raw.get("x_max")},
                         table=raw["table"])


def cmd_upper(cfg: RunConfig, anchor_path=None, refine=None) -> int:
    anchor = _read_anchor(cfg, anchor_path)
    est = run_upper(cfg, anchor, refine=refine)
    res = _result("upper", cfg, est, cfg.sampling.seed_outer)
    res["seeds"] = _seeds(cfg)
    res["n_inner"] = cfg.sampling.n_inner
    _write_json(cfg.out_path("json"), res)
    _append_csv(cfg.out_path("csv"), RESULT_FIELDS, res)
    _report(res)
    return EXIT_OK


def table1(cfg: RunConfig) -> list:
    """Lower and upper bound rows for every ``c`` in ``cfg.table.c``; paths are shared across rows."""
    if cfg.risk.family != "semidev":
        raise ConfigError("config.risk.family: table1 runs the semideviation family")
    train, test, outer = _paths(cfg, ("train", "test", "outer"))
    rows = []
    for c in cfg.table.c:
        fam = cfg.family(float(c))
        lo = run_lower(cfg, fam, train, test)
        up = run_upper(cfg, lo, fam, train, outer)
        rows.append({"c": float(c), "lower": lo.value, "lower_se": lo.stderr, "lower_n": lo.n,
                     "upper": up.value, "upper_se": up.stderr, "upper_n": up.n,
                     "kappa_star": lo.argmax["param"], "x_star": lo.argmax["x"],
                     "upper_kappa": up.argmax["param"], "upper_x": up.argmax["x"]})
    return rows


def format_table(rows) -> str:
    lines = [f"{'c':>5}  {'lower':>16}  {'upper':>16}", "-" * 41]
    for r in rows:
        lines.append(f"{r['c']:5.2f}  {r['lower']:8.3f} ({r['lower_se']:.3f})  {r['upper']:8.3f} ({r['upper_se']:.3f})")
    return "\n".join(lines)


def cmd_table1(cfg: RunConfig) -> int:
    rows = table1(cfg)
    path = Path(cfg.output.dir) / "table1.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in TABLE_FIELDS])
    _write_json(Path(cfg.output.dir) / "table1.json", {"rows": rows, "seeds": _seeds(cfg),
                                                       "n_inner": cfg.sampling.n_inner})
    print(format_table(rows))
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, corrupt: bool = False) -> int:
    o = cfg.oracle
    report = _oracle.run_battery(o.n_trees, tuple(o.families), o.max_depth, o.seed, corrupt=corrupt)
    _write_json(Path(cfg.output.dir) / "oracle.json", report)
    print(f"oracle: {report['n_cases']} cases, {report['n_failed']} failed checks")
    for t, fam, name in report["failed"][:20]:
        print(f"  FAIL tree={t} family={fam} check={name}")
    return EXIT_CHECK if report["n_failed"] else EXIT_OK


def cmd_simulate(cfg: RunConfig, n_paths=None, seed=None, fmt=None) -> int:
    fmt = fmt or cfg.output.paths_format
    n = n_paths or cfg.sampling.n_train
    seed = cfg.sampling.seed_train if seed is None else seed
    paths = GbmModel(cfg.model).simulate(n, seed)
    out = Path(cfg.output.dir) / f"paths.{fmt}"
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_paths(paths, out, fmt)
    print(f"wrote {n} paths to {out}")
    return EXIT_OK


def _report(res):
    flag = "" if res["stderr_defined"] else "  (stderr undefined for n=1, reported as 0)"
    print(f"{res['command']}: {res['value']:.4f} +/- {res['stderr']:.4f}  n={res['n']}  "
          f"kappa*={res['kappa_star']}  x*={res['x_star']}{flag}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        os.environ["RISKSTOP_THREADS"] = str(args.threads)
    try:
        cfg = load_config(args)
        if args.command == "lower":
            return cmd_lower(cfg)
        if args.command == "upper":
            return cmd_upper(cfg, args.anchor, args.refine or None)
        if args.command == "table1":
            return cmd_table1(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.corrupt)
        return cmd_simulate(cfg, args.n_paths, args.seed, args.fmt)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"riskstop: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # invalid parameter combinations surfaced by the numerical layers
        print(f"riskstop: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
