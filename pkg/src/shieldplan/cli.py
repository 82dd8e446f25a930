"""Command-line front end.

Exit codes: 0 success, 1 configuration or cache error, 2 runtime failure,
3 safety violation in any trial.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import cache
from .config import SCENARIOS, Config, load_config, save_config
from .reachability import CertificateError, SafetyCertificate, certificate_from_config
from .sim import (Caches, benchmark, build_table, format_report, load_caches, load_table,
                  make_planner, run_trial, stream, tune_baseline_weight, write_benchmark)
from .smpc import PLANNERS

log = logging.getLogger("shieldplan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_UNSAFE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _parse_set(items) -> dict:
    """``section.key=value`` pairs into a nested dict; values parse as JSON when possible."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def _config(args) -> Config:
    try:
        cfg = load_config(args.config, args.scenario, _parse_set(args.set))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg.sim.steps < 0:
        raise ConfigError("sim.steps must be nonnegative")
    if cfg.sim.human_source == "replay" and not cfg.sim.replay_path:
        raise ConfigError("human source 'replay' needs sim.replay_path")
    return cfg


def _caches(cfg: Config, args) -> Caches:
    """Explicit cache files when given, else the cache directory (built on demand)."""
    directory = cache.cache_dir(args.cache_dir)
    if not (args.safeset or args.qmdp or args.qmdp_agnostic):
        return load_caches(cfg, directory, build=not args.no_build)
    if not (args.safeset and args.qmdp and args.qmdp_agnostic):
        raise ConfigError("--safeset, --qmdp and --qmdp-agnostic must be given together")
    cert = SafetyCertificate.load(args.safeset, cfg.certificate_hash())
    return Caches(cert, load_table(cfg, cert, args.qmdp, True),
                  load_table(cfg, cert, args.qmdp_agnostic, False))


def _write_effective(cfg: Config, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "effective-config.json")


# ---------------------------------------------------------------------------
# commands

def cmd_compute_safeset(args) -> int:
    cfg = _config(args)
    out = args.out or (cache.cache_dir(args.cache_dir) / f"safeset-{cfg.certificate_hash()}")
    t0 = time.perf_counter()
    cert = certificate_from_config(cfg)
    cert.save(out)
    frac = float(np.mean(cert.values >= cert.margin))
    print(f"safe set: {cert.iterations} sweeps, residual {cert.residual:.2e}, "
          f"{100 * frac:.1f}% of grid safe, {time.perf_counter() - t0:.1f}s -> {out}")
    return EXIT_OK


def cmd_compute_qmdp(args) -> int:
    cfg = _config(args)
    directory = cache.cache_dir(args.cache_dir)
    src = args.safeset or (directory / f"safeset-{cfg.certificate_hash()}")
    cert = SafetyCertificate.load(src, cfg.certificate_hash())
    aware = not args.agnostic
    tag = "aware" if aware else "agnostic"
    out = args.out or (directory / f"qmdp-{tag}-{cfg.qmdp_hash()}")
    t0 = time.perf_counter()
    table = build_table(cfg, cert, aware)
    table.save(out)
    print(f"qmdp table ({tag}): horizon {table.horizon}, {time.perf_counter() - t0:.1f}s -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.planner:
        cfg.sim.planner = args.planner
    if args.seed is not None:
        cfg.sim.seed = args.seed
    if args.steps is not None:
        cfg.sim.steps = args.steps
    if cfg.sim.planner not in PLANNERS:
        raise ConfigError(f"unknown planner {cfg.sim.planner!r}; choose from {', '.join(PLANNERS)}")
    caches = _caches(cfg, args)
    if cfg.sim.planner == "baseline":
        tune_baseline_weight(cfg, caches)
    trial = run_trial(cfg, caches)
    out = Path(args.out)
    _write_effective(cfg, out)
    trial.write(out)
    s = trial.summary
    freq = "n/a" if s["shielding_frequency"] is None else f"{s['shielding_frequency']:.1f}%"
    print(f"{s['planner']} seed {s['seed']}: J_cl {s['closed_loop_cost']:.3f}, shielding {freq}, "
          f"min margin {s['min_margin']:.3f}, violation {s['violation']}")
    return EXIT_UNSAFE if s["violation"] else EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    planners = [p.strip() for p in args.planners.split(",") if p.strip()]
    bad = [p for p in planners if p not in PLANNERS]
    if bad or not planners:
        raise ConfigError(f"unknown planner(s) {bad}; choose from {', '.join(PLANNERS)}")
    trials = args.trials if args.trials is not None else cfg.sim.trials
    seed = cfg.sim.seed if args.seed is None else args.seed
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    caches = _caches(cfg, args)
    jobs = args.jobs or os.cpu_count() or 1
    t0 = time.perf_counter()
    res = benchmark(cfg, caches, planners, trials, seed, jobs, cache.cache_dir(args.cache_dir))
    out = Path(args.out)
    _write_effective(cfg, out)
    write_benchmark(res, out)
    (out / "timing.json").write_text(json.dumps({"wall_s": time.perf_counter() - t0, "jobs": jobs}))
    print(format_report(res))
    return EXIT_UNSAFE if res["violations"] else EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.input)
    if (d / "summary.json").exists():
        print(format_report(json.loads((d / "summary.json").read_text())))
        return EXIT_OK
    if (d / "trial.json").exists():
        s = json.loads((d / "trial.json").read_text())
        for k in sorted(s):
            print(f"{k:<20} {s[k]}")
        return EXIT_UNSAFE if s.get("violation") else EXIT_OK
    raise ConfigError(f"{d} holds neither summary.json nor trial.json")


def cmd_dump_tree(args) -> int:
    cfg = _config(args)
    planner = args.planner or cfg.sim.planner
    if planner == "sharp-qmdp" or planner not in PLANNERS:
        raise ConfigError("dump-tree needs a tree-based planner (sharp-smpc, baseline or ablation)")
    caches = _caches(cfg, args)
    pl = make_planner(cfg, caches, planner)
    from .dynamics import AgentState, assemble_joint
    r, h = cfg.sim.robot, cfg.sim.human
    robot = AgentState(r.x, r.y, r.heading, r.speed)
    human = AgentState(h.x, h.y, h.heading, h.speed)
    x = assemble_joint(robot, human)
    b = np.full(len(pl.table.params), 1.0 / len(pl.table.params))
    seed = cfg.sim.seed if args.seed is None else args.seed
    tree = pl.build(x, b, human.vx, stream(seed, "tree"))
    text = tree.to_json(indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"tree: {tree.size} nodes, {len(tree.shield_nodes)} shielding nodes -> {args.out}")
    else:
        print(text)
    if args.qp_dump:
        from .smpc import assemble_qp
        qp = assemble_qp(tree, pl.cost, pl.table, pl._table_cert(), pl.box, pl.dt, pl.opts)
        qp.problem.dump(args.qp_dump)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shieldplan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, caches=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--scenario", choices=sorted(SCENARIOS))
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (JSON literal); repeatable")
        p.add_argument("--cache-dir", help="cache directory (default: $SHIELDPLAN_CACHE_DIR or ~/.cache/shieldplan)")
        if caches:
            p.add_argument("--safeset", help="certificate cache file")
            p.add_argument("--qmdp", help="shield-aware QMDP table cache file")
            p.add_argument("--qmdp-agnostic", help="shield-agnostic QMDP table cache file")
            p.add_argument("--no-build", action="store_true",
                           help="refuse to compute missing caches")

    p = sub.add_parser("compute-safeset", help="value-iterate and cache the safety certificate")
    common(p, caches=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compute_safeset)

    p = sub.add_parser("compute-qmdp", help="solve and cache a QMDP table")
    common(p, caches=False)
    p.add_argument("--safeset")
    p.add_argument("--out")
    p.add_argument("--agnostic", action="store_true", help="ignore the shield in the backup")
    p.set_defaults(func=cmd_compute_qmdp)

    p = sub.add_parser("simulate", help="run one closed-loop trial")
    common(p)
    p.add_argument("--planner", choices=PLANNERS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="paired trials over several planners")
    common(p)
    p.add_argument("--planners", default=",".join(PLANNERS))
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="print the metrics of a simulate/benchmark output")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-tree", help="emit the scenario tree of the first planning step")
    common(p)
    p.add_argument("--planner", choices=PLANNERS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--qp-dump", help="also write the assembled QP as sparse triplets")
    p.set_defaults(func=cmd_dump_tree)
    return ap


def run_cli(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, cache.StaleCacheError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CertificateError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
