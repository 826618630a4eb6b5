"""Command line entry point: ``ethsim {validate,run,tree,oracle,regimes}``.

Exit codes: 0 success, 2 validation failure, 3 numerical-invariant failure,
4 resource cap, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import EthsimError, InvariantError, ScenarioError
from .harness import (
    bundled_scenarios,
    build,
    expected_statistics,
    oracle_compare,
    parse_scenario,
    run_ensemble,
    run_regimes,
    sidecar_path,
    tree_check,
)

ORACLE_TOL = 1e-9
CONSISTENCY_TOL = 1e-10


def _scenario_paths(args) -> list[Path]:
    if args.scenario:
        return [Path(p) for p in args.scenario]
    return bundled_scenarios()


def cmd_validate(args) -> int:
    status = 0
    for path in _scenario_paths(args):
        try:
            sc = parse_scenario(path)
        except ScenarioError as exc:
            status = 2
            print(f"INVALID {path}")
            for e in exc.errors:
                print(f"  {e}")
            continue
        print(f"OK {path} ({sc.name}: N={sc.N} M={sc.M} steps={sc.steps} trials={sc.trials})")
    return status


def cmd_run(args) -> int:
    sc = parse_scenario(args.scenario[0]).with_overrides(seed=args.seed, trials=args.trials)
    res = run_ensemble(sc, args.out, threads=args.threads)
    stats = res.report["statistics"]
    print(f"{sc.name}: {stats['trajectories']} trajectories x {stats['steps']} steps -> {res.out_dir}")
    print(f"max mixture residual {stats['max_mixture_residual']:.3e}")
    if "strong_coupling" in stats:
        print(f"max TV distance {stats['strong_coupling']['max_tv_distance']:.4f}")
    if "detector" in stats:
        d = stats["detector"]
        print(f"clicks {d['clicked']}/{d['n']}, median click time {d['median_click_time']}")
    return 0


def cmd_tree(args) -> int:
    sc = parse_scenario(args.scenario[0])
    res = tree_check(build(sc), args.depth, args.prune)
    tree = res["tree"]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tree.json").write_text(json.dumps(tree.to_json(), indent=2) + "\n", encoding="utf-8")
    print(f"{sc.name}: depth {args.depth}, {len(tree.nodes)} nodes, {res['leaves']} leaves")
    print(f"consistency violation: {res['consistency_violation']:.3e}")
    print(f"mass balance residual: {res['mass_balance']:.3e}")
    if res["oracle_max_diff"] is not None:
        print(f"path product vs oracle max diff: {res['oracle_max_diff']:.3e}")
    if res["consistency_violation"] > CONSISTENCY_TOL:
        return 3
    if res["oracle_max_diff"] is not None and res["oracle_max_diff"] > ORACLE_TOL:
        return 3
    return 0


def cmd_oracle(args) -> int:
    worst = 0.0
    for path in _scenario_paths(args):
        sc = parse_scenario(path)
        b = build(sc)
        res = oracle_compare(b)
        worst = max(worst, res["max_diff"])
        print(f"{sc.name}: max diff {res['max_diff']:.3e} over {res['steps_checked']} steps")
        if args.write_sidecar:
            side = sidecar_path(path)
            side.write_text(json.dumps(expected_statistics(b), indent=2) + "\n", encoding="utf-8")
            print(f"  wrote {side}")
    print(f"maximum discrepancy: {worst:.3e}")
    return 0 if worst <= ORACLE_TOL else 3


def cmd_regimes(args) -> int:
    kw = {}
    if args.trials is not None:
        kw["strong_trials"] = args.trials
    s = run_regimes(args.out or "ethsim-out/regimes", seed=2024 if args.seed is None else args.seed, **kw)
    w, st, d = s["weak"], s["strong"], s["detector"]
    print(f"weak sweep: slope {w['slope']:.4f} ({'pass' if w['pass'] else 'FAIL'})")
    print(f"strong coupling: max TV {st['max_tv_distance']:.4f}, ambiguous {st['ambiguous']} ({'pass' if st['pass'] else 'FAIL'})")
    for r in d["runs"]:
        print(f"detector delta={r['delta']}: median click {r['median_click_time']}, clicks {r['clicks']}, dwell {r['dwell_fraction']}")
    print(f"detector median ratio {d['median_ratio']:.3f} ({'pass' if d['pass'] else 'FAIL'})")
    return 0 if s["pass"] else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ethsim", description="Collapse trajectories of an atom coupled to a field chain")
    p.add_argument("--version", action="version", version=f"ethsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, many=False):
        sp.add_argument("--scenario", action="append", required=not many, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed (u64)")
        sp.add_argument("--trials", type=int, default=None, help="override the number of trajectories")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.add_argument("--prune", type=float, default=None, help="history pruning threshold")
        sp.add_argument("--depth", type=int, default=3, help="history tree depth")

    sp = sub.add_parser("validate", help="validate scenario files (default: all bundled)")
    common(sp, many=True)
    sp.set_defaults(func=cmd_validate)
    sp = sub.add_parser("run", help="sample an ensemble and write log, report and CSVs")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("tree", help="enumerate histories and check consistency")
    common(sp)
    sp.set_defaults(func=cmd_tree)
    sp = sub.add_parser("oracle", help="compare Kraus chain with the dense tensor chain")
    common(sp, many=True)
    sp.add_argument("--write-sidecar", action="store_true", help="regenerate <scenario>.expected.json")
    sp.set_defaults(func=cmd_oracle)
    sp = sub.add_parser("regimes", help="weak sweep, strong-coupling comparison and detector experiment")
    common(sp, many=True)
    sp.set_defaults(func=cmd_regimes)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return exc.exit_code
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except EthsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
