"""Command line entry point: ``wiclosure run | bench | inspect``.

Exit codes: 0 success, 1 stage failure, 2 configuration error, 3 trajectory
solver did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .pipeline import STAGES, StageError, check_stages, run_pipeline
from .pose_graph import ConvergenceError
from .sim_io import (ConfigError, ParseError, ScenarioConfig, TumTrajectory, ValidationError,
                     load_candidates, load_trajectory, save_candidates, save_clusters_csv,
                     save_realization, save_report, save_scenario, save_trajectories_csv,
                     save_trajectory, write_text)

log = logging.getLogger("wiclosure")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2, 3


def _load_config(args) -> ScenarioConfig:
    config = ScenarioConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.d_threshold is not None:
        overrides["d_threshold"] = args.d_threshold
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    if overrides:
        config = ScenarioConfig.from_dict({**config.to_dict(), **overrides})
    return config


def _stages(args):
    if args.stages is None:
        return STAGES
    try:
        return check_stages([s.strip() for s in args.stages.split(",") if s.strip()],
                            args.brute_force)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def persist(result, out: Path):
    """Write every artifact the completed stages produced."""
    data = result.data
    if data is None:
        return
    save_scenario(out / "scenario", data)
    if data.alpha.solved:
        for t in data.trajectories:
            save_trajectory(out / f"solved_{t.robot}.tum", TumTrajectory.from_poses(t.poses))
    if result.realization is not None:
        save_realization(out / "realization.json", result.realization)
    if result.shared is not None:
        save_trajectories_csv(out / "plots" / "trajectories.csv",
                              [(data.alpha.robot, data.alpha.positions),
                               (data.beta.robot, result.shared.beta_in_alpha())])
    if result.params is not None:
        save_clusters_csv(out / "clusters.csv", result.clusters)
        save_clusters_csv(out / "plots" / "clusters.csv", result.clusters)
    if result.candidates is not None:
        save_candidates(result.candidates, out / "candidates.csv")
        _save_gated_plot(out / "plots" / "gated_pairs.csv", result)
    if result.report is not None:
        save_report(result.report, out / "report.json")
        write_text(out / "timings.json",
                   json.dumps({k: float(v) for k, v in result.timings.items()},
                              indent=2, sort_keys=True) + "\n")


def _save_gated_plot(path, result):
    g = result.candidates
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p_index", "k_index", "ax", "ay", "az", "bx", "by", "bz"])
    if len(g):
        pa = result.data.alpha.positions[g.p_index]
        pb = result.shared.beta_in_alpha()[g.k_index]
        for p, k, a, b in zip(g.p_index, g.k_index, pa, pb):
            w.writerow([int(p), int(k), *(repr(float(v)) for v in (*a, *b))])
    write_text(path, buf.getvalue())


def _summary(result) -> str:
    rows = [("seed", result.config.seed)]
    if result.realization is not None:
        rows.append(("links in realization", len(result.realization)))
    if result.params is not None and result.params.sigma_ub is not None:
        rows.append(("sigma_ub [m]", f"{result.params.sigma_ub:.3f}"))
        rows.append(("clusters", len(result.clusters)))
    rep = result.report
    if rep is not None:
        rows += [("total pairs", rep.total_pairs), ("pairs evaluated", rep.pair_evaluations),
                 ("gated pairs", rep.gated_pairs), ("true positives", rep.true_positives),
                 ("false positives", rep.false_positives),
                 ("missed true", f"{rep.missed_true} of {rep.true_pairs}"),
                 ("rejection rate", f"{rep.rejection_rate:.4f}"),
                 ("miss rate", f"{rep.miss_rate:.4f}"),
                 ("ATE [m]", "n/a" if rep.ate is None else f"{rep.ate:.4f}")]
    rows += [(f"time {k} [s]", f"{v:.3f}") for k, v in result.timings.items()]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def cmd_run(args) -> int:
    config = _load_config(args)
    stages = _stages(args)
    result = run_pipeline(config, stages, brute_force=args.brute_force)
    if args.out:
        persist(result, Path(args.out))
    print(_summary(result))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise ConfigError("bench needs --repeats >= 3")
    config = _load_config(args)
    modes = [("clustered", False)]
    if args.compare_brute_force or args.brute_force:
        modes = [("brute_force", True)] + ([] if args.brute_force else modes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "stage", "median_s", "min_s", "max_s", "pair_evaluations",
                "total_pairs", "gated_pairs"])
    for name, brute in modes:
        times, evals, total, gated = {}, 0, 0, 0
        for _ in range(args.repeats):
            result = run_pipeline(config, brute_force=brute)
            for stage, t in result.timings.items():
                times.setdefault(stage, []).append(t)
            rep = result.report
            evals, total, gated = rep.pair_evaluations, rep.total_pairs, rep.gated_pairs
        for stage in [s for s in STAGES if s in times] + ["total"]:
            ts = (np.sum([times[s] for s in times], axis=0) if stage == "total"
                  else np.array(times[stage]))
            w.writerow([name, stage, repr(float(np.median(ts))), repr(float(ts.min())),
                        repr(float(ts.max())), evals, total, gated])
    text = buf.getvalue()
    if args.out:
        write_text(Path(args.out), text)
    print(text, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"no such artifact: {path}")
    suffix = path.suffix.lower()
    if suffix == ".json":
        print(json.dumps(json.loads(path.read_text()), indent=2, sort_keys=True))
    elif suffix == ".tum":
        traj = load_trajectory(path)
        print(f"{path}: {len(traj)} poses")
        if len(traj):
            lo, hi = traj.positions.min(axis=0), traj.positions.max(axis=0)
            print(f"  timestamps {traj.timestamps[0]!r} .. {traj.timestamps[-1]!r}")
            print(f"  bounds min {np.round(lo, 3).tolist()} max {np.round(hi, 3).tolist()}")
    elif path.name.startswith("candidates") and suffix == ".csv":
        rows = load_candidates(path)
        print(f"{path}: {len(rows)} gated pairs")
        for p, k, d, link in rows[: args.limit]:
            print(f"  p={p:5d} k={k:5d} d_mh={d:.4f} link={link}")
    elif suffix == ".csv":
        lines = path.read_text().splitlines()
        print(f"{path}: {max(len(lines) - 1, 0)} rows")
        for line in lines[: args.limit + 1]:
            print("  " + line)
    else:
        raise ConfigError(f"unknown artifact type: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wiclosure",
                                     description="Inter-robot loop-closure candidate search")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="scenario JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--d-threshold", type=float, help="gate threshold D")
        p.add_argument("--gamma", type=float, help="PCM consistency threshold")
        p.add_argument("--brute-force", action="store_true",
                       help="gate every pair (skip the overlap search)")

    run = sub.add_parser("run", help="run the pipeline and persist artifacts")
    common(run)
    run.add_argument("--out", help="output directory")
    run.add_argument("--stages", help=f"comma separated subset of {','.join(STAGES)}")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="time the pipeline stages")
    common(bench)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--compare-brute-force", action="store_true",
                       help="also time the all-pairs gate")
    bench.add_argument("--out", help="timing CSV path")
    bench.set_defaults(func=cmd_bench)

    inspect = sub.add_parser("inspect", help="pretty-print a persisted artifact")
    inspect.add_argument("path")
    inspect.add_argument("--limit", type=int, default=20)
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except StageError as exc:
        if isinstance(exc.cause, (ConfigError, ParseError, ValidationError)):
            print(f"config error in stage {exc.stage!r}: {exc.cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
