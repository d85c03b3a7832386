"""Command-line pipeline: simulate, filter, merge, eval and report.

Every command is a pure function of its input files, config and seed, so
reruns write identical bytes. Exit codes: 0 success, 1 data error (for
example no keyframes or failed trajectory association), 2 usage or config
error, 3 ill-posed optimization, 4 I/O or file format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import se3, store
from .factor_graph import IllPosedError, format_edge_report
from .keyframe import format_decision_log, parse_decision_log
from .metrics import MetricError, MetricReport, Trajectory, accuracy, ate, chamfer, mme
from .pipeline import MODES, NEW, OLD, MergeResult, PipelineConfig, build_config, config_keys, format_config, merge_sessions, select_keyframes
from .session import OdometrySample, Session
from .world_sim import generate_session, perturbation

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_ILL_POSED, EXIT_IO = 0, 1, 2, 3, 4

SCENE_FILE = "scene.txt"
SPEC_FILE = "spec.txt"
TRUTH_CLOUD = "truth.ply"
MERGED_DIR = "merged"
# Surface samples per square metre (times patch density) for the truth cloud.
TRUTH_DENSITY = 4.0


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# config


def load_config(path: Optional[str], mode: Optional[str] = None, seed: Optional[int] = None) -> PipelineConfig:
    """Config file plus command-line overrides. Unknown keys and bad values
    are usage errors that name the file and line."""
    values: Dict[str, str] = {}
    if path is not None:
        kv = store.parse_kv(store.read_text(path), path)
        lines = kv.pop("__lines__")
        known = set(config_keys())
        for key, val in kv.items():
            if key not in known:
                raise UsageError(f"{path}:{lines[key]}: unknown config key {key!r}")
            values[key] = val
    if mode is not None:
        values["mode"] = mode
    if seed is not None:
        values["seed"] = str(seed)
    try:
        return build_config(values)
    except (KeyError, ValueError, TypeError) as exc:
        where = f"{path}: " if path else ""
        raise UsageError(f"{where}{exc}") from None


# commands


def cmd_simulate(args) -> int:
    scene = store.load_scene(args.scene)
    spec = store.load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    session = generate_session(scene, spec)
    out = Path(args.out)
    store.save_session(session, out)
    store.atomic_write(out / SCENE_FILE, store.format_scene(scene))
    store.atomic_write(out / SPEC_FILE, store.format_spec(spec))
    store.save_cloud(out / TRUTH_CLOUD, scene.sample(TRUTH_DENSITY, seed=spec.seed), comment="ground truth surface samples")
    print(f"simulated {len(session)} frames into {out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = load_config(args.config)
    session = store.load_session(args.session)
    session.keyframes = None
    kfs, records = select_keyframes(session, cfg.keyframe)
    session.keyframes = kfs
    out = Path(args.out)
    store.save_session(session, out)
    store.atomic_write(out / "decisions.log", format_decision_log(records))
    ratio = len(kfs) / max(len(session), 1)
    print(f"keyframes {len(kfs)}/{len(session)} ratio {ratio:.4f}")
    return EXIT_OK


def _load_old(path: str) -> Session:
    """A session directory, or the output of an earlier merge (its merged
    keyframe session), so that sessions can be chained."""
    p = Path(path)
    if (p / MERGED_DIR / store.MANIFEST).exists():
        p = p / MERGED_DIR
    return store.load_session(p)


def merged_session(old: Session, new: Session, res: MergeResult) -> Session:
    """Keyframes of both sessions under the optimized poses in the old
    frame, with marginal covariances, as one session.

    Session timestamps must increase, so new-session keyframes are shifted
    to start one second after the last old keyframe when the two overlap.
    """
    cov = res.graph.marginals()
    old_t = [res.timestamps[n] for n in res.nodes_of(OLD)]
    new_t = [res.timestamps[n] for n in res.nodes_of(NEW)]
    shift = max(old_t[-1] + 1.0 - new_t[0], 0.0)
    samples, frames = [], []
    for node in res.graph.nodes:
        src = old if node[0] == OLD else new
        s = src.samples[node[1]]
        t = s.timestamp + (shift if node[0] == NEW else 0.0)
        samples.append(OdometrySample(t, res.poses[node], cov[node], s.true_pose))
        frames.append(res.clouds[node])
    return Session(old.session_id, samples, frames, list(range(len(samples))), old.origin)


def _world_traj(res: MergeResult, side: int, initial: bool = False):
    nodes = res.nodes_of(side)
    src = res.initial if initial else res.poses
    return [res.timestamps[n] for n in nodes], [res.origin @ src[n] for n in nodes]


def _format_loops(res: MergeResult) -> str:
    lines = ["# i j fitness rms converged degenerate accepted"]
    for r in res.loops:
        i = "map" if r.i is None else f"{r.i[0]}:{r.i[1]}"
        lines.append(
            f"{i} {r.j[0]}:{r.j[1]} {r.fitness:.17g} {r.rms:.17g} {int(r.converged)} {int(r.degenerate)} {int(r.accepted)}"
        )
    return "\n".join(lines) + "\n"


def cmd_merge(args) -> int:
    cfg = load_config(args.config, args.mode, args.seed)
    old = _load_old(args.old)
    new = store.load_session(args.new)
    init = se3.between(old.origin, new.origin)
    if cfg.init_rot > 0 or cfg.init_trans > 0:
        init = init @ perturbation(cfg.init_rot, cfg.init_trans, np.random.default_rng(cfg.seed))
    res = merge_sessions(old, new, init, cfg)

    out = Path(args.out)
    store.save_graph(res.graph, out / "graph.g2o")
    store.save_cloud(out / "map.ply", res.origin.act(res.merged_cloud()), comment=f"merged map mode={cfg.mode}")
    store.save_trajectory(out / "trajectory.txt", *_world_traj(res, NEW))
    store.save_trajectory(out / "trajectory_old.txt", *_world_traj(res, OLD))
    store.save_trajectory(out / "trajectory_initial.txt", *_world_traj(res, NEW, initial=True))
    store.atomic_write(out / "decisions.log", format_decision_log(res.decisions))
    store.atomic_write(out / "loops.txt", _format_loops(res))
    store.atomic_write(out / "edges.txt", format_edge_report(res.graph.edge_error_report()))
    store.atomic_write(out / "config.txt", format_config(cfg))
    store.save_session(merged_session(old, new, res), out / MERGED_DIR)

    rep = res.report
    meta = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "old_keyframes": len(res.nodes_of(OLD)),
        "new_keyframes": len(res.nodes_of(NEW)),
        "loop_attempts": len(res.loops),
        "loops_accepted": res.accepted_loops,
        "factors": len(res.graph.factors),
        "initial_cost": rep.initial_cost,
        "final_cost": rep.final_cost,
        "iterations": rep.iterations,
        "converged": int(rep.converged),
        "condition": rep.condition,
    }
    try:
        meta["ate_initial"] = res.ate(initial=True)
        meta["ate_final"] = res.ate()
    except MetricError:
        pass
    store.atomic_write(out / "meta.txt", _format_meta(meta))
    print(
        f"{cfg.mode}: {meta['new_keyframes']} new keyframes, {res.accepted_loops}/{len(res.loops)} loops, "
        f"cost {rep.initial_cost:.6g} -> {rep.final_cost:.6g} in {rep.iterations} iterations"
    )
    return EXIT_OK


def _format_meta(meta: Dict[str, object]) -> str:
    lines = []
    for k, v in meta.items():
        lines.append(f"{k}={store.fmt(v)}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    est, truth = Path(args.estimate), Path(args.truth)
    for p in (est / args.trajectory, truth / store.MANIFEST):
        if not p.exists():
            raise FileNotFoundError(f"{p}: no such file")
    t_est, p_est = store.load_trajectory(est / args.trajectory)
    ref = store.load_session(truth, with_clouds=False)
    est_traj = Trajectory.from_poses(t_est, p_est)
    ref_traj = Trajectory.from_poses(ref.timestamps, [s.true_pose for s in ref.samples])
    report = MetricReport(ate_m=ate(est_traj, ref_traj, cfg.metrics))

    if (est / "map.ply").exists():
        cloud = store.load_cloud(est / "map.ply")
        if (truth / SCENE_FILE).exists():
            scene = store.load_scene(truth / SCENE_FILE)
            report.ac_m, report.inlier_fraction = accuracy(cloud, scene.closest_points(cloud), cfg.metrics)
        if (truth / TRUTH_CLOUD).exists():
            report.cd_m = chamfer(cloud, store.load_cloud(truth / TRUTH_CLOUD))
        try:
            report.mme, _ = mme(cloud, cfg.metrics)
        except MetricError as exc:
            print(f"sessionmerge: warning: mme not available: {exc}", file=sys.stderr)

    out = Path(args.out)
    store.save_report(report, out / "report.txt")
    if (est / "decisions.log").exists():
        records = parse_decision_log(store.read_text(est / "decisions.log"))
        lines = ["# frame d_w voxels keyframe"]
        lines += [f"{fid} {d_w:.17g} {voxels} {b}" for fid, d_w, b, _, voxels in records]
        store.atomic_write(out / "keyframes.txt", "\n".join(lines) + "\n")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        p = Path(path)
        if p.is_dir():
            p = p / "report.txt"
        rows.append((str(path), store.load_report(p)))
    text = format_report_table(rows)
    if args.out:
        store.atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


def format_report_table(rows: Sequence[tuple]) -> str:
    width = max([len("run")] + [len(name) for name, _ in rows])
    head = f"{'run':<{width}} {'ATE[m]':>12} {'AC[m]':>12} {'CD[m]':>12} {'MME':>12} {'inliers':>8}"
    lines = [head]
    for name, r in rows:
        lines.append(f"{name:<{width}} {r.ate_m:12.6f} {r.ac_m:12.6f} {r.cd_m:12.6f} {r.mme:12.6f} {r.inlier_fraction:8.4f}")
    return "\n".join(lines) + "\n"


# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sessionmerge", description="Multi-session map merging with pose-graph optimization.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one session from a scene and a trajectory spec")
    p.add_argument("scene")
    p.add_argument("spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="run the keyframe gate over a session")
    p.add_argument("session")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("merge", help="merge a new session into an old session or earlier merge")
    p.add_argument("old")
    p.add_argument("new")
    p.add_argument("--config")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score a merge output against a simulated session")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.add_argument("--config")
    p.add_argument("--trajectory", default="trajectory.txt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate metric reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def _fail(code: int, msg: str) -> int:
    print(f"sessionmerge: error: {msg}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except IllPosedError as exc:
        return _fail(EXIT_ILL_POSED, f"ill-posed optimization: {exc}")
    except (OSError, store.FormatError) as exc:
        return _fail(EXIT_IO, str(exc))
    except (DataError, MetricError, ValueError) as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
