import numpy as np
import pytest

from sessionmerge import se3
from sessionmerge.gmm_map import VoxelMap, batch_stats, voxel_keys
from sessionmerge.keyframe import (
    KeyframeConfig,
    KeyframeSelector,
    decide,
    decide_radius,
    format_decision_log,
    parse_decision_log,
)
from sessionmerge.se3 import Pose
from sessionmerge.world_sim import SessionSpec, corridor_loop_scene, scan, true_trajectory

from scenarios import STATIONARY_L, literal_w2, stationary_mask, stationary_session

SCENE = corridor_loop_scene()


def corridor_frame(x=10.0, seed=0):
    spec = SessionSpec(waypoints=[(x, 2, 1.5)], scan_range=12.0)
    _, poses = true_trajectory(spec)
    return scan(SCENE, poses[0], spec, np.random.default_rng(seed)), poses[0]


def direct_map_w2(first, second, l, min_points=6):
    """Average W2 over voxels touched by ``second`` from scratch."""
    k1 = [tuple(k) for k in voxel_keys(first, l)]
    k2 = [tuple(k) for k in voxel_keys(second, l)]
    groups1, groups2 = {}, {}
    for k, p in zip(k1, first):
        groups1.setdefault(k, []).append(p)
    for k, p in zip(k2, second):
        groups2.setdefault(k, []).append(p)
    vals = []
    for k in sorted(groups2):
        a = np.array(groups1.get(k, []))
        b = np.vstack([a.reshape(-1, 3), np.array(groups2[k])])
        if len(a) >= min_points and len(b) >= min_points:
            m1, s1 = batch_stats(a)
            m2, s2 = batch_stats(b)
            vals.append(literal_w2(m1, s1, m2, s2))
    return float(np.mean(vals)) if vals else 0.0


def test_config_defaults_and_validation():
    cfg = KeyframeConfig()
    assert cfg.l == 5.0 and cfg.r_map == 800.0
    assert cfg.tau == pytest.approx(1.5)
    assert KeyframeConfig(l=4.0, tau=1.8, r_map=200.0).tau == 1.8
    for bad in (dict(tau=0.0), dict(l=-1.0), dict(l=5.0, r_map=4.0), dict(mode="nope")):
        with pytest.raises(ValueError):
            KeyframeConfig(**bad)


def test_first_frame_is_keyframe():
    f, pose = corridor_frame()
    d = decide(f, pose, VoxelMap(5.0), KeyframeConfig())
    assert d.b == 1 and d.d_w == 0.0 and d.touched > 0


def test_empty_frame():
    vm = VoxelMap(5.0)
    d = decide(np.zeros((0, 3)), Pose.identity(), vm, KeyframeConfig())
    assert d.b == 0 and d.d_w == 0.0 and len(vm) == 0


def test_identical_frame_reinserted_is_not_keyframe():
    f, pose = corridor_frame()
    cfg = KeyframeConfig()
    vm = VoxelMap(cfg.l, cfg.r_map)
    decide(f, pose, vm, cfg)
    d = decide(f, pose, vm, cfg)
    assert d.b == 0
    assert d.d_w < 1e-2 * cfg.tau


def test_decide_matches_direct_oracle_for_shifted_frame():
    f, pose = corridor_frame()
    for l in (2.0, 4.0, 5.0):
        cfg = KeyframeConfig(l=l)
        vm = VoxelMap(l, cfg.r_map)
        decide(f, pose, vm, cfg)
        moved = Pose(pose.R, pose.t + np.array([2 * cfg.tau, 0.0, 0.0]))
        d = decide(f, moved, vm, cfg)
        expect = direct_map_w2(pose.act(f), moved.act(f), l)
        assert d.d_w == pytest.approx(expect, rel=1e-9, abs=1e-12)
        assert d.b == int(d.d_w > cfg.tau)


def test_shift_by_two_tau_fires():
    # With a threshold small against the voxel, a 2*tau shift of an
    # already-mapped frame moves every touched Gaussian by about tau or more.
    f, pose = corridor_frame()
    for l in (2.0, 4.0):
        cfg = KeyframeConfig(l=l, tau=0.02 * l)
        vm = VoxelMap(l, cfg.r_map)
        decide(f, pose, vm, cfg)
        moved = Pose(pose.R, pose.t + np.array([2 * cfg.tau, 0.0, 0.0]))
        d = decide(f, moved, vm, cfg)
        assert d.b == 1
        assert d.d_w == pytest.approx(direct_map_w2(pose.act(f), moved.act(f), l), rel=1e-9)


def test_radius_mode():
    cfg = KeyframeConfig(d_t=0.1, d_r=0.1)
    p = Pose.identity()
    assert decide_radius(p, None, cfg).b == 1
    assert decide_radius(p, p, cfg).b == 0
    assert decide_radius(Pose.from_translation([0.2, 0, 0]), p, cfg).b == 1
    assert decide_radius(Pose(se3.so3_exp([0, 0, 0.05]), np.zeros(3)), p, cfg).b == 0
    assert decide_radius(Pose(se3.so3_exp([0, 0, 0.15]), np.zeros(3)), p, cfg).b == 1
    # Thresholds are strict.
    assert decide_radius(Pose.from_translation([0.1, 0, 0]), p, cfg).b == 0


def test_radius_selector_tracks_last_keyframe():
    sel = KeyframeSelector(KeyframeConfig(mode="radius", d_t=0.1))
    xs = [0.0, 0.05, 0.11, 0.15, 0.3]
    decs = [sel.push(np.zeros((0, 3)), Pose.from_translation([x, 0, 0])) for x in xs]
    assert [d.b for d in decs] == [1, 0, 1, 0, 1]


def _replay(session, cfg):
    sel = KeyframeSelector(cfg)
    sel.run(session.frames, [s.pose for s in session.samples])
    return sel


@pytest.mark.slow
def test_stationary_segment_is_quiet():
    s = stationary_session()
    sel = _replay(s, KeyframeConfig(l=STATIONARY_L))
    dw = np.array([r[1] for r in sel.records])
    b = np.array([r[2] for r in sel.records])
    still = stationary_mask(s)
    moving = ~still
    moving[0] = False
    assert still.sum() == 100
    assert dw[still].mean() < 0.1 * dw[moving].mean()
    assert b[still].sum() == 0


@pytest.mark.slow
def test_keyframe_ratio_monotone_in_tau_and_deterministic():
    s = stationary_session()
    taus = [0.02, 0.04, 0.06, 0.08, 0.12, 0.2, 1.2]
    ratios = []
    logs = []
    for tau in taus:
        sel = _replay(s, KeyframeConfig(l=STATIONARY_L, tau=tau))
        ratios.append(sel.keyframe_ratio)
        logs.append(sel.log_text())
    assert all(a >= b for a, b in zip(ratios[:-1], ratios[1:]))
    assert ratios[0] > ratios[-1]
    again = _replay(s, KeyframeConfig(l=STATIONARY_L, tau=taus[2]))
    assert again.log_text() == logs[2]


def test_decision_log_roundtrip():
    records = [(0, 0.0, 1, 10, 10), (1, 0.1234567890123456789, 0, 12, 11), (7, 1e-300, 1, 3, 4)]
    text = format_decision_log(records)
    assert parse_decision_log(text) == records
    with pytest.raises(ValueError, match="line 2"):
        parse_decision_log("# frame d_w b touched voxels\n1 2 3\n")
