import numpy as np
import pytest

from sessionmerge import se3
from sessionmerge.se3 import Pose
from sessionmerge.world_sim import (
    Patch,
    Scene,
    SessionSpec,
    corridor_loop_scene,
    error_covariances,
    generate_session,
    orthogonal_planes_scene,
    overlap_pair,
    raycast,
    scan,
    true_trajectory,
)

SCENE = corridor_loop_scene()
SHORT = [(2, 2, 1.5), (14, 2, 1.5)]


def _session_bytes(s):
    parts = []
    for smp, f in zip(s.samples, s.frames):
        parts += [np.float64(smp.timestamp).tobytes(), smp.pose.matrix().tobytes(), smp.covariance.tobytes(), f.tobytes()]
    return b"".join(parts)


def test_scene_validation():
    SCENE.validate()
    orthogonal_planes_scene().validate()
    with pytest.raises(ValueError):
        Scene([Patch((0, 0, 0), (1, 0, 0), (0, 1, 0))] * 3).validate()
    with pytest.raises(ValueError):
        Scene([Patch((0, 0, 0), (1, 0, 0), (1, 1, 0))] * 3).validate()


def test_empty_waypoints_rejected():
    with pytest.raises(ValueError):
        generate_session(SCENE, SessionSpec(waypoints=[]))


def test_trajectory_follows_waypoints_with_dwell():
    spec = SessionSpec(waypoints=[(0, 0, 0), (4, 0, 0, 3.0), (4, 4, 0)], speed=2.0, rate=2.0)
    t, poses = true_trajectory(spec)
    assert t[-1] == pytest.approx(2 + 3 + 2)
    pos = np.array([p.t for p in poses])
    still = (t >= 2) & (t <= 5)
    assert np.allclose(pos[still], [4, 0, 0])
    assert np.allclose(pos[-1], [4, 4, 0])


def test_determinism_bytes():
    spec = SessionSpec(waypoints=SHORT, drift_rot=1e-3, drift_trans=1e-2, seed=11)
    a = generate_session(SCENE, spec)
    b = generate_session(SCENE, spec)
    assert _session_bytes(a) == _session_bytes(b)
    c = generate_session(SCENE, SessionSpec(waypoints=SHORT, drift_rot=1e-3, drift_trans=1e-2, seed=12))
    assert _session_bytes(a) != _session_bytes(c)


def test_zero_drift_zero_noise_is_exact():
    spec = SessionSpec(waypoints=SHORT, point_noise=0.0, local_frame=False)
    s = generate_session(SCENE, spec)
    for smp in s.samples:
        assert np.allclose(smp.pose.matrix(), smp.true_pose.matrix(), atol=1e-12)


def test_local_frame_starts_at_identity():
    s = generate_session(SCENE, SessionSpec(waypoints=SHORT, drift_trans=0.01))
    assert np.allclose(s.samples[0].pose.matrix(), np.eye(4))
    assert np.allclose(s.origin.matrix(), s.samples[0].true_pose.matrix())


def test_scan_consistency():
    spec = SessionSpec(waypoints=SHORT)
    _, poses = true_trajectory(spec)
    for pose in poses[::6]:
        body = scan(SCENE, pose, spec, np.random.default_rng(0), noise=False)
        assert len(body) > 100
        world = pose.act(body)
        on = np.zeros(len(world), dtype=bool)
        for p in SCENE.patches:
            on |= p.contains(world, tol=1e-9)
        assert on.all()
        assert np.linalg.norm(body, axis=1).max() <= spec.scan_range + 1e-9


def test_raycast_first_hit_occludes():
    # Two parallel walls; rays along +x hit the nearer one only.
    sc = Scene([Patch((2, -1, -1), (0, 2, 0), (0, 0, 2)), Patch((3, -1, -1), (0, 2, 0), (0, 0, 2))])
    hits = raycast(sc, np.zeros(3), np.array([[1.0, 0, 0], [-1.0, 0, 0]]), 10.0)
    assert hits.shape == (1, 3)
    assert np.allclose(hits[0], [2, 0, 0])


def test_stationary_scans_repeat_points():
    spec = SessionSpec(waypoints=[(2, 2, 1.5, 2.0)], point_noise=0.0)
    s = generate_session(SCENE, spec)
    assert len(s) >= 3
    assert all(np.array_equal(s.frames[0], f) for f in s.frames[1:])


def test_error_covariance_grows():
    spec = SessionSpec(waypoints=[(2, 2, 1.5), (38, 2, 1.5), (38, 22, 1.5)], drift_rot=2e-3, drift_trans=5e-3, seed=5)
    s = generate_session(SCENE, spec)
    covs = error_covariances(s)
    tr = np.array([np.trace(c) for c in covs])
    assert np.all(np.diff(tr) >= -1e-12)
    # Loewner order: each increment is PSD.
    for a, b in zip(covs[:-1], covs[1:]):
        assert np.linalg.eigvalsh(b - a).min() > -1e-12
    for smp in s.samples:
        assert se3.is_psd(smp.covariance)


def test_drift_grows_with_path_length():
    errs = []
    for seed in range(6):
        spec = SessionSpec(waypoints=[(2, 2, 1.5), (38, 2, 1.5)], drift_rot=2e-3, drift_trans=5e-3, seed=seed, local_frame=False)
        s = generate_session(SCENE, spec)
        e = np.array([np.linalg.norm(x.pose.t - x.true_pose.t) for x in s.samples])
        errs.append(e)
    rms = np.sqrt(np.mean(np.square(errs), axis=0))
    n = len(rms)
    assert rms[-1] > rms[n // 2] > rms[n // 8]


def test_overlap_pair():
    spec_a = SessionSpec(waypoints=SHORT, seed=1, session_id=0)
    spec_b = SessionSpec(waypoints=[(10, 2, 1.5), (20, 2, 1.5)], seed=2, session_id=1)
    a, b, t0 = overlap_pair(SCENE, spec_a, spec_b)
    truth = se3.between(a.origin, b.origin)
    assert np.allclose(t0.matrix(), truth.matrix())
    _, _, t1 = overlap_pair(SCENE, spec_a, spec_b, init_rot=0.05, init_trans=0.5)
    d = se3.log(se3.between(truth, t1))
    assert np.linalg.norm(d[:3]) == pytest.approx(0.05, abs=1e-9)
    assert np.linalg.norm(t1.t - truth.t) == pytest.approx(0.5, rel=0.2)
    a2, b2, _ = overlap_pair(SCENE, spec_a, spec_a)
    assert _session_bytes(a2) == _session_bytes(b2)


def test_closest_points_matches_exhaustive_search():
    scene = corridor_loop_scene()
    rng = np.random.default_rng(2)
    surf = scene.sample(density_scale=0.05, seed=1)
    pts = np.vstack([surf + rng.normal(scale=0.05, size=surf.shape), rng.uniform([-3, -3, -3], [45, 28, 5], (200, 3))])
    fast = scene.closest_points(pts)
    exhaustive = scene.closest_points(pts, margin=np.inf)
    assert np.allclose(np.linalg.norm(pts - fast, axis=1), np.linalg.norm(pts - exhaustive, axis=1), atol=1e-12)
    assert scene.on_surface(fast, tol=1e-9).all()
