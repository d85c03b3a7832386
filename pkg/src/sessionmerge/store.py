"""Line-oriented text formats for sessions, clouds, pose graphs, reports,
scenes and session specs.

Every number is written with 17 significant digits, so saving and loading is
exact for doubles. Parse errors raise :class:`FormatError` naming the file
and line. Writes go to a temporary sibling and are moved into place, so a
reader never sees a half-written file.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from . import se3
from .factor_graph import KINDS, LOOP, ODOMETRY, PRIOR, UPGO, Factor, PoseGraph
from .metrics import MetricError, MetricReport
from .se3 import Pose
from .session import OdometrySample, Session
from .world_sim import Patch, Scene, SessionSpec, corridor_loop_scene, orthogonal_planes_scene

PathLike = Union[str, Path]

MANIFEST = "manifest.txt"
CLOUD_DIR = "clouds"
QUAT_TOL = 1e-6
# Node ids (session, index) are flattened to one integer for g2o tooling.
NODE_STRIDE = 1_000_000
_IU = np.triu_indices(6)


class FormatError(ValueError):
    def __init__(self, path: PathLike, line: Optional[int], message: str):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _fmt_row(values) -> str:
    return " ".join(fmt(v) for v in values)


def atomic_write(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_text(path: PathLike) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


# pose and matrix packing


def pose_to_row(pose: Pose) -> List[float]:
    q = Rotation.from_matrix(pose.R).as_quat()
    if q[3] < 0:
        q = -q
    return list(pose.t) + list(q)


def row_to_pose(vals: Sequence[float], path: PathLike = "<text>", line: Optional[int] = None) -> Pose:
    t = np.asarray(vals[:3], dtype=float)
    q = np.asarray(vals[3:7], dtype=float)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > QUAT_TOL:
        raise FormatError(path, line, f"quaternion norm {norm:.9g} is not 1 within {QUAT_TOL:g}")
    return Pose(Rotation.from_quat(q / norm).as_matrix(), t)


def pack_upper(m: np.ndarray) -> np.ndarray:
    """21 upper-triangular entries of a symmetric 6x6 matrix, row-major."""
    return np.asarray(m, dtype=float)[_IU]


def unpack_upper(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (21,):
        raise ValueError("expected 21 upper-triangular entries")
    m = np.zeros((6, 6))
    m[_IU] = v
    return m + np.triu(m, 1).T


def _floats(tokens: Sequence[str], path: PathLike, line: int) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(path, line, f"bad number ({exc})") from None


# clouds


def format_ply(points: np.ndarray, comment: str = "") -> str:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    head = ["ply", "format ascii 1.0"]
    if comment:
        head.append(f"comment {comment}")
    head += [f"element vertex {len(pts)}", "property double x", "property double y", "property double z", "end_header"]
    body = "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts.tolist())
    return "\n".join(head) + "\n" + body


def save_cloud(path: PathLike, points: np.ndarray, comment: str = "") -> None:
    atomic_write(path, format_ply(points, comment))


def parse_ply(text: str, path: PathLike = "<text>") -> np.ndarray:
    lines = text.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise FormatError(path, 1, "missing 'ply' magic")
    count = None
    props: List[str] = []
    end = None
    for i, raw in enumerate(lines[1:], 2):
        tok = raw.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise FormatError(path, i, "only ASCII PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise FormatError(path, i, f"unsupported element {raw.strip()!r}")
            try:
                count = int(tok[2])
            except ValueError:
                raise FormatError(path, i, "bad vertex count") from None
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
        else:
            raise FormatError(path, i, f"unexpected header line {raw.strip()!r}")
    if end is None:
        raise FormatError(path, len(lines), "header has no end_header")
    if count is None or props != ["x", "y", "z"]:
        raise FormatError(path, end, "header must declare a vertex element with x y z properties")
    body = lines[end : end + count]
    if len(body) < count or (count and not body[-1].strip()):
        n_ok = sum(1 for b in body if b.strip())
        raise FormatError(path, end + n_ok + 1, f"truncated: expected {count} vertices, found {n_ok}")
    try:
        data = np.array(" ".join(body).split(), dtype=float)
    except ValueError:
        data = None
    if data is None or data.size != 3 * count:
        for k, b in enumerate(body):
            tok = b.split()
            if len(tok) != 3:
                raise FormatError(path, end + k + 1, f"expected 3 coordinates, got {len(tok)}")
            _floats(tok, path, end + k + 1)
    extra = [k for k, b in enumerate(lines[end + count :]) if b.strip()]
    if extra:
        raise FormatError(path, end + count + extra[0] + 1, "data after the declared vertices")
    return data.reshape(-1, 3)


def load_cloud(path: PathLike) -> np.ndarray:
    return parse_ply(read_text(path), path)


# sessions


def _cloud_name(k: int) -> str:
    return f"{CLOUD_DIR}/frame_{k:06d}.ply"


def format_manifest(session: Session) -> str:
    kf = None if session.keyframes is None else set(session.keyframes)
    lines = [
        "# session manifest",
        "# frame <timestamp> <cloud> <pose: t q> <21 covariance entries> <keyframe 1|0|-> <true pose: t q>",
        f"session_id={session.session_id}",
        f"frame_count={len(session)}",
        f"origin={_fmt_row(pose_to_row(session.origin))}",
        f"keyframes={'unset' if kf is None else 'set'}",
    ]
    for k, s in enumerate(session.samples):
        flag = "-" if kf is None else ("1" if k in kf else "0")
        lines.append(
            " ".join(
                [
                    "frame",
                    fmt(s.timestamp),
                    _cloud_name(k),
                    _fmt_row(pose_to_row(s.pose)),
                    _fmt_row(pack_upper(s.covariance)),
                    flag,
                    _fmt_row(pose_to_row(s.true_pose)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def save_session(session: Session, directory: PathLike) -> None:
    d = Path(directory)
    if len(session.frames) != len(session.samples):
        raise ValueError("session has a different number of frames and samples")
    for k, cloud in enumerate(session.frames):
        save_cloud(d / _cloud_name(k), cloud)
    atomic_write(d / MANIFEST, format_manifest(session))


def load_session(directory: PathLike, with_clouds: bool = True) -> Session:
    d = Path(directory)
    path = d / MANIFEST
    text = read_text(path)
    header: Dict[str, str] = {}
    rows: List[Tuple[int, List[str]]] = []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("frame "):
            rows.append((i, line.split()[1:]))
            continue
        key, sep, val = line.partition("=")
        if not sep or key not in ("session_id", "frame_count", "origin", "keyframes"):
            raise FormatError(path, i, f"unexpected line {line!r}")
        header[key] = val.strip()
    for key in ("session_id", "frame_count"):
        if key not in header:
            raise FormatError(path, None, f"missing {key}")
    try:
        sid, count = int(header["session_id"]), int(header["frame_count"])
    except ValueError:
        raise FormatError(path, None, "session_id and frame_count must be integers") from None
    if count != len(rows):
        raise FormatError(path, None, f"frame_count={count} but {len(rows)} frame rows")
    origin = row_to_pose(_floats(header.get("origin", "0 0 0 0 0 0 1").split(), path, 0), path)
    have_kf = header.get("keyframes", "unset") == "set"
    samples, frames, keyframes = [], [], []
    for k, (i, tok) in enumerate(rows):
        if len(tok) != 1 + 1 + 7 + 21 + 1 + 7:
            raise FormatError(path, i, f"expected 38 fields after 'frame', got {len(tok)}")
        t = _floats(tok[:1], path, i)[0]
        pose = row_to_pose(_floats(tok[2:9], path, i), path, i)
        cov = unpack_upper(_floats(tok[9:30], path, i))
        if not se3.is_psd(cov):
            raise FormatError(path, i, "covariance is not PSD")
        flag = tok[30]
        if flag not in (("0", "1") if have_kf else ("-",)):
            raise FormatError(path, i, f"bad keyframe flag {flag!r}")
        if flag == "1":
            keyframes.append(k)
        truth = row_to_pose(_floats(tok[31:38], path, i), path, i)
        samples.append(OdometrySample(t, pose, cov, truth))
        if with_clouds:
            frames.append(load_cloud(d / tok[1]))
    stamps = [s.timestamp for s in samples]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise FormatError(path, None, "timestamps must be strictly increasing")
    return Session(sid, samples, frames, keyframes if have_kf else None, origin)


# pose graphs


def node_to_int(node) -> int:
    s, i = node
    if not (0 <= i < NODE_STRIDE and s >= 0):
        raise ValueError(f"node {node} cannot be encoded")
    return s * NODE_STRIDE + i


def int_to_node(v: int):
    return (v // NODE_STRIDE, v % NODE_STRIDE)


def format_graph(graph: PoseGraph) -> str:
    """g2o-style text. Vertices are ``VERTEX_SE3:QUAT id t q``; factors are
    ``EDGE_SE3:QUAT i j t q info21`` and ``EDGE_SE3_PRIOR:QUAT i t q info21``
    followed by ``kind=...`` and optional ``source=...`` tags. Information
    entries use the [rotation | translation] tangent ordering."""
    lines = [f"# mode={graph.mode}"]
    for kind in KINDS:
        lines.append(f"# table {kind} {_fmt_row(graph.table[kind])}")
    for node, pose in graph.nodes.items():
        lines.append(f"VERTEX_SE3:QUAT {node_to_int(node)} {_fmt_row(pose_to_row(pose))}")
    for f in graph.factors:
        ids = " ".join(str(node_to_int(n)) for n in f.nodes)
        tag = "EDGE_SE3_PRIOR:QUAT" if f.kind == PRIOR else "EDGE_SE3:QUAT"
        tail = f" kind={f.kind}" + (f" source={f.source}" if f.source else "")
        lines.append(f"{tag} {ids} {_fmt_row(pose_to_row(f.measurement))} {_fmt_row(pack_upper(f.information))}{tail}")
    return "\n".join(lines) + "\n"


def save_graph(graph: PoseGraph, path: PathLike) -> None:
    atomic_write(path, format_graph(graph))


def parse_graph(text: str, path: PathLike = "<text>") -> PoseGraph:
    mode = UPGO
    table = {}
    body = []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("# mode="):
            mode = line.split("=", 1)[1].strip()
        elif line.startswith("# table "):
            tok = line.split()
            if len(tok) != 5 or tok[2] not in KINDS:
                raise FormatError(path, i, "bad noise table line")
            table[tok[2]] = tuple(_floats(tok[3:], path, i))
        elif line and not line.startswith("#"):
            body.append((i, line.split()))
    try:
        graph = PoseGraph(mode, table or None)
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None
    for i, tok in body:
        if tok[0] == "VERTEX_SE3:QUAT":
            if len(tok) != 9:
                raise FormatError(path, i, f"vertex needs 9 fields, got {len(tok)}")
            try:
                node = int_to_node(int(tok[1]))
                graph.add_node(node, row_to_pose(_floats(tok[2:], path, i), path, i))
            except ValueError as exc:
                raise FormatError(path, i, str(exc)) from None
            continue
        if tok[0] not in ("EDGE_SE3:QUAT", "EDGE_SE3_PRIOR:QUAT"):
            raise FormatError(path, i, f"unknown record {tok[0]!r}")
        arity = 1 if tok[0] == "EDGE_SE3_PRIOR:QUAT" else 2
        tags = dict(t.split("=", 1) for t in tok if "=" in t)
        nums = [t for t in tok[1:] if "=" not in t]
        if len(nums) != arity + 7 + 21:
            raise FormatError(path, i, f"edge needs {arity + 28} numeric fields, got {len(nums)}")
        try:
            nodes = tuple(int_to_node(int(v)) for v in nums[:arity])
        except ValueError:
            raise FormatError(path, i, "bad vertex id") from None
        for n in nodes:
            if n not in graph.nodes:
                raise FormatError(path, i, f"edge references undeclared vertex {node_to_int(n)}")
        kind = tags.get("kind", PRIOR if arity == 1 else ODOMETRY)
        if kind not in KINDS or (kind == PRIOR) != (arity == 1):
            raise FormatError(path, i, f"bad factor kind {kind!r}")
        z = row_to_pose(_floats(nums[arity : arity + 7], path, i), path, i)
        info = unpack_upper(_floats(nums[arity + 7 :], path, i))
        try:
            graph.add_factor(Factor.from_information(kind, nodes, z, info, tags.get("source", "")))
        except ValueError as exc:
            raise FormatError(path, i, str(exc)) from None
    return graph


def load_graph(path: PathLike) -> PoseGraph:
    return parse_graph(read_text(path), path)


# trajectories


def format_trajectory(timestamps: Sequence[float], poses: Sequence[Pose]) -> str:
    """TUM layout: ``t x y z qx qy qz qw`` per line."""
    lines = ["# t x y z qx qy qz qw"]
    lines += [_fmt_row([t] + pose_to_row(p)) for t, p in zip(timestamps, poses)]
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str, path: PathLike = "<text>") -> Tuple[np.ndarray, List[Pose]]:
    times, poses = [], []
    for i, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        tok = raw.split()
        if len(tok) != 8:
            raise FormatError(path, i, f"expected 8 fields, got {len(tok)}")
        v = _floats(tok, path, i)
        times.append(v[0])
        poses.append(row_to_pose(v[1:], path, i))
    return np.array(times), poses


def save_trajectory(path: PathLike, timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    atomic_write(path, format_trajectory(timestamps, poses))


def load_trajectory(path: PathLike) -> Tuple[np.ndarray, List[Pose]]:
    return parse_trajectory(read_text(path), path)


# reports


def save_report(report: MetricReport, path: PathLike) -> None:
    atomic_write(path, report.to_kv())


def load_report(path: PathLike) -> MetricReport:
    try:
        return MetricReport.from_kv(read_text(path))
    except MetricError as exc:
        raise FormatError(path, None, str(exc)) from None


# key=value files


def parse_kv(text: str, path: PathLike = "<text>", repeated: Sequence[str] = ()) -> Dict[str, object]:
    """``key=value`` lines; ``#`` starts a comment. Keys in ``repeated``
    collect a list of values, every other key may appear once."""
    out: Dict[str, object] = {k: [] for k in repeated}
    lineno: Dict[str, int] = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise FormatError(path, i, f"expected key=value, got {line!r}")
        if key in repeated:
            out[key].append((i, val))
        elif key in out:
            raise FormatError(path, i, f"duplicate key {key!r}")
        else:
            out[key] = val
            lineno[key] = i
    out["__lines__"] = lineno
    return out


def _coerce(value: str, like, path, line):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise FormatError(path, line, f"bad boolean {value!r}")
    try:
        return type(like)(value) if isinstance(like, (int, float, str)) else float(value)
    except ValueError:
        raise FormatError(path, line, f"bad value {value!r}") from None


SCENE_PRESETS = {"corridor_loop": corridor_loop_scene, "orthogonal_planes": orthogonal_planes_scene}


def parse_scene(text: str, path: PathLike = "<text>") -> Scene:
    """Scene file: ``patch cx cy cz ux uy uz vx vy vz density`` lines and/or
    one ``preset <name> [key=value ...]`` line."""
    patches: List[Patch] = []
    for i, raw in enumerate(text.splitlines(), 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "patch":
            if len(tok) != 11:
                raise FormatError(path, i, f"patch needs 10 numbers, got {len(tok) - 1}")
            v = _floats(tok[1:], path, i)
            patches.append(Patch(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9]))
        elif tok[0] == "preset":
            if len(tok) < 2 or tok[1] not in SCENE_PRESETS:
                raise FormatError(path, i, f"unknown preset; choose from {sorted(SCENE_PRESETS)}")
            kwargs = {}
            for t in tok[2:]:
                k, sep, v = t.partition("=")
                if not sep:
                    raise FormatError(path, i, f"expected key=value, got {t!r}")
                vals = _floats(v.split(","), path, i)
                kwargs[k] = tuple(vals) if len(vals) > 1 else vals[0]
            try:
                patches += SCENE_PRESETS[tok[1]](**kwargs).patches
            except TypeError as exc:
                raise FormatError(path, i, str(exc)) from None
        else:
            raise FormatError(path, i, f"unknown record {tok[0]!r}")
    scene = Scene(patches)
    try:
        scene.validate()
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None
    return scene


def load_scene(path: PathLike) -> Scene:
    return parse_scene(read_text(path), path)


def format_scene(scene: Scene) -> str:
    lines = ["# patch corner(3) u(3) v(3) density"]
    for p in scene.patches:
        lines.append("patch " + _fmt_row(list(p.corner) + list(p.u) + list(p.v) + [p.density]))
    return "\n".join(lines) + "\n"


def parse_spec(text: str, path: PathLike = "<text>") -> SessionSpec:
    """Session spec: ``key=value`` per :class:`SessionSpec` field, with one
    ``waypoint=x,y,z[,dwell]`` line per waypoint."""
    kv = parse_kv(text, path, repeated=("waypoint",))
    lines = kv.pop("__lines__")
    defaults = SessionSpec(waypoints=[])
    names = {f.name for f in fields(SessionSpec)} - {"waypoints"}
    args = {}
    for key, val in kv.items():
        if key == "waypoint":
            continue
        if key not in names:
            raise FormatError(path, lines[key], f"unknown key {key!r}")
        args[key] = _coerce(val, getattr(defaults, key), path, lines[key])
    wps = []
    for i, val in kv["waypoint"]:
        v = _floats(val.split(","), path, i)
        if len(v) not in (3, 4):
            raise FormatError(path, i, "waypoint needs x,y,z or x,y,z,dwell")
        wps.append(tuple(v))
    if not wps:
        raise FormatError(path, None, "spec has no waypoints")
    return SessionSpec(waypoints=wps, **args)


def load_spec(path: PathLike) -> SessionSpec:
    return parse_spec(read_text(path), path)


def format_spec(spec: SessionSpec) -> str:
    lines = []
    for f in fields(SessionSpec):
        v = getattr(spec, f.name)
        if f.name == "waypoints":
            lines += ["waypoint=" + ",".join(fmt(x) for x in w) for w in v]
        elif isinstance(v, bool):
            lines.append(f"{f.name}={'true' if v else 'false'}")
        elif isinstance(v, float):
            lines.append(f"{f.name}={fmt(v)}")
        else:
            lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
