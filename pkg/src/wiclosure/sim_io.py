"""Scenario synthesis and file formats.

Random numbers come from NumPy's Philox4x32-10 counter-based generator
(``numpy.random.Philox``) seeded with ``ScenarioConfig.seed``; the seed is
echoed in every report.

File formats
------------
* TUM trajectories: ``timestamp tx ty tz qx qy qz qw`` per line, whitespace
  separated, ``#`` starts a comment.
* Scenario config: JSON object with the fields of :class:`ScenarioConfig`.
* Candidate set: CSV with header ``p_index,k_index,d_mh,route_link``.
* Report: JSON with sorted keys.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .factors import AoaMode, CommMeasurement, OdometryFactor, RangeFactor
from .lie import Pose, exp_map, yaw_of, yaw_rotation
from .pose_graph import Trajectory, dead_reckon


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


OFFPLANE_STD = 1e-4


@dataclass
class ScenarioConfig:
    """Everything needed to synthesise (and then process) one scenario.

    ``trajectories`` is a list of ``{"waypoints": [[x, y], ...]}`` or
    ``{"tum": "path/to/file.txt"}`` entries, one per robot. With a single
    entry and ``split >= 2`` the trajectory is cut into that many robots.
    Angles are in radians, distances in meters.
    """

    seed: int = 0
    trajectories: list = field(default_factory=list)
    split: int = 1
    step: float = 2.0
    odom_trans_std: float = 0.02
    odom_rot_std: float = 0.0005
    range_std: float = 0.5
    standard_gaussian: bool = False
    aoa_std: float = float(np.deg2rad(10.0))
    heading_std: Optional[float] = 0.1
    noise_free: bool = False
    comm_interval: float = 10.0
    comm_range: Optional[float] = None
    comm_pairing: str = "time"
    max_measurements: Optional[int] = None
    modes_per_measurement: int = 1
    multipath_offset_deg: tuple = (30.0, 150.0)
    missing_direct: int = 0
    true_lc_radius: float = 35.0
    sensor_range: float = 30.0
    d_threshold: float = float(np.sqrt(7.815))
    gamma: Optional[float] = None
    pcm_confidence: float = 0.99
    k_split: int = 2
    min_cluster: int = 16
    max_depth: int = 12
    z_prior_std: float = 0.5
    tilt_prior_std: float = 0.1

    def __post_init__(self):
        stds = [self.odom_trans_std, self.odom_rot_std, self.range_std, self.aoa_std]
        if self.heading_std is not None:
            stds.append(self.heading_std)
        if any(s <= 0 for s in stds):
            raise ConfigError("noise standard deviations must be positive "
                              "(use noise_free for exact measurements)")
        if self.d_threshold <= 0 or not 0 < self.pcm_confidence < 1:
            raise ConfigError("d_threshold must be positive and pcm_confidence in (0, 1)")
        if self.comm_pairing not in ("time", "nearest"):
            raise ConfigError("comm_pairing must be 'time' or 'nearest'")
        if self.step <= 0 or self.comm_interval <= 0:
            raise ConfigError("step and comm_interval must be positive")
        if self.modes_per_measurement < 1:
            raise ConfigError("need at least one AOA mode per measurement")
        lo, hi = self.multipath_offset_deg
        if not 0 < lo <= hi < 180:
            raise ConfigError("multipath offsets must lie in (0, 180) degrees")
        self.multipath_offset_deg = (float(lo), float(hi))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["multipath_offset_deg"] = list(self.multipath_offset_deg)
        return d

    def save(self, path):
        write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class ScenarioData:
    config: ScenarioConfig
    ground_truth: list
    trajectories: list
    measurements: list
    true_pairs: np.ndarray

    @property
    def alpha(self):
        return self.trajectories[0]

    @property
    def beta(self):
        return self.trajectories[1]


@dataclass
class TumTrajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    def poses(self):
        R = Rotation.from_quat(self.quaternions).as_matrix()
        return [Pose(r, t) for r, t in zip(R, self.positions)]

    @classmethod
    def from_poses(cls, poses, timestamps=None):
        n = len(poses)
        ts = np.arange(n, dtype=float) if timestamps is None else np.asarray(timestamps, float)
        q = Rotation.from_matrix(np.array([p.rotation for p in poses])).as_quat()
        return cls(ts, np.array([p.translation for p in poses]), q)


# ---------------------------------------------------------------------------
# I/O


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_trajectory(path, format="tum") -> TumTrajectory:
    if format != "tum":
        raise ValueError(f"unsupported trajectory format {format!r}")
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        fields = content.split()
        if len(fields) != 8:
            raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        qnorm = math.sqrt(sum(v * v for v in values[4:]))
        if abs(qnorm - 1.0) > 1e-3:
            raise ValidationError(f"{path}:{lineno}: quaternion norm {qnorm:.6f} is not unit")
        rows.append(values)
    data = np.array(rows, dtype=float).reshape(-1, 8)
    return TumTrajectory(data[:, 0], data[:, 1:4], data[:, 4:8])


def format_tum(traj: TumTrajectory) -> str:
    out = io.StringIO()
    out.write("# timestamp tx ty tz qx qy qz qw\n")
    for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        out.write(" ".join(repr(float(v)) for v in (ts, *p, *q)) + "\n")
    return out.getvalue()


def save_trajectory(path, traj: TumTrajectory):
    write_text(path, format_tum(traj))


def split_trajectory(traj: TumTrajectory, n: int) -> list:
    """Cut one trajectory into ``n`` consecutive segments (robots)."""
    if n < 1 or n > len(traj):
        raise ValueError("invalid number of segments")
    bounds = np.array_split(np.arange(len(traj)), n)
    return [TumTrajectory(traj.timestamps[b], traj.positions[b], traj.quaternions[b])
            for b in bounds]


def save_report(report, path):
    data = report.to_json() if hasattr(report, "to_json") else report
    write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_report(path):
    return json.loads(Path(path).read_text())


def candidates_csv(candidate_set) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["p_index", "k_index", "d_mh", "route_link"])
    for c in candidate_set.pairs:
        w.writerow([c.p_index, c.k_index, repr(float(c.d_mh)), c.route_link])
    return out.getvalue()


def save_candidates(candidate_set, path):
    write_text(path, candidates_csv(candidate_set))


def load_candidates(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["p_index"]), int(r["k_index"]), float(r["d_mh"]), int(r["route_link"]))
            for r in rows]


def measurement_to_json(m: CommMeasurement) -> dict:
    return {
        "id": m.id,
        "receiver": list(m.receiver),
        "transmitter": list(m.transmitter),
        "range": {"d": m.range.d, "sigma": m.range.sigma,
                  "standard_gaussian": m.range.standard_gaussian},
        "modes": [{"phi": md.phi, "kappa": md.kappa, "prior": md.prior} for md in m.modes],
        "truth_direct_index": m.truth_direct_index,
        "heading": m.heading,
        "heading_std": m.heading_std,
    }


def measurement_from_json(data: dict) -> CommMeasurement:
    try:
        rng = data["range"]
        receiver, transmitter = tuple(data["receiver"]), tuple(data["transmitter"])
        return CommMeasurement(
            id=int(data["id"]), receiver=receiver, transmitter=transmitter,
            range=RangeFactor(float(rng["d"]), float(rng["sigma"]),
                              endpoints=(receiver, transmitter),
                              standard_gaussian=bool(rng.get("standard_gaussian", False))),
            modes=tuple(AoaMode(float(md["phi"]), float(md["kappa"]), md.get("prior"))
                        for md in data["modes"]),
            truth_direct_index=data.get("truth_direct_index"),
            heading=data.get("heading"), heading_std=data.get("heading_std"))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed measurement record: {exc}") from exc


def save_measurements(path, measurements):
    data = [measurement_to_json(m) for m in measurements]
    write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_measurements(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    return [measurement_from_json(d) for d in data]


def save_realization(path, realization):
    write_text(path, json.dumps(realization.to_json(), indent=2, sort_keys=True) + "\n")


def save_scenario(outdir, data: "ScenarioData"):
    """Config, ground truth, dead-reckoned odometry and measurements of a scenario."""
    outdir = Path(outdir)
    data.config.save(outdir / "config.json")
    for gt, traj in zip(data.ground_truth, data.trajectories):
        save_trajectory(outdir / f"truth_{traj.robot}.tum", TumTrajectory.from_poses(gt))
        odo = dead_reckon(traj.odometry)
        save_trajectory(outdir / f"odometry_{traj.robot}.tum", TumTrajectory.from_poses(odo))
    save_measurements(outdir / "measurements.json", data.measurements)


def save_trajectories_csv(path, named_positions):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["robot", "index", "x", "y", "z"])
    for robot, pos in named_positions:
        for i, (x, y, z) in enumerate(pos):
            w.writerow([robot, i, repr(float(x)), repr(float(y)), repr(float(z))])
    write_text(path, out.getvalue())


def save_clusters_csv(path, clusters):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["cluster", "depth", "n_alpha", "n_beta",
                "min_x", "min_y", "min_z", "max_x", "max_y", "max_z"])
    for i, c in enumerate(clusters):
        w.writerow([i, c.depth, len(c.alpha), len(c.beta),
                    *(repr(float(v)) for v in c.box.min), *(repr(float(v)) for v in c.box.max)])
    write_text(path, out.getvalue())


# ---------------------------------------------------------------------------
# synthesis


def resample_polyline(waypoints, step: float) -> list:
    """Poses every ``step`` meters along a 2-D polyline, heading along travel."""
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] not in (2, 3):
        raise ConfigError("waypoints need at least two 2-D points")
    pts = pts[:, :2]
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 0
    seg, seg_len, starts = seg[keep], seg_len[keep], pts[:-1][keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.arange(0.0, cum[-1] + 1e-9, step)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    xy = starts[idx] + seg[idx] * frac[:, None]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return [Pose.planar(x, y, th) for (x, y), th in zip(xy, yaw)]


def _ground_truth(config: ScenarioConfig) -> list:
    robots = []
    for entry in config.trajectories:
        if "waypoints" in entry:
            robots.append(resample_polyline(entry["waypoints"], config.step))
        elif "tum" in entry:
            robots.append(load_trajectory(entry["tum"]).poses())
        else:
            raise ConfigError(f"trajectory entry needs 'waypoints' or 'tum': {entry}")
    if len(robots) == 1 and config.split >= 2:
        poses = robots[0]
        robots = [[poses[i] for i in b]
                  for b in np.array_split(np.arange(len(poses)), config.split)]
    if len(robots) < 2:
        raise ConfigError("a scenario needs two robots")
    if any(len(r) < 2 for r in robots):
        raise ConfigError("every robot needs at least two poses")
    return robots


def _odometry_chain(truth, config, rng, name):
    n_off = OFFPLANE_STD
    noise = np.diag([n_off**2, n_off**2, config.odom_rot_std**2,
                     config.odom_trans_std**2, config.odom_trans_std**2, n_off**2])
    factors = []
    for i in range(len(truth) - 1):
        step = truth[i].inverse() @ truth[i + 1]
        draw = rng.normal(size=3)
        if not config.noise_free:
            xi = np.array([0.0, 0.0, config.odom_rot_std * draw[0],
                           config.odom_trans_std * draw[1], config.odom_trans_std * draw[2], 0.0])
            step = step @ exp_map(xi)
        factors.append(OdometryFactor(i, i + 1, step, noise))
    return Trajectory(name, dead_reckon(factors), factors)


def _comm_measurements(gt_a, gt_b, config, rng):
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(
        np.diff([p.translation for p in gt_a], axis=0), axis=1))])
    total = arc[-1]
    if total < config.comm_interval:
        raise ConfigError("trajectory shorter than the communication interval")
    kappa = 1.0 / config.aoa_std**2
    lo, hi = np.deg2rad(config.multipath_offset_deg)
    marks = np.arange(config.comm_interval, total + 1e-9, config.comm_interval)
    pos_b = np.array([p.translation for p in gt_b])
    candidates = []
    for s in marks:
        i = int(np.searchsorted(arc, s - 1e-9))
        if config.comm_pairing == "nearest":
            j = int(np.argmin(np.linalg.norm(pos_b - gt_a[i].translation, axis=1)))
        else:
            j = int(round(i * (len(gt_b) - 1) / (len(gt_a) - 1)))
        rel = gt_a[i].inverse() @ gt_b[j]
        d = float(np.linalg.norm(rel.translation))
        if d < 1e-6 or (config.comm_range is not None and d > config.comm_range):
            continue
        candidates.append((i, j, rel))
    if config.max_measurements is not None:
        candidates = candidates[:config.max_measurements]
    n = len(candidates)
    n_missing = min(config.missing_direct, n)
    missing = set(rng.choice(n, size=n_missing, replace=False).tolist()) if n_missing else set()

    out = []
    for mid, (i, j, rel) in enumerate(candidates):
        x = rel.translation
        d_true = float(np.linalg.norm(x))
        bearing = float(np.arctan2(x[1], x[0]))
        draws = rng.normal(size=3)
        if config.noise_free:
            draws[:] = 0.0
        d = max(d_true + config.range_std * draws[0], 1e-3)
        phi = bearing + config.aoa_std * draws[1]
        k = config.modes_per_measurement
        offsets = rng.uniform(lo, hi, size=k) * rng.choice([-1.0, 1.0], size=k)
        if mid in missing:
            direct = None
            phis = bearing + offsets
        else:
            direct = int(rng.integers(k))
            phis = bearing + offsets
            phis[direct] = phi
        phis = (phis + np.pi) % (2 * np.pi) - np.pi
        heading = heading_std = None
        if config.heading_std is not None:
            heading = yaw_of(rel.rotation) + config.heading_std * draws[2]
            heading_std = config.heading_std
        modes = tuple(AoaMode(float(p), kappa) for p in phis)
        out.append(CommMeasurement(
            id=mid, receiver=("alpha", i), transmitter=("beta", j),
            range=RangeFactor(d, config.range_std, endpoints=(("alpha", i), ("beta", j)),
                              standard_gaussian=config.standard_gaussian),
            modes=modes, truth_direct_index=direct, heading=heading, heading_std=heading_std))
    return out


def true_pair_matrix(gt_a, gt_b, radius) -> np.ndarray:
    pa = np.array([p.translation for p in gt_a])
    pb = np.array([p.translation for p in gt_b])
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return d2 <= radius**2


def synthesize(config: ScenarioConfig) -> ScenarioData:
    rng = np.random.Generator(np.random.Philox(config.seed))
    truth = _ground_truth(config)[:2]
    trajs = [_odometry_chain(gt, config, rng, name)
             for gt, name in zip(truth, ("alpha", "beta"))]
    measurements = _comm_measurements(truth[0], truth[1], config, rng)
    true_pairs = true_pair_matrix(truth[0], truth[1], config.true_lc_radius)
    return ScenarioData(config, truth, trajs, measurements, true_pairs)


# ---------------------------------------------------------------------------
# bundled scenario shapes


def crossing_waypoints(rng, n_alpha, n_beta, step):
    """Two wiggly paths that cross each other near the origin."""
    def wiggle(n, heading, offset):
        length = (n - 1) * step
        s = np.linspace(-length / 2, length / 2, 60)
        amp = rng.uniform(5.0, 25.0)
        freq = rng.uniform(0.5, 2.0) * 2 * np.pi / length
        phase = rng.uniform(0, 2 * np.pi)
        lateral = amp * np.sin(freq * s + phase) + offset
        pts = np.stack([s, lateral], axis=1)
        # arc length of the wiggle exceeds its chord; rescale so pose count ~ n
        arc = np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
        pts *= length / arc
        c, si = np.cos(heading), np.sin(heading)
        return (pts @ np.array([[c, si], [-si, c]])).tolist()

    angle = rng.uniform(np.deg2rad(40), np.deg2rad(140))
    return [{"waypoints": wiggle(n_alpha, 0.0, rng.uniform(-10, 10))},
            {"waypoints": wiggle(n_beta, angle, rng.uniform(-10, 10))}]


def crossing_config(seed: int, n_alpha: Optional[int] = None, n_beta: Optional[int] = None,
                    **overrides) -> ScenarioConfig:
    rng = np.random.default_rng(seed)
    n_alpha = n_alpha or int(rng.integers(200, 501))
    n_beta = n_beta or int(rng.integers(200, 501))
    step = overrides.pop("step", 2.0)
    params = dict(seed=seed, trajectories=crossing_waypoints(rng, n_alpha, n_beta, step),
                  step=step, comm_interval=20.0, comm_range=60.0, heading_std=0.02,
                  tilt_prior_std=0.003, true_lc_radius=10.0, sensor_range=10.0)
    params.update(overrides)
    return ScenarioConfig(**params)


def city_waypoints(seed: int, length: float = 3000.0, block: float = 80.0,
                   width: int = 6, height: int = 5):
    """Random drive on a street grid that revisits streets, KITTI-08 style."""
    rng = np.random.default_rng(seed)
    node = np.array([0, 0])
    heading = np.array([1, 0])
    pts = [node * block]
    travelled = 0.0
    while travelled < length:
        options = []
        for h in (heading, np.array([-heading[1], heading[0]]), np.array([heading[1], -heading[0]])):
            nxt = node + h
            if 0 <= nxt[0] <= width and 0 <= nxt[1] <= height:
                options.append(h)
        if not options:
            options = [-heading]
        weights = np.array([3.0] + [1.0] * (len(options) - 1))[:len(options)]
        heading = options[rng.choice(len(options), p=weights / weights.sum())]
        node = node + heading
        pts.append(node * block)
        travelled += block
    return np.array(pts, dtype=float).tolist()


def city_config(seed: int, length: float = 4000.0, block: float = 100.0, width: int = 8,
                height: int = 6, **overrides) -> ScenarioConfig:
    """KITTI-shaped run: one long street-grid drive split into two robots."""
    params = dict(seed=seed, trajectories=[{"waypoints": city_waypoints(seed, length, block,
                                                                        width, height)}],
                  split=2, step=3.0, odom_rot_std=1e-4, comm_interval=30.0, comm_range=50.0,
                  comm_pairing="nearest", heading_std=0.02, tilt_prior_std=0.003,
                  true_lc_radius=35.0, sensor_range=35.0)
    params.update(overrides)
    return ScenarioConfig(**params)


def hardware_config(seed: int, **overrides) -> ScenarioConfig:
    """Shell-space analog: 25 m x 23 m field, 4 links x 5 modes, one link without a direct path."""
    alpha = [[2, 2], [22, 2], [22, 20], [3, 20], [3, 5], [18, 5], [18, 16]]
    beta = [[23, 21], [4, 21], [4, 3], [21, 3], [21, 18], [7, 18], [7, 8]]
    params = dict(seed=seed, trajectories=[{"waypoints": alpha}, {"waypoints": beta}],
                  step=0.5, odom_trans_std=0.01, odom_rot_std=0.002,
                  comm_interval=10.0, max_measurements=4, modes_per_measurement=5,
                  missing_direct=1, true_lc_radius=10.0, sensor_range=10.0)
    params.update(overrides)
    return ScenarioConfig(**params)
