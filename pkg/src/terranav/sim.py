"""Flight scenario simulation and closed-loop navigation runs.

The simulator renders optical flow directly from the terrain and the true
camera poses (no imagery), propagates a navigation state between vision fixes
either with a noisy INS model or with straight-line constant velocity, and
reports errors of the propagated-only and vision-corrected tracks.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from .errors import (
    ConfigurationError,
    DegenerateScenarioError,
    LoadError,
    TerranavError,
)
from .flow import FlowFeature, seed_regular_grid
from .geometry import (
    CameraIntrinsics,
    Pose,
    camera_ray_to_world,
    compose_second_pose,
    in_frame,
    nadir_attitude,
    pixel_to_ray,
    relative_motion,
    wrap_angle,
)
from .terrain import Dtm, TerrainSpec, generate_synthetic_dtm, load_ascii_grid, ray_intersect_many
from . import kernels

logger = logging.getLogger(__name__)

__all__ = [
    "InsNoiseModel",
    "ScenarioConfig",
    "TrajectorySample",
    "EpochRecord",
    "RunReport",
    "build_dtm",
    "generate_trajectory",
    "simulate_ins",
    "render_flow",
    "run_closed_loop",
    "load_scenario",
    "save_scenario",
    "write_report_csv",
    "read_report_csv",
    "write_tracks_csv",
    "read_tracks_csv",
    "REPORT_COLUMNS",
    "TRACK_COLUMNS",
]


@dataclass(frozen=True)
class InsNoiseModel:
    """Per-axis random-walk strengths: m/s per sqrt(s) and rad per sqrt(s)."""

    velocity_rw_std: float = 20.0
    attitude_rw_std: float = math.radians(0.33)
    seed: int = 0

    def __post_init__(self):
        if self.velocity_rw_std < 0 or self.attitude_rw_std < 0:
            raise ConfigurationError("INS noise strengths must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulated flight.

    ``terrain`` is a :class:`TerrainSpec` or a path to an ESRI ASCII grid.
    ``start_xy`` defaults to a start point that centres the track on the DTM.
    ``outlier_fraction`` replaces that share of rendered features with
    uniformly random second-frame locations.
    """

    terrain: TerrainSpec | str = field(default_factory=TerrainSpec)
    speed: float = 50.0
    duration: float = 19.6
    altitude_msl: float = 1000.0
    heading: float = 0.0
    frame_interval: float = 0.4
    pair_interval: float = 3.6
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(4800, 2923, 59.97, 38.68))
    n_features_side: int = 17
    grid_margin_px: float = 100.0
    flow_noise_px: float = 1.0
    ins_noise: InsNoiseModel = field(default_factory=InsNoiseModel)
    propagation: str = "ins"
    seed: int = 0
    start_xy: tuple | None = None
    outlier_fraction: float = 0.0
    solver: est.SolverConfig = field(default_factory=est.SolverConfig)

    def __post_init__(self):
        for name in ("speed", "duration", "frame_interval", "pair_interval"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        ratio = self.pair_interval / self.frame_interval
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise ConfigurationError("pair_interval must be an integer multiple of frame_interval")
        if self.propagation not in ("ins", "constant-velocity"):
            raise ConfigurationError(f"unknown propagation {self.propagation!r}")
        if self.n_features_side < 2:
            raise ConfigurationError("n_features_side must be >= 2")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigurationError("outlier_fraction must lie in [0, 1)")
        if self.flow_noise_px < 0:
            raise ConfigurationError("flow_noise_px must be >= 0")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.frame_interval)) + 1

    @property
    def pair_step(self) -> int:
        return int(round(self.pair_interval / self.frame_interval))

    def replace(self, **changes):
        out = copy.copy(self)
        for k, v in changes.items():
            object.__setattr__(out, k, v)
        out.__post_init__()
        return out

    def to_dict(self):
        d = {
            "terrain": self.terrain if isinstance(self.terrain, str) else asdict(self.terrain),
            "speed": self.speed,
            "duration": self.duration,
            "altitude_msl": self.altitude_msl,
            "heading": self.heading,
            "frame_interval": self.frame_interval,
            "pair_interval": self.pair_interval,
            "intrinsics": self.intrinsics.to_dict(),
            "n_features_side": self.n_features_side,
            "grid_margin_px": self.grid_margin_px,
            "flow_noise_px": self.flow_noise_px,
            "ins_noise": {
                "velocity_rw_std": self.ins_noise.velocity_rw_std,
                "attitude_rw_std_deg": math.degrees(self.ins_noise.attitude_rw_std),
                "seed": self.ins_noise.seed,
            },
            "propagation": self.propagation,
            "seed": self.seed,
            "outlier_fraction": self.outlier_fraction,
            "solver": asdict(self.solver),
        }
        if self.start_xy is not None:
            d["start_xy"] = list(self.start_xy)
        return d

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        kw = {}
        for key, value in data.items():
            if key == "terrain":
                if isinstance(value, str):
                    path = Path(value)
                    if base_dir is not None and not path.is_absolute():
                        path = Path(base_dir) / path
                    kw[key] = str(path)
                else:
                    kw[key] = TerrainSpec.from_dict(value)
            elif key == "intrinsics":
                kw[key] = CameraIntrinsics.from_dict(value)
            elif key == "ins_noise":
                v = dict(value)
                if "attitude_rw_std_deg" in v:
                    v["attitude_rw_std"] = math.radians(v.pop("attitude_rw_std_deg"))
                kw[key] = InsNoiseModel(**v)
            elif key == "solver":
                kw[key] = est.SolverConfig.from_dict(value)
            elif key == "start_xy":
                kw[key] = None if value is None else tuple(float(v) for v in value)
            else:
                kw[key] = value
        return cls(**kw)


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: Pose
    velocity: np.ndarray


REPORT_COLUMNS = (
    ["epoch", "t", "converged", "method", "iterations", "n_features"]
    + [f"true_{c}" for c in ("x", "y", "z", "roll", "pitch", "yaw")]
    + [f"prop_{c}" for c in ("x", "y", "z", "roll", "pitch", "yaw")]
    + [f"est_{c}" for c in ("x", "y", "z", "roll", "pitch", "yaw")]
    + ["prop_err_x", "prop_err_y", "prop_err_z", "prop_err_norm",
       "prop_err_roll", "prop_err_pitch", "prop_err_yaw",
       "est_err_x", "est_err_y", "est_err_z", "est_err_norm",
       "est_err_roll", "est_err_pitch", "est_err_yaw"]
)


@dataclass
class EpochRecord:
    """One vision fix; angles in degrees, positions in meters."""

    epoch: int
    t: float
    converged: bool
    method: str
    iterations: int
    n_features: int
    true_pose: np.ndarray
    propagated_pose: np.ndarray
    estimated_pose: np.ndarray

    @staticmethod
    def _errors(a, b):
        dp = a[:3] - b[:3]
        da = np.degrees(wrap_angle(np.radians(a[3:] - b[3:])))
        return dp, float(np.linalg.norm(dp)), da

    @property
    def propagated_errors(self):
        return self._errors(self.propagated_pose, self.true_pose)

    @property
    def estimated_errors(self):
        return self._errors(self.estimated_pose, self.true_pose)

    def row(self):
        pdp, pn, pda = self.propagated_errors
        edp, en, eda = self.estimated_errors
        return ([self.epoch, self.t, int(self.converged), self.method, self.iterations,
                 self.n_features]
                + list(self.true_pose) + list(self.propagated_pose) + list(self.estimated_pose)
                + list(pdp) + [pn] + list(pda) + list(edp) + [en] + list(eda))


TRACK_COLUMNS = (
    ["frame", "t"]
    + [f"{track}_{c}" for track in ("true", "prop", "nav")
       for c in ("x", "y", "z", "roll", "pitch", "yaw")]
)


@dataclass
class RunReport:
    """Per-epoch fixes plus, optionally, the per-frame three-track series.

    ``tracks`` rows are ``[frame, t, true pose, propagated pose, navigation
    pose]`` with poses as (x, y, z, roll, pitch, yaw) in meters and degrees;
    the navigation track is the closed-loop state, corrected at each fix.
    """

    epochs: list
    propagation: str = "ins"
    tracks: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"propagation": self.propagation, "n_epochs": len(self.epochs),
               "n_converged": sum(e.converged for e in self.epochs)}
        for name, attr in (("propagated", "propagated_errors"), ("vision", "estimated_errors")):
            pos = np.array([getattr(e, attr)[1] for e in self.epochs])
            ang = np.array([np.max(np.abs(getattr(e, attr)[2])) for e in self.epochs])
            out[f"{name}_max_position_error_m"] = float(pos.max()) if pos.size else 0.0
            out[f"{name}_mean_position_error_m"] = float(pos.mean()) if pos.size else 0.0
            out[f"{name}_max_angle_error_deg"] = float(ang.max()) if ang.size else 0.0
            out[f"{name}_mean_angle_error_deg"] = float(ang.mean()) if ang.size else 0.0
        return out


def _pose_row(pose: Pose):
    return np.concatenate([pose.position, np.degrees(wrap_angle(pose.attitude))])


def build_dtm(config: ScenarioConfig) -> Dtm:
    if isinstance(config.terrain, str):
        return load_ascii_grid(config.terrain)
    return generate_synthetic_dtm(config.terrain)


def _track_start(config, dtm):
    if config.start_xy is not None:
        return np.array(config.start_xy, dtype=np.float64)
    h = math.radians(config.heading)
    direction = np.array([math.sin(h), math.cos(h)])
    centre = np.array([(dtm.origin_x + dtm.x_max) / 2.0, (dtm.origin_y + dtm.y_max) / 2.0])
    return centre - direction * config.speed * config.duration / 2.0


def generate_trajectory(config: ScenarioConfig, dtm: Dtm | None = None) -> list[TrajectorySample]:
    """Straight, level, constant-speed flight with a nadir camera.

    The long image side is across track and the aircraft flies toward the top
    of the image.
    """
    dtm = build_dtm(config) if dtm is None else dtm
    start = _track_start(config, dtm)
    h = math.radians(config.heading)
    velocity = config.speed * np.array([math.sin(h), math.cos(h), 0.0])
    attitude = nadir_attitude(config.heading)
    p0 = np.array([start[0], start[1], config.altitude_msl])
    samples = []
    for k in range(config.n_frames):
        t = k * config.frame_interval
        samples.append(TrajectorySample(t, Pose(p0 + velocity * t, attitude), velocity.copy()))
    return samples


def _propagate_ins(truth, k0, state, noise: InsNoiseModel, rng, k_end):
    """INS dead reckoning from ``state`` at index k0 through k_end.

    The INS senses the true changes of velocity and attitude plus random-walk
    errors; the navigation solution is truth plus accumulated error.
    """
    p_state, a_state, v_state = state
    p_err = p_state - truth[k0].pose.position
    a_err = wrap_angle(a_state - truth[k0].pose.attitude)
    v_err = v_state - truth[k0].velocity
    out = [TrajectorySample(truth[k0].t, Pose(p_state, a_state), v_state.copy())]
    for k in range(k0 + 1, k_end + 1):
        dt = truth[k].t - truth[k - 1].t
        v_prev = v_err.copy()
        v_err = v_err + noise.velocity_rw_std * math.sqrt(dt) * rng.standard_normal(3)
        a_err = a_err + noise.attitude_rw_std * math.sqrt(dt) * rng.standard_normal(3)
        p_err = p_err + 0.5 * (v_prev + v_err) * dt
        tr = truth[k]
        out.append(TrajectorySample(
            tr.t, Pose(tr.pose.position + p_err, tr.pose.attitude + a_err),
            tr.velocity + v_err))
    return out


def simulate_ins(truth, noise: InsNoiseModel, rng=None) -> list[TrajectorySample]:
    """Free-running INS track starting from the true initial state."""
    if len(truth) < 2:
        raise ConfigurationError("need at least two trajectory samples")
    rng = np.random.default_rng(noise.seed) if rng is None else rng
    first = truth[0]
    state = (first.pose.position.copy(), first.pose.attitude.copy(), first.velocity.copy())
    return _propagate_ins(truth, 0, state, noise, rng, len(truth) - 1)


def _propagate_cv(truth, k0, state, k_end):
    p_state, a_state, v_state = state
    t0 = truth[k0].t
    return [TrajectorySample(truth[k].t, Pose(p_state + v_state * (truth[k].t - t0), a_state),
                             v_state.copy())
            for k in range(k0, k_end + 1)]


def render_flow(dtm: Dtm, intrinsics: CameraIntrinsics, pose1: Pose, pose2: Pose, seeds,
                noise_px: float = 0.0, rng=None, outlier_fraction: float = 0.0):
    """Ground-truth flow for ``seeds`` rendered through the terrain.

    Returns ``(features, world_points)``. Seeds whose ray misses the DTM or
    whose ground point leaves frame 2 are dropped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 2)
    q1 = pixel_to_ray(intrinsics, seeds)
    dirs = camera_ray_to_world(pose1, q1)
    origins = np.broadcast_to(pose1.position, dirs.shape)
    points, _, _, status = ray_intersect_many(dtm, origins, dirs)
    hit = status == kernels.RAY_HIT
    xc2 = (points - pose2.position) @ pose2.rotation
    with np.errstate(invalid="ignore", divide="ignore"):
        q2 = xc2 / xc2[:, 2:3]
    u2 = np.column_stack([intrinsics.cx + intrinsics.f_long * q2[:, 0],
                          intrinsics.cy + intrinsics.f_short * q2[:, 1]])
    keep = hit & (xc2[:, 2] > 0) & in_frame(intrinsics, np.nan_to_num(u2, nan=-1.0))
    u1 = seeds[keep].copy()
    u2 = u2[keep]
    world = points[keep]
    if noise_px > 0:
        u1 = u1 + noise_px * rng.standard_normal(u1.shape)
        u2 = u2 + noise_px * rng.standard_normal(u2.shape)
    if outlier_fraction > 0 and len(u2):
        n_out = int(round(outlier_fraction * len(u2)))
        idx = rng.choice(len(u2), size=n_out, replace=False)
        u2[idx] = rng.uniform([0, 0], [intrinsics.width_px, intrinsics.height_px], size=(n_out, 2))
    inside = in_frame(intrinsics, u1) & in_frame(intrinsics, u2)
    feats = [FlowFeature(a, b) for a, b in zip(u1[inside], u2[inside])]
    if len(feats) < est.MIN_FEATURES:
        raise DegenerateScenarioError(f"only {len(feats)} features survive rendering")
    return feats, world[inside]


def _pair_indices(config):
    step = config.pair_step
    return [(k, k + step) for k in range(0, config.n_frames - step, step)]


def run_closed_loop(config: ScenarioConfig, dtm: Dtm | None = None, on_epoch=None) -> RunReport:
    """Fly the scenario, correcting the navigation state at every image pair.

    ``on_epoch(n, problem, true_theta)`` is called before each solve, which
    lets callers export the exact estimation problem of an epoch.
    """
    dtm = build_dtm(config) if dtm is None else dtm
    truth = generate_trajectory(config, dtm)
    ss = np.random.SeedSequence(config.seed)
    ins_rng, flow_rng, free_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    if config.propagation == "ins":
        free = simulate_ins(truth, config.ins_noise, free_rng)
    else:
        first = truth[0]
        free = _propagate_cv(truth, 0, (first.pose.position, first.pose.attitude,
                                        first.velocity), len(truth) - 1)
    seeds = seed_regular_grid(config.intrinsics.width_px, config.intrinsics.height_px,
                              config.n_features_side, config.grid_margin_px)

    def propagate(k0, state, k_end):
        if config.propagation == "ins":
            return _propagate_ins(truth, k0, state, config.ins_noise, ins_rng, k_end)
        return _propagate_cv(truth, k0, state, k_end)

    first = truth[0]
    state = (first.pose.position.copy(), first.pose.attitude.copy(), first.velocity.copy())
    nav_track = [first.pose] + [None] * (len(truth) - 1)
    epochs = []
    k_last = 0
    for n, (k1, k2) in enumerate(_pair_indices(config)):
        nav = propagate(k1, state, k2)
        for sample, k in zip(nav[1:-1], range(k1 + 1, k2)):
            nav_track[k] = sample.pose
        guess1, guess2 = nav[0].pose, nav[-1].pose
        theta0 = est.pack_theta(guess1, relative_motion(guess1, guess2))
        converged, method, iters, n_feat = False, "none", 0, 0
        new_state = (guess2.position, guess2.attitude, nav[-1].velocity)
        est_pose2 = guess2
        try:
            feats, _ = render_flow(dtm, config.intrinsics, truth[k1].pose, truth[k2].pose,
                                   seeds, config.flow_noise_px, flow_rng, config.outlier_fraction)
            n_feat = len(feats)
            problem = est.EstimationProblem(dtm, config.intrinsics, feats, theta0)
            if on_epoch is not None:
                p1, p2 = truth[k1].pose, truth[k2].pose
                on_epoch(n, problem, est.pack_theta(p1, relative_motion(p1, p2)))
            result = est.solve(problem, config.solver)
            converged, method, iters = result.converged, result.method_used, result.iterations
            if converged:
                pose1, motion = result.pose, result.motion
                est_pose2 = compose_second_pose(pose1, motion)
                velocity = (est_pose2.position - pose1.position) / (truth[k2].t - truth[k1].t)
                new_state = (est_pose2.position, est_pose2.attitude, velocity)
            else:
                logger.warning("epoch %d: estimator did not converge; continuing uncorrected", n)
        except TerranavError as exc:
            logger.warning("epoch %d: vision fix failed (%s); continuing uncorrected", n, exc)
        state = tuple(np.array(v, dtype=np.float64) for v in new_state)
        nav_track[k2] = est_pose2
        k_last = k2
        epochs.append(EpochRecord(
            epoch=n, t=truth[k2].t, converged=converged, method=method, iterations=iters,
            n_features=n_feat, true_pose=_pose_row(truth[k2].pose),
            propagated_pose=_pose_row(free[k2].pose), estimated_pose=_pose_row(est_pose2)))
    if k_last < len(truth) - 1:
        for sample, k in zip(propagate(k_last, state, len(truth) - 1)[1:], range(k_last + 1, len(truth))):
            nav_track[k] = sample.pose
    tracks = [[k, float(truth[k].t)] + _pose_row(truth[k].pose).tolist()
              + _pose_row(free[k].pose).tolist() + _pose_row(nav_track[k]).tolist()
              for k in range(len(truth))]
    return RunReport(epochs, config.propagation, tracks)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot parse scenario {path}: {exc}") from exc
    try:
        return ScenarioConfig.from_dict(doc, base_dir=path.parent)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def save_scenario(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def write_report_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_COLUMNS)
        for e in report.epochs:
            wr.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in e.row()])


def read_report_csv(path) -> RunReport:
    """Parse a report CSV back into a :class:`RunReport`."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    epochs = []
    with fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != REPORT_COLUMNS:
            raise LoadError(f"{path}:1: unexpected report header")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                if len(row) != len(REPORT_COLUMNS):
                    raise ValueError
                vals = [float(v) for v in row[6:24]]
                epochs.append(EpochRecord(
                    epoch=int(row[0]), t=float(row[1]), converged=bool(int(row[2])),
                    method=row[3], iterations=int(row[4]), n_features=int(row[5]),
                    true_pose=np.array(vals[0:6]), propagated_pose=np.array(vals[6:12]),
                    estimated_pose=np.array(vals[12:18])))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: malformed report row") from None
    return RunReport(epochs)


def write_tracks_csv(report: RunReport, path) -> None:
    """One row per frame: truth, free-running propagation and navigation tracks."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACK_COLUMNS)
        for row in report.tracks:
            wr.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])


def read_tracks_csv(path) -> list:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    out = []
    with fh:
        rows = csv.reader(fh)
        if next(rows, None) != TRACK_COLUMNS:
            raise LoadError(f"{path}:1: unexpected tracks header")
        for lineno, row in enumerate(rows, start=2):
            try:
                if len(row) != len(TRACK_COLUMNS):
                    raise ValueError
                out.append([int(row[0])] + [float(v) for v in row[1:]])
            except ValueError:
                raise LoadError(f"{path}:{lineno}: malformed tracks row") from None
    return out
