"""Pose and ego-motion from two-frame optical flow and a terrain map.

Each tracked feature is anchored by casting its first-frame ray at the DTM.
The point where that ray meets the tangent plane at the anchor is carried into
the second camera; its unit direction there should be parallel to the
observed second-frame ray. The component of that unit direction orthogonal to
the observed ray is the per-feature residual (a 3-vector of norm <= 1).
Twelve parameters are fitted by robustly weighted Gauss-Newton, switching to
Levenberg-Marquardt when Gauss-Newton stops making progress.

Parameter order: p1 (x, y, z), attitude1 (roll, pitch, yaw), p12 (x, y, z),
attitude12 (roll, pitch, yaw); meters and radians.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    DegenerateFeatureError,
    DegenerateGeometryError,
    InsufficientConstraintsError,
    JacobianEvaluationError,
    LoadError,
    NumericalFailureError,
    RobustCollapseError,
)
from .flow import FlowFeature
from .geometry import (
    GIMBAL_LIMIT,
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    pixel_to_ray,
    rotation_from_euler,
)
from .terrain import Dtm, GroundAnchor, ray_intersect_many

logger = logging.getLogger(__name__)

__all__ = [
    "MIN_FEATURES",
    "SolverConfig",
    "EstimationProblem",
    "EstimateResult",
    "AnchorSet",
    "pack_theta",
    "unpack_theta",
    "anchor_features",
    "residual_single",
    "residual_stack",
    "jacobian",
    "mestimator_weights",
    "solve",
]

MIN_FEATURES = 6
POSITION_IDX = np.array([0, 1, 2, 6, 7, 8])
ANGLE_IDX = np.array([3, 4, 5, 9, 10, 11])
FD_STEPS = np.array([1e-3] * 3 + [1e-6] * 3 + [1e-3] * 3 + [1e-6] * 3)
# meters per radian used to balance the normal equations
ANGLE_SCALE = 1000.0
COLUMN_SCALE = np.where(np.isin(np.arange(12), ANGLE_IDX), ANGLE_SCALE, 1.0)
MAD_TO_SIGMA = 1.4826
SUFFICIENT_DECREASE = 1e-4
LM_LAMBDA_MAX = 1e8
MAX_BACKTRACKS = 30


def pack_theta(pose: Pose, motion: RelativeMotion) -> np.ndarray:
    return np.concatenate([pose.position, pose.attitude, motion.translation, motion.attitude_delta])


def unpack_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return Pose(theta[0:3], theta[3:6]), RelativeMotion(theta[6:9], theta[9:12])


@dataclass(frozen=True)
class SolverConfig:
    """Iteration limits, tolerances and robust-loss choice for :func:`solve`.

    ``mestimator`` is ``"none"``, ``"huber"`` (tuning ``huber_k``) or
    ``"tukey"`` (tuning ``tukey_c``). ``step_tol`` and ``max_step`` apply to
    the balanced step (angles times 1000 m/rad); longer steps are shortened to
    ``max_step`` so a poor guess cannot jump into a distant basin.
    """

    max_gn_iters: int = 100
    gn_switch_iters: int = 5
    max_lm_iters: int = 200
    lm_lambda0: float = 1e-3
    lm_lambda_factor: float = 10.0
    step_tol: float = 1e-4
    residual_tol: float = 1e-20
    mestimator: str = "huber"
    huber_k: float = 1.345
    tukey_c: float = 4.685
    reanchor_every: int = 1
    max_step: float = 30.0

    def __post_init__(self):
        for name in ("max_gn_iters", "gn_switch_iters", "max_lm_iters", "reanchor_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("step_tol", "residual_tol", "lm_lambda0", "max_step"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.lm_lambda_factor <= 1:
            raise ConfigurationError("lm_lambda_factor must be > 1")
        if self.mestimator not in ("none", "huber", "tukey"):
            raise ConfigurationError(f"unknown mestimator {self.mestimator!r}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown solver fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EstimationProblem:
    """Flow features, terrain, intrinsics and the initial parameter guess."""

    dtm: Dtm
    intrinsics: CameraIntrinsics
    features: list
    initial_guess: np.ndarray
    q1: np.ndarray = field(init=False, repr=False)
    q2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.features = [f for f in self.features if f.tracked]
        if len(self.features) < MIN_FEATURES:
            raise InsufficientConstraintsError(
                f"{len(self.features)} tracked features; at least {MIN_FEATURES} are required")
        self.initial_guess = np.asarray(self.initial_guess, dtype=np.float64).reshape(12)
        if not np.all(np.isfinite(self.initial_guess)):
            raise ConfigurationError("initial guess must be finite")
        u1 = np.array([f.u1 for f in self.features])
        u2 = np.array([f.u2 for f in self.features])
        self.q1 = pixel_to_ray(self.intrinsics, u1)
        self.q2 = pixel_to_ray(self.intrinsics, u2)

    @property
    def n(self) -> int:
        return len(self.features)


@dataclass
class AnchorSet:
    """Ground anchors for every feature; ``valid`` is False where the ray missed."""

    points: np.ndarray
    normals: np.ndarray
    depths: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    def __getitem__(self, k):
        if not self.valid[k]:
            return None
        return GroundAnchor(self.points[k], self.normals[k], float(self.depths[k]))

    @property
    def dropped(self) -> np.ndarray:
        return np.nonzero(~self.valid)[0]


@dataclass
class EstimateResult:
    theta: np.ndarray
    objective: float
    per_feature_residuals: np.ndarray
    per_feature_weights: np.ndarray
    iterations: int
    converged: bool
    method_used: str
    objective_history: list = field(default_factory=list, repr=False)
    # (before, after) objective of every accepted step, anchors and weights fixed
    step_objectives: list = field(default_factory=list, repr=False)

    @property
    def pose(self) -> Pose:
        return unpack_theta(self.theta)[0]

    @property
    def motion(self) -> RelativeMotion:
        return unpack_theta(self.theta)[1]

    def to_dict(self):
        return {
            "theta": theta_to_json(self.theta),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "method_used": self.method_used,
            "per_feature_weights": self.per_feature_weights.tolist(),
        }


def anchor_features(problem: EstimationProblem, theta) -> AnchorSet:
    """Intersect each feature's first-frame ray, cast from the pose in ``theta``, with the DTM."""
    theta = np.asarray(theta, dtype=np.float64)
    R1 = rotation_from_euler(theta[3:6])
    dirs = problem.q1 @ R1.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(theta[0:3], dirs.shape)
    points, normals, depths, status = ray_intersect_many(problem.dtm, origins, dirs)
    valid = status == kernels.RAY_HIT
    if np.count_nonzero(valid) < MIN_FEATURES:
        raise InsufficientConstraintsError(
            f"only {np.count_nonzero(valid)} of {problem.n} features hit the DTM")
    if not np.all(valid):
        logger.debug("dropped %d features whose rays miss the DTM", np.count_nonzero(~valid))
    return AnchorSet(points, normals, depths, valid)


def _residuals(theta, points, normals, q1, q2):
    """Vectorized per-feature residuals and a degeneracy mask."""
    p1 = theta[0:3]
    R1 = rotation_from_euler(theta[3:6])
    p12 = theta[6:9]
    R12 = rotation_from_euler(theta[9:12])
    rq1 = q1 @ R1.T
    denom = np.einsum("ij,ij->i", normals, rq1)
    grazing = ~(np.abs(denom) >= 1e-9 * np.linalg.norm(rq1, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.einsum("ij,ij->i", normals, points - p1) / denom
        v = (q1 * depth[:, None]) @ R12.T + p12
        vn = np.linalg.norm(v, axis=1)
        collapsed = ~(vn >= 1e-9)
        vhat = v / vn[:, None]
        along = np.einsum("ij,ij->i", q2, vhat) / np.einsum("ij,ij->i", q2, q2)
        f = vhat - q2 * along[:, None]
    bad = grazing | collapsed | ~np.all(np.isfinite(f), axis=1)
    f[bad] = 0.0
    return f, bad


def residual_single(theta, anchor: GroundAnchor, q1, q2) -> np.ndarray:
    """Residual 3-vector of one feature; raises on degenerate geometry."""
    theta = np.asarray(theta, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64).reshape(1, 3)
    R1 = rotation_from_euler(theta[3:6])
    rq1 = q1[0] @ R1.T
    if abs(np.dot(anchor.normal, rq1)) < 1e-9 * np.linalg.norm(rq1):
        raise DegenerateFeatureError("first-frame ray grazes the tangent plane")
    f, bad = _residuals(theta, np.asarray(anchor.point).reshape(1, 3),
                        np.asarray(anchor.normal).reshape(1, 3), q1,
                        np.asarray(q2, dtype=np.float64).reshape(1, 3))
    if bad[0]:
        raise DegenerateGeometryError("predicted second-frame vector vanishes")
    return f[0]


def _feature_residuals(problem, theta, anchors):
    f, bad = _residuals(np.asarray(theta, dtype=np.float64), anchors.points,
                        anchors.normals, problem.q1, problem.q2)
    bad |= ~anchors.valid
    f[~anchors.valid] = 0.0
    return f, bad


def residual_stack(problem: EstimationProblem, theta, anchors: AnchorSet,
                   return_flags: bool = False):
    """Concatenated residuals (length 3n); degenerate features contribute zeros."""
    f, bad = _feature_residuals(problem, theta, anchors)
    if return_flags:
        return f.ravel(), bad
    return f.ravel()


def jacobian(problem: EstimationProblem, theta, anchors: AnchorSet, central: bool = False):
    """Finite-difference Jacobian of :func:`residual_stack` with anchors held fixed.

    Forward differences by default; ``central=True`` gives the central-difference
    cross-check.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = residual_stack(problem, theta, anchors)
    J = np.empty((base.size, 12))
    for k in range(12):
        h = FD_STEPS[k]
        tp = theta.copy()
        tp[k] += h
        fp = residual_stack(problem, tp, anchors)
        if central:
            tm = theta.copy()
            tm[k] -= h
            col = (fp - residual_stack(problem, tm, anchors)) / (2.0 * h)
        else:
            col = (fp - base) / h
        if not np.all(np.isfinite(col)):
            raise JacobianEvaluationError(f"non-finite residual probing parameter {k}")
        J[:, k] = col
    return J


def mestimator_weights(residuals, kind: str = "huber", param: float | None = None) -> np.ndarray:
    """Per-feature robust weights from residual norms with a MAD scale.

    ``residuals`` is ``(n, 3)`` (or ``(n,)`` norms). Huber:
    ``min(1, k*s/r)``; Tukey: ``(1 - (r/(c*s))**2)**2`` inside ``c*s``, else 0.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 2:
        r = np.linalg.norm(r, axis=1)
    if r.size == 0:
        raise ConfigurationError("need at least one residual")
    if kind == "none":
        return np.ones_like(r)
    s = MAD_TO_SIGMA * np.median(r)
    if kind == "huber":
        k = 1.345 if param is None else param
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r > k * s, k * s / r, 1.0)
        w = np.where(np.isfinite(w), w, 1.0)
    elif kind == "tukey":
        c = 4.685 if param is None else param
        if s <= 0.0:
            w = np.where(r <= 0.0, 1.0, 0.0)
        else:
            u = r / (c * s)
            w = np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)
    else:
        raise ConfigurationError(f"unknown mestimator {kind!r}")
    if not np.any(w > 0):
        raise RobustCollapseError("every feature received zero weight")
    return w


def _weights(config, f, bad):
    w = np.zeros(f.shape[0])
    good = ~bad
    if np.any(good):
        param = config.huber_k if config.mestimator == "huber" else config.tukey_c
        w[good] = mestimator_weights(f[good], config.mestimator, param)
    return w


def _objective(f, w):
    return float(np.sum(w * np.einsum("ij,ij->i", f, f)))


def _pitch_ok(theta):
    return abs(theta[4]) < GIMBAL_LIMIT and abs(theta[10]) < GIMBAL_LIMIT


def _solve_step(Js, sw, F, lam, max_step=math.inf):
    """Balanced (optionally damped) normal-equation step via SVD least squares."""
    A = Js * sw[:, None]
    b = -F * sw
    if lam is None:
        delta, *_ = np.linalg.lstsq(A, b, rcond=1e-12)
    else:
        H = A.T @ A
        if not np.any(np.diag(H) > 0):
            return None
        delta, *_ = np.linalg.lstsq(H + lam * np.diag(np.diag(H)), A.T @ b, rcond=1e-14)
    norm = np.linalg.norm(delta)
    if norm > max_step:
        delta *= max_step / norm
    return delta


def solve(problem: EstimationProblem, config: SolverConfig | None = None) -> EstimateResult:
    """Minimize the weighted residual norm over the twelve parameters."""
    config = config or SolverConfig()
    theta = problem.initial_guess.copy()
    anchors = anchor_features(problem, theta)
    fresh = True
    since_anchor = 0
    method = "gauss-newton"
    gn_fails = 0
    gn_iters = 0
    lm_iters = 0
    lam = config.lm_lambda0
    history = []
    steps = []
    converged = False
    iterations = 0

    def evaluate(th):
        f, bad = _feature_residuals(problem, th, anchors)
        return f, bad

    # last parameters whose anchors were fresh and accepted, with their weights
    ck_theta, ck_obj, ck_w = None, math.inf, None
    backtracks = 0

    while True:
        f, bad = evaluate(theta)
        w = _weights(config, f, bad)
        obj = _objective(f, w)
        if not math.isfinite(obj):
            raise NumericalFailureError("objective became non-finite")
        if fresh and ck_theta is not None and theta is not ck_theta:
            # ignoring how anchors move with theta can overshoot; the fixed
            # point is then repelling and the iterates cycle. Back off toward
            # the checkpoint until the re-anchored merit stops rising.
            merit = _objective(f, ck_w)
            if merit > ck_obj and merit > config.residual_tol:
                backtracks += 1
                iterations += 1
                half = 0.5 * (theta - ck_theta)
                if backtracks > MAX_BACKTRACKS or np.linalg.norm(half * COLUMN_SCALE) <= config.step_tol:
                    theta = ck_theta
                    anchors = anchor_features(problem, theta)
                    converged = backtracks <= MAX_BACKTRACKS
                    break
                theta = ck_theta + half
                anchors = anchor_features(problem, theta)
                continue
        if fresh:
            ck_theta, ck_obj, ck_w = theta, obj, w
            backtracks = 0
            history.append(obj)
        if obj <= config.residual_tol and fresh:
            converged = True
            break
        if method == "gauss-newton" and gn_iters >= config.max_gn_iters:
            break
        if method == "levenberg-marquardt" and lm_iters >= config.max_lm_iters:
            break
        iterations += 1
        J = jacobian(problem, theta, anchors)
        Js = J / COLUMN_SCALE
        sw = np.repeat(np.sqrt(w), 3)
        F = f.ravel()

        accepted = False
        step_norm = math.inf
        if method == "gauss-newton":
            gn_iters += 1
            ds = _solve_step(Js, sw, F, None, config.max_step)
            cand = theta + ds / COLUMN_SCALE
            if _pitch_ok(cand):
                fc, _ = evaluate(cand)
                obj_c = _objective(fc, w)
                if math.isfinite(obj_c) and obj_c < obj:
                    accepted = True
                    steps.append((obj, obj_c))
                    step_norm = float(np.linalg.norm(ds))
                    theta = cand
                    if obj - obj_c < SUFFICIENT_DECREASE * obj:
                        gn_fails += 1
                    else:
                        gn_fails = 0
            if not accepted:
                # the identical step would be proposed again: go straight to LM
                gn_fails = config.gn_switch_iters
            if gn_fails >= config.gn_switch_iters and not (accepted and step_norm <= config.step_tol):
                method = "levenberg-marquardt"
                logger.debug("switching to Levenberg-Marquardt after %d GN iterations", gn_iters)
        else:
            lm_iters += 1
            while lam <= LM_LAMBDA_MAX:
                ds = _solve_step(Js, sw, F, lam, config.max_step)
                if ds is None:
                    break
                cand = theta + ds / COLUMN_SCALE
                if _pitch_ok(cand):
                    fc, _ = evaluate(cand)
                    obj_c = _objective(fc, w)
                    if math.isfinite(obj_c) and obj_c <= obj:
                        accepted = True
                        steps.append((obj, obj_c))
                        step_norm = float(np.linalg.norm(ds))
                        theta = cand
                        lam = max(lam / config.lm_lambda_factor, 1e-12)
                        break
                lam *= config.lm_lambda_factor
            if not accepted:
                if fresh:
                    break
                # stale anchors may be what blocks progress
                anchors = anchor_features(problem, theta)
                fresh, since_anchor = True, 0
                lam = config.lm_lambda0
                continue

        if accepted and step_norm <= config.step_tol:
            if fresh:
                converged = True
                break
            anchors = anchor_features(problem, theta)
            fresh, since_anchor = True, 0
            continue
        if accepted:
            since_anchor += 1
            fresh = False
            if since_anchor >= config.reanchor_every:
                anchors = anchor_features(problem, theta)
                fresh, since_anchor = True, 0

    # final report with anchors and weights at the returned parameters
    if not fresh:
        anchors = anchor_features(problem, theta)
    f, bad = _feature_residuals(problem, theta, anchors)
    w = _weights(config, f, bad)
    obj = _objective(f, w)
    if not math.isfinite(obj):
        raise NumericalFailureError("objective became non-finite")
    return EstimateResult(theta=theta, objective=obj, per_feature_residuals=f,
                          per_feature_weights=w, iterations=iterations,
                          converged=converged, method_used=method,
                          objective_history=history, step_objectives=steps)


def load_problem(flow_csv, dtm_path, problem_json):
    """Assemble an :class:`EstimationProblem` and solver config from files.

    Returns ``(problem, config, truth)``; ``truth`` is None unless the JSON
    sidecar embeds one.
    """
    from .flow import read_flow_csv
    from .terrain import load_ascii_grid

    try:
        doc = json.loads(Path(problem_json).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot parse {problem_json}: {exc}") from exc
    try:
        intr = CameraIntrinsics.from_dict(doc["intrinsics"])
        guess = theta_from_json(doc["initial_guess"])
        truth = theta_from_json(doc["truth"]) if doc.get("truth") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{problem_json}: bad problem document ({exc})") from exc
    config = SolverConfig.from_dict(doc.get("solver"))
    feats = read_flow_csv(flow_csv)
    dtm = load_ascii_grid(dtm_path)
    return EstimationProblem(dtm, intr, feats, guess), config, truth


def theta_to_json(theta) -> dict:
    theta = np.asarray(theta, dtype=np.float64)
    return {
        "position_m": theta[0:3].tolist(),
        "attitude_deg": np.degrees(theta[3:6]).tolist(),
        "translation_m": theta[6:9].tolist(),
        "attitude_delta_deg": np.degrees(theta[9:12]).tolist(),
    }


def theta_from_json(doc) -> np.ndarray:
    parts = [doc["position_m"], np.radians(doc["attitude_deg"]),
             doc["translation_m"], np.radians(doc["attitude_delta_deg"])]
    theta = np.concatenate([np.asarray(p, dtype=np.float64).reshape(3) for p in parts])
    return theta


def write_problem_json(path, intrinsics, initial_guess, config=None, truth=None):
    doc = {"intrinsics": intrinsics.to_dict(), "initial_guess": theta_to_json(initial_guess)}
    if config is not None:
        doc["solver"] = asdict(config)
    if truth is not None:
        doc["truth"] = theta_to_json(truth)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
