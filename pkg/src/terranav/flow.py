"""Feature seeding and pyramidal translational Lucas-Kanade tracking.

Images are 2-D float64 arrays indexed ``img[row, col]`` with values in
[0, 1]; pixel coordinates are ``(x, y) = (col, row)``. Gradients are central
differences on interior pixels and windows never touch the one-pixel border.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import (
    ConfigurationError,
    DomainError,
    LoadError,
    LostFeatureError,
    UntrackableFeatureError,
)

__all__ = [
    "KernelWindow",
    "FlowFeature",
    "TrackerConfig",
    "as_gray_image",
    "image_gradients",
    "structure_tensor",
    "shi_tomasi_score",
    "score_map",
    "detect_corners",
    "seed_regular_grid",
    "lk_step",
    "build_pyramid",
    "track_pyramidal",
    "chain_tracks",
    "read_pgm",
    "write_pgm",
    "read_flow_csv",
    "write_flow_csv",
]

TRACKED = "tracked"
LOST = "lost"
FLOW_CSV_HEADER = ["id", "u1x", "u1y", "u2x", "u2y", "status", "score"]
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class KernelWindow:
    """Square weighting window of side ``2 * radius + 1``.

    ``kind`` is ``"gaussian"`` (uses ``sigma``) or ``"binary"``. Weights are
    normalized to sum to one.
    """

    radius: int = 7
    kind: str = "gaussian"
    sigma: float = 3.5

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigurationError("window radius must be >= 1")
        if self.kind not in ("gaussian", "binary"):
            raise ConfigurationError(f"unknown window kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ConfigurationError("gaussian window needs sigma > 0")

    @property
    def weights(self) -> np.ndarray:
        k = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        if self.kind == "binary":
            w = np.ones((k.size, k.size))
        else:
            g = np.exp(-0.5 * (k / self.sigma) ** 2)
            w = np.outer(g, g)
        return w / w.sum()


@dataclass
class FlowFeature:
    """One feature's locations in the first and second frame."""

    u1: np.ndarray
    u2: np.ndarray
    status: str = TRACKED
    score: float = 0.0

    def __post_init__(self):
        self.u1 = np.asarray(self.u1, dtype=np.float64).reshape(2)
        self.u2 = np.asarray(self.u2, dtype=np.float64).reshape(2)

    @property
    def tracked(self) -> bool:
        return self.status == TRACKED

    @property
    def flow(self) -> np.ndarray:
        return self.u2 - self.u1


@dataclass(frozen=True)
class TrackerConfig:
    levels: int = 4
    window: KernelWindow = field(default_factory=KernelWindow)
    max_iters: int = 30
    eps: float = 0.01
    max_flow: float | None = None
    eig_ratio: float = 1e-6

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


def as_gray_image(img) -> np.ndarray:
    """Validate and return ``img`` as a float64 array with values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 3 or arr.shape[1] < 3:
        raise DomainError(f"expected a 2-D image of at least 3x3 pixels, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError("image intensities must lie in [0, 1]")
    return arr


def image_gradients(img):
    """Central-difference gradients; the one-pixel border is left at zero."""
    img = np.asarray(img, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[1:-1, 1:-1] = 0.5 * (img[1:-1, 2:] - img[1:-1, :-2])
    gy[1:-1, 1:-1] = 0.5 * (img[2:, 1:-1] - img[:-2, 1:-1])
    return gx, gy


def _check_window(shape, center, radius, border, what="window"):
    x, y = float(center[0]), float(center[1])
    if not kernels._pykernels.window_fits(shape, x, y, radius, border):
        raise DomainError(f"{what} of radius {radius} at ({x:.3f}, {y:.3f}) overruns the image")
    return x, y


def _window_samples(img, x, y, radius):
    return kernels._pykernels._safe_window(img, x, y, radius)


def structure_tensor(img, center, window: KernelWindow, gradients=None) -> np.ndarray:
    """Weighted autocorrelation matrix of the image gradients around ``center``.

    ``center`` may be subpixel; gradients are then sampled bilinearly.
    """
    img = np.asarray(img, dtype=np.float64)
    x, y = _check_window(img.shape, center, window.radius, 1)
    gx, gy = gradients if gradients is not None else image_gradients(img)
    w = window.weights
    sx = _window_samples(gx, x, y, window.radius)
    sy = _window_samples(gy, x, y, window.radius)
    a = float(np.sum(w * sx * sx))
    b = float(np.sum(w * sx * sy))
    c = float(np.sum(w * sy * sy))
    return np.array([[a, b], [b, c]])


def shi_tomasi_score(M) -> float:
    """Smaller eigenvalue of a symmetric 2x2 matrix, clamped at zero."""
    a, b, c = float(M[0][0]), float(M[0][1]), float(M[1][1])
    lam = 0.5 * (a + c) - math.sqrt(0.25 * (a - c) ** 2 + b * b)
    return max(lam, 0.0)


def score_map(img, window: KernelWindow) -> np.ndarray:
    """Shi-Tomasi score at every integer pixel; zero where the window does not fit."""
    img = np.asarray(img, dtype=np.float64)
    gx, gy = image_gradients(img)
    w = window.weights
    a = ndimage.correlate(gx * gx, w, mode="constant")
    b = ndimage.correlate(gx * gy, w, mode="constant")
    c = ndimage.correlate(gy * gy, w, mode="constant")
    lam = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    lam = np.maximum(lam, 0.0)
    r = window.radius + 1
    valid = np.zeros_like(lam, dtype=bool)
    valid[r:-r, r:-r] = True
    return np.where(valid, lam, 0.0)


def detect_corners(img, window: KernelWindow, max_count: int, min_score: float,
                   min_spacing: float, return_scores: bool = False):
    """Shi-Tomasi corners in descending score order with spacing suppression.

    Returns an ``(k, 2)`` array of ``(x, y)`` pixels (and scores if asked).
    """
    scores = score_map(img, window)
    peaks = (scores == ndimage.maximum_filter(scores, size=3)) & (scores > min_score)
    ys, xs = np.nonzero(peaks)
    vals = scores[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    kept = []
    kept_scores = []
    min_d2 = float(min_spacing) ** 2
    for k in order:
        if len(kept) >= max_count:
            break
        p = (float(xs[k]), float(ys[k]))
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_d2 for q in kept):
            kept.append(p)
            kept_scores.append(float(vals[k]))
    pts = np.array(kept, dtype=np.float64).reshape(-1, 2)
    if return_scores:
        return pts, np.array(kept_scores)
    return pts


def seed_regular_grid(width, height, n_per_side: int, margin: float = 0.0) -> np.ndarray:
    """``n_per_side**2`` uniformly spaced pixels inside ``[margin, dim - margin]``."""
    if n_per_side < 2:
        raise ConfigurationError("n_per_side must be >= 2")
    if margin < 0 or 2 * margin >= min(width, height):
        raise ConfigurationError(f"margin {margin} leaves no room for a grid in {width}x{height}")
    xs = np.linspace(margin, width - margin, n_per_side)
    ys = np.linspace(margin, height - margin, n_per_side)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def lk_step(img1, img2, u1, guess, window: KernelWindow, eig_ratio: float = 1e-6,
            gradients=None) -> np.ndarray:
    """One Lucas-Kanade update of the flow at ``u1`` given the current ``guess``.

    Raises ``UntrackableFeatureError`` when the structure tensor is near
    singular and ``LostFeatureError`` when a window leaves either image.
    """
    img1 = np.asarray(img1, dtype=np.float64)
    img2 = np.asarray(img2, dtype=np.float64)
    r = window.radius
    try:
        x, y = _check_window(img1.shape, u1, r, 1)
    except DomainError as exc:
        raise LostFeatureError(str(exc)) from exc
    gx, gy = gradients if gradients is not None else image_gradients(img1)
    M = structure_tensor(img1, (x, y), window, gradients=(gx, gy))
    trace = M[0, 0] + M[1, 1]
    if trace <= 0.0 or shi_tomasi_score(M) < eig_ratio * trace:
        raise UntrackableFeatureError(f"structure tensor near singular at ({x:.2f}, {y:.2f})")
    qx, qy = x + float(guess[0]), y + float(guess[1])
    if not kernels._pykernels.window_fits(img2.shape, qx, qy, r, 0):
        raise LostFeatureError(f"window at ({qx:.2f}, {qy:.2f}) leaves the second image")
    w = window.weights
    it = _window_samples(img2, qx, qy, r) - _window_samples(img1, x, y, r)
    b = -np.array([np.sum(w * _window_samples(gx, x, y, r) * it),
                   np.sum(w * _window_samples(gy, x, y, r) * it)])
    return np.linalg.solve(M, b)


def _downsample(img):
    smooth = ndimage.correlate1d(img, BINOMIAL5, axis=0, mode="reflect")
    smooth = ndimage.correlate1d(smooth, BINOMIAL5, axis=1, mode="reflect")
    return smooth[::2, ::2]


def build_pyramid(img, levels: int):
    """``levels`` images; each level is a binomial-smoothed 2x downsample."""
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _track_points(pyr1, pyr2, grads1, points, guesses, config):
    n = points.shape[0]
    alive = np.ones(n, dtype=bool)
    w = config.window.weights
    guess = guesses / 2.0 ** (config.levels - 1)
    flow = guess
    for level in range(config.levels - 1, -1, -1):
        scale = 2.0 ** level
        gx, gy = grads1[level]
        flow, status = kernels.track_level(
            pyr1[level], pyr2[level], gx, gy, points / scale, guess, w,
            config.window.radius, config.max_iters, config.eps, config.eig_ratio)
        alive &= status == kernels.TRACK_OK
        if level:
            guess = np.where(alive[:, None], 2.0 * flow, 0.0)
    return flow, alive


def _make_features(points, end, alive, scores, config, shape):
    h, w = shape
    feats = []
    for k in range(points.shape[0]):
        ok = bool(alive[k])
        u2 = end[k]
        if ok:
            in_bounds = 0 <= u2[0] <= w - 1 and 0 <= u2[1] <= h - 1
            too_far = config.max_flow is not None and np.hypot(*(u2 - points[k])) > config.max_flow
            ok = in_bounds and not too_far
        feats.append(FlowFeature(points[k], u2 if ok else np.full(2, np.nan),
                                 TRACKED if ok else LOST, float(scores[k])))
    return feats


def _scores_at(img, grads, points, window):
    out = np.zeros(points.shape[0])
    for k, p in enumerate(points):
        try:
            out[k] = shi_tomasi_score(structure_tensor(img, p, window, gradients=grads))
        except DomainError:
            out[k] = 0.0
    return out


def track_pyramidal(img1, img2, points, config: TrackerConfig | None = None,
                    guesses=None) -> list[FlowFeature]:
    """Coarse-to-fine translational LK for every point of ``img1``."""
    config = config or TrackerConfig()
    img1 = as_gray_image(img1)
    img2 = as_gray_image(img2)
    if img1.shape != img2.shape:
        raise DomainError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    guesses = np.zeros_like(points) if guesses is None else np.asarray(guesses, dtype=np.float64)
    pyr1 = build_pyramid(img1, config.levels)
    pyr2 = build_pyramid(img2, config.levels)
    grads1 = [image_gradients(p) for p in pyr1]
    flow, alive = _track_points(pyr1, pyr2, grads1, points, guesses, config)
    scores = _scores_at(img1, grads1[0], points, config.window)
    return _make_features(points, points + flow, alive, scores, config, img1.shape)


def chain_tracks(frames, points, config: TrackerConfig | None = None) -> list[FlowFeature]:
    """Track through a frame sequence, composing hop flows first to last."""
    config = config or TrackerConfig()
    if len(frames) < 2:
        raise ConfigurationError("chain_tracks needs at least two frames")
    frames = [as_gray_image(f) for f in frames]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise DomainError("all frames must share one size")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = points.shape[0]
    current = points.copy()
    last_flow = np.zeros_like(points)
    alive = np.ones(n, dtype=bool)
    pyr_prev = build_pyramid(frames[0], config.levels)
    grads_prev = [image_gradients(p) for p in pyr_prev]
    scores = _scores_at(frames[0], grads_prev[0], points, config.window)
    for nxt in frames[1:]:
        pyr_next = build_pyramid(nxt, config.levels)
        idx = np.nonzero(alive)[0]
        if idx.size:
            flow, ok = _track_points(pyr_prev, pyr_next, grads_prev, current[idx],
                                     last_flow[idx], config)
            alive[idx] = ok
            current[idx] += flow
            last_flow[idx] = flow
        pyr_prev = pyr_next
        grads_prev = [image_gradients(p) for p in pyr_prev]
    return _make_features(points, current, alive, scores, config, shape)


def read_pgm(path) -> np.ndarray:
    """Load a binary PGM (P5, 8- or 16-bit big-endian) scaled to [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise LoadError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise LoadError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536:
        raise LoadError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos) if len(data) - pos >= count * np.dtype(dtype).itemsize else None
    if raw is None:
        raise LoadError(f"{path}: pixel data truncated")
    return raw.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img, maxval: int = 255) -> None:
    img = as_gray_image(img)
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    raw = np.rint(img * maxval).astype(dtype)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + raw.tobytes())


def write_flow_csv(path, features) -> None:
    """Write features to ``path`` (a file name or an open text stream)."""
    if hasattr(path, "write"):
        _write_flow_rows(path, features)
        return
    with open(path, "w", newline="") as fh:
        _write_flow_rows(fh, features)


def _write_flow_rows(fh, features):
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(FLOW_CSV_HEADER)
    for k, f in enumerate(features):
        wr.writerow([k, f"{f.u1[0]:.6f}", f"{f.u1[1]:.6f}", f"{f.u2[0]:.6f}",
                     f"{f.u2[1]:.6f}", f.status, f"{f.score:.6f}"])


def read_flow_csv(path) -> list[FlowFeature]:
    """Parse a flow CSV; raises ``LoadError`` naming the offending line."""
    feats = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != FLOW_CSV_HEADER:
            raise LoadError(f"{path}:1: expected header {','.join(FLOW_CSV_HEADER)}")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                if len(row) != 7 or row[5] not in (TRACKED, LOST):
                    raise ValueError
                vals = [float(v) for v in row[1:5]]
                if not all(math.isfinite(v) for v in vals[:2]) or (
                        row[5] == TRACKED and not all(math.isfinite(v) for v in vals[2:])):
                    raise ValueError
                feats.append(FlowFeature(vals[:2], vals[2:], row[5], float(row[6])))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: malformed flow row {','.join(row)!r}") from None
    return feats
