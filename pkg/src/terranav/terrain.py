"""Digital terrain map storage, queries and ray casting.

The surface is a set of bilinear patches spanned by the grid nodes, so the
elevation and the normal at any point come from one consistent surface.
World frame: x east, y north, z up, all in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    DomainError,
    InvalidOriginError,
    LoadError,
    NoIntersectionError,
)

__all__ = [
    "Dtm",
    "GroundAnchor",
    "TerrainSpec",
    "elevation",
    "surface_normal",
    "ray_intersect",
    "ray_intersect_many",
    "generate_synthetic_dtm",
    "load_ascii_grid",
    "save_ascii_grid",
]


@dataclass(frozen=True)
class Dtm:
    """Regular-grid heightfield.

    ``elevations[j, i]`` is the height of the node at
    ``(origin_x + i * cell_size, origin_y + j * cell_size)``; row ``j`` runs
    south to north, so the flattened row-major index is ``j * width + i``.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    elevations: np.ndarray = field(repr=False)

    def __post_init__(self):
        elev = np.array(self.elevations, dtype=np.float64)
        if elev.ndim != 2:
            raise ConfigurationError("elevations must be a 2-D (height, width) array")
        if elev.shape[0] < 2 or elev.shape[1] < 2:
            raise ConfigurationError(f"grid must be at least 2x2, got {elev.shape[::-1]}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ConfigurationError(f"cell_size must be positive, got {self.cell_size}")
        if not np.all(np.isfinite(elev)):
            raise ConfigurationError("elevations must all be finite")
        elev.setflags(write=False)
        object.__setattr__(self, "elevations", elev)

    @property
    def width(self) -> int:
        return self.elevations.shape[1]

    @property
    def height(self) -> int:
        return self.elevations.shape[0]

    @property
    def x_max(self) -> float:
        return self.origin_x + (self.width - 1) * self.cell_size

    @property
    def y_max(self) -> float:
        return self.origin_y + (self.height - 1) * self.cell_size

    def contains(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return ((x >= self.origin_x) & (x <= self.x_max)
                & (y >= self.origin_y) & (y <= self.y_max))


@dataclass(frozen=True)
class GroundAnchor:
    """Estimated ground point of a feature, its upward unit normal and ray depth."""

    point: np.ndarray
    normal: np.ndarray
    depth: float


@dataclass(frozen=True)
class TerrainSpec:
    """Recipe for a synthetic DTM.

    ``kind`` is one of flat, ramp, sinusoidal, fractal. For ``ramp`` the
    amplitude is the slope (rise per meter along x). ``base`` is added to
    every elevation.
    """

    kind: str = "fractal"
    amplitude: float = 200.0
    wavelength: float = 1000.0
    seed: int = 0
    width: int = 201
    height: int = 201
    cell_size: float = 20.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    base: float = 0.0
    roughness: float = 0.55

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown terrain fields: {sorted(unknown)}")
        return cls(**data)


def _cell_coords(dtm, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for name, v, lo, hi in (("x", x, dtm.origin_x, dtm.x_max),
                            ("y", y, dtm.origin_y, dtm.y_max)):
        bad = ~((v >= lo) & (v <= hi))
        if np.any(bad):
            first = np.atleast_1d(v)[np.atleast_1d(bad)][0]
            raise DomainError(f"{name}={first!r} outside DTM hull [{lo}, {hi}]")
    tx = (x - dtm.origin_x) / dtm.cell_size
    ty = (y - dtm.origin_y) / dtm.cell_size
    i = np.clip(np.floor(tx).astype(np.intp), 0, dtm.width - 2)
    j = np.clip(np.floor(ty).astype(np.intp), 0, dtm.height - 2)
    return i, j, tx - i, ty - j


def _lerp(a, b, t):
    # exact at both ends and for a == b, unlike a * (1 - t) + b * t
    d = b - a
    return np.where(t < 0.5, a + t * d, b - (1.0 - t) * d)


def elevation(dtm: Dtm, x, y):
    """Bilinear elevation at world (x, y); exact at grid nodes.

    Accepts scalars or arrays. Raises ``DomainError`` outside the grid hull.
    """
    i, j, t, r = _cell_coords(dtm, x, y)
    e = dtm.elevations
    z = _lerp(_lerp(e[j, i], e[j, i + 1], t), _lerp(e[j + 1, i], e[j + 1, i + 1], t), r)
    return float(z) if np.ndim(z) == 0 else z


def surface_normal(dtm: Dtm, x, y):
    """Upward unit normal of the bilinear surface at (x, y).

    Returns shape (3,) for scalar input, (..., 3) for arrays.
    """
    i, j, t, r = _cell_coords(dtm, x, y)
    e = dtm.elevations
    c = dtm.cell_size
    dzdx = ((e[j, i + 1] - e[j, i]) * (1.0 - r) + (e[j + 1, i + 1] - e[j + 1, i]) * r) / c
    dzdy = ((e[j + 1, i] - e[j, i]) * (1.0 - t) + (e[j + 1, i + 1] - e[j, i + 1]) * t) / c
    n = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _default_tol(dtm):
    return 1e-4 * dtm.cell_size


def ray_intersect_many(dtm: Dtm, origins, directions, tol=None):
    """Vectorized ray casting.

    Returns ``(points, normals, depths, status)`` where status uses the
    ``kernels.RAY_*`` codes; rows that did not hit hold NaN.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    tol = _default_tol(dtm) if tol is None else tol
    depth, status = kernels.cast_rays(dtm.elevations, dtm.origin_x, dtm.origin_y,
                                      dtm.cell_size, origins, directions, tol)
    points = origins + depth[:, None] * directions
    normals = np.full_like(points, np.nan)
    hit = status == kernels.RAY_HIT
    if np.any(hit):
        # clip away rounding that nudges a boundary hit a hair outside the hull
        hx = np.clip(points[hit, 0], dtm.origin_x, dtm.x_max)
        hy = np.clip(points[hit, 1], dtm.origin_y, dtm.y_max)
        normals[hit] = surface_normal(dtm, hx, hy)
    return points, normals, depth, status


def ray_intersect(dtm: Dtm, origin, direction, tol=None) -> GroundAnchor:
    """First intersection of ``origin + s * direction`` (s > 0) with the surface.

    Cells are visited in ray order; the bracketing cell is refined by
    bisection to ``tol`` (default ``1e-4 * cell_size``) on s.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise DomainError("direction must be a unit vector")
    points, normals, depth, status = ray_intersect_many(dtm, origin, direction, tol)
    code = status[0]
    if code == kernels.RAY_BAD_ORIGIN:
        raise InvalidOriginError(f"ray origin {np.asarray(origin).tolist()} is not above the surface")
    if code == kernels.RAY_OUTSIDE:
        raise NoIntersectionError(f"ray origin {np.asarray(origin).tolist()} lies outside the DTM hull")
    if code != kernels.RAY_HIT:
        raise NoIntersectionError("ray leaves the DTM hull before reaching the surface")
    return GroundAnchor(point=points[0], normal=normals[0], depth=float(depth[0]))


def _diamond_square(rng, levels, nx_coarse, ny_coarse, roughness):
    step = 2 ** levels
    nx = nx_coarse * step + 1
    ny = ny_coarse * step + 1
    z = np.full((ny, nx), np.nan)
    z[::step, ::step] = rng.standard_normal((ny_coarse + 1, nx_coarse + 1))
    scale = 1.0
    while step > 1:
        half = step // 2
        scale *= roughness
        # diamond: square centres from their four corners
        corners = (z[0:-step:step, 0:-step:step] + z[0:-step:step, step::step]
                   + z[step::step, 0:-step:step] + z[step::step, step::step])
        z[half::step, half::step] = corners / 4.0 + scale * rng.standard_normal(corners.shape)
        # square: edge midpoints from the available neighbours
        padded = np.pad(z, half, constant_values=np.nan)
        for oy, ox in ((0, half), (half, 0)):
            ys = np.arange(oy, ny, step)
            xs = np.arange(ox, nx, step)
            yy, xx = np.meshgrid(ys + half, xs + half, indexing="ij")
            nb = np.stack([padded[yy - half, xx], padded[yy + half, xx],
                           padded[yy, xx - half], padded[yy, xx + half]])
            mean = np.nanmean(nb, axis=0)
            z[np.ix_(ys, xs)] = mean + scale * rng.standard_normal(mean.shape)
        step = half
    return z


def generate_synthetic_dtm(spec: TerrainSpec) -> Dtm:
    """Build a deterministic synthetic DTM from ``spec``."""
    if spec.width < 2 or spec.height < 2:
        raise ConfigurationError(f"grid dims must be >= 2, got {spec.width}x{spec.height}")
    if spec.amplitude < 0:
        raise ConfigurationError("amplitude must be >= 0")
    if spec.wavelength <= 0:
        raise ConfigurationError("wavelength must be > 0")
    if spec.cell_size <= 0:
        raise ConfigurationError("cell_size must be > 0")
    xs = spec.origin_x + spec.cell_size * np.arange(spec.width)
    ys = spec.origin_y + spec.cell_size * np.arange(spec.height)
    gx, gy = np.meshgrid(xs, ys)
    if spec.kind == "flat":
        z = np.zeros_like(gx)
    elif spec.kind == "ramp":
        z = spec.amplitude * gx
    elif spec.kind == "sinusoidal":
        k = 2.0 * np.pi / spec.wavelength
        z = spec.amplitude * np.sin(k * gx) * np.sin(k * gy)
    elif spec.kind == "fractal":
        rng = np.random.default_rng(spec.seed)
        levels = max(0, int(round(math.log2(max(spec.wavelength / spec.cell_size, 1.0)))))
        step = 2 ** levels
        ncx = max(1, math.ceil((spec.width - 1) / step))
        ncy = max(1, math.ceil((spec.height - 1) / step))
        z = _diamond_square(rng, levels, ncx, ncy, spec.roughness)[:spec.height, :spec.width]
        z = z - z.mean()
        peak = np.abs(z).max()
        z = spec.amplitude * z / peak if peak > 0 else z
    else:
        raise ConfigurationError(f"unknown terrain kind {spec.kind!r}")
    return Dtm(spec.origin_x, spec.origin_y, spec.cell_size, z + spec.base)


_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter",
                "yllcenter", "cellsize", "nodata_value"}


def load_ascii_grid(path) -> Dtm:
    """Read an ESRI ASCII grid. Rows in the file run north to south."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    header = {}
    n = 0
    for n, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise LoadError(f"{path}:{n + 1}: malformed header line {line!r}")
        try:
            header[key] = float(parts[1])
        except ValueError as exc:
            raise LoadError(f"{path}:{n + 1}: bad header value {line!r}") from exc
    else:
        n = len(lines)
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise LoadError(f"{path}: missing header field {key}")
    ncols, nrows, cell = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcenter" in header:
        x0 = header["xllcenter"]
    elif "xllcorner" in header:
        x0 = header["xllcorner"] + cell / 2.0
    else:
        raise LoadError(f"{path}: missing xllcorner/xllcenter")
    if "yllcenter" in header:
        y0 = header["yllcenter"]
    elif "yllcorner" in header:
        y0 = header["yllcorner"] + cell / 2.0
    else:
        raise LoadError(f"{path}: missing yllcorner/yllcenter")

    values = []
    for k, line in enumerate(lines[n:], start=n + 1):
        try:
            values.extend(float(v) for v in line.split())
        except ValueError as exc:
            raise LoadError(f"{path}:{k}: non-numeric value in {line.strip()[:40]!r}") from exc
    if len(values) != ncols * nrows:
        raise LoadError(f"{path}: expected {ncols * nrows} values, found {len(values)}")
    grid = np.array(values).reshape(nrows, ncols)
    if "nodata_value" in header and np.any(grid == header["nodata_value"]):
        raise LoadError(f"{path}: NODATA cells present")
    try:
        return Dtm(x0, y0, cell, grid[::-1])
    except ConfigurationError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def save_ascii_grid(dtm: Dtm, path) -> None:
    """Write ``dtm`` as an ESRI ASCII grid (6 decimal places)."""
    rows = [
        f"ncols {dtm.width}",
        f"nrows {dtm.height}",
        f"xllcorner {dtm.origin_x - dtm.cell_size / 2.0!r}",
        f"yllcorner {dtm.origin_y - dtm.cell_size / 2.0!r}",
        f"cellsize {dtm.cell_size!r}",
        "NODATA_value -9999",
    ]
    for row in dtm.elevations[::-1]:
        rows.append(" ".join(f"{v:.6f}" for v in row))
    Path(path).write_text("\n".join(rows) + "\n")
