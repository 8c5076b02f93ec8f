"""Occupancy density map, mean velocity field and agent-centred local crops."""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Scene


class EmptyRasterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid; cell (i, j) covers [ox + j*cs, ox + (j+1)*cs) x [oy + i*cs, oy + (i+1)*cs)."""

    origin: tuple[float, float]
    rows: int
    cols: int
    cell_size: float = 1.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")

    def cell_index(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row/col indices of points (..., 2) and whether they fall inside the grid."""
        xy = np.asarray(xy, dtype=float)
        j = np.floor((xy[..., 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        i = np.floor((xy[..., 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (i < self.rows) & (j >= 0) & (j < self.cols)
        return i, j, inside

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (
            self.origin[0] + (j + 0.5) * self.cell_size,
            self.origin[1] + (i + 0.5) * self.cell_size,
        )

    @classmethod
    def covering(cls, scenes: Iterable[Scene], cell_size: float = 1.0, margin: float = 10.0) -> "GridSpec":
        pts = np.array([s.position for sc in scenes for s in sc.observations()], dtype=float)
        if len(pts) == 0:
            return cls((0.0, 0.0), 1, 1, cell_size)
        lo = np.floor((pts.min(axis=0) - margin) / cell_size) * cell_size
        hi = pts.max(axis=0) + margin
        cols, rows = (np.ceil((hi - lo) / cell_size).astype(int) + 1).tolist()
        return cls((float(lo[0]), float(lo[1])), int(rows), int(cols), cell_size)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "rows": self.rows, "cols": self.cols, "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(float(v) for v in d["origin"]), int(d["rows"]), int(d["cols"]), float(d["cell_size"]))


@dataclass(frozen=True)
class ContextRasters:
    density: np.ndarray  # (rows, cols) in [0, 1]
    velocity_field: np.ndarray  # (rows, cols, 2)
    spec: GridSpec
    built_from: np.ndarray  # (rows, cols) observation counts
    overflow: int = 0
    empty: bool = False


@dataclass(frozen=True)
class LocalContext:
    density_patch: np.ndarray  # (H, W, 1)
    velocity_patch: np.ndarray  # (H, W, 2), agent frame
    center: tuple[float, float]
    orientation: float


class RasterAccumulator:
    """Per-cell counts and velocity sums. Accumulators merge by summation."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.counts = np.zeros((spec.rows, spec.cols), dtype=np.int64)
        self.vel_sum = np.zeros((spec.rows, spec.cols, 2), dtype=float)
        self.overflow = 0

    def add(self, positions: np.ndarray, velocities: np.ndarray | None = None) -> "RasterAccumulator":
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        i, j, inside = self.spec.cell_index(positions)
        self.overflow += int((~inside).sum())
        np.add.at(self.counts, (i[inside], j[inside]), 1)
        if velocities is not None:
            velocities = np.asarray(velocities, dtype=float).reshape(-1, 2)
            np.add.at(self.vel_sum, (i[inside], j[inside]), velocities[inside])
        return self

    def add_scenes(self, scenes: Iterable[Scene]) -> "RasterAccumulator":
        for sc in scenes:
            obs = list(sc.observations())
            if obs:
                self.add(np.array([o.position for o in obs]), np.array([o.velocity for o in obs]))
        return self

    def merge(self, other: "RasterAccumulator") -> "RasterAccumulator":
        if other.spec != self.spec:
            raise ValueError("cannot merge accumulators over different grids")
        out = RasterAccumulator(self.spec)
        out.counts = self.counts + other.counts
        out.vel_sum = self.vel_sum + other.vel_sum
        out.overflow = self.overflow + other.overflow
        return out

    def finalize(self) -> ContextRasters:
        peak = self.counts.max()
        empty = peak == 0
        if empty:
            warnings.warn("no observations fell inside the grid", EmptyRasterWarning, stacklevel=2)
            density = np.zeros(self.counts.shape, dtype=float)
        else:
            density = self.counts / float(peak)
        vf = np.zeros_like(self.vel_sum)
        occ = self.counts > 0
        vf[occ] = self.vel_sum[occ] / self.counts[occ][:, None]
        return ContextRasters(density, vf, self.spec, self.counts.copy(), self.overflow, bool(empty))


def build_rasters(scenes: Iterable[Scene], spec: GridSpec) -> ContextRasters:
    return RasterAccumulator(spec).add_scenes(scenes).finalize()


def build_density_map(scenes: Iterable[Scene], spec: GridSpec) -> np.ndarray:
    """Max-normalised histogram of agent positions."""
    return build_rasters(scenes, spec).density


def build_velocity_field(scenes: Iterable[Scene], spec: GridSpec) -> np.ndarray:
    """Per-cell mean velocity; zero where no observation landed."""
    return build_rasters(scenes, spec).velocity_field


# ---------------------------------------------------------------------------
# local crops

def _sample(rasters: ContextRasters, pts: np.ndarray, interpolation: str) -> np.ndarray:
    """Sample [density, vx, vy] at world points (..., 2); outside the grid reads 0."""
    spec = rasters.spec
    stack = np.concatenate([rasters.density[..., None], rasters.velocity_field], axis=-1)
    if interpolation == "nearest":
        i, j, inside = spec.cell_index(pts)
        out = np.zeros(pts.shape[:-1] + (3,), dtype=float)
        out[inside] = stack[i[inside], j[inside]]
        return out
    if interpolation == "bilinear":
        # continuous cell coordinates with cell centres at integers
        u = (pts[..., 0] - spec.origin[0]) / spec.cell_size - 0.5
        w = (pts[..., 1] - spec.origin[1]) / spec.cell_size - 0.5
        j0, i0 = np.floor(u).astype(np.int64), np.floor(w).astype(np.int64)
        fu, fw = u - j0, w - i0
        out = np.zeros(pts.shape[:-1] + (3,), dtype=float)
        for di, dj, wt in ((0, 0, (1 - fw) * (1 - fu)), (0, 1, (1 - fw) * fu), (1, 0, fw * (1 - fu)), (1, 1, fw * fu)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < spec.rows) & (jj >= 0) & (jj < spec.cols)
            out[ok] += wt[ok][:, None] * stack[ii[ok], jj[ok]]
        return out
    raise ValueError(f"unknown interpolation {interpolation!r}")


def crop_many(
    rasters: ContextRasters,
    centers: np.ndarray,
    orientations: np.ndarray,
    height: int,
    width: int,
    interpolation: str = "nearest",
) -> np.ndarray:
    """Vectorised crops: returns (M, H, W, 3) with channels [density, v_fwd, v_left].

    Patch cell (r, c) samples ``center + R(theta) @ ((c - W//2) * cs, (r - H//2) * cs)``,
    so the agent's moving direction lies along the patch's column axis and
    orientation 0 reproduces the global neighbourhood verbatim.
    """
    if height % 2 == 0 or width % 2 == 0:
        raise ValueError("crop height and width must be odd")
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    th = np.asarray(orientations, dtype=float).reshape(-1)
    cs = rasters.spec.cell_size
    rr, cc = np.meshgrid(np.arange(height) - height // 2, np.arange(width) - width // 2, indexing="ij")
    off = np.stack([cc * cs, rr * cs], axis=-1).astype(float)  # (H, W, 2)
    cos, sin = np.cos(th)[:, None, None], np.sin(th)[:, None, None]
    wx = centers[:, 0, None, None] + cos * off[..., 0] - sin * off[..., 1]
    wy = centers[:, 1, None, None] + sin * off[..., 0] + cos * off[..., 1]
    samples = _sample(rasters, np.stack([wx, wy], axis=-1), interpolation)
    vx, vy = samples[..., 1].copy(), samples[..., 2].copy()
    samples[..., 1] = cos * vx + sin * vy
    samples[..., 2] = -sin * vx + cos * vy
    return samples


def crop_local(
    rasters: ContextRasters,
    center: tuple[float, float],
    orientation: float,
    height: int = 31,
    width: int = 31,
    interpolation: str = "nearest",
) -> LocalContext:
    patch = crop_many(rasters, np.array([center]), np.array([orientation]), height, width, interpolation)[0]
    return LocalContext(patch[..., :1], patch[..., 1:], (float(center[0]), float(center[1])), float(orientation))


# ---------------------------------------------------------------------------
# archive: zip of .npy members with fixed timestamps so identical rasters give identical bytes

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_rasters(path: str | Path, rasters: ContextRasters) -> None:
    meta = {"spec": rasters.spec.to_dict(), "overflow": rasters.overflow, "empty": rasters.empty, "layout": "row-major"}
    members = {
        "meta.json": json.dumps(meta, sort_keys=True).encode(),
        "density.npy": _npy_bytes(rasters.density),
        "velocity_field.npy": _npy_bytes(rasters.velocity_field),
        "built_from.npy": _npy_bytes(rasters.built_from),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_rasters(path: str | Path) -> ContextRasters:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        return ContextRasters(
            density=arr("density.npy"),
            velocity_field=arr("velocity_field.npy"),
            spec=GridSpec.from_dict(meta["spec"]),
            built_from=arr("built_from.npy"),
            overflow=int(meta["overflow"]),
            empty=bool(meta["empty"]),
        )


def agent_orientation(velocity: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Moving direction for crops: velocity angle, falling back to heading, then 0."""
    velocity = np.asarray(velocity, dtype=float)
    ang = np.arctan2(velocity[..., 1], velocity[..., 0])
    still = (velocity[..., 0] == 0) & (velocity[..., 1] == 0)
    fallback = np.where(np.isnan(heading), 0.0, heading)
    return np.where(still, fallback, ang)


__all__ = [
    "GridSpec", "ContextRasters", "LocalContext", "RasterAccumulator", "EmptyRasterWarning",
    "build_rasters", "build_density_map", "build_velocity_field", "crop_local", "crop_many",
    "save_rasters", "load_rasters", "agent_orientation",
]
