"""Polar BEV grid, per-column ground curves, depth-bin MLP lift and LUT pooling.

Every feature-map column of a camera sweeps a curve over the BEV plane.
We fit ``azimuth = f(distance)`` per column from ground-plane projections,
then precompute which grid cell each (column, depth bin) lands in.  At run
time the lifted column features are summed into the grid with one
``index_add``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import Camera, CameraRig, TWO_PI, ground_hits, polar_arrays, wrap_angle

OFF_GRID = -1
CURVE_DEGREE = 2
CURVE_ROWS = 16
MIN_GROUND_HITS = 4
FEATURE_STRIDE = 8


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class PolarGridSpec:
    M: int
    N: int
    r_min: float
    r_max: float
    radial_edges: tuple[float, ...]

    @property
    def n_cells(self) -> int:
        return self.M * self.N

    @property
    def angular_width(self) -> float:
        return TWO_PI / self.M

    @property
    def edges(self) -> np.ndarray:
        return np.asarray(self.radial_edges)

    def cells_of(self, azimuth, distance) -> np.ndarray:
        """Flat cell index ``m * N + n`` for each point, ``OFF_GRID`` outside."""
        a = wrap_angle(np.asarray(azimuth, dtype=float))
        d = np.asarray(distance, dtype=float)
        m = np.minimum(np.floor(a / self.angular_width).astype(np.int64), self.M - 1)
        n = np.searchsorted(self.edges, d, side="right") - 1
        ok = (d >= 0) & (d < self.r_max) & np.isfinite(a) & np.isfinite(d)
        return np.where(ok, m * self.N + np.clip(n, 0, self.N - 1), OFF_GRID).astype(np.int64)

    def cell_of(self, azimuth: float, distance: float) -> int:
        return int(self.cells_of(azimuth, distance))

    def split(self, cell):
        return np.divmod(np.asarray(cell), self.N)

    def angle_centers(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) * self.angular_width

    def radial_centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def radial_widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def cell_centers(self):
        """``(azimuth, distance)`` of every cell center, flat order."""
        a = np.repeat(self.angle_centers(), self.N)
        d = np.tile(self.radial_centers(), self.M)
        return a, d


def build_polar_grid(M: int, N: int, r_min: float, r_max: float) -> PolarGridSpec:
    """Uniform angular bins and log-spaced radial bins.

    The first radial bin is ``[0, r_min)``; edges 1..N form a geometric
    progression from ``r_min`` to ``r_max``.
    """
    if M < 4 or N < 2:
        raise GridError(f"grid needs M >= 4 and N >= 2, got {M}x{N}")
    if not (0 < r_min < r_max):
        raise GridError(f"need 0 < r_min < r_max, got {r_min}, {r_max}")
    ratio = (r_max / r_min) ** (1.0 / (N - 1))
    edges = [0.0] + [r_min * ratio**i for i in range(N)]
    edges[-1] = float(r_max)
    return PolarGridSpec(int(M), int(N), float(r_min), float(r_max), tuple(edges))


FULL_SCALE_GRID = dict(M=360, N=64, r_min=1.0, r_max=200.0)
DESK_GRID = dict(M=72, N=16, r_min=2.0, r_max=50.0)


@dataclass(frozen=True)
class ColumnCurve:
    camera: str
    column: int
    pixel_u: float
    coeffs: tuple[float, ...]
    d_lo: float
    d_hi: float
    valid: bool

    def azimuth_at(self, d):
        """Azimuth at rig distance ``d``; ``d`` is clamped into the fitted range."""
        d = np.clip(np.asarray(d, dtype=float), self.d_lo, self.d_hi)
        return wrap_angle(np.polyval(self.coeffs, d))


def column_pixels(width: int, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Pixel u-coordinate at the center of each stride-``stride`` feature column."""
    return np.arange(width // stride) * stride + (stride - 1) / 2.0


def _unwrap_toward_median(a: np.ndarray) -> np.ndarray:
    med = np.median(a)
    a = a.copy()
    a[a - med > math.pi] -= TWO_PI
    a[a - med < -math.pi] += TWO_PI
    return a


def fit_column_curves(camera: Camera, grid: PolarGridSpec, stride: int = FEATURE_STRIDE,
                      rows: int = CURVE_ROWS) -> list[ColumnCurve]:
    intr = camera.intrinsics
    vs = np.linspace(0.0, intr.height - 1.0, rows)
    # ground hits beyond both the camera range and the grid add nothing to the fit
    d_limit = max(intr.max_range, grid.r_max)
    curves = []
    for j, u in enumerate(column_pixels(intr.width, stride)):
        uv = np.stack([np.full(rows, u), vs], axis=-1)
        rays = intr.unproject(uv, check=False)
        x, y, ok = ground_hits(camera.pose, rays)
        ok &= np.all(np.isfinite(rays), axis=-1)
        a, d = polar_arrays(x[ok], y[ok])
        keep = d <= d_limit
        a, d = a[keep], d[keep]
        if len(d) < MIN_GROUND_HITS:
            curves.append(ColumnCurve(camera.name, j, float(u), (0.0,) * (CURVE_DEGREE + 1), 0.0, 0.0, False))
            continue
        coeffs = np.polyfit(d, _unwrap_toward_median(a), CURVE_DEGREE)
        curves.append(ColumnCurve(camera.name, j, float(u), tuple(float(c) for c in coeffs),
                                  float(d.min()), float(d.max()), True))
    return curves


@dataclass(frozen=True)
class DepthBinSpec:
    D: int
    edges: tuple[float, ...]

    @property
    def centers(self) -> np.ndarray:
        e = np.asarray(self.edges)
        return 0.5 * (e[:-1] + e[1:])


def build_depth_bins(D: int, max_range: float, near: float = 1.0) -> DepthBinSpec:
    """``D`` bins over ``[0, max_range]``: ``[0, near)`` then log spacing."""
    if D < 2 or not (0 < near < max_range):
        raise GridError("need D >= 2 and 0 < near < max_range")
    edges = [0.0] + list(np.geomspace(near, max_range, D))
    edges[-1] = float(max_range)
    return DepthBinSpec(int(D), tuple(float(e) for e in edges))


@dataclass(frozen=True)
class BevLut:
    """Per-camera ``(columns, D)`` tables of flat cell indices."""

    cameras: tuple[str, ...]
    tables: tuple[np.ndarray, ...]
    n_cells: int

    def flat(self) -> np.ndarray:
        """All tables concatenated in camera -> column -> bin order."""
        return np.concatenate([t.reshape(-1) for t in self.tables])

    def table(self, name: str) -> np.ndarray:
        return self.tables[self.cameras.index(name)]

    def rows(self):
        for name, t in zip(self.cameras, self.tables):
            for j in range(t.shape[0]):
                for k in range(t.shape[1]):
                    yield name, j, k, int(t[j, k])


def lut_entries(curve: ColumnCurve, depth_bins: DepthBinSpec, grid: PolarGridSpec) -> np.ndarray:
    if not curve.valid:
        return np.full(depth_bins.D, OFF_GRID, dtype=np.int64)
    d = depth_bins.centers
    return grid.cells_of(curve.azimuth_at(d), d)


def build_bev_lut(curves_per_camera: dict, depth_bins: dict, grid: PolarGridSpec) -> BevLut:
    """``curves_per_camera`` and ``depth_bins`` are keyed by camera name, in rig order."""
    names, tables = [], []
    for name, curves in curves_per_camera.items():
        t = np.stack([lut_entries(c, depth_bins[name], grid) for c in curves])
        t.setflags(write=False)
        names.append(name)
        tables.append(t)
    return BevLut(tuple(names), tuple(tables), grid.n_cells)


@dataclass
class RigGeometry:
    """Everything precomputed for one (rig, grid, D) combination."""

    rig: CameraRig
    grid: PolarGridSpec
    curves: dict
    depth_bins: dict
    lut: BevLut
    stride: int = FEATURE_STRIDE

    @classmethod
    def build(cls, rig: CameraRig, grid: PolarGridSpec, D: int = 32, near: float = 1.0,
              stride: int = FEATURE_STRIDE):
        curves = {c.name: fit_column_curves(c, grid, stride) for c in rig.cameras}
        bins = {c.name: build_depth_bins(D, c.intrinsics.max_range, near) for c in rig.cameras}
        return cls(rig, grid, curves, bins, build_bev_lut(curves, bins, grid), stride)

    def ipm_tables(self) -> list[np.ndarray]:
        return [ipm_table(c, self.grid, self.stride) for c in self.rig.cameras]


class MlpLift(nn.Module):
    """Shared one-hidden-layer MLP mapping a feature column to ``D`` depth bins."""

    def __init__(self, rows: int, channels: int, depth_bins: int, hidden: int = 128,
                 out_channels: int | None = None):
        super().__init__()
        self.rows, self.channels, self.depth_bins = rows, channels, depth_bins
        self.out_channels = out_channels or channels
        self.hidden = nn.Linear(rows * channels, hidden)
        self.out = nn.Linear(hidden, depth_bins * self.out_channels)

    def forward(self, columns: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(columns)))


def lift_columns(mlp: MlpLift, features: torch.Tensor) -> torch.Tensor:
    """``(B, C, H_s, W_s)`` features to pseudo-BEV ``(B, W_s, D, C_out)``."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    b, c, h, w = features.shape
    if c != mlp.channels or h != mlp.rows:
        raise ValueError(f"feature map {c}x{h} does not match lift input {mlp.channels}x{mlp.rows}")
    cols = features.permute(0, 3, 1, 2).reshape(b, w, c * h)
    return mlp(cols).reshape(b, w, mlp.depth_bins, mlp.out_channels)


def scatter_pool(pseudo: list[torch.Tensor], lut: BevLut, grid: PolarGridSpec,
                 mean: bool = False) -> torch.Tensor:
    """Sum pseudo-BEV features ``[(B, W_s, D, C)]`` (rig camera order) into ``(B, C, M, N)``."""
    b, c = pseudo[0].shape[0], pseudo[0].shape[-1]
    src = torch.cat([p.reshape(b, -1, c) for p in pseudo], dim=1)
    idx = torch.from_numpy(lut.flat())
    if idx.numel() != src.shape[1]:
        raise ValueError("pseudo-BEV features do not match the LUT shape")
    keep = idx >= 0
    return _pool(src[:, keep], idx[keep], grid, mean)


def _pool(src, idx, grid, mean):
    b, _, c = src.shape
    out = src.new_zeros(b, grid.n_cells, c).index_add_(1, idx, src)
    if mean:
        cnt = torch.bincount(idx, minlength=grid.n_cells).clamp(min=1).to(src.dtype)
        out = out / cnt[None, :, None]
    return out.permute(0, 2, 1).reshape(b, c, grid.M, grid.N)


def linear_scan_cell(grid: PolarGridSpec, azimuth: float, distance: float) -> int:
    """Cell lookup by walking the edges; the reference for ``cells_of``."""
    if not (0.0 <= distance < grid.r_max):
        return OFF_GRID
    a = wrap_angle(azimuth)
    m = min(math.floor(a / grid.angular_width), grid.M - 1)
    n = 0
    while n + 1 < grid.N and grid.radial_edges[n + 1] <= distance:
        n += 1
    return m * grid.N + n


def naive_pool(pseudo: list[torch.Tensor], geom: RigGeometry) -> torch.Tensor:
    """Reference pooling: project every (camera, column, bin) on the fly."""
    grid = geom.grid
    b, c = pseudo[0].shape[0], pseudo[0].shape[-1]
    out = pseudo[0].new_zeros(b, grid.n_cells, c)
    for cam, p in zip(geom.rig.cameras, pseudo):
        centers = geom.depth_bins[cam.name].centers
        for j, curve in enumerate(geom.curves[cam.name]):
            if not curve.valid:
                continue
            for k, d in enumerate(centers):
                cell = linear_scan_cell(grid, float(curve.azimuth_at(d)), float(d))
                if cell != OFF_GRID:
                    out[:, cell] += p[:, j, k]
    return out.permute(0, 2, 1).reshape(b, c, grid.M, grid.N)


def ipm_table(camera: Camera, grid: PolarGridSpec, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Flat-world cell index for every stride-``stride`` pixel, ``(H_s, W_s)``."""
    intr = camera.intrinsics
    us = column_pixels(intr.width, stride)
    vs = column_pixels(intr.height, stride)
    uu, vv = np.meshgrid(us, vs)
    rays = intr.unproject(np.stack([uu, vv], axis=-1), check=False)
    x, y, ok = ground_hits(camera.pose, rays)
    ok &= np.all(np.isfinite(rays), axis=-1)
    a, d = polar_arrays(np.where(ok, x, 0.0), np.where(ok, y, 0.0))
    return np.where(ok, grid.cells_of(a, d), OFF_GRID)


def ipm_lift(features: list[torch.Tensor], tables: list[np.ndarray], grid: PolarGridSpec) -> torch.Tensor:
    """Flat-world baseline: add each pixel feature ``(B, C, H_s, W_s)`` to its ground cell."""
    b, c = features[0].shape[:2]
    src = torch.cat([f.reshape(b, c, -1).transpose(1, 2) for f in features], dim=1)
    idx = torch.from_numpy(np.concatenate([t.reshape(-1) for t in tables]))
    keep = idx >= 0
    return _pool(src[:, keep], idx[keep], grid, False)


def dump_lut(lut: BevLut) -> str:
    lines = ["camera\tcolumn\tbin\tcell_index"]
    lines += [f"{n}\t{j}\t{k}\t{cell}" for n, j, k, cell in lut.rows()]
    return "\n".join(lines) + "\n"
