"""Hard and dynamic voxelization with bidirectional point/voxel maps.

Two grid geometries share one code path: Cartesian (x, y, z) pillars for the
birds-eye view and spherical (phi, theta, d) frustums for the perspective
view. A collapsed axis contributes a single cell, so BEV pillars collapse z
and perspective frustums collapse range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from mvf.pointcloud import Point, PointCloud, cartesian_to_spherical, to_spherical

CARTESIAN = "cartesian"
SPHERICAL = "spherical"
AXES = {CARTESIAN: ("x", "y", "z"), SPHERICAL: ("phi", "theta", "d")}

OUT_OF_RANGE = None
NONE = -1


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid over Cartesian or spherical coordinates.

    Cells are half-open ``[lower + i*cell, lower + (i+1)*cell)``. Collapsed
    axes are still range-checked but always index 0. A spherical ``phi`` axis
    spanning the full circle wraps, so azimuth ``pi`` lands in the last cell.
    """

    view: str
    lower: tuple
    upper: tuple
    cell_size: tuple
    collapse_axes: frozenset = frozenset()

    def __post_init__(self):
        if self.view not in AXES:
            raise ValueError(f"unknown view {self.view!r}")
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "cell_size", tuple(float(v) for v in self.cell_size))
        object.__setattr__(self, "collapse_axes", frozenset(self.collapse_axes))
        if not (len(self.lower) == len(self.upper) == len(self.cell_size) == 3):
            raise ValueError("grid needs exactly three axes")
        for name, lo, hi, c in zip(self.axes, self.lower, self.upper, self.cell_size):
            if not hi > lo:
                raise ValueError(f"axis {name}: upper bound must exceed lower bound")
            if not c > 0:
                raise ValueError(f"axis {name}: cell size must be positive")
            if name not in self.collapse_axes and math.floor((hi - lo) / c) < 1:
                raise ValueError(f"axis {name}: fewer than one cell")
        unknown = self.collapse_axes - set(self.axes)
        if unknown:
            raise ValueError(f"unknown collapse axes {sorted(unknown)}")

    @property
    def axes(self) -> tuple:
        return AXES[self.view]

    @cached_property
    def cell_counts(self) -> tuple:
        return tuple(
            1 if name in self.collapse_axes else int(math.floor((hi - lo) / c + 1e-9))
            for name, lo, hi, c in zip(self.axes, self.lower, self.upper, self.cell_size)
        )

    @property
    def plane_shape(self) -> tuple:
        """(rows, cols) of the dense 2D canvas: the first two axes."""
        return self.cell_counts[0], self.cell_counts[1]

    @cached_property
    def _periodic(self) -> tuple:
        return tuple(
            self.view == SPHERICAL
            and name == "phi"
            and abs((hi - lo) - 2 * math.pi) < 1e-12
            for name, lo, hi in zip(self.axes, self.lower, self.upper)
        )

    def coords(self, xyz: np.ndarray) -> np.ndarray:
        """Per-point coordinates in this grid's native frame."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return cartesian_to_spherical(xyz) if self.view == SPHERICAL else xyz

    def index(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices (M, 3) and in-range mask for native coordinates."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        idx = np.zeros(coords.shape, dtype=np.int64)
        ok = np.ones(len(coords), dtype=bool)
        for k, name in enumerate(self.axes):
            c = coords[:, k]
            lo, hi, size = self.lower[k], self.upper[k], self.cell_size[k]
            if self._periodic[k]:
                ok &= (c >= lo) & (c <= hi)
                i = np.floor((c - lo) / size).astype(np.int64)
                i = np.clip(i, 0, self.cell_counts[k] - 1)
            else:
                ok &= (c >= lo) & (c < hi)
                if name in self.collapse_axes:
                    i = np.zeros(len(c), dtype=np.int64)
                else:
                    with np.errstate(invalid="ignore"):
                        i = np.floor((c - lo) / size)
                    i = np.where(np.isfinite(i), i, -1).astype(np.int64)
                    ok &= (i >= 0) & (i < self.cell_counts[k])
            idx[:, k] = i
        idx[~ok] = 0
        return idx, ok

    def cell_center(self, idx: np.ndarray) -> np.ndarray:
        """Native-frame centers of cells; collapsed axes use the extent midpoint."""
        idx = np.asarray(idx).reshape(-1, 3)
        out = np.empty(idx.shape, dtype=np.float64)
        for k, name in enumerate(self.axes):
            if name in self.collapse_axes:
                out[:, k] = 0.5 * (self.lower[k] + self.upper[k])
            else:
                out[:, k] = self.lower[k] + (idx[:, k] + 0.5) * self.cell_size[k]
        return out

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "cell_size": list(self.cell_size),
            "collapse_axes": sorted(self.collapse_axes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["view"], tuple(d["lower"]), tuple(d["upper"]), tuple(d["cell_size"]),
                   frozenset(d.get("collapse_axes", ())))


def bev_grid(half_extent=74.88, cell=0.32, z_range=(-5.0, 5.0)) -> GridSpec:
    return GridSpec(
        CARTESIAN,
        (-half_extent, -half_extent, z_range[0]),
        (half_extent, half_extent, z_range[1]),
        (cell, cell, z_range[1] - z_range[0]),
        frozenset({"z"}),
    )


def perspective_grid(phi_cells=512, theta_cells=64, theta_range=(math.pi / 4, 3 * math.pi / 4),
                     max_range=200.0) -> GridSpec:
    return GridSpec(
        SPHERICAL,
        (-math.pi, theta_range[0], 0.0),
        (math.pi, theta_range[1], max_range),
        (2 * math.pi / phi_cells, (theta_range[1] - theta_range[0]) / theta_cells, max_range),
        frozenset({"d"}),
    )


def assign_voxel(p: Point, grid: GridSpec):
    """Grid coordinate of a single point, or ``OUT_OF_RANGE`` (None)."""
    if grid.view == SPHERICAL:
        c = np.array([to_spherical(p)])
    else:
        c = np.array([[p[0], p[1], p[2]]], dtype=np.float64)
    idx, ok = grid.index(c)
    if not ok[0]:
        return OUT_OF_RANGE
    return tuple(int(v) for v in idx[0])


@dataclass(frozen=True, eq=False)
class VoxelMapping:
    """Point-to-voxel and voxel-to-points maps for one view.

    ``point_to_voxel[i]`` is a row of ``voxel_coords`` or ``NONE`` (-1).
    Voxels are ordered by linear grid index; member lists ascend by point
    index. ``out_of_range`` counts points outside the grid; ``dropped_points``
    and ``dropped_voxels`` count in-range capacity drops (hard mode only).
    """

    point_to_voxel: np.ndarray
    voxel_coords: np.ndarray
    grid: GridSpec
    dropped_points: int = 0
    dropped_voxels: int = 0
    out_of_range: int = 0
    mode: str = "dynamic"

    def __post_init__(self):
        p2v = np.asarray(self.point_to_voxel, dtype=np.int64)
        vc = np.asarray(self.voxel_coords, dtype=np.int64).reshape(-1, 3)
        p2v.flags.writeable = False
        vc.flags.writeable = False
        object.__setattr__(self, "point_to_voxel", p2v)
        object.__setattr__(self, "voxel_coords", vc)

    @property
    def num_points(self) -> int:
        return len(self.point_to_voxel)

    @property
    def num_voxels(self) -> int:
        return len(self.voxel_coords)

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(order, offsets): mapped point indices grouped by voxel, ascending within each."""
        p2v = self.point_to_voxel
        mapped = np.flatnonzero(p2v >= 0)
        order = mapped[np.argsort(p2v[mapped], kind="stable")]
        counts = np.bincount(p2v[mapped], minlength=self.num_voxels)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return order, offsets

    @property
    def voxel_to_points(self) -> list[np.ndarray]:
        order, off = self.csr
        return [order[off[j]:off[j + 1]] for j in range(self.num_voxels)]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.csr[1])

    @property
    def num_mapped(self) -> int:
        return int((self.point_to_voxel >= 0).sum())

    def as_sets(self) -> dict:
        """{voxel coordinate tuple: frozenset of point indices} for set comparisons."""
        return {tuple(int(v) for v in c): frozenset(int(i) for i in pts)
                for c, pts in zip(self.voxel_coords, self.voxel_to_points)}

    def linear_ids(self) -> np.ndarray:
        return _linear(self.voxel_coords, self.grid.cell_counts)

    def dump(self) -> str:
        """Debug text: one ``voxel <coords>: <point indices>`` line per voxel."""
        lines = []
        for c, pts in zip(self.voxel_coords, self.voxel_to_points):
            coords = ",".join(str(int(v)) for v in c)
            lines.append(f"voxel {coords}: {' '.join(str(int(i)) for i in pts)}")
        return "".join(line + "\n" for line in lines)


def _linear(idx: np.ndarray, counts: tuple) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    return (idx[:, 0] * counts[1] + idx[:, 1]) * counts[2] + idx[:, 2]


def _group(pc_or_xyz, grid: GridSpec):
    xyz = pc_or_xyz.xyz if isinstance(pc_or_xyz, PointCloud) else np.asarray(pc_or_xyz, float).reshape(-1, 3)
    idx, ok = grid.index(grid.coords(xyz))
    lin = _linear(idx, grid.cell_counts)
    in_range = np.flatnonzero(ok)
    uniq, inverse = np.unique(lin[in_range], return_inverse=True)
    coords = np.zeros((len(uniq), 3), dtype=np.int64)
    if len(uniq):
        first = np.zeros(len(uniq), dtype=np.int64)
        first[inverse[::-1]] = in_range[::-1]
        coords = idx[first]
    p2v = np.full(len(xyz), NONE, dtype=np.int64)
    p2v[in_range] = inverse
    return p2v, coords, len(xyz) - len(in_range)


def dynamic_voxelize(pc, grid: GridSpec) -> VoxelMapping:
    """Map every in-range point to its voxel; nothing is sampled or padded."""
    p2v, coords, oor = _group(pc, grid)
    return VoxelMapping(p2v, coords, grid, out_of_range=oor, mode="dynamic")


@dataclass(frozen=True)
class HardVoxelConfig:
    max_voxels: int
    max_points_per_voxel: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_voxels < 1 or self.max_points_per_voxel < 1:
            raise ValueError("max_voxels and max_points_per_voxel must be >= 1")


def hard_voxelize(pc, grid: GridSpec, cfg: HardVoxelConfig) -> VoxelMapping:
    """Fixed-capacity voxelization with seeded uniform subsampling.

    At most ``max_voxels`` voxels survive (drawn uniformly without
    replacement when there are more), and each keeps at most
    ``max_points_per_voxel`` of its points (likewise uniform).
    """
    p2v, coords, oor = _group(pc, grid)
    rng = np.random.default_rng(cfg.rng_seed)
    n_vox = len(coords)
    K, T = cfg.max_voxels, cfg.max_points_per_voxel
    if n_vox > K:
        kept = np.sort(rng.choice(n_vox, size=K, replace=False))
    else:
        kept = np.arange(n_vox)
    remap = np.full(n_vox, NONE, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    mapped = np.flatnonzero(p2v >= 0)
    new_vox = remap[p2v[mapped]]
    alive = new_vox >= 0
    cand, cand_vox = mapped[alive], new_vox[alive]
    # rank points within each voxel by a random key; keep the first T
    keys = rng.random(len(cand))
    order = np.lexsort((keys, cand_vox))
    sorted_vox = cand_vox[order]
    starts = np.searchsorted(sorted_vox, sorted_vox, side="left")
    rank = np.arange(len(order)) - starts
    keep_pts = cand[order[rank < T]]
    out = np.full(len(p2v), NONE, dtype=np.int64)
    out[keep_pts] = remap[p2v[keep_pts]]
    return VoxelMapping(
        out,
        coords[kept],
        grid,
        dropped_points=len(mapped) - len(keep_pts),
        dropped_voxels=n_vox - len(kept),
        out_of_range=oor,
        mode="hard",
    )


@dataclass(frozen=True)
class BufferReport:
    allocated_slots: int
    feature_width: int
    allocated_feature_units: int
    occupied_slots: int
    voxels: int
    dropped_points: int = 0
    dropped_voxels: int = 0
    mode: str = "dynamic"

    def to_text(self) -> str:
        fields = ("mode", "voxels", "allocated_slots", "occupied_slots", "feature_width",
                  "allocated_feature_units", "dropped_points", "dropped_voxels")
        return "".join(f"{k}: {getattr(self, k)}\n" for k in fields)


def buffer_report(mapping: VoxelMapping, cfg: HardVoxelConfig | None, feature_width: int) -> BufferReport:
    """Memory accounting: ``K*T*F`` for hard mode, ``N_in_range*F`` for dynamic.

    Pass ``cfg=None`` for a dynamic mapping.
    """
    occupied = mapping.num_mapped
    if cfg is None:
        slots = mapping.num_points - mapping.out_of_range
        mode = "dynamic"
    else:
        slots = cfg.max_voxels * cfg.max_points_per_voxel
        mode = "hard"
    return BufferReport(
        allocated_slots=slots,
        feature_width=feature_width,
        allocated_feature_units=slots * feature_width,
        occupied_slots=occupied,
        voxels=mapping.num_voxels,
        dropped_points=mapping.dropped_points,
        dropped_voxels=mapping.dropped_voxels,
        mode=mode,
    )


# (K, T) settings from the voxels-vs-points tradeoff study
KT_TRADEOFF_CONFIGS = ((24000, 100), (36000, 66), (48000, 50), (48000, 100))


@dataclass(frozen=True)
class SweepRow:
    max_voxels: int
    max_points_per_voxel: int
    point_coverage: float
    voxel_coverage: float
    allocated_feature_units: int
    dropped_points: int
    dropped_voxels: int


def kt_sweep(clouds: Sequence, grid: GridSpec, configs: Iterable[tuple], feature_width: int = 1,
             rng_seed: int = 0) -> list[SweepRow]:
    """Point/voxel coverage of hard voxelization for each (K, T), pooled over clouds.

    Rows follow the order of ``configs``.
    """
    dyn = [dynamic_voxelize(pc, grid) for pc in clouds]
    total_pts = sum(m.num_mapped for m in dyn)
    total_vox = sum(m.num_voxels for m in dyn)
    rows = []
    for K, T in configs:
        cfg = HardVoxelConfig(int(K), int(T), rng_seed)
        kept_pts = kept_vox = dp = dv = 0
        for pc in clouds:
            m = hard_voxelize(pc, grid, cfg)
            kept_pts += m.num_mapped
            kept_vox += m.num_voxels
            dp += m.dropped_points
            dv += m.dropped_voxels
        rows.append(SweepRow(
            int(K), int(T),
            kept_pts / total_pts if total_pts else 1.0,
            kept_vox / total_vox if total_vox else 1.0,
            int(K) * int(T) * feature_width * max(1, len(clouds)),
            dp, dv,
        ))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    """Comma-delimited table with a header line."""
    head = "K,T,point_coverage,voxel_coverage,allocated_feature_units,dropped_points,dropped_voxels\n"
    body = "".join(
        f"{r.max_voxels},{r.max_points_per_voxel},{r.point_coverage!r},{r.voxel_coverage!r},"
        f"{r.allocated_feature_units},{r.dropped_points},{r.dropped_voxels}\n"
        for r in rows
    )
    return head + body


def toy_grid() -> GridSpec:
    """2 x 2 pillar grid over [0, 2) x [0, 2) with unit cells."""
    return GridSpec(CARTESIAN, (0.0, 0.0, -1.0), (2.0, 2.0, 1.0), (1.0, 1.0, 2.0), frozenset({"z"}))


def toy_cloud() -> PointCloud:
    """13 points in the four pillars of :func:`toy_grid`, holding 6, 4, 2 and 1 points."""
    centers = [(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]
    counts = [6, 4, 2, 1]
    rows = []
    for (cx, cy), n in zip(centers, counts):
        for k in range(n):
            t = (k + 1) / (n + 1) - 0.5
            rows.append((cx + 0.6 * t, cy - 0.4 * t, 0.1 * k, 0.5))
    return PointCloud(np.array(rows), "toy13")
