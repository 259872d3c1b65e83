"""Point-cloud data model, spherical transforms, KITTI ingestion and synthetic scenes."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from mvf._io import atomic_write_bytes
from mvf.boxes import Box, points_in_box
from mvf.errors import NonFiniteValue, TruncatedFile

log = logging.getLogger(__name__)

RECORD_BYTES = 16
KITTI_DTYPE = np.dtype("<f4")


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


class SphericalPoint(NamedTuple):
    phi: float
    theta: float
    d: float


def to_spherical(p: Point) -> SphericalPoint:
    """Azimuth in (-pi, pi], inclination from +z in [0, pi], range.

    The origin maps to (0, 0, 0).
    """
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    d = math.sqrt(x * x + y * y + z * z)
    if d == 0.0:
        return SphericalPoint(0.0, 0.0, 0.0)
    phi = math.atan2(y, x)
    if phi == -math.pi:
        phi = math.pi
    theta = math.atan2(math.hypot(x, y), z)
    return SphericalPoint(phi, theta, d)


def cartesian_to_spherical(xyz: np.ndarray) -> np.ndarray:
    """Vectorized :func:`to_spherical`; returns an (N, 3) array of (phi, theta, d)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    d = np.sqrt(x * x + y * y + z * z)
    phi = np.arctan2(y, x)
    phi = np.where(phi == -np.pi, np.pi, phi)
    # atan2 stays accurate near the poles where acos(z / d) does not
    theta = np.arctan2(np.hypot(x, y), z)
    origin = d == 0.0
    phi = np.where(origin, 0.0, phi)
    theta = np.where(origin, 0.0, theta)
    return np.stack([phi, theta, d], axis=1)


def spherical_to_cartesian(sph: np.ndarray) -> np.ndarray:
    sph = np.asarray(sph, dtype=np.float64).reshape(-1, 3)
    phi, theta, d = sph[:, 0], sph[:, 1], sph[:, 2]
    st = np.sin(theta)
    return np.stack([d * st * np.cos(phi), d * st * np.sin(phi), d * np.cos(theta)], axis=1)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered LiDAR returns; row ``i`` is point ``i`` everywhere downstream.

    ``data`` is an (N, 4) float64 array of x, y, z, intensity and is made
    read-only on construction.
    """

    data: np.ndarray
    frame_id: str = ""
    n_clamped: int = 0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True).reshape(-1, 4)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_points(cls, points: Sequence[Point], frame_id: str = "") -> "PointCloud":
        return cls(np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4), frame_id)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Point:
        return Point(*(float(v) for v in self.data[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.data, other.data)

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.data[index], self.frame_id)

    def spherical(self) -> np.ndarray:
        return cartesian_to_spherical(self.xyz)


def read_kitti_bin(path, frame_id: str | None = None) -> PointCloud:
    """Read a KITTI velodyne scan: packed little-endian float32 (x, y, z, intensity).

    Intensities outside [0, 1] are clamped and counted in ``n_clamped``.
    """
    size = os.path.getsize(path)
    if size % RECORD_BYTES:
        raise TruncatedFile(f"{path}: {size} bytes is not a multiple of {RECORD_BYTES}")
    raw = np.fromfile(path, dtype=KITTI_DTYPE).reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(raw).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteValue(f"{path}: non-finite value in record {idx}", record_index=idx)
    out = (raw[:, 3] < 0.0) | (raw[:, 3] > 1.0)
    n_clamped = int(out.sum())
    if n_clamped:
        log.warning("%s: clamped %d intensities into [0, 1]", path, n_clamped)
        raw[:, 3] = np.clip(raw[:, 3], 0.0, 1.0)
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return PointCloud(raw, frame_id, n_clamped)


def write_kitti_bin(path, pc: PointCloud) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(pc.data, dtype=KITTI_DTYPE).tobytes())


DEFAULT_SIZE_RANGES = {
    "vehicle": ((3.8, 5.2), (1.7, 2.1), (1.4, 1.9)),
    "pedestrian": ((0.5, 0.9), (0.5, 0.9), (1.5, 1.9)),
}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parameters of a desk-scale synthetic scene.

    ``boxes`` are placed verbatim; ``object_count`` further objects are drawn
    at random with classes from ``class_mix`` and sizes from
    ``object_size_ranges``.
    """

    object_count: int = 8
    object_size_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    points_per_object: tuple = (120, 250)
    background_points: int = 1500
    rng_seed: int = 0
    class_mix: dict = field(default_factory=lambda: {"vehicle": 1.0})
    extent: float = 25.6
    min_range: float = 4.0
    ground_z: float = -1.8
    boxes: tuple = ()

    def __post_init__(self):
        if self.object_count < 0 or self.background_points < 0:
            raise ValueError("counts must be non-negative")
        lo, hi = self.points_per_object
        if not 0 <= lo <= hi:
            raise ValueError("points_per_object must satisfy 0 <= min <= max")
        for label, ranges in self.object_size_ranges.items():
            for mn, mx in ranges:
                if not 0 < mn <= mx:
                    raise ValueError(f"bad size range for {label}: {(mn, mx)}")
        for label in self.class_mix:
            if label not in self.object_size_ranges:
                raise ValueError(f"no size range for class {label!r}")


def _sample_object_points(rng, box: Box, n: int) -> np.ndarray:
    # Mostly surface returns on sensor-facing faces and the roof, inset so
    # every point stays strictly inside the box.
    inset = 0.96
    half = np.array([box.l, box.w, box.h]) / 2 * inset
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    to_sensor = -np.array([c * box.x + s * box.y, -s * box.x + c * box.y])
    face = rng.integers(0, 3, size=n)
    on_surface = rng.random(n) < 0.8
    for axis in (0, 1):
        sel = on_surface & (face == axis)
        local[sel, axis] = math.copysign(half[axis], to_sensor[axis] or 1.0)
    local[on_surface & (face == 2), 2] = half[2]
    xy = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1]], axis=1)
    pts = np.column_stack([xy + [box.x, box.y], local[:, 2] + box.z])
    return pts


def _place_boxes(rng, spec: SyntheticSceneSpec) -> list[Box]:
    boxes = list(spec.boxes)
    labels = sorted(spec.class_mix)
    probs = np.array([spec.class_mix[k] for k in labels], dtype=float)
    probs = probs / probs.sum() if len(labels) else probs
    placed = 0
    attempts = 0
    while placed < spec.object_count:
        attempts += 1
        if attempts > 1000 * (spec.object_count + 1):
            raise RuntimeError("could not place non-overlapping objects; reduce object_count")
        label = labels[int(rng.choice(len(labels), p=probs))]
        (l0, l1), (w0, w1), (h0, h1) = spec.object_size_ranges[label]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        margin = 0.5 * math.hypot(l, w) + 0.5
        x, y = rng.uniform(-spec.extent + margin, spec.extent - margin, size=2)
        if math.hypot(x, y) < spec.min_range:
            continue
        yaw = float(rng.uniform(-math.pi, math.pi))
        cand = Box(float(x), float(y), spec.ground_z + h / 2, l, w, h, yaw, label=label)
        if any(
            math.hypot(b.x - cand.x, b.y - cand.y) < 0.5 * (math.hypot(b.l, b.w) + math.hypot(l, w)) + 0.3
            for b in boxes
        ):
            continue
        boxes.append(cand)
        placed += 1
    return boxes


def _sample_background(rng, spec: SyntheticSceneSpec, boxes: list[Box], n: int) -> np.ndarray:
    out = np.zeros((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        # planar density ~ 1/r, as for a spinning sensor
        r = rng.uniform(1.0, spec.extent * math.sqrt(2.0), size=m)
        a = rng.uniform(-math.pi, math.pi, size=m)
        pts = np.column_stack([r * np.cos(a), r * np.sin(a), spec.ground_z + rng.normal(0.0, 0.03, size=m)])
        clutter = rng.random(m) < 0.2
        pts[clutter, 2] = spec.ground_z + rng.uniform(0.0, 3.0, size=int(clutter.sum()))
        keep = (np.abs(pts[:, 0]) < spec.extent) & (np.abs(pts[:, 1]) < spec.extent)
        for b in boxes:
            keep &= ~points_in_box(pts, b, margin=0.05)
        out = np.vstack([out, pts[keep]])
    return out[:n]


def generate_scene(spec: SyntheticSceneSpec) -> tuple[PointCloud, list[Box]]:
    """Build a synthetic scene; a pure function of ``spec``.

    Object points lie inside their box, background points outside every box.
    """
    rng = np.random.default_rng(spec.rng_seed)
    boxes = _place_boxes(rng, spec)
    chunks = []
    lo, hi = spec.points_per_object
    for b in boxes:
        n = int(rng.integers(lo, hi + 1))
        xyz = _sample_object_points(rng, b, n)
        chunks.append(np.column_stack([xyz, rng.uniform(0.2, 0.9, size=n)]))
    bg = _sample_background(rng, spec, boxes, spec.background_points)
    chunks.append(np.column_stack([bg, rng.uniform(0.0, 0.3, size=len(bg))]))
    data = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return PointCloud(data, f"synthetic-{spec.rng_seed}"), boxes


def generate_panorama(
    rng_seed: int = 0,
    beams: int = 64,
    azimuth_steps: int = 2650,
    sensor_height: float = 2.0,
    max_range: float = 74.88,
    elevation_deg: tuple = (-17.6, 2.4),
    occluder_fraction: float = 0.6,
    vegetation_fraction: float = 0.5,
    vegetation_depth: float = 6.0,
    ground_roughness: float = 0.05,
) -> PointCloud:
    """Ray-sampled 360-degree scan over rough ground with one occluder per 1-degree sector.

    Beams are packed more densely toward the horizon. Vegetation occluders
    let rays penetrate an exponentially distributed depth, solid ones stop
    them at their face. Point density falls off with range the way a
    spinning sensor's does.
    """
    rng = np.random.default_rng(rng_seed)
    u = np.linspace(0.0, 1.0, beams)
    lo, hi = elevation_deg
    elev = np.deg2rad(hi - (hi - lo) * u ** 1.6)
    az = np.linspace(-math.pi, math.pi, azimuth_steps, endpoint=False)
    n_sectors = 360
    occ_dist = np.where(rng.uniform(size=n_sectors) < occluder_fraction,
                        rng.uniform(8.0, 70.0, size=n_sectors), np.inf)
    occ_height = rng.uniform(1.0, 8.0, size=n_sectors)
    vegetation = rng.uniform(size=n_sectors) < vegetation_fraction
    e, a = np.meshgrid(elev, az, indexing="ij")
    e, a = e.ravel(), a.ravel()
    sector = ((a + math.pi) / (2 * math.pi) * n_sectors).astype(int) % n_sectors
    dz = rng.normal(0.0, ground_roughness, size=e.shape)
    with np.errstate(divide="ignore"):
        ground_r = np.where(e < 0, (sensor_height + dz) / np.tan(-e), np.inf)
    depth = np.where(vegetation[sector], rng.exponential(vegetation_depth, size=e.shape), 0.0)
    od = occ_dist[sector] + depth
    z_at_occ = od * np.tan(e)
    hits = np.isfinite(od) & (z_at_occ > -sensor_height) & (z_at_occ < occ_height[sector] - sensor_height)
    r = np.where(hits & (od < ground_r), od, ground_r)
    r = r + rng.normal(0.0, 0.02, size=r.shape)
    keep = np.isfinite(r) & (r > 0.5)
    r, e, a = r[keep], e[keep], a[keep]
    x, y = r * np.cos(a), r * np.sin(a)
    z = r * np.tan(e)
    inside = (np.abs(x) < max_range) & (np.abs(y) < max_range)
    data = np.column_stack([x, y, z, rng.uniform(0.0, 1.0, size=x.shape)])[inside]
    return PointCloud(data, f"panorama-{rng_seed}")
