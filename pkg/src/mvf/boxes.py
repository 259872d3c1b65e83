"""Oriented 3D boxes: representation, text I/O and rotated-IoU geometry.

Boxes are upright (yaw-only rotation about +z). ``l`` runs along the heading
direction, ``w`` across it. Arrays of boxes use the column order
``x, y, z, l, w, h, yaw``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from mvf._io import atomic_write_text

TWO_PI = 2.0 * math.pi
AREA_EPS = 1e-12


def normalize_angle(a):
    """Wrap angles to (-pi, pi]. Works on scalars and arrays."""
    r = np.remainder(np.asarray(a, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    if np.ndim(r) == 0:
        return float(r)
    return r


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    label: str = "vehicle"
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got {self.l}, {self.w}, {self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a, label="vehicle", score=1.0) -> "Box":
        a = [float(v) for v in a]
        return cls(*a[:6], normalize_angle(a[6]), label=label, score=float(score))

    def with_score(self, score: float) -> "Box":
        return replace(self, score=float(score))

    @property
    def range(self) -> float:
        """Planar distance of the box center from the sensor origin."""
        return math.hypot(self.x, self.y)


# Role aliases; all three share one geometry.
GroundTruthBox = Box
AnchorBox = Box
DetectionBox = Box


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def corners_bev(box) -> np.ndarray:
    """Footprint corners, counter-clockwise, shape (4, 2)."""
    x, y, _, l, w, _, yaw = np.asarray(box.as_array() if isinstance(box, Box) else box, float)[:7]
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a, b) -> float:
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, float)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, float)
    if tuple(a[:7]) > tuple(b[:7]):
        a, b = b, a  # fixed operand order keeps iou(a, b) == iou(b, a) bitwise
    # circumscribed-circle reject
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    poly = clip_convex(corners_bev(a), corners_bev(b))
    area = polygon_area(poly)
    return area if area > AREA_EPS else 0.0


def bev_iou(a, b) -> float:
    """IoU of the two yaw-rotated footprints."""
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, float)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, float)
    inter = bev_intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a, b) -> float:
    """Volume IoU of two upright boxes."""
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, float)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, float)
    zo = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if zo <= 0:
        return 0.0
    inter = bev_intersection(a, b) * zo
    if inter == 0.0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(1.0, max(0.0, inter / union)))


def pairwise_bev_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense (len(a), len(b)) BEV IoU matrix; far pairs skip the clipper."""
    a = np.asarray(a, float).reshape(-1, 7)
    b = np.asarray(b, float).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None, :])):
        out[i, j] = bev_iou(a[i], b[j])
    return out


def points_in_box(xyz: np.ndarray, box, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``box`` (inclusive), optionally inflated by ``margin``."""
    bx = box.as_array() if isinstance(box, Box) else np.asarray(box, float)
    d = np.asarray(xyz, float)[:, :3] - bx[:3]
    c, s = math.cos(bx[6]), math.sin(bx[6])
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (
        (np.abs(lx) <= bx[3] / 2 + margin)
        & (np.abs(ly) <= bx[4] / 2 + margin)
        & (np.abs(d[:, 2]) <= bx[5] / 2 + margin)
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_boxes(path, boxes: Iterable[Box], with_score: bool = False) -> None:
    """One box per line: ``class [score] x y z l w h yaw``. Written atomically."""
    lines = []
    for b in boxes:
        fields = [b.label]
        if with_score:
            fields.append(_fmt(b.score))
        fields += [_fmt(v) for v in (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)]
        lines.append(" ".join(fields))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_boxes(path, with_score: bool = False) -> list[Box]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            expect = 9 if with_score else 8
            if len(parts) != expect:
                raise ValueError(f"{path}:{lineno}: expected {expect} fields, got {len(parts)}")
            label = parts[0]
            if with_score:
                score, vals = float(parts[1]), [float(v) for v in parts[2:]]
            else:
                score, vals = 1.0, [float(v) for v in parts[1:]]
            boxes.append(Box(*vals, label=label, score=score))
    return boxes
