"""Anchors, residual coding, target assignment, losses, decoding and NMS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from mvf import tensor as T
from mvf.boxes import Box, bev_iou, boxes_to_array, normalize_angle, pairwise_bev_iou, write_boxes
from mvf.errors import DegenerateAnchor
from mvf.tensor import Tensor
from mvf.voxelizer import GridSpec

NEGATIVE, IGNORE, POSITIVE = 0, -1, 1


@dataclass(frozen=True)
class ClassAnchor:
    label: str
    l: float
    w: float
    h: float
    z_center: float
    orientations: tuple = (0.0, math.pi / 2)
    match_hi: float = 0.6
    match_lo: float = 0.45

    def __post_init__(self):
        if not self.orientations:
            raise ValueError("orientations must be non-empty")
        if not 0 <= self.match_lo <= self.match_hi <= 1:
            raise ValueError("need 0 <= match_lo <= match_hi <= 1")


VEHICLE = ClassAnchor("vehicle", 4.5, 2.0, 1.6, -1.0, match_hi=0.6, match_lo=0.45)
PEDESTRIAN = ClassAnchor("pedestrian", 0.6, 0.8, 1.8, -0.9, match_hi=0.5, match_lo=0.35)


@dataclass(frozen=True)
class AnchorGridSpec:
    """Anchor set tiled once per BEV cell per class per orientation."""

    classes: tuple = (VEHICLE,)

    @property
    def anchors_per_cell(self) -> int:
        return sum(len(c.orientations) for c in self.classes)

    @property
    def labels(self) -> tuple:
        return tuple(c.label for c in self.classes)

    def to_dict(self) -> dict:
        return {"classes": [dict(asdict(c), orientations=list(c.orientations)) for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorGridSpec":
        return cls(tuple(ClassAnchor(**dict(c, orientations=tuple(c["orientations"]))) for c in d["classes"]))


def generate_anchors(spec: AnchorGridSpec, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(M, 7) anchor boxes and (M,) class indices in (row, col, slot) order."""
    H, W = grid.plane_shape
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cx = grid.lower[0] + (ii.ravel() + 0.5) * grid.cell_size[0]
    cy = grid.lower[1] + (jj.ravel() + 0.5) * grid.cell_size[1]
    slots, cls = [], []
    for k, c in enumerate(spec.classes):
        for yaw in c.orientations:
            slots.append((c.z_center, c.l, c.w, c.h, yaw))
            cls.append(k)
    S = len(slots)
    anchors = np.zeros((H * W, S, 7))
    anchors[:, :, 0] = cx[:, None]
    anchors[:, :, 1] = cy[:, None]
    anchors[:, :, 2:7] = np.array(slots)[None]
    return anchors.reshape(-1, 7), np.tile(np.array(cls, dtype=np.int64), H * W)


class ResidualVector(NamedTuple):
    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals of ground-truth boxes against anchors, both (M, 7)."""
    gt = np.asarray(gt, float).reshape(-1, 7)
    a = np.asarray(anchors, float).reshape(-1, 7)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    if (diag <= 0).any() or (a[:, 5] <= 0).any():
        raise DegenerateAnchor("anchor base diagonal and height must be positive")
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - a[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - a[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - a[:, 2]) / a[:, 5]
    out[:, 3:6] = np.log(gt[:, 3:6] / a[:, 3:6])
    out[:, 6] = gt[:, 6] - a[:, 6]
    return out


def decode_boxes(res: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; yaw wrapped to (-pi, pi]."""
    r = np.asarray(res, float).reshape(-1, 7)
    a = np.asarray(anchors, float).reshape(-1, 7)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    out = np.empty_like(r)
    out[:, 0] = r[:, 0] * diag + a[:, 0]
    out[:, 1] = r[:, 1] * diag + a[:, 1]
    out[:, 2] = r[:, 2] * a[:, 5] + a[:, 2]
    out[:, 3:6] = np.exp(r[:, 3:6]) * a[:, 3:6]
    out[:, 6] = normalize_angle(r[:, 6] + a[:, 6])
    return out


def encode_residual(gt: Box, anchor: Box) -> ResidualVector:
    return ResidualVector(*encode_boxes(gt.as_array(), anchor.as_array())[0].tolist())


def decode_residual(r: Sequence[float], anchor: Box) -> Box:
    return Box.from_array(decode_boxes(np.asarray(r, float), anchor.as_array())[0], label=anchor.label)


class Targets(NamedTuple):
    labels: np.ndarray  # POSITIVE / NEGATIVE / IGNORE per anchor
    matched_gt: np.ndarray  # gt index for positives, -1 otherwise
    residuals: np.ndarray  # (M, 7), zero for non-positives


def assign_targets(anchors: np.ndarray, anchor_class: np.ndarray, gts: Sequence[Box],
                   spec: AnchorGridSpec) -> Targets:
    """BEV-IoU matching of anchors to same-class ground truth.

    IoU >= ``match_hi`` is positive (best gt), below ``match_lo`` negative,
    in between ignored. Each gt is then force-matched to its best anchor.
    """
    M = len(anchors)
    labels = np.full(M, NEGATIVE, dtype=np.int64)
    matched = np.full(M, -1, dtype=np.int64)
    gt_arr = boxes_to_array(list(gts))
    gt_lbl = np.array([b.label for b in gts], dtype=object)
    for k, c in enumerate(spec.classes):
        a_idx = np.flatnonzero(anchor_class == k)
        g_idx = np.flatnonzero(gt_lbl == c.label) if len(gts) else np.zeros(0, dtype=np.int64)
        if len(a_idx) == 0 or len(g_idx) == 0:
            continue
        iou = pairwise_bev_iou(anchors[a_idx], gt_arr[g_idx])
        best = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(a_idx)), best]
        pos = best_iou >= c.match_hi
        ign = ~pos & (best_iou >= c.match_lo)
        labels[a_idx[ign]] = IGNORE
        labels[a_idx[pos]] = POSITIVE
        matched[a_idx[pos]] = g_idx[best[pos]]
        for col, g in enumerate(g_idx):
            a_best = int(iou[:, col].argmax())
            if iou[a_best, col] > 0:
                labels[a_idx[a_best]] = POSITIVE
                matched[a_idx[a_best]] = g
    residuals = np.zeros((M, 7))
    pos = labels == POSITIVE
    if pos.any():
        residuals[pos] = encode_boxes(gt_arr[matched[pos]], anchors[pos])
    return Targets(labels, matched, residuals)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 1.0
    cls_weight: float = 1.0
    reg_weight: float = 2.0
    eps: float = 1e-7

    def __post_init__(self):
        if not 0 < self.alpha < 1 or self.gamma < 0 or self.beta <= 0:
            raise ValueError("need 0 < alpha < 1, gamma >= 0, beta > 0")


def focal_loss(p, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0, eps: float = 1e-7) -> Tensor:
    """Sigmoid focal loss normalized by the positive count (at least 1).

    Positives contribute ``-alpha (1-p)^gamma log p``, negatives
    ``-(1-alpha) p^gamma log(1-p)``; ignored anchors nothing.
    """
    p = T.clamp(T.as_tensor(p), eps, 1.0 - eps)
    labels = np.asarray(labels)
    pos = (labels == POSITIVE).astype(float)
    neg = (labels == NEGATIVE).astype(float)
    q = 1.0 - p
    pos_term = T.mul(T.mul(T.power(q, gamma), T.log(p)), -alpha * pos)
    neg_term = T.mul(T.mul(T.power(p, gamma), T.log(q)), -(1.0 - alpha) * neg)
    return T.sum_all(T.add(pos_term, neg_term)) / max(1.0, float(pos.sum()))


def regression_loss(pred, target: np.ndarray, positive: np.ndarray, beta: float = 1.0) -> tuple[Tensor, bool]:
    """Smooth-L1 over six residual diffs plus smooth-L1 of sin(angle diff), mean over positives.

    Returns ``(loss, has_positives)``; without positives the loss is 0.
    """
    pred = T.as_tensor(pred)
    idx = np.flatnonzero(np.asarray(positive))
    if len(idx) == 0:
        return T.mul(T.sum_all(pred), 0.0), False
    diff = T.take_rows(pred, idx) - np.asarray(target, float)[idx]
    geo_mask = np.zeros((len(idx), 7))
    geo_mask[:, :6] = 1.0
    geo = T.smooth_l1(T.mul(diff, geo_mask), beta)
    ang = T.smooth_l1(T.mul(T.sin(diff), 1.0 - geo_mask), beta)
    return T.sum_all(T.add(geo, ang)) / float(len(idx)), True


def nms_bev(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS on rotated footprints; returns kept indices by descending score."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    kept: list[int] = []
    for i in order:
        if all(bev_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(int(i))
    return kept


def _sigmoid(x):
    x = np.asarray(x, float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode_and_nms(logits: np.ndarray, residuals: np.ndarray, anchors: np.ndarray, anchor_class: np.ndarray,
                   labels: Sequence[str], score_threshold: float = 0.05, nms_iou: float = 0.5,
                   max_out: int = 100, pre_nms_top: int = 1000) -> list[Box]:
    """Sigmoid scores, threshold, decode, per-class greedy NMS, sorted by score."""
    scores = _sigmoid(logits)
    out: list[Box] = []
    for k, label in enumerate(labels):
        idx = np.flatnonzero((anchor_class == k) & (scores >= score_threshold))
        if len(idx) == 0:
            continue
        idx = idx[np.argsort(-scores[idx], kind="stable")[:pre_nms_top]]
        boxes = decode_boxes(residuals[idx], anchors[idx])
        for j in nms_bev(boxes, scores[idx], nms_iou):
            out.append(Box.from_array(boxes[j], label=label, score=float(scores[idx[j]])))
    out.sort(key=lambda b: -b.score)
    return out[:max_out]


def write_detections(path, dets: Sequence[Box]) -> None:
    """One detection per line: ``class score x y z l w h yaw``."""
    write_boxes(path, dets, with_score=True)
