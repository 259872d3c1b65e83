"""Average precision over BEV and 3D IoU, bucketed by range from the sensor."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mvf._io import atomic_write_text
from mvf.boxes import Box, bev_iou, iou_3d

MODES = {"bev": bev_iou, "3d": iou_3d}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"vehicle": 0.7, "pedestrian": 0.5})
    buckets: tuple = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))
    modes: tuple = ("bev", "3d")

    def __post_init__(self):
        for label, t in self.iou_thresholds.items():
            if not 0 < t <= 1:
                raise ValueError(f"IoU threshold for {label} must be in (0, 1]")
        prev = -math.inf
        for lo, hi in self.buckets:
            if not (lo < hi and lo >= prev):
                raise ValueError("buckets must be ordered and disjoint")
            prev = hi
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")


def bucket_name(bucket) -> str:
    lo, hi = bucket
    fmt = lambda v: "inf" if math.isinf(v) else f"{v:g}"  # noqa: E731
    return f"{fmt(lo)}-{fmt(hi)}"


@dataclass
class APResult:
    """One (class, mode, bucket) cell. ``ap`` is None when there is no ground truth."""

    ap: float | None
    n_gt: int
    tp: int
    fp: int
    fn: int
    precision: np.ndarray
    recall: np.ndarray
    tp_cum: np.ndarray
    fp_cum: np.ndarray


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_fn, threshold: float):
    """Score-descending greedy matching; returns (order, is_tp) over detections.

    Each detection takes its highest-IoU ground truth (lowest index on ties);
    it is a true positive when that IoU clears ``threshold`` and the ground
    truth is still unmatched.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    is_tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            v = iou_fn(dets[i], g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= threshold and not taken[best_j]:
            taken[best_j] = True
            is_tp[rank] = True
    return order, is_tp


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    """Results keyed by ``(class, mode, bucket_name)``; bucket ``overall`` spans all ranges."""

    results: dict
    config: EvalConfig

    def ap(self, label: str, mode: str, bucket: str = "overall") -> float | None:
        return self.results[(label, mode, bucket)].ap

    def metrics(self) -> dict:
        """Flat keys such as ``vehicle.bev.ap.30-50``; absent APs map to None."""
        out = {}
        for (label, mode, bucket), r in self.results.items():
            out[f"{label}.{mode}.ap.{bucket}"] = r.ap
            out[f"{label}.{mode}.tp.{bucket}"] = r.tp
            out[f"{label}.{mode}.fp.{bucket}"] = r.fp
            out[f"{label}.{mode}.fn.{bucket}"] = r.fn
            out[f"{label}.{mode}.n_gt.{bucket}"] = r.n_gt
        return out

    def to_text(self) -> str:
        lines = []
        for (label, mode, bucket), r in self.results.items():
            ap = "absent" if r.ap is None else f"{r.ap:.6f}"
            lines.append(f"{label} {mode} {bucket}: ap={ap} tp={r.tp} fp={r.fp} fn={r.fn} n_gt={r.n_gt}")
        return "".join(line + "\n" for line in lines)

    def write(self, text_path, metrics_path) -> None:
        atomic_write_text(text_path, self.to_text())
        atomic_write_text(metrics_path, json.dumps(self.metrics(), indent=1, sort_keys=True) + "\n")


def _in_bucket(box: Box, bucket) -> bool:
    lo, hi = bucket
    return lo <= box.range < hi


def compute_ap(dets: Sequence[Box], gts: Sequence[Box], cfg: EvalConfig | None = None) -> EvalReport:
    """AP per class, mode and range bucket for a single frame.

    Ground truths fall into buckets by their own center range and detections
    by theirs. ``overall`` is computed over every range, not averaged.
    """
    return compute_ap_frames([(dets, gts)], cfg)


def compute_ap_frames(frames: Sequence[tuple], cfg: EvalConfig | None = None) -> EvalReport:
    """AP over several frames ``[(dets, gts), ...]``; matching stays within a frame."""
    cfg = cfg or EvalConfig()
    results = {}
    for label, thr in cfg.iou_thresholds.items():
        for mode in cfg.modes:
            fn = MODES[mode]
            for bucket in [None, *cfg.buckets]:
                name = "overall" if bucket is None else bucket_name(bucket)
                scored, n_gt = [], 0
                for dets, gts in frames:
                    d = [x for x in dets if x.label == label and (bucket is None or _in_bucket(x, bucket))]
                    g = [x for x in gts if x.label == label and (bucket is None or _in_bucket(x, bucket))]
                    order, is_tp = match_detections(d, g, fn, thr)
                    scored += [(d[i].score, bool(t)) for i, t in zip(order, is_tp)]
                    n_gt += len(g)
                scored.sort(key=lambda s: -s[0])
                flags = np.array([t for _, t in scored], dtype=bool)
                tp_cum = np.cumsum(flags).astype(np.int64)
                fp_cum = np.cumsum(~flags).astype(np.int64)
                precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
                recall = tp_cum / n_gt if n_gt else np.zeros(len(tp_cum))
                tp = int(tp_cum[-1]) if len(tp_cum) else 0
                fp = int(fp_cum[-1]) if len(fp_cum) else 0
                results[(label, mode, name)] = APResult(
                    average_precision(precision, recall) if n_gt else None,
                    n_gt, tp, fp, n_gt - tp, precision, recall, tp_cum, fp_cum)
    return EvalReport(results, cfg)
