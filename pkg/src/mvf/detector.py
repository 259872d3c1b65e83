"""End-to-end detector: fusion network, backbone, anchor head and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence


from mvf import tensor as T
from mvf.boxes import Box
from mvf.checkpoint import load_tensors, save_tensors
from mvf.head import (
    AnchorGridSpec,
    LossConfig,
    Targets,
    assign_targets,
    decode_and_nms,
    focal_loss,
    generate_anchors,
    regression_loss,
)
from mvf.network import (
    FUSION_ORDER,
    MvfConfig,
    Params,
    backbone_forward,
    head_forward,
    init_params,
    mvf_forward,
    voxelize_views,
)
from mvf.pointcloud import PointCloud


@dataclass(frozen=True)
class DetectorConfig:
    mvf: MvfConfig = field(default_factory=MvfConfig)
    anchors: AnchorGridSpec = field(default_factory=AnchorGridSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def to_dict(self) -> dict:
        return {
            "mvf": self.mvf.to_dict(),
            "anchors": self.anchors.to_dict(),
            "loss": dict(self.loss.__dict__),
            "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
            "max_detections": self.max_detections,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            mvf=MvfConfig.from_dict(d.get("mvf", {})),
            anchors=AnchorGridSpec.from_dict(d["anchors"]) if "anchors" in d else AnchorGridSpec(),
            loss=LossConfig(**d.get("loss", {})),
            score_threshold=d.get("score_threshold", 0.05),
            nms_iou=d.get("nms_iou", 0.5),
            max_detections=d.get("max_detections", 100),
        )


class Prepared(NamedTuple):
    """Per-scene work that does not depend on the weights."""

    cloud: PointCloud
    views: tuple
    targets: Targets | None


class LossParts(NamedTuple):
    total: T.Tensor
    cls: float
    reg: float
    has_positives: bool


class Detector:
    def __init__(self, cfg: DetectorConfig | None = None, rng_seed: int = 0):
        self.cfg = cfg or DetectorConfig()
        self.params: Params = init_params(self.cfg.mvf, rng_seed, self.cfg.anchors.anchors_per_cell)
        self.anchors, self.anchor_class = generate_anchors(self.cfg.anchors, self.cfg.mvf.bev_grid)

    def prepare(self, pc: PointCloud, gts: Sequence[Box] | None = None) -> Prepared:
        targets = None
        if gts is not None:
            targets = assign_targets(self.anchors, self.anchor_class, gts, self.cfg.anchors)
        return Prepared(pc, voxelize_views(pc, self.cfg.mvf), targets)

    def forward(self, prepared: Prepared, training: bool = False):
        """Per-anchor logits (M,) and residuals (M, 7)."""
        out = mvf_forward(prepared.cloud, self.cfg.mvf, self.params, training, views=prepared.views)
        feats = backbone_forward(out.pseudo_image, self.cfg.mvf, self.params, training)
        return head_forward(feats, self.params)

    def loss(self, prepared: Prepared, training: bool = True) -> LossParts:
        if prepared.targets is None:
            raise ValueError("scene was prepared without ground truth")
        lc = self.cfg.loss
        logits, reg = self.forward(prepared, training)
        tg = prepared.targets
        l_cls = focal_loss(T.sigmoid(logits), tg.labels, lc.alpha, lc.gamma, lc.eps)
        l_reg, has_pos = regression_loss(reg, tg.residuals, tg.labels == 1, lc.beta)
        total = T.add(T.mul(l_cls, lc.cls_weight), T.mul(l_reg, lc.reg_weight))
        return LossParts(total, float(l_cls.data), float(l_reg.data), has_pos)

    def detect(self, pc: PointCloud) -> list[Box]:
        prepared = self.prepare(pc)
        if len(prepared.views[0]) == 0:
            return []
        logits, reg = self.forward(prepared, training=False)
        c = self.cfg
        return decode_and_nms(logits.data, reg.data, self.anchors, self.anchor_class, c.anchors.labels,
                              c.score_threshold, c.nms_iou, c.max_detections)

    def save(self, path, extra: dict | None = None, meta: dict | None = None) -> None:
        tensors = {f"param.{k}": v for k, v in self.params.state_dict().items()}
        tensors.update(extra or {})
        m = {"config": json.dumps(self.cfg.to_dict(), sort_keys=True, separators=(",", ":")),
             "fusion_order": ",".join(FUSION_ORDER)}
        m.update(meta or {})
        save_tensors(path, tensors, m)

    @classmethod
    def load(cls, path) -> tuple["Detector", dict, dict]:
        """Returns ``(detector, extra_tensors, meta)``."""
        tensors, meta = load_tensors(path)
        if meta.get("fusion_order", ",".join(FUSION_ORDER)) != ",".join(FUSION_ORDER):
            raise ValueError(f"{path}: unsupported fusion order {meta['fusion_order']}")
        det = cls(DetectorConfig.from_dict(json.loads(meta["config"])))
        state = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        det.params.load_state_dict(state)
        extra = {k: v for k, v in tensors.items() if not k.startswith("param.")}
        return det, extra, meta


def load_config(path) -> DetectorConfig:
    with open(path) as fh:
        return DetectorConfig.from_dict(json.load(fh))
