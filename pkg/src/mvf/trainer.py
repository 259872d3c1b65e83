"""Adam training loop with warmup plus cosine decay, clipping and resumable checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from mvf._io import atomic_write_text
from mvf.boxes import Box
from mvf.detector import Detector, Prepared
from mvf.errors import NonFiniteLoss, ShapeMismatch
from mvf.pointcloud import PointCloud


@dataclass(frozen=True)
class TrainerConfig:
    initial_lr: float = 1.33e-3
    peak_lr: float = 1.5e-3
    warmup_epochs: float = 1.0
    total_epochs: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 10.0
    batch_size: int = 1
    rng_seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs or self.total_epochs <= 0:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs and total_epochs > 0")
        if not 0 < self.initial_lr <= self.peak_lr:
            raise ValueError("need 0 < initial_lr <= peak_lr")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainerConfig) -> float:
    """Linear ramp to the peak over warmup, then cosine decay to 0 at ``total_epochs``."""
    if step < 0 or steps_per_epoch < 1:
        raise ValueError("need step >= 0 and steps_per_epoch >= 1")
    epoch = step / steps_per_epoch
    if epoch < cfg.warmup_epochs:
        return cfg.initial_lr + (cfg.peak_lr - cfg.initial_lr) * epoch / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    if span <= 0:
        return 0.0
    frac = min(1.0, (epoch - cfg.warmup_epochs) / span)
    return 0.5 * cfg.peak_lr * (1.0 + math.cos(math.pi * frac))


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def to_tensors(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, t: int) -> "AdamState":
        s = cls()
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                s.m[k[len("adam.m."):]] = v.copy()
            elif k.startswith("adam.v."):
                s.v[k[len("adam.v."):]] = v.copy()
        s.t = t
        return s


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scales ``grads`` in place; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              cfg: TrainerConfig) -> None:
    """Bias-corrected Adam update of ``params[name].data`` in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {params[name].data.shape}")
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def scene_order(n_scenes: int, epoch: int, seed: int) -> np.ndarray:
    """Shuffle for one epoch, reproducible from the seed and epoch alone."""
    return np.random.default_rng([seed, epoch]).permutation(n_scenes)


class StepRecord(NamedTuple):
    step: int
    loss_cls: float
    loss_reg: float
    lr: float

    @property
    def total(self) -> float:
        return self.loss_cls + self.loss_reg


LOSS_HEADER = "step,loss_cls,loss_reg,lr"


def format_record(r: StepRecord) -> str:
    return f"{r.step},{r.loss_cls!r},{r.loss_reg!r},{r.lr!r}"


class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    def __init__(self, detector: Detector, cfg: TrainerConfig, adam: AdamState | None = None, step: int = 0):
        self.detector = detector
        self.cfg = cfg
        self.adam = adam or AdamState()
        self.step = step

    def save(self, path) -> None:
        meta = {"step": str(self.step), "trainer": json.dumps(self.cfg.to_dict(), sort_keys=True,
                                                               separators=(",", ":"))}
        self.detector.save(path, extra=self.adam.to_tensors(), meta=meta)

    @classmethod
    def load(cls, path, cfg: TrainerConfig | None = None) -> "TrainState":
        det, extra, meta = Detector.load(path)
        step = int(meta.get("step", 0))
        if cfg is None:
            cfg = TrainerConfig.from_dict(json.loads(meta["trainer"])) if "trainer" in meta else TrainerConfig()
        return cls(det, cfg, AdamState.from_tensors(extra, step), step)


def total_steps(n_scenes: int, cfg: TrainerConfig) -> int:
    per_epoch = math.ceil(n_scenes / cfg.batch_size)
    return int(round(cfg.total_epochs * per_epoch))


def train(state: TrainState, scenes: Sequence[tuple[PointCloud, Sequence[Box]]], max_steps: int | None = None,
          out_dir: str | os.PathLike | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
    """Run from ``state.step`` until the schedule ends (or ``max_steps`` more steps).

    Gradients of a mini-batch are averaged over its scenes. With ``out_dir``
    the loss curve goes to ``loss.csv`` (rows past the resumed step are
    dropped) and checkpoints to ``ckpt_<step>.mvf`` plus ``last.mvf``.
    """
    if not scenes:
        raise ValueError("no training scenes")
    cfg, det = state.cfg, state.detector
    prepared: list[Prepared] = [det.prepare(pc, gts) for pc, gts in scenes]
    per_epoch = math.ceil(len(prepared) / cfg.batch_size)
    end = total_steps(len(prepared), cfg)
    if max_steps is not None:
        end = min(end, state.step + max_steps)
    out = Path(out_dir) if out_dir is not None else None
    curve_path = out / "loss.csv" if out else None
    history: list[str] = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if state.step > 0 and curve_path.exists():
            rows = curve_path.read_text().splitlines()[1:]
            history = [r for r in rows if r and int(r.split(",", 1)[0]) <= state.step]
    records: list[StepRecord] = []
    params = det.params.tensors
    while state.step < end:
        epoch, within = divmod(state.step, per_epoch)
        order = scene_order(len(prepared), epoch, cfg.rng_seed)
        batch = order[within * cfg.batch_size:(within + 1) * cfg.batch_size]
        lr = lr_at(state.step, per_epoch, cfg)
        det.params.zero_grad()
        l_cls = l_reg = 0.0
        for i in batch:
            parts = det.loss(prepared[i], training=True)
            if not math.isfinite(float(parts.total.data)):
                raise NonFiniteLoss(f"non-finite loss at step {state.step}", state.step)
            (parts.total / float(len(batch))).backward()
            l_cls += parts.cls * det.cfg.loss.cls_weight / len(batch)
            l_reg += parts.reg * det.cfg.loss.reg_weight / len(batch)
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise NonFiniteLoss(f"non-finite gradient at step {state.step}", state.step)
        clip_by_global_norm(grads, cfg.grad_clip_norm)
        adam_step(params, grads, state.adam, lr, cfg)
        state.step += 1
        rec = StepRecord(state.step, l_cls, l_reg, lr)
        records.append(rec)
        if on_step:
            on_step(rec)
        history.append(format_record(rec))
        if out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            state.save(out / f"ckpt_{state.step}.mvf")
            atomic_write_text(curve_path, "\n".join([LOSS_HEADER, *history]) + "\n")
    if out:
        state.save(out / "last.mvf")
        atomic_write_text(curve_path, "\n".join([LOSS_HEADER, *history]) + "\n")
    return records
