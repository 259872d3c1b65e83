"""Multi-view fusion network and a reduced pillar-style BEV backbone.

Per point: local offsets in its BEV pillar and perspective frustum plus
intensity go through a shared FC (linear, BN, ReLU). Each view then applies
its own FC, max-pools points into voxels, runs a resolution-preserving conv
tower over the dense voxel canvas and gathers the result back to points.
The shared embedding and both view contexts are concatenated, reduced, and
max-pooled one final time into the BEV pseudo-image fed to the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from mvf import tensor as T
from mvf.errors import InconsistentMapping, ShapeMismatch
from mvf.pointcloud import PointCloud
from mvf.tensor import BatchNormState, Tensor
from mvf.voxelizer import GridSpec, VoxelMapping, bev_grid, dynamic_voxelize, perspective_grid

POINT_INPUT_DIM = 7
FUSION_ORDER = ("shared", "bev", "persp")


def desk_bev_grid() -> GridSpec:
    return bev_grid(half_extent=25.6, cell=0.8, z_range=(-3.0, 3.0))


def desk_persp_grid() -> GridSpec:
    return perspective_grid(phi_cells=64, theta_cells=16)


@dataclass(frozen=True)
class MvfConfig:
    point_embed_dim: int = 128
    view_feature_dim: int = 64
    fused_output_dim: int = 64
    bev_grid: GridSpec = field(default_factory=desk_bev_grid)
    persp_grid: GridSpec = field(default_factory=desk_persp_grid)
    tower_depth: int = 2
    backbone_channels: tuple = (32, 64)
    backbone_strides: tuple = (1, 2)
    backbone_layers: int = 1
    use_perspective: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        object.__setattr__(self, "backbone_strides", tuple(int(s) for s in self.backbone_strides))
        for name in ("point_embed_dim", "view_feature_dim", "fused_output_dim", "tower_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.backbone_channels) != len(self.backbone_strides) or not self.backbone_channels:
            raise ValueError("backbone_channels and backbone_strides must be non-empty and equal length")
        scale = 2 ** self.tower_depth
        for g in (self.bev_grid, self.persp_grid):
            H, W = g.plane_shape
            if H % scale or W % scale:
                raise ValueError(f"grid plane {H}x{W} is not divisible by {scale}")
        H, W = self.bev_grid.plane_shape
        total = int(np.prod(self.backbone_strides))
        if H % total or W % total:
            raise ValueError(f"BEV plane {H}x{W} is not divisible by backbone stride {total}")

    @property
    def backbone_out_dim(self) -> int:
        return sum(self.backbone_channels)

    def to_dict(self) -> dict:
        return {
            "point_embed_dim": self.point_embed_dim,
            "view_feature_dim": self.view_feature_dim,
            "fused_output_dim": self.fused_output_dim,
            "bev_grid": self.bev_grid.to_dict(),
            "persp_grid": self.persp_grid.to_dict(),
            "tower_depth": self.tower_depth,
            "backbone_channels": list(self.backbone_channels),
            "backbone_strides": list(self.backbone_strides),
            "backbone_layers": self.backbone_layers,
            "use_perspective": self.use_perspective,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MvfConfig":
        d = dict(d)
        for k in ("bev_grid", "persp_grid"):
            if k in d:
                d[k] = GridSpec.from_dict(d[k])
        return cls(**d)


class Params:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def add(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    def add_bn(self, name: str, channels: int) -> None:
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState(channels)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def load_state_dict(self, state: dict) -> None:
        for k, t in self.tensors.items():
            if state[k].shape != t.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float64)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=np.float64)


def _kaiming(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _add_fc(p: Params, rng, name: str, din: int, dout: int) -> None:
    p.add(f"{name}.weight", _kaiming(rng, din, (din, dout)))
    p.add_bn(f"{name}.bn", dout)


def _add_conv(p: Params, rng, name: str, k: int, cin: int, cout: int, bn: bool = True) -> None:
    p.add(f"{name}.weight", _kaiming(rng, k * k * cin, (k, k, cin, cout)))
    if bn:
        p.add_bn(f"{name}.bn", cout)


def _add_tower(p: Params, rng, prefix: str, C: int, depth: int) -> None:
    for i in range(depth):
        b = f"{prefix}.block{i}"
        _add_conv(p, rng, f"{b}.conv1", 3, C, C)
        _add_conv(p, rng, f"{b}.conv2", 3, C, C)
        _add_conv(p, rng, f"{b}.shortcut", 1, C, C)
    _add_conv(p, rng, f"{prefix}.out", 1, C * (depth + 1), C)


def init_params(cfg: MvfConfig, rng_seed: int = 0, num_anchors_per_cell: int = 0) -> Params:
    """Kaiming fan-in weights, BN gamma=1 / beta=0.

    With ``num_anchors_per_cell > 0`` a 1x1 detection-head conv is added
    that predicts one logit and seven residuals per anchor.
    """
    rng = np.random.default_rng(rng_seed)
    p = Params()
    E, Fv, Fo = cfg.point_embed_dim, cfg.view_feature_dim, cfg.fused_output_dim
    _add_fc(p, rng, "shared", POINT_INPUT_DIM, E)
    for view in ("bev", "persp"):
        _add_fc(p, rng, f"{view}.fc", E, Fv)
        _add_tower(p, rng, f"{view}.tower", Fv, cfg.tower_depth)
    _add_fc(p, rng, "fuse", E + 2 * Fv, Fo)
    cin = Fo
    for i, c in enumerate(cfg.backbone_channels):
        _add_conv(p, rng, f"backbone.block{i}.conv0", 3, cin, c)
        for j in range(1, cfg.backbone_layers + 1):
            _add_conv(p, rng, f"backbone.block{i}.conv{j}", 3, c, c)
        cin = c
    if num_anchors_per_cell:
        A = num_anchors_per_cell
        cin = cfg.backbone_out_dim
        w = rng.normal(0.0, 0.01, size=(1, 1, cin, A * 8))
        b = np.zeros(A * 8)
        b[0::8] = -math.log((1 - 0.01) / 0.01)  # 1% positive prior for the focal loss
        p.add("head.weight", w)
        p.add("head.bias", b)
    return p


def _bn(p: Params, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], p.bn[name], training)


def fc_block(p: Params, name: str, x: Tensor, training: bool) -> Tensor:
    """Linear, batch norm, ReLU."""
    return T.relu(_bn(p, f"{name}.bn", T.linear(x, p[f"{name}.weight"]), training))


def conv_bn(p: Params, name: str, x: Tensor, stride: int, training: bool, act: bool = True) -> Tensor:
    y = _bn(p, f"{name}.bn", T.conv2d(x, p[f"{name}.weight"], stride=stride), training)
    return T.relu(y) if act else y


def conv_tower(canvas: Tensor, p: Params, prefix: str, depth: int = 2, training: bool = False) -> Tensor:
    """Residual stride-2 downsampling ``depth`` times, upsample all, concat, 1x1 back to C.

    Input and output share spatial size and channel count.
    """
    canvas = T.as_tensor(canvas)
    H, W, C = canvas.shape
    scale = 2 ** depth
    if H < scale or W < scale or H % scale or W % scale:
        raise ShapeMismatch(f"conv tower needs spatial dims divisible by {scale}, got {H}x{W}")
    feats = [canvas]
    x = canvas
    for i in range(depth):
        b = f"{prefix}.block{i}"
        h = conv_bn(p, f"{b}.conv1", x, 2, training)
        h = conv_bn(p, f"{b}.conv2", h, 1, training, act=False)
        sc = conv_bn(p, f"{b}.shortcut", x, 2, training, act=False)
        x = T.relu(T.add(h, sc))
        feats.append(T.bilinear_upsample(x, 2 ** (i + 1)))
    return conv_bn(p, f"{prefix}.out", T.concat_features(feats), 1, training)


def _cells(mapping: VoxelMapping) -> np.ndarray:
    return mapping.voxel_coords[:, :2]


def view_encode(point_feats: Tensor, mapping: VoxelMapping, grid: GridSpec, p: Params, prefix: str,
                depth: int = 2, training: bool = False) -> Tensor:
    """Point features -> view FC -> voxel max pool -> canvas -> tower -> back to points."""
    if point_feats.shape[0] != mapping.num_points:
        raise ShapeMismatch(f"{point_feats.shape[0]} point rows vs mapping of {mapping.num_points}")
    h = fc_block(p, f"{prefix}.fc", point_feats, training)
    vox = T.max_pool_segments(h, mapping)
    canvas = T.scatter_to_canvas(vox, _cells(mapping), grid.plane_shape)
    out = conv_tower(canvas, p, f"{prefix}.tower", depth, training)
    return T.gather_segments(T.gather_from_canvas(out, _cells(mapping)), mapping)


def build_point_inputs(pc: PointCloud, bev_map: VoxelMapping, persp_map: VoxelMapping) -> np.ndarray:
    """(N, 7): offsets from the BEV cell center, offsets from the frustum center, intensity.

    Every point must be mapped in the BEV view; points outside the
    perspective grid get zero frustum offsets.
    """
    n = len(pc)
    if bev_map.num_points != n or persp_map.num_points != n:
        raise InconsistentMapping("mappings do not cover the point cloud")
    if n and (bev_map.point_to_voxel < 0).any():
        raise InconsistentMapping("every point must fall inside the BEV grid")
    out = np.zeros((n, POINT_INPUT_DIM))
    if n == 0:
        return out
    bg, sg = bev_map.grid, persp_map.grid
    out[:, 0:3] = pc.xyz - bg.cell_center(bev_map.voxel_coords[bev_map.point_to_voxel])
    pv = persp_map.point_to_voxel
    ok = pv >= 0
    if ok.any():
        sph = sg.coords(pc.xyz[ok])
        out[ok, 3:6] = sph - sg.cell_center(persp_map.voxel_coords[pv[ok]])
    out[:, 6] = pc.intensity
    return out


class MvfOutput(NamedTuple):
    point_fused: Tensor
    pseudo_image: Tensor
    point_index: np.ndarray
    bev_map: VoxelMapping
    persp_map: VoxelMapping


def voxelize_views(pc: PointCloud, cfg: MvfConfig):
    """Restrict to BEV in-range points and build both dynamic mappings on them."""
    full = dynamic_voxelize(pc, cfg.bev_grid)
    keep = np.flatnonzero(full.point_to_voxel >= 0)
    sub = pc.subset(keep)
    return keep, sub, dynamic_voxelize(sub, cfg.bev_grid), dynamic_voxelize(sub, cfg.persp_grid)


def mvf_forward(pc: PointCloud, cfg: MvfConfig, p: Params, training: bool = False,
                views=None) -> MvfOutput:
    """Point-level fusion and the BEV pseudo-image.

    ``views`` may carry a precomputed :func:`voxelize_views` result.
    """
    keep, sub, bev_map, persp_map = views if views is not None else voxelize_views(pc, cfg)
    x = Tensor(build_point_inputs(sub, bev_map, persp_map))
    shared = fc_block(p, "shared", x, training)
    bev_ctx = view_encode(shared, bev_map, cfg.bev_grid, p, "bev", cfg.tower_depth, training)
    if cfg.use_perspective:
        persp_ctx = view_encode(shared, persp_map, cfg.persp_grid, p, "persp", cfg.tower_depth, training)
    else:
        persp_ctx = Tensor(np.zeros((len(sub), cfg.view_feature_dim)))
    fused = fc_block(p, "fuse", T.concat_features([shared, bev_ctx, persp_ctx]), training)
    pseudo = T.scatter_to_canvas(T.max_pool_segments(fused, bev_map), _cells(bev_map), cfg.bev_grid.plane_shape)
    return MvfOutput(fused, pseudo, keep, bev_map, persp_map)


def backbone_forward(pseudo_image: Tensor, cfg: MvfConfig, p: Params, training: bool = False) -> Tensor:
    """Strided conv blocks, each upsampled back to input resolution, concatenated."""
    x = T.as_tensor(pseudo_image)
    H, W, _ = x.shape
    total = int(np.prod(cfg.backbone_strides))
    if H % total or W % total:
        raise ShapeMismatch(f"backbone input {H}x{W} not divisible by {total}")
    outs = []
    scale = 1
    for i, s in enumerate(cfg.backbone_strides):
        x = conv_bn(p, f"backbone.block{i}.conv0", x, s, training)
        for j in range(1, cfg.backbone_layers + 1):
            x = conv_bn(p, f"backbone.block{i}.conv{j}", x, 1, training)
        scale *= s
        outs.append(T.bilinear_upsample(x, scale))
    return T.concat_features(outs)


def head_forward(features: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """Per-anchor logits (M,) and residuals (M, 7), anchors ordered (row, col, slot)."""
    y = T.conv2d(features, p["head.weight"], 1, bias=p["head.bias"])
    H, W, C = y.shape
    flat = T.reshape(y, (H * W * C // 8, 8))
    cls_mask = np.zeros(8)
    cls_mask[0] = 1.0
    logits = T.linear(flat, Tensor(cls_mask[:, None]))
    reg = T.linear(flat, Tensor(np.eye(8)[:, 1:]))
    return T.reshape(logits, (flat.shape[0],)), reg
