"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operators the fusion network and its losses need are provided.
Shapes must agree exactly; the sole implicit broadcast is the bias in
:func:`linear` and :func:`conv2d`. Spatial tensors are channels-last
``(H, W, C)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from mvf.errors import InconsistentMapping, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; each recorded op runs once."""
        topo = tape(self)
        if grad is None:
            if self.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


def tape(root: Tensor) -> list:
    """Topological order of the graph ending at ``root`` (iterative DFS)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(data, parents, op, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    rg = any(p.requires_grad for p in parents)
    t = Tensor(data, rg, parents if rg else (), op)
    if rg:
        t._backward = backward
    return t


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(x, y) -> Tensor:
    x = as_tensor(x)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if yd.ndim and yd.shape != x.shape:
        raise ShapeMismatch(f"add: shapes {x.shape} and {yd.shape} differ")

    def backward(g):
        x._accum(g)
        if isinstance(y, Tensor):
            y._accum(g if y.shape == g.shape else g.sum())

    return _out(x.data + yd, (x, y), "add", backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _out(-x.data, (x,), "neg", lambda g: x._accum(-g))


def mul(x, y) -> Tensor:
    """Elementwise product; ``y`` may be a Tensor, array of equal shape, or scalar."""
    x = as_tensor(x)
    if isinstance(y, Tensor):
        _check_same(x, y, "mul")

        def backward(g):
            x._accum(g * y.data)
            y._accum(g * x.data)

        return _out(x.data * y.data, (x, y), "mul", backward)
    c = np.asarray(y, dtype=np.float64)
    if c.ndim and c.shape != x.shape:
        raise ShapeMismatch(f"mul: shapes {x.shape} and {c.shape} differ")
    return _out(x.data * c, (x,), "mul", lambda g: x._accum(g * c))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _out(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: x._accum(g * mask))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _out(s, (x,), "sigmoid", lambda g: x._accum(g * s * (1.0 - s)))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _out(np.log(x.data), (x,), "log", lambda g: x._accum(g / x.data))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _out(np.sin(x.data), (x,), "sin", lambda g: x._accum(g * np.cos(x.data)))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if p == 0.0:
        return _out(np.ones_like(x.data), (x,), "pow", lambda g: None)
    return _out(x.data ** p, (x,), "pow", lambda g: x._accum(g * p * x.data ** (p - 1.0)))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _out(np.clip(x.data, lo, hi), (x,), "clamp", lambda g: x._accum(g * inside))


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    """0.5*x^2/beta below ``beta`` in magnitude, ``|x| - 0.5*beta`` above."""
    x = as_tensor(x)
    a = np.abs(x.data)
    quad = a < beta
    y = np.where(quad, 0.5 * x.data ** 2 / beta, a - 0.5 * beta)
    return _out(y, (x,), "smooth_l1", lambda g: x._accum(g * np.where(quad, x.data / beta, np.sign(x.data))))


# ---------------------------------------------------------------- reductions / shape

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _out(np.asarray(x.data.sum()), (x,), "sum", lambda g: x._accum(np.broadcast_to(g, x.shape)))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(1, x.size)
    return _out(np.asarray(x.data.sum() / n), (x,), "mean",
                lambda g: x._accum(np.broadcast_to(g / n, x.shape)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _out(x.data.reshape(shape), (x,), "reshape", lambda g: x._accum(g.reshape(old)))


def take_rows(x, index) -> Tensor:
    """Rows ``x[index]`` along the first axis; repeated indices accumulate."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        x._accum(gx)

    return _out(x.data[index], (x,), "take_rows", backward)


def concat_features(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (default: the feature axis)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of nothing")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.shape[k] != ts[0].shape[k] for k in range(nd) if k != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, splits, axis=ax)):
            t._accum(part)

    return _out(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", backward)


# ---------------------------------------------------------------- layers

def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` for x (N, Din), W (Din, Dout), b (Dout,)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} incompatible with W {W.shape}")
    y = x.data @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"linear: bias {b.shape} does not match W {W.shape}")
        y = y + b.data

    def backward(g):
        x._accum(g @ W.data.T)
        W._accum(x.data.T @ g)
        if b is not None:
            b._accum(g.sum(axis=0))

    return _out(y, (x, W, b), "linear", backward)


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    # sum over rows in sorted order so the result ignores row permutations
    return np.sort(a, axis=0).sum(axis=0)


class BatchNormState:
    """Running statistics for one batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool = True) -> Tensor:
    """Normalize over every axis but the last (channels).

    Training mode uses batch statistics and updates ``state`` with momentum;
    eval mode uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batch_norm: gamma/beta must have shape ({C},)")
    x2 = x.data.reshape(-1, C)
    m = x2.shape[0]
    if training:
        if m < 1:
            raise ShapeMismatch("batch_norm: empty batch in training mode")
        mu = _ordered_sum(x2) / m
        xc = x2 - mu
        var = _ordered_sum(xc * xc) / m
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
        xc = x2 - mu
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        gamma._accum((g2 * xhat).sum(axis=0))
        beta._accum(g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 * gamma.data
            if training:
                gx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv
            x._accum(gx.reshape(x.shape))

    return _out(y, (x, gamma, beta), "batch_norm", backward)


def _conv_geometry(H, W, k, stride):
    pad = k // 2
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    return pad, Ho, Wo


_CHUNK_ELEMS = 1 << 22  # bound on im2col block size (float64 elements)


def conv2d(x, w, stride: int = 1, bias=None) -> Tensor:
    """2D convolution, channels-last, zero 'same' padding of ``k // 2``.

    ``x`` is (H, W, Cin), ``w`` is (k, k, Cin, Cout) with odd ``k``. Output is
    ``(ceil(H / stride), ceil(W / stride), Cout)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[2] != x.shape[2] or w.shape[0] != w.shape[1] \
            or w.shape[0] % 2 == 0:
        raise ShapeMismatch(f"conv2d: x {x.shape} incompatible with kernel {w.shape}")
    H, W, C = x.shape
    k, Cout = w.shape[0], w.shape[3]
    pad, Ho, Wo = _conv_geometry(H, W, k, stride)
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    wm = w.data.reshape(k * k * C, Cout)
    s0, s1, s2 = xp.strides
    rows_per_chunk = max(1, _CHUNK_ELEMS // max(1, Wo * k * k * C))

    def cols(r0, r1):
        view = as_strided(xp[r0 * stride:], shape=(r1 - r0, Wo, k, k, C),
                          strides=(s0 * stride, s1 * stride, s0, s1, s2))
        return view.reshape((r1 - r0) * Wo, k * k * C)

    y = np.empty((Ho, Wo, Cout))
    for r0 in range(0, Ho, rows_per_chunk):
        r1 = min(Ho, r0 + rows_per_chunk)
        y[r0:r1] = (cols(r0, r1) @ wm).reshape(r1 - r0, Wo, Cout)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Cout,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} does not match {Cout} output channels")
        y += bias.data

    def backward(g):
        if w.requires_grad:
            gw = np.zeros_like(wm)
            for r0 in range(0, Ho, rows_per_chunk):
                r1 = min(Ho, r0 + rows_per_chunk)
                gw += cols(r0, r1).T @ g[r0:r1].reshape(-1, Cout)
            w._accum(gw.reshape(w.shape))
        if bias is not None:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for r0 in range(0, Ho, rows_per_chunk):
                r1 = min(Ho, r0 + rows_per_chunk)
                dcols = (g[r0:r1].reshape(-1, Cout) @ wm.T).reshape(r1 - r0, Wo, k, k, C)
                for i in range(k):
                    for j in range(k):
                        a = r0 * stride + i
                        gxp[a:a + stride * (r1 - r0):stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            x._accum(gxp[pad:pad + H, pad:pad + W])

    return _out(y, (x, w, bias), "conv2d", backward)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    # half-pixel-centre bilinear weights, edges clamped
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    U = np.zeros((n_out, n_in))
    np.add.at(U, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(U, (np.arange(n_out), i1), t)
    return U


def bilinear_upsample(x, factor: int) -> Tensor:
    """Upsample (H, W, C) by an integer factor to (H*f, W*f, C)."""
    x = as_tensor(x)
    if x.data.ndim != 3 or factor < 1:
        raise ShapeMismatch(f"bilinear_upsample: bad input {x.shape} / factor {factor}")
    if factor == 1:
        return _out(x.data.copy(), (x,), "upsample", lambda g: x._accum(g))
    Uh = _interp_matrix(x.shape[0], factor)
    Uw = _interp_matrix(x.shape[1], factor)
    y = np.einsum("ah,hwc->awc", Uh, x.data)
    y = np.einsum("bw,awc->abc", Uw, y)

    def backward(g):
        gh = np.einsum("bw,abc->awc", Uw, g)
        x._accum(np.einsum("ah,awc->hwc", Uh, gh))

    return _out(y, (x,), "upsample", backward)


# ---------------------------------------------------------------- point/voxel ops

def _check_mapping(n_points: int, mapping):
    p2v = mapping.point_to_voxel
    if len(p2v) != n_points:
        raise InconsistentMapping(f"mapping covers {len(p2v)} points, tensor has {n_points}")
    if len(p2v) and p2v.max(initial=-1) >= mapping.num_voxels:
        raise InconsistentMapping("point_to_voxel references a voxel beyond num_voxels")


def max_pool_segments(x, mapping) -> Tensor:
    """Per-voxel channelwise max over member points: (N, D) -> (V, D).

    Voxels without members pool to 0. Unmapped points (-1) are ignored. The
    gradient goes to the lowest-index point attaining the max.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"max_pool_segments expects (N, D), got {x.shape}")
    _check_mapping(x.shape[0], mapping)
    order, offsets = mapping.csr
    V, D = mapping.num_voxels, x.shape[1]
    out = np.zeros((V, D))
    arg = np.zeros((V, D), dtype=np.int64)
    counts = np.diff(offsets)
    nonempty = np.flatnonzero(counts > 0)
    if len(nonempty):
        vals = x.data[order]
        starts = offsets[nonempty]
        mx = np.maximum.reduceat(vals, starts, axis=0)
        seg = np.repeat(np.arange(len(nonempty)), counts[nonempty])
        pos = np.where(vals == mx[seg], np.arange(len(order))[:, None], len(order))
        first = np.minimum.reduceat(pos, starts, axis=0)
        out[nonempty] = mx
        arg[nonempty] = order[first]
    cols = np.broadcast_to(np.arange(D), (len(nonempty), D))

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (arg[nonempty], cols), g[nonempty])
        x._accum(gx)

    return _out(out, (x,), "max_pool_segments", backward)


def gather_segments(v, mapping) -> Tensor:
    """Copy each point's voxel row: (V, D) -> (N, D). Unmapped points get zeros."""
    v = as_tensor(v)
    if v.data.ndim != 2 or v.shape[0] != mapping.num_voxels:
        raise InconsistentMapping(f"voxel tensor {v.shape} does not match {mapping.num_voxels} voxels")
    p2v = mapping.point_to_voxel
    mapped = p2v >= 0
    idx = np.where(mapped, p2v, 0)
    out = v.data[idx] * mapped[:, None]

    def backward(g):
        gv = np.zeros_like(v.data)
        np.add.at(gv, p2v[mapped], g[mapped])
        v._accum(gv)

    return _out(out, (v,), "gather_segments", backward)


def scatter_to_canvas(v, cells, shape) -> Tensor:
    """Place voxel rows (V, D) at 2D cells (V, 2) of a zero canvas (H, W, D)."""
    v = as_tensor(v)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    H, W = shape
    if v.data.ndim != 2 or len(cells) != v.shape[0]:
        raise ShapeMismatch(f"scatter_to_canvas: {v.shape} rows vs {len(cells)} cells")
    canvas = np.zeros((H, W, v.shape[1]))
    canvas[cells[:, 0], cells[:, 1]] = v.data
    return _out(canvas, (v,), "scatter", lambda g: v._accum(g[cells[:, 0], cells[:, 1]]))


def gather_from_canvas(canvas, cells) -> Tensor:
    """Rows ``canvas[cells[:, 0], cells[:, 1]]`` as a (V, D) tensor."""
    canvas = as_tensor(canvas)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)

    def backward(g):
        gc = np.zeros_like(canvas.data)
        np.add.at(gc, (cells[:, 0], cells[:, 1]), g)
        canvas._accum(gc)

    return _out(canvas.data[cells[:, 0], cells[:, 1]], (canvas,), "gather_canvas", backward)
