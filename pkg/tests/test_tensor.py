import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvf import tensor as T
from mvf.checkpoint import load_tensors, save_tensors
from mvf.errors import InconsistentMapping, ShapeMismatch, TruncatedFile
from mvf.gradcheck import grad_check
from mvf.head import regression_loss
from mvf.tensor import BatchNormState, Tensor
from mvf.voxelizer import CARTESIAN, GridSpec, VoxelMapping

TOL = 1e-4


def _mapping(p2v, n_vox):
    grid = GridSpec(CARTESIAN, (0, 0, 0), (64, 1, 1), (1, 1, 1), frozenset({"y", "z"}))
    coords = np.zeros((n_vox, 3), dtype=np.int64)
    coords[:, 0] = np.arange(n_vox)
    return VoxelMapping(np.asarray(p2v), coords, grid)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


# ---------------------------------------------------------------- examples

def test_linear_examples():
    assert T.linear([[1.0, 2.0]], np.eye(2), np.zeros(2)).data.tolist() == [[1, 2]]
    assert T.linear([[1.0, 1.0]], [[2.0, 0.0], [0.0, 3.0]], [1.0, 1.0]).data.tolist() == [[3, 4]]
    W = Tensor(np.eye(2), requires_grad=True)
    T.sum_all(T.linear([[1.0, 2.0]], W)).backward()
    assert W.grad.tolist() == [[1, 1], [2, 2]]


def test_linear_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.linear(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ShapeMismatch):
        T.linear(np.ones((2, 2)), np.ones((2, 2)), np.ones(3))


def test_batch_norm_examples():
    st_ = BatchNormState(1)
    y = T.batch_norm([[1.0], [3.0]], np.ones(1), np.zeros(1), st_, training=True)
    assert np.abs(y.data - [[-1.0], [1.0]]).max() < 1e-3
    assert st_.running_mean.tolist() == pytest.approx([0.2])
    assert st_.running_var.tolist() == pytest.approx([0.9 + 0.1 * 2.0])
    y = T.batch_norm(np.full((4, 2), 7.0), np.ones(2), np.zeros(2), BatchNormState(2), training=True)
    assert (y.data == 0).all()
    x = np.array([[0.3, -2.0], [1.5, 4.0]])
    y = T.batch_norm(x, np.ones(2), np.zeros(2), BatchNormState(2), training=False)
    assert np.abs(y.data - x).max() < 1e-4


def test_batch_norm_permutation_invariant_bitwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(257, 5)) * 1e3
    perm = rng.permutation(257)
    a = T.batch_norm(x, np.ones(5), np.zeros(5), BatchNormState(5)).data
    b = T.batch_norm(x[perm], np.ones(5), np.zeros(5), BatchNormState(5)).data
    assert a[perm].tobytes() == b.tobytes()


def test_max_pool_and_gather_examples():
    m = _mapping([0, 0, 0], 1)
    x = Tensor(np.array([[1.0], [5.0], [3.0]]), requires_grad=True)
    v = T.max_pool_segments(x, m)
    assert v.data.tolist() == [[5.0]]
    g = T.gather_segments(v, m)
    assert g.data.tolist() == [[5.0], [5.0], [5.0]]


def test_max_pool_ties_go_to_lowest_index():
    m = _mapping([0, 0, 0, 1], 2)
    x = Tensor(np.array([[2.0], [4.0], [4.0], [1.0]]), requires_grad=True)
    T.sum_all(T.max_pool_segments(x, m)).backward()
    assert x.grad.ravel().tolist() == [0.0, 1.0, 0.0, 1.0]


def test_empty_voxel_pools_to_zero():
    m = _mapping([0, 0, 2], 3)
    v = T.max_pool_segments(np.array([[-3.0], [-1.0], [-2.0]]), m)
    assert v.data.ravel().tolist() == [-1.0, 0.0, -2.0]


def test_unmapped_points_ignored_and_zero_gathered():
    m = _mapping([0, -1, 0], 1)
    v = T.max_pool_segments(np.array([[1.0], [9.0], [2.0]]), m)
    assert v.data.tolist() == [[2.0]]
    assert T.gather_segments(v, m).data.ravel().tolist() == [2.0, 0.0, 2.0]


def test_inconsistent_mapping():
    with pytest.raises(InconsistentMapping):
        T.max_pool_segments(np.ones((2, 1)), _mapping([0, 0, 0], 1))
    with pytest.raises(InconsistentMapping):
        T.gather_segments(np.ones((2, 1)), _mapping([0, 0, 0], 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 8))
def test_pool_permutation_and_idempotence(seed, n, n_vox):
    rng = np.random.default_rng(seed)
    p2v = rng.integers(0, n_vox, size=n)
    x = rng.normal(size=(n, 3))
    m = _mapping(p2v, n_vox)
    v = T.max_pool_segments(x, m).data
    perm = rng.permutation(n)
    assert T.max_pool_segments(x[perm], _mapping(p2v[perm], n_vox)).data.tobytes() == v.tobytes()
    again = T.max_pool_segments(T.gather_segments(v, m), m).data
    assert again.tobytes() == v.tobytes()


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 5, 3))
    w = np.zeros((3, 3, 3, 3))
    w[1, 1] = np.eye(3)
    assert T.conv2d(x, w, 1).data.tobytes() == x.tobytes()


def test_conv_stride2_shapes():
    assert T.conv2d(np.zeros((468, 468, 2)), np.zeros((3, 3, 2, 4)), 2).shape == (234, 234, 4)
    assert T.conv2d(np.zeros((7, 9, 1)), np.zeros((3, 3, 1, 1)), 2).shape == (4, 5, 1)
    with pytest.raises(ShapeMismatch):
        T.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    for s in (1, 2):
        y = T.conv2d(x, w, s).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        for i in range(y.shape[0]):
            for j in range(y.shape[1]):
                patch = xp[i * s:i * s + 3, j * s:j * s + 3]
                assert np.allclose(y[i, j], np.einsum("abc,abcd->d", patch, w), atol=1e-12)


def test_conv_chunking_is_exact(monkeypatch):
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(9, 8, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 2, 2)), requires_grad=True)
    T.sum_all(T.conv2d(x, w, 2)).backward()
    ref = (T.conv2d(x.data, w.data, 2).data, x.grad.copy(), w.grad.copy())
    monkeypatch.setattr(T, "_CHUNK_ELEMS", 20)
    x.grad = w.grad = None
    y = T.conv2d(x, w, 2)
    T.sum_all(y).backward()
    assert np.allclose(y.data, ref[0], atol=1e-12)
    assert np.allclose(x.grad, ref[1], atol=1e-12) and np.allclose(w.grad, ref[2], atol=1e-12)


@pytest.mark.parametrize("hw", [(8, 8), (6, 10), (4, 12)])
def test_upsample_after_stride2_preserves_dims(hw):
    x = np.zeros((*hw, 2))
    y = T.bilinear_upsample(T.conv2d(x, np.zeros((3, 3, 2, 2)), 2), 2)
    assert y.shape == x.shape


def test_upsample_constant_and_linear():
    y = T.bilinear_upsample(np.full((3, 4, 2), 2.5), 2).data
    assert np.allclose(y, 2.5)
    x = np.arange(4.0).reshape(1, 4, 1)
    assert T.bilinear_upsample(x, 2).data[0, :, 0].tolist() == [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3]


def test_concat_and_shape_errors():
    a, b = np.ones((2, 3)), np.zeros((2, 1))
    assert T.concat_features([a, b]).shape == (2, 4)
    with pytest.raises(ShapeMismatch):
        T.concat_features([a, np.zeros((3, 1))])
    with pytest.raises(ShapeMismatch):
        T.add(np.ones(2), np.ones(3))


def test_tape_runs_each_node_once():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)
    out = T.sum_all(T.add(z, x))
    out.backward()
    assert x.grad.tolist() == [4 * 1.5 + 1, 4 * -2.0 + 1]
    ops = [n.op for n in T.tape(out)]
    assert ops.count("mul") == 1 and ops.count("add") == 2


# ---------------------------------------------------------------- gradient checks

def test_grad_check_relu_example():
    rng = np.random.default_rng(4)
    r = grad_check(lambda t: T.sum_all(T.relu(t)), _away_from_zero(rng, (5, 4)))
    assert r.max_rel_error < 1e-6


def test_grad_check_constant_is_exact_zero():
    r = grad_check(lambda t: T.sum_all(T.mul(t, 0.0)), np.ones(4))
    assert r.max_abs_error == 0.0 and r.passed


def test_grad_check_regression_loss():
    rng = np.random.default_rng(5)
    target = rng.normal(size=(6, 7))
    pos = np.array([1, 0, 1, 1, 0, 1], bool)
    r = grad_check(lambda t: regression_loss(t, target, pos)[0], rng.normal(size=(6, 7)), step=1e-5)
    assert r.max_rel_error < TOL


def _ops(rng):
    m = _mapping(np.array([0, 2, 0, 1, 2, 2, -1]), 3)
    cells = np.array([[0, 1], [2, 0], [1, 1]])
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    bn = BatchNormState(3)
    W = rng.normal(size=(3, 4))
    coeff = rng.normal(size=(4, 4))
    yield "add", (4, 4), lambda t: T.sum_all(T.mul(T.add(t, t * 2.0), coeff))
    yield "neg_sub", (4, 4), lambda t: T.sum_all(T.mul(T.neg(t) - coeff, coeff))
    yield "mul", (4, 4), lambda t: T.sum_all(T.mul(t, t))
    yield "sigmoid", (4, 4), lambda t: T.sum_all(T.mul(T.sigmoid(t), coeff))
    yield "log", (4, 4), lambda t: T.sum_all(T.log(T.add(T.mul(t, t), 1.0)))
    yield "sin", (4, 4), lambda t: T.sum_all(T.mul(T.sin(t), coeff))
    yield "power", (4, 4), lambda t: T.sum_all(T.power(T.add(T.mul(t, t), 0.5), 1.7))
    yield "clamp", (4, 4), lambda t: T.sum_all(T.mul(T.clamp(t, -3.0, 3.0), coeff))
    yield "smooth_l1", (4, 4), lambda t: T.sum_all(T.smooth_l1(T.mul(t, 2.0), 1.0))
    yield "mean", (4, 4), lambda t: T.mean(T.mul(t, coeff))
    yield "reshape", (4, 4), lambda t: T.sum_all(T.mul(T.reshape(t, (2, 8)), coeff.reshape(2, 8)))
    yield "take_rows", (4, 4), lambda t: T.sum_all(T.mul(T.take_rows(t, [0, 2, 2]), coeff[:3]))
    yield "concat", (4, 4), lambda t: T.sum_all(T.mul(T.concat_features([t, T.mul(t, t)]),
                                                      np.hstack([coeff, coeff])))
    yield "linear_x", (5, 3), lambda t: T.sum_all(T.mul(T.linear(t, W, b[:1].repeat(4)), 1.3))
    yield "linear_W", (3, 4), lambda t: T.sum_all(T.sin(T.linear(np.ones((2, 3)), t, np.ones(4))))
    yield "batch_norm", (6, 3), lambda t: T.sum_all(T.mul(T.batch_norm(t, np.full(3, 1.5), b, bn), t))
    yield "batch_norm_eval", (6, 3), lambda t: T.sum_all(T.sin(T.batch_norm(t, np.full(3, 1.5), b, bn, False)))
    yield "conv_x_s1", (5, 4, 2), lambda t: T.sum_all(T.sin(T.conv2d(t, w, 1, b)))
    yield "conv_x_s2", (5, 6, 2), lambda t: T.sum_all(T.sin(T.conv2d(t, w, 2)))
    yield "conv_w", (3, 3, 2, 3), lambda t: T.sum_all(T.sin(T.conv2d(np.linspace(-1, 1, 40).reshape(4, 5, 2), t, 2)))
    yield "upsample", (3, 2, 2), lambda t: T.sum_all(T.sin(T.bilinear_upsample(t, 2)))
    yield "max_pool", (7, 2), lambda t: T.sum_all(T.sin(T.max_pool_segments(t, m)))
    yield "gather", (3, 2), lambda t: T.sum_all(T.sin(T.gather_segments(t, m)))
    yield "scatter", (3, 2), lambda t: T.sum_all(T.sin(T.scatter_to_canvas(t, cells, (3, 2))))
    yield "gather_canvas", (3, 2, 2), lambda t: T.sum_all(T.sin(T.gather_from_canvas(t, cells)))


@pytest.mark.parametrize("case", list(range(25)))
def test_op_gradients(case):
    rng = np.random.default_rng(100 + case)
    name, shape, f = list(_ops(rng))[case]
    x = _away_from_zero(rng, shape, margin=0.1)
    r = grad_check(f, x, step=1e-5)
    assert r.n_checked == x.size
    assert r.max_rel_error < TOL, (name, r)


def test_op_case_count():
    assert len(list(_ops(np.random.default_rng(0)))) == 25


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {"a.weight": rng.normal(size=(3, 4)), "b": np.array(np.pi), "c": np.zeros((0, 2)),
               "d": np.array([np.nextafter(1.0, 2.0), -0.0, 1e-310])}
    path = tmp_path / "x.mvf"
    save_tensors(path, tensors, {"k": "v w"})
    back, meta = load_tensors(path)
    assert meta == {"k": "v w"}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "x.mvf"
    save_tensors(path, {"a": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TruncatedFile):
        load_tensors(path)
