import numpy as np
import numpy.testing as npt
import pytest

import marn.autodiff as ad
from marn.sampling import ProposalGrid, build_sampling_map

EPS = 1e-6


def check_grads(build, arrays, rtol=1e-4, atol=1e-6):
    """Compare backward() gradients of scalar build(*tensors) with central FD."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    for k, a in enumerate(arrays):
        def value(mod):
            args = [ad.Tensor(mod if j == k else arrays[j]) for j in range(len(arrays))]
            return float(build(*args).data)

        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi, lo = a.copy(), a.copy()
            hi[idx] += EPS
            lo[idx] -= EPS
            num[idx] = (value(hi) - value(lo)) / (2 * EPS)
        npt.assert_allclose(tensors[k].grad, num, rtol=rtol, atol=atol)


def project(out, p):
    return ad.sum_(ad.mul(out, p))


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    p = rng.normal(size=(3, 4))
    check_grads(lambda x, y: project(ad.add(x, y), p), [a, b])
    check_grads(lambda x, y: project(ad.mul(x, y), p), [a, b])
    check_grads(lambda x: project(ad.neg(x), p), [a])


def test_matmul_grads_all_rank_pairs():
    rng = np.random.default_rng(1)
    m22 = (rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2)))
    m21 = (rng.normal(size=(3, 4)), rng.normal(size=(4,)), rng.normal(size=(3,)))
    m12 = (rng.normal(size=(4,)), rng.normal(size=(4, 2)), rng.normal(size=(2,)))
    for a, b, p in (m22, m21, m12):
        check_grads(lambda x, y, p=p: project(ad.matmul(x, y), p), [a, b])


def test_activation_grads():
    rng = np.random.default_rng(2)
    # keep relu inputs away from the kink
    a = rng.uniform(0.2, 1.0, size=(3, 5)) * rng.choice([-1.0, 1.0], size=(3, 5))
    p = rng.normal(size=(3, 5))
    check_grads(lambda x: project(ad.relu(x), p), [a])
    check_grads(lambda x: project(ad.sigmoid(x), p), [a])
    check_grads(lambda x: project(ad.tanh(x), p), [a])


def test_shape_op_grads():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 6))
    b = rng.normal(size=(2, 3))
    p12 = rng.normal(size=(12,))
    p29 = rng.normal(size=(2, 9))
    p23 = rng.normal(size=(2, 3))
    check_grads(lambda x: project(ad.reshape(x, (12,)), p12), [a])
    check_grads(lambda x, y: project(ad.concat([x, y], axis=1), p29), [a, b])
    check_grads(lambda x: project(ad.split_last(x, (2, 4))[1], p12[:8].reshape(2, 4)), [a])
    check_grads(lambda x: project(ad.slice_axis(x, 1, 1, 4), p23), [a])


def test_reduction_grads():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 4))
    p0 = rng.normal(size=(4,))
    p1 = rng.normal(size=(3, 1))
    check_grads(lambda x: ad.sum_(x), [a])
    check_grads(lambda x: project(ad.sum_(x, axis=0), p0), [a])
    check_grads(lambda x: project(ad.sum_(x, axis=1, keepdims=True), p1), [a])
    check_grads(lambda x: ad.mean_(x), [a])
    check_grads(lambda x: project(ad.mean_(x, axis=0), p0), [a])


def test_broadcast_cells_grad():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(3,))
    p = rng.normal(size=(2, 4, 3))
    check_grads(lambda x: project(ad.broadcast_cells(x, (2, 4)), p), [v])


def test_max_over_axis_grad():
    rng = np.random.default_rng(6)
    # spaced values so the argmax never flips inside the FD step
    a = (rng.permutation(12).reshape(3, 4)).astype(np.float64) * 0.1
    p = rng.normal(size=(3,))
    check_grads(lambda x: project(ad.max_over_axis(x, 1), p), [a])


def test_log_softmax_forward_and_grad():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 6))
    out = ad.log_softmax(ad.Tensor(a)).data
    want = a - np.log(np.exp(a).sum(axis=1, keepdims=True))
    npt.assert_allclose(out, want, atol=1e-12)
    npt.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
    p = rng.normal(size=(4, 6))
    check_grads(lambda x: project(ad.log_softmax(x), p), [a])


def test_pick_per_row_grad():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(4, 5))
    idx = np.array([3, 0, 4, 2])
    p = rng.normal(size=(4,))
    picked = ad.pick_per_row(ad.Tensor(a), idx).data
    npt.assert_array_equal(picked, a[np.arange(4), idx])
    check_grads(lambda x: project(ad.pick_per_row(x, idx), p), [a])


def test_masked_softmax_forward_and_grad():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(3, 4))
    valid = rng.random((3, 4)) < 0.6
    valid[0, 0] = True
    out = ad.masked_softmax(ad.Tensor(logits), valid).data
    npt.assert_allclose(out.sum(), 1.0, atol=1e-12)
    assert (out[~valid] == 0.0).all()
    e = np.where(valid, np.exp(logits - logits[valid].max()), 0.0)
    npt.assert_allclose(out, e / e.sum(), atol=1e-12)
    p = rng.normal(size=(3, 4))
    check_grads(lambda x: project(ad.masked_softmax(x, valid), p), [logits])


def test_masked_softmax_rejects_all_masked():
    with pytest.raises(ValueError, match="masked"):
        ad.masked_softmax(ad.Tensor(np.zeros((2, 2))), np.zeros((2, 2), dtype=bool))


def test_weighted_cell_sum_grad():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(3, 4))
    f = rng.normal(size=(3, 4, 5))
    p = rng.normal(size=(5,))
    out = ad.weighted_cell_sum(ad.Tensor(w), ad.Tensor(f)).data
    npt.assert_allclose(out, np.einsum("ts,tsd->d", w, f), atol=1e-12)
    check_grads(lambda a, b: project(ad.weighted_cell_sum(a, b), p), [w, f])


def _conv1d_oracle(x, w, b):
    t, k, pad = x.shape[0], w.shape[0], w.shape[0] // 2
    out = np.tile(b, (t, 1))
    for i in range(t):
        for dk in range(k):
            j = i + dk - pad
            if 0 <= j < t:
                out[i] += x[j] @ w[dk]
    return out


def _conv2d_oracle(x, w, b):
    t, s = x.shape[:2]
    kh, kw = w.shape[:2]
    out = np.tile(b, (t, s, 1))
    for i in range(t):
        for j in range(s):
            for dy in range(kh):
                for dx in range(kw):
                    ii, jj = i + dy - kh // 2, j + dx - kw // 2
                    if 0 <= ii < t and 0 <= jj < s:
                        out[i, j] += x[ii, jj] @ w[dy, dx]
    return out


def test_conv1d_same_forward_and_grad():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(3, 3, 2))
    b = rng.normal(size=(2,))
    out = ad.conv1d_same(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    npt.assert_allclose(out, _conv1d_oracle(x, w, b), atol=1e-12)
    p = rng.normal(size=(6, 2))
    check_grads(lambda a, c, d: project(ad.conv1d_same(a, c, d), p), [x, w, b])
    with pytest.raises(ValueError, match="odd"):
        ad.conv1d_same(ad.Tensor(x), ad.Tensor(np.zeros((2, 3, 2))), ad.Tensor(b))


def test_conv2d_same_forward_and_grad():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 3, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=(2,))
    out = ad.conv2d_same(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    npt.assert_allclose(out, _conv2d_oracle(x, w, b), atol=1e-12)
    p = rng.normal(size=(4, 3, 2))
    check_grads(lambda a, c, d: project(ad.conv2d_same(a, c, d), p), [x, w, b])


def test_sample_cells_grad():
    rng = np.random.default_rng(13)
    grid = ProposalGrid(10, (3, 5), 4, "dense")
    smap = build_sampling_map(grid)
    x = rng.normal(size=(10, 3))
    p = rng.normal(size=(10, 2, 4, 3))

    def build(xt):
        out = ad.sample_cells(xt, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi, (10, 2, 4))
        return project(out, p)

    check_grads(build, [x])


def test_diamond_graph_accumulates_both_paths():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    # z = (x + 1) * (2 x): dz/dx = 4 x + 2 = 14
    z = ad.mul(ad.add(x, 1.0), ad.mul(x, 2.0))
    z.backward()
    npt.assert_allclose(x.grad, 14.0)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.relu(x).backward()


def test_no_grad_suppresses_recording():
    x = ad.Tensor(np.array(2.0), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad and y._vjp is None
    y.backward()
    assert x.grad is None
