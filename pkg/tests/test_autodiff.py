import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedpsyau import autodiff as ad
from fedpsyau.errors import ContractError, DimensionError, NumericError

from gradcheck import check_gradients, readout

SEEDS = range(20)


def leaf(rng, *shape, scale=1.0):
    return ad.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def conv_oracle(x, w, b, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[q]
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[a, ch, i + di, j + dj] * w[q, ch, di, dj]
                    out[a, q, i, j] = acc
    return out


# ------------------------------------------------------------------ forward examples


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x)).data, x)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(ad.Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


@pytest.mark.parametrize("k,pad", [(3, 1), (3, 0), (5, 2), (1, 0)])
def test_conv2d_matches_loop_oracle(k, pad):
    rng = np.random.default_rng(k * 10 + pad)
    x, w, b = rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(2, 3, k, k)), rng.normal(size=2)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=pad)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, pad), rtol=0, atol=1e-12)


def test_max_pool_keeps_shape_and_picks_window_max():
    x = np.random.default_rng(1).normal(size=(2, 2, 4, 5))
    out = ad.max_pool2d(ad.Tensor(x), 3, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ref = np.array([[[[xp[a, c, i:i + 3, j:j + 3].max() for j in range(5)] for i in range(4)]
                     for c in range(2)] for a in range(2)])
    assert np.array_equal(out, ref)


def test_leaky_relu_slope_is_point_two():
    out = ad.leaky_relu(ad.Tensor([-1.0, 2.0])).data
    assert out.tolist() == [-0.2, 2.0]


# ------------------------------------------------------------------ backward examples


def test_grad_of_sum_is_ones():
    w = ad.Tensor(np.random.default_rng(2).normal(size=(2, 3, 4)), requires_grad=True)
    ad.sum_(w).backward()
    assert np.array_equal(w.grad, np.ones((2, 3, 4)))


def test_grad_of_half_square_norm_is_w():
    w = ad.Tensor(np.random.default_rng(3).normal(size=(4, 2)), requires_grad=True)
    (ad.sum_(w * w) * 0.5).backward()
    np.testing.assert_allclose(w.grad, w.data, rtol=0, atol=1e-15)


def test_repeated_backward_accumulates():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    for _ in range(3):
        ad.sum_(w * 2.0).backward()
    assert np.array_equal(w.grad, np.full(3, 6.0))


def test_shared_subexpression_gradient():
    w = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = w * w
    ad.sum_(y + y * 3.0).backward()
    np.testing.assert_allclose(w.grad, 8 * w.data)


def test_non_scalar_loss_is_rejected():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="conv2d"):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 5, 5))), ad.Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_output_is_numeric_error():
    with pytest.raises(NumericError):
        ad.exp(ad.Tensor([1000.0]))


def test_no_grad_records_nothing():
    w = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = w * 3.0
    assert y._parents == () and not y.requires_grad


# ------------------------------------------------------------------ optimiser


def test_sgd_single_step():
    w = ad.Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([2.0])
    ad.sgd_step([w], lr=0.1, momentum=0.0)
    np.testing.assert_allclose(w.data, [0.8], rtol=0, atol=1e-15)


def test_sgd_zero_grad_leaves_params():
    w = ad.Tensor(np.array([1.0, -3.0]), requires_grad=True)
    opt = ad.SGD([w], lr=0.5, momentum=0.9)
    w.grad = np.zeros(2)
    opt.step()
    assert w.data.tolist() == [1.0, -3.0]


def test_momentum_two_steps():
    lr, g, w0 = 0.1, 0.7, 2.0
    w = ad.Tensor(np.array([w0]), requires_grad=True)
    opt = ad.SGD([w], lr=lr, momentum=0.9)
    for _ in range(2):
        w.grad = np.array([g])
        opt.step()
    np.testing.assert_allclose(w.data, [w0 - lr * g - lr * 1.9 * g], rtol=0, atol=1e-15)


@pytest.mark.parametrize("lr,mom", [(0.0, 0.5), (-1.0, 0.0), (0.1, 1.0), (0.1, -0.1)])
def test_sgd_rejects_bad_hyperparameters(lr, mom):
    with pytest.raises(ContractError):
        ad.SGD([ad.Tensor(np.ones(1), requires_grad=True)], lr=lr, momentum=mom)


# ------------------------------------------------------------------ softmax properties

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_sum_to_one_and_positive(x):
    out = ad.softmax(ad.Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all(out > 0)


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.integers(0, 2**32 - 1))
def test_masked_softmax_zero_off_mask(x, seed):
    mask = np.random.default_rng(seed).random(x.shape) < 0.6
    out = ad.masked_softmax(ad.Tensor(x), mask).data
    assert np.all(out[~mask] == 0.0)
    live = mask.any(axis=-1)
    assert np.all(np.abs(out[live].sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all(out[~live] == 0.0)


# ------------------------------------------------------------------ batch norm buffers


def test_batch_norm_running_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 2))
    rm, rv = np.zeros(2), np.ones(2)
    g, b = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    ad.batch_norm(ad.Tensor(x), g, b, rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))
    out = ad.batch_norm(ad.Tensor(x), g, b, rm, rv, training=False).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5))


# ------------------------------------------------------------------ per-op gradient checks


def _op_cases():
    def unary(op, shape=(3, 4)):
        def build(rng):
            x = leaf(rng, *shape)
            r = rng.normal(size=shape)
            return (lambda: ad.sum_(op(x) * ad.Tensor(r))), {"x": x}
        return build

    def binary(op, sa, sb):
        def build(rng):
            a, b = leaf(rng, *sa), leaf(rng, *sb)
            out_shape = op(a, b).shape
            r = rng.normal(size=out_shape)
            return (lambda: ad.sum_(op(a, b) * ad.Tensor(r))), {"a": a, "b": b}
        return build

    def conv(k, pad, bias=True):
        def build(rng):
            x, w = leaf(rng, 2, 3, 5, 5), leaf(rng, 2, 3, k, k)
            b = leaf(rng, 2) if bias else None
            r = rng.normal(size=ad.conv2d(x, w, b, pad).shape)
            ts = {"x": x, "w": w} | ({"b": b} if bias else {})
            return (lambda: ad.sum_(ad.conv2d(x, w, b, pad) * ad.Tensor(r))), ts
        return build

    def layer_norm(rng):
        x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        r = rng.normal(size=(3, 6))
        return (lambda: ad.sum_(ad.layer_norm(x, g, b) * ad.Tensor(r))), {"x": x, "gamma": g, "beta": b}

    def batch_norm(training, ndim):
        def build(rng):
            shape = (4, 3, 3, 3) if ndim == 4 else (5, 3)
            x, g, b = leaf(rng, *shape), leaf(rng, 3), leaf(rng, 3)
            rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
            r = rng.normal(size=shape)
            return (lambda: ad.sum_(ad.batch_norm(x, g, b, rm.copy(), rv.copy(), training) * ad.Tensor(r))), \
                {"x": x, "gamma": g, "beta": b}
        return build

    def cross_entropy(rng):
        x = leaf(rng, 5, 4)
        t = rng.integers(0, 4, size=5)
        return (lambda: ad.cross_entropy(x, t)), {"logits": x}

    def bce(rng):
        x = leaf(rng, 4, 6, scale=2.0)
        y = (rng.random((4, 6)) < 0.4).astype(float)
        return (lambda: ad.bce_with_logits(x, y)), {"logits": x}

    def masked(rng):
        x = leaf(rng, 4, 5)
        mask = rng.random((4, 5)) < 0.6
        mask[0] = False
        r = rng.normal(size=(4, 5))
        return (lambda: ad.sum_(ad.masked_softmax(x, mask) * ad.Tensor(r))), {"x": x}

    def concat_take(rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 4)
        idx = np.array([0, 6, 2, 2, 5])
        r = rng.normal(size=(2, 5))
        return (lambda: ad.sum_(ad.take(ad.concat([a, b], axis=1), idx, axis=1) * ad.Tensor(r))), {"a": a, "b": b}

    def shape_ops(rng):
        x = leaf(rng, 2, 3, 4)
        r = rng.normal(size=(4, 6))
        return (lambda: ad.sum_(ad.transpose(ad.flatten(x), (1, 0)).reshape(4, 6) * ad.Tensor(r))), {"x": x}

    def reductions(rng):
        x = leaf(rng, 3, 4, 2)
        r = rng.normal(size=(3, 2))
        return (lambda: ad.sum_(ad.mean(x, axis=1) * ad.Tensor(r)) + ad.sum_(x, axis=None) * 0.3), {"x": x}

    def square_distance(rng):
        w = leaf(rng, 3, 2)
        anchor = rng.normal(size=(3, 2))
        return (lambda: ad.square_distance(w, anchor)), {"w": w}

    def max_pool(rng):
        x = leaf(rng, 2, 2, 4, 4)
        r = rng.normal(size=(2, 2, 4, 4))
        return (lambda: ad.sum_(ad.max_pool2d(x, 3, 1) * ad.Tensor(r))), {"x": x}

    return {
        "add_broadcast": binary(ad.add, (3, 4), (4,)),
        "sub": binary(ad.sub, (3, 4), (3, 4)),
        "mul_broadcast": binary(ad.mul, (2, 3, 4), (3, 1)),
        "matmul": binary(ad.matmul, (3, 4), (4, 2)),
        "matmul_batched": binary(ad.matmul, (2, 1, 3, 4), (3, 4, 2)),
        "exp": unary(ad.exp),
        "relu": unary(ad.relu),
        "leaky_relu": unary(ad.leaky_relu),
        "elu": unary(ad.elu),
        "sigmoid": unary(ad.sigmoid),
        "softmax": unary(ad.softmax),
        "masked_softmax": masked,
        "cross_entropy": cross_entropy,
        "bce_with_logits": bce,
        "layer_norm": layer_norm,
        "batch_norm_train_4d": batch_norm(True, 4),
        "batch_norm_train_2d": batch_norm(True, 2),
        "batch_norm_eval": batch_norm(False, 4),
        "conv3_pad1": conv(3, 1),
        "conv5_pad2": conv(5, 2),
        "conv1_nobias": conv(1, 0, bias=False),
        "max_pool": max_pool,
        "concat_take": concat_take,
        "shape_ops": shape_ops,
        "reductions": reductions,
        "square_distance": square_distance,
    }


OP_CASES = _op_cases()


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_over_seeds(op):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fn, tensors = OP_CASES[op](rng)
        for rep in check_gradients(fn, tensors, rng):
            assert rep.ok, f"{op} seed {seed} {rep.name}: rel err {rep.rel_err:.2e} (tol {rep.tolerance})"


def test_determinism_same_seed_same_bits():
    def run(seed):
        rng = np.random.default_rng(seed)
        x, w = leaf(rng, 2, 3, 5, 5), leaf(rng, 4, 3, 3, 3)
        loss = readout(ad.elu(ad.conv2d(x, w, None, 1)), rng)
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes() + x.grad.tobytes()

    assert run(11) == run(11)
