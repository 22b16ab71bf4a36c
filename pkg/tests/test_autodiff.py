import math

import numpy as np
import pytest

from binquant import autodiff as ad
from binquant import quantcore as qc
from binquant.autodiff import Tensor

H = 1e-4
RTOL = 1e-4


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grads(build, arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    ad.backward(loss)
    return [l.grad for l in leaves]


def assert_grad_close(a, n, rtol=RTOL, atol=1e-7):
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n)
    assert np.all(err <= rtol * scale + atol), f"max abs err {err.max():.3e}"


def check_op(build, arrays):
    got = autodiff_grads(build, arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(build(*args).data)
        assert_grad_close(got[i], numeric_grad(f, a.copy()))


rng = np.random.default_rng(1234)


def rand(*shape):
    return rng.standard_normal(shape)


def weighted(t, shape_seed=0):
    # a fixed random weighting makes sum-type losses sensitive to every entry
    r = np.random.default_rng(shape_seed).standard_normal(t.shape)
    return ad.reduce_sum(ad.mul(t, r))


# -- forward values -----------------------------------------------------------

def test_matmul_identity():
    x = rand(2, 3)
    np.testing.assert_array_equal(ad.matmul(np.eye(2), x).data, x)


@pytest.mark.parametrize("c", [2, 5, 16])
def test_uniform_logits_loss(c):
    loss = ad.softmax_cross_entropy(np.zeros((3, c)), [0, 1, c - 1])
    assert float(loss.data) == pytest.approx(math.log(c), rel=1e-12)


def test_reduce_mean_grad():
    x = Tensor(rand(3, 4), requires_grad=True)
    ad.backward(ad.reduce_mean(x))
    np.testing.assert_allclose(x.grad, np.full((3, 4), 1 / 12))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(rand(2, 3), rand(2, 3))
    with pytest.raises(ValueError):
        ad.add(rand(2, 3), rand(2))


# -- backward basics ------------------------------------------------------------

def test_sum_grad_is_ones():
    w = Tensor(rand(4, 3), requires_grad=True)
    ad.backward(ad.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, np.ones((4, 3)))


def test_square_grad():
    data = rand(5)
    w = Tensor(data, requires_grad=True)
    ad.backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_allclose(w.grad, 2 * data)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.backward(Tensor(rand(2), requires_grad=True) * 2.0)


def test_shared_node_visited_once():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, 3.0)
    ad.backward(ad.reduce_sum(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


# -- gradient checks ---------------------------------------------------------------

@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: weighted(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    ("add", lambda a, b: weighted(ad.add(a, b)), [(3, 4), (3, 4)]),
    ("add_bias", lambda a, b: weighted(ad.add(a, b)), [(3, 4), (4,)]),
    ("mul", lambda a, b: weighted(ad.mul(a, b)), [(3, 4), (3, 4)]),
    ("mul_col", lambda a, b: weighted(ad.mul(a, b)), [(3, 4), (4,)]),
    ("mul_row", lambda a, b: weighted(ad.mul(a, b)), [(3, 4), (3, 1)]),
    ("transpose", lambda a: weighted(ad.transpose(a)), [(3, 4)]),
    ("reshape", lambda a: weighted(ad.reshape(a, (2, 6))), [(3, 4)]),
    ("mean_all", lambda a: ad.reduce_mean(ad.mul(a, a)), [(3, 4)]),
    ("mean_axis", lambda a: weighted(ad.reduce_mean(ad.reshape(a, (2, 3, 2)), axis=1)), [(3, 4)]),
    ("layernorm", lambda x, g, b: weighted(ad.layernorm_lite(x, g, b)), [(3, 5), (5,), (5,)]),
    ("xent", lambda z: ad.softmax_cross_entropy(z, [0, 2, 1]), [(3, 4)]),
])
def test_gradient_check(name, build, shapes):
    check_op(build, [rand(*s) for s in shapes])


def test_relu_gradient_check():
    x = rand(4, 5)
    x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
    check_op(lambda a: weighted(ad.relu(a)), [x])


def mlp_loss(w1, b1, w2, b2, x, y):
    h = ad.relu(ad.add(ad.matmul(x, w1), b1))
    return ad.softmax_cross_entropy(ad.add(ad.matmul(h, w2), b2), y)


def test_two_layer_mlp_gradients():
    r = np.random.default_rng(5)
    x = Tensor(r.standard_normal((8, 6)))
    y = r.integers(0, 3, 8)
    params = [r.standard_normal((6, 10)), r.standard_normal(10) * 0.1,
              r.standard_normal((10, 3)), r.standard_normal(3) * 0.1]
    check_op(lambda *p: mlp_loss(*p, x, y), params)


def test_determinism():
    def run():
        r = np.random.default_rng(9)
        w = Tensor(r.standard_normal((6, 64)), requires_grad=True)
        loss = weighted(ad.fake_quant_node(w, qc.SCHEMES["e5"]))
        ad.backward(loss)
        return float(loss.data), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# -- straight-through estimator ------------------------------------------------------

def test_sign_ste_is_identity_backward():
    x = np.array([-2.0, -0.5, 0.0, 0.3, 4.0])
    t = Tensor(x, requires_grad=True)
    out = ad.sign_ste(t)
    np.testing.assert_array_equal(out.data, [-1, -1, 1, 1, 1])
    g = np.array([0.7, -1.1, 2.0, 3.3, -0.2])
    ad.backward(ad.reduce_sum(ad.mul(out, g)))
    np.testing.assert_array_equal(t.grad, g)


def test_sign_ste_hardtanh():
    x = np.array([-2.0, -0.5, 0.0, 1.0, 4.0])
    t = Tensor(x, requires_grad=True)
    ad.backward(ad.reduce_sum(ad.sign_ste(t, ste="hardtanh")))
    np.testing.assert_array_equal(t.grad, [0, 1, 1, 1, 0])


def vjp(w, scheme, g, **kw):
    t = Tensor(w.copy(), requires_grad=True)
    ad.backward(ad.reduce_sum(ad.mul(ad.fake_quant_node(t, scheme, **kw), g)))
    return t.grad


@pytest.mark.parametrize("scheme", [qc.absmean_scheme(), qc.absmean_scheme(4)])
def test_ste_passes_upstream_unchanged(scheme):
    # with a detached scale, grad / scale recovers the upstream grad exactly
    r = np.random.default_rng(0)
    w = r.standard_normal((3, 8))
    w[0, 0] = 0.0
    g = r.standard_normal((3, 8))
    grad = vjp(w, scheme, g, scale_backprop=False)
    s = qc.dequantize(qc.quantize(np.abs(w), scheme))  # per-group scale broadcast
    np.testing.assert_allclose(grad / s, g, rtol=1e-14)


@pytest.mark.parametrize("scheme", [qc.absmean_scheme(), qc.absmean_scheme(3)])
def test_detached_scale_jacobian(scheme):
    r = np.random.default_rng(2)
    w = r.standard_normal((2, 6))
    n = w.size
    jac = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        jac[i] = vjp(w, scheme, e.reshape(w.shape), scale_backprop=False).reshape(-1)
    # analytic: d(s * ste(sign(w))) / dw = diag(s of each weight's group)
    q = qc.quantize(w, scheme)
    per_weight = np.repeat(q.scales, q.group_size)
    np.testing.assert_allclose(jac, np.diag(per_weight), rtol=1e-14, atol=0)


def surrogate(w0, scheme, scale_backprop):
    """STE surrogate of fake_quant around ``w0`` with the codes frozen.

    absmean : s(w) * (codes + (w - w0))
    absmax  : clamp(w, lo(w), hi(w)) + s(w) * r, r = codes - (clamp(w0) - lo0) / s0
    With a detached scale every range statistic is frozen at ``w0``.
    """
    q0 = qc.quantize(w0, scheme)
    c = q0.codes.astype(float)
    gs = q0.group_size

    def stats(w):
        groups = qc.subchannel_split(w, gs)
        if scheme.mode is qc.Mode.ABSMEAN:
            return np.abs(groups).mean(axis=1), None, None
        lo = groups.min(axis=1) * scheme.clip
        hi = groups.max(axis=1) * scheme.clip
        return (hi - lo) / (scheme.levels - 1), lo, hi

    s0, lo0, hi0 = stats(w0)
    g0 = qc.subchannel_split(w0, gs)
    if lo0 is not None:
        r = c - (np.clip(g0, lo0[:, None], hi0[:, None]) - lo0[:, None]) / s0[:, None]

    def f(w):
        s, lo, hi = stats(w) if scale_backprop else (s0, lo0, hi0)
        groups = qc.subchannel_split(w, gs)
        if lo is None:
            out = s[:, None] * (c + groups - g0)
        else:
            out = np.clip(groups, lo[:, None], hi[:, None]) + s[:, None] * r
        return qc.subchannel_merge(out, w.shape)

    return f


SURROGATE_SCHEMES = [qc.SCHEMES[k] for k in ("e1", "e2", "e3", "e4", "e5")] + [qc.absmean_scheme(4),
                                                                               qc.absmax_scheme(2, 4, 0.9)]


@pytest.mark.parametrize("scale_backprop", [True, False])
@pytest.mark.parametrize("scheme", SURROGATE_SCHEMES, ids=lambda s: s.label())
def test_frozen_code_surrogate(scheme, scale_backprop):
    r = np.random.default_rng(11)
    k = 128 if scheme.block_size == 64 else 8
    w0 = r.standard_normal((3, k))
    f = surrogate(w0, scheme, scale_backprop)
    np.testing.assert_allclose(f(w0), qc.fake_quant(w0, scheme), atol=1e-12)
    # a detached clamp has a kink at weights sitting exactly on the range ends
    smooth = np.ones(w0.shape, dtype=bool)
    if scheme.asymmetric and not scale_backprop and scheme.clip == 1.0:
        groups = qc.subchannel_split(w0, qc.quantize(w0, scheme).group_size)
        ends = (groups == groups.min(axis=1, keepdims=True)) | (groups == groups.max(axis=1, keepdims=True))
        smooth = ~qc.subchannel_merge(ends, w0.shape)
    for weights in (np.ones_like(w0), r.standard_normal(w0.shape)):
        grad = vjp(w0, scheme, weights, scale_backprop=scale_backprop)
        numeric = numeric_grad(lambda w: float(np.sum(f(w) * weights)), w0.copy())
        assert_grad_close(grad[smooth], numeric[smooth])


def test_detached_range_ends_pass_gradient():
    w = np.array([[-1.0, 0.2, 3.0]])
    grad = vjp(w, qc.absmax_scheme(2), np.ones_like(w), scale_backprop=False)
    np.testing.assert_array_equal(grad, [[1.0, 1.0, 1.0]])


def test_absmean_scale_backprop_formula():
    w = np.array([[0.5, -1.0, 1.5, -0.25]])
    grad = vjp(w, qc.absmean_scheme(), np.ones_like(w))
    # s + sign(w_j) / K * sum(codes)
    # the codes sum to zero, so only the STE term remains
    np.testing.assert_allclose(grad, np.full_like(w, 0.8125))
    g = np.array([[1.0, 0.0, 0.0, 0.0]])
    grad = vjp(w, qc.absmean_scheme(), g)
    np.testing.assert_allclose(grad, [[0.8125 + 0.25, -0.25, 0.25, -0.25]])


def test_fake_quant_node_hardtanh_mask():
    w = np.array([[0.5, -1.5, 2.0, -0.25]])
    grad = vjp(w, qc.absmean_scheme(), np.ones_like(w), scale_backprop=False, ste="hardtanh")
    s = np.abs(w).mean()
    np.testing.assert_allclose(grad, [[s, 0, 0, s]])


# -- optimizers ------------------------------------------------------------------------

def test_sgd_step():
    assert ad.sgd_step([np.array(1.0)], [np.array(1.0)], lr=0.1)[0] == pytest.approx(0.9)


def test_zero_grad_leaves_params():
    p = [rand(3, 2), rand(4)]
    out = ad.sgd_step(p, [np.zeros((3, 2)), np.zeros(4)], lr=0.5)
    for a, b in zip(p, out):
        np.testing.assert_array_equal(a, b)
    out = ad.Adam(lr=0.1).step(p, [np.zeros((3, 2)), np.zeros(4)])
    for a, b in zip(p, out):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step():
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    lr = 0.01
    out = ad.Adam(lr=lr).step([np.array([1.0])], [np.array([1.0])])
    assert out[0][0] == pytest.approx(1.0 - lr / (1.0 + 1e-8), rel=1e-12)


def test_optimizer_shape_mismatch():
    with pytest.raises(ValueError):
        ad.sgd_step([np.zeros(3)], [np.zeros(2)], lr=0.1)
    with pytest.raises(ValueError):
        ad.Adam().step([np.zeros(3)], [np.zeros(2)])
