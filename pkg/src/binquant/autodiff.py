"""Small reverse-mode autodiff over numpy arrays.

Only what the QAT harness needs: dense matmul, elementwise add/mul with
per-row or per-column operands, relu, a normalizing layer, means, softmax
cross-entropy, reshape, and the fake-quantization node with its
straight-through gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import quantcore as qc
from .quantcore import Mode, QuantScheme


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def numpy(self) -> np.ndarray:
        return self.data


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor(data, any(p.requires_grad for p in parents), parents, op)
    if out.requires_grad:
        out._backward = backward
    return out


def _check_operand(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # equal shapes, a per-column vector [N], or a per-row column [.., 1]
    if b.shape == a.shape or b.ndim == 0:
        return
    if a.ndim >= 1 and b.shape == (a.shape[-1],):
        return
    if a.ndim >= 1 and b.shape == a.shape[:-1] + (1,):
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1:
        return grad.reshape(-1, shape[0]).sum(axis=0)
    return grad.sum(axis=-1, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_operand(a.data, b.data, "add")

    def backward(g):
        return g, _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_operand(a.data, b.data, "mul")

    def backward(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0), (x,), "relu", backward)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (g.T,)

    return _node(x.data.T, (x,), "transpose", backward)


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else x.shape[axis]
    out = np.mean(x.data, axis=axis, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),)

    return _node(out, (x,), "mean", backward)


def reduce_sum(x) -> Tensor:
    x = _wrap(x)
    out = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.data.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _node(out, (x,), "sum", backward)


def layernorm_lite(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.data.dtype)

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx.astype(x.data.dtype),
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), "layernorm", backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("softmax_cross_entropy: expected logits [N, C] and labels [N]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.mean(logsum - z[rows, labels])
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((g * d / len(labels)).astype(logits.data.dtype),)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), "xent", backward)


def sign_ste(x, eps: float = qc.DEFAULT_EPS, ste: str = "identity") -> Tensor:
    """``sign`` with zeros sent to +1; backward is the straight-through identity."""
    x = _wrap(x)
    out = qc.binary_sign(x.data, eps).astype(x.data.dtype)

    def backward(g):
        if ste == "hardtanh":
            return (g * (np.abs(x.data) <= 1.0),)
        return (g,)

    return _node(out, (x,), "sign_ste", backward)


def fake_quant_node(w, scheme: QuantScheme, scale_backprop: bool = True,
                    ste: str = "identity") -> Tensor:
    """Fake-quantize ``w`` with a straight-through gradient.

    The rounding / sign step passes the upstream gradient unchanged
    (``ste="hardtanh"`` zeroes it where ``|w| > 1``).  With
    ``scale_backprop`` the scale (and for affine schemes, the range) is a
    differentiable function of ``w``; otherwise it is a detached constant.
    """
    if ste not in ("identity", "hardtanh"):
        raise ValueError(f"unknown ste variant {ste!r}")
    w = _wrap(w)
    q = qc.quantize(w.data, scheme)
    out = qc.dequantize(q).astype(w.data.dtype)
    groups, valid, pad = qc.group_view(w.data.astype(np.float64), scheme)
    shape = w.shape

    def to_groups(g):
        return qc.subchannel_split(np.asarray(g, dtype=np.float64).reshape(shape), q.group_size, pad=True)

    def from_groups(d):
        return qc.subchannel_merge(d, shape, pad).astype(w.data.dtype)

    def ste_mask():
        if ste == "hardtanh":
            return (np.abs(groups) <= 1.0) & valid
        return valid

    if scheme.mode is Mode.ABSMEAN:
        s = q.scales[:, None]
        codes = q.codes.astype(np.float64)
        counts = np.maximum(valid.sum(axis=1, keepdims=True), 1)

        def backward(g):
            gg = to_groups(g)
            dw = gg * s * ste_mask()
            if scale_backprop:
                ds = np.sum(gg * codes * valid, axis=1, keepdims=True)
                dw = dw + np.sign(groups) * valid / counts * ds
            return (from_groups(dw),)
    else:
        levels = scheme.levels - 1
        lo, hi = qc.absmax_range(groups, valid, scheme.clip)
        s = q.scales
        inside = (groups >= lo[:, None]) & (groups <= hi[:, None]) & valid
        clamped = np.clip(groups, lo[:, None], hi[:, None])
        safe = np.where(s > 0, s, 1.0)[:, None]
        resid = np.where(s[:, None] > 0, q.codes - (clamped - lo[:, None]) / safe, 0.0) * valid
        below = (groups < lo[:, None]) & valid
        above = (groups > hi[:, None]) & valid
        rows = np.arange(groups.shape[0])
        i_min = np.where(valid, groups, np.inf).argmin(axis=1)
        i_max = np.where(valid, groups, -np.inf).argmax(axis=1)

        def backward(g):
            gg = to_groups(g)
            dw = gg * (inside & ste_mask())
            if scale_backprop:
                d_lo = np.sum(gg * (below - resid / levels), axis=1)
                d_hi = np.sum(gg * (above + resid / levels), axis=1)
                np.add.at(dw, (rows, i_min), scheme.clip * d_lo)
                np.add.at(dw, (rows, i_max), scheme.clip * d_hi)
            return (from_groups(dw),)

    return _node(out, (w,), f"fake_quant[{scheme.label()}]", backward)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires grad and returns a mapping
    ``id(leaf) -> grad``.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list:
    out = []
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError("sgd_step: parameter / gradient shape mismatch")
        out.append(p - lr * g)
    return out


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list = []
        self.v: list = []

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list:
        if not self.m:
            self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if np.shape(p) != np.shape(g):
                raise ValueError("Adam.step: parameter / gradient shape mismatch")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append((p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.asarray(p).dtype))
        return out
