"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is numpy-backed and double precision. A Tensor remembers the
tensors it was computed from and a closure that routes its gradient to
them; `backward()` topologically sorts that graph and runs the closures
in reverse order, visiting each node exactly once. Graph construction is
single threaded and evaluation order is deterministic, so repeated
forward passes over the same inputs are bit-identical.

Random inputs (Gumbel noise, masks, distractor indices) never carry
gradients: they enter graphs as plain constants, keeping the graph
itself a pure function of its inputs.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, InputTooShortError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph.

    `values` is immutable by convention once the tensor has been consumed
    by an operation; `grad` is only written inside `backward()` (and by
    `zero_grad`). Leaf tensors created with requires_grad=True start with
    a zero gradient so accumulation across backward calls is well defined.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)
        elif self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator defers to the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _const(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _const(-1.0)))

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __truediv__(self, other):
        return mul(self, pow_const(_as_tensor(other), -1.0))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(values: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; attaches the graph edge only when it can matter."""
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # intermediate grads are allocated lazily in backward
        out._parents = tuple(parents)
        out._backward_fn = backward
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph.

    Visits every reachable node exactly once in reverse topological
    order. Gradients accumulate into `.grad` of every requires_grad
    tensor on a path to the loss; tensors not on such a path keep their
    zero (or None) gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p._backward_fn is not None or p.requires_grad):
                stack.append((p, False))
    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.values + b.values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(a.values * b.values, (a, b), bwd)


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.values ** p

    def bwd(g):
        _accumulate(x, g * p * x.values ** (p - 1.0))

    return _node(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def bwd(g):
        _accumulate(x, g * out)

    return _node(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, g / x.values)

    return _node(np.log(x.values), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.values / _SQRT2))
    out = x.values * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.values * x.values)
        _accumulate(x, g * (cdf + x.values * pdf))

    return _node(out, (x,), bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(gg, x.shape).copy())

    return _node(out, (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), _const(1.0 / n))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.values.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(x, g.transpose(inv))

    return _node(x.values.transpose(axes), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tensors, bwd)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Index the leading axis with an integer array (embedding-style lookup).

    Output shape is index.shape + x.shape[1:]. The backward pass
    scatter-adds, so repeated indices accumulate correctly.
    """
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ContractError("gather_rows index must be integer typed")

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        np.add.at(x.grad, index, g)

    return _node(x.values[index], (x,), bwd)


def pad_last(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (x.ndim - 1) + [(before, after)]
    out = np.pad(x.values, width)
    n = x.shape[-1]

    def bwd(g):
        _accumulate(x, g[..., before:before + n])

    return _node(out, (x,), bwd)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with `value` (no grad there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.values)

    def bwd(g):
        _accumulate(x, _unbroadcast(np.where(mask, 0.0, g), x.shape))

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")

    def bwd(g):
        _accumulate(a, _unbroadcast(g @ b.values.swapaxes(-1, -2), a.shape))
        _accumulate(b, _unbroadcast(a.values.swapaxes(-1, -2) @ g, b.shape))

    return _node(a.values @ b.values, (a, b), bwd)


def _conv_cols(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    length = x.shape[-1]
    n_out = (length - k) // stride + 1
    idx = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    return x[..., idx], idx  # (..., n_out, k)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """1-D cross-correlation.

    x: (C_in, L) or (B, C_in, L); kernels: (C_out, C_in // groups, K).
    Output length is floor((L - K) / stride) + 1. Differentiable in both
    the input and the kernels.
    """
    if stride < 1:
        raise ContractError("conv1d stride must be >= 1")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 3 or kernels.ndim != 3:
        raise ContractError("conv1d expects (B, C_in, L) input and (C_out, C_in/groups, K) kernels")
    batch, c_in, length = xv.shape
    c_out, c_in_g, k = kernels.shape
    if c_in != c_in_g * groups or c_out % groups:
        raise ContractError(
            f"conv1d channel mismatch: input {c_in}, kernels {kernels.shape}, groups {groups}")
    if length < k:
        raise InputTooShortError(f"conv1d input length {length} < kernel width {k}")

    cols, idx = _conv_cols(xv, k, stride)          # (B, C_in, L_out, K)
    n_out = cols.shape[2]
    og = c_out // groups
    if groups == 1:
        flat = cols.transpose(0, 2, 1, 3).reshape(batch * n_out, c_in * k)
        w2 = kernels.values.reshape(c_out, c_in * k)
        out = (flat @ w2.T).reshape(batch, n_out, c_out).transpose(0, 2, 1)
    else:
        cols_g = cols.reshape(batch, groups, c_in_g, n_out, k)
        w_g = kernels.values.reshape(groups, og, c_in_g * k)
        out = np.empty((batch, groups, og, n_out))
        for g_i in range(groups):
            flat = cols_g[:, g_i].transpose(0, 2, 1, 3).reshape(batch * n_out, c_in_g * k)
            out[:, g_i] = (flat @ w_g[g_i].T).reshape(batch, n_out, og).transpose(0, 2, 1)
        out = out.reshape(batch, c_out, n_out)

    def bwd(g):
        gv = g[None] if squeeze and g.ndim == 2 else g
        if groups == 1:
            g2 = gv.transpose(0, 2, 1).reshape(batch * n_out, c_out)
            flat_cols = cols.transpose(0, 2, 1, 3).reshape(batch * n_out, c_in * k)
            gw = (g2.T @ flat_cols).reshape(c_out, c_in, k)
            gcols = (g2 @ kernels.values.reshape(c_out, c_in * k)) \
                .reshape(batch, n_out, c_in, k).transpose(0, 2, 1, 3)
        else:
            cols_g = cols.reshape(batch, groups, c_in_g, n_out, k)
            w_g = kernels.values.reshape(groups, og, c_in_g * k)
            gw = np.empty((groups, og, c_in_g, k))
            gcols = np.empty((batch, groups, c_in_g, n_out, k))
            gv_g = gv.reshape(batch, groups, og, n_out)
            for g_i in range(groups):
                g2 = gv_g[:, g_i].transpose(0, 2, 1).reshape(batch * n_out, og)
                flat_cols = cols_g[:, g_i].transpose(0, 2, 1, 3).reshape(batch * n_out, c_in_g * k)
                gw[g_i] = (g2.T @ flat_cols).reshape(og, c_in_g, k)
                gcols[:, g_i] = (g2 @ w_g[g_i]).reshape(batch, n_out, c_in_g, k) \
                    .transpose(0, 2, 1, 3)
            gw = gw.reshape(c_out, c_in_g, k)
            gcols = gcols.reshape(batch, c_in, n_out, k)
        _accumulate(kernels, gw)
        if x.requires_grad or x._backward_fn is not None:
            gx = np.zeros((batch * c_in, length))
            rows = np.arange(batch * c_in)[:, None, None]
            np.add.at(gx, (rows, idx[None]), gcols.reshape(batch * c_in, n_out, k))
            gx = gx.reshape(batch, c_in, length)
            _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, (x, kernels), bwd)


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

def normalize(x: Tensor, axis: int, eps: float = 1e-6) -> Tensor:
    """Zero-mean, unit-variance along one axis (the layer-norm core)."""
    mu = x.values.mean(axis=axis, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        _accumulate(x, (g - gm - y * gym) * inv)

    return _node(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1,
               eps: float = 1e-6) -> Tensor:
    """normalize() plus a learned per-feature affine."""
    return add(mul(normalize(x, axis=axis, eps=eps), gamma), beta)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Per-frame group normalization over (B, C, L) or (C, L) input.

    Statistics are taken over the channels inside each group at every
    frame independently (no pooling over time), so the result for one
    utterance never depends on what else is in the batch.
    """
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if squeeze else x
    b, c, length = xb.shape
    if c % groups:
        raise ContractError(f"group_norm: {c} channels not divisible by {groups} groups")
    grouped = reshape(xb, (b, groups, c // groups, length))
    normed = reshape(normalize(grouped, axis=2, eps=eps), (b, c, length))
    out = add(mul(normed, gamma), beta)
    return reshape(out, x.shape) if squeeze else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - dot))

    return _node(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via max subtraction."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(builder: Callable[[], tuple[Tensor, Iterable[Tensor]]],
               eps: float = 1e-5, max_entries_per_param: int | None = None,
               seed: int = 0) -> float:
    """Compare autodiff gradients against central finite differences.

    `builder` must be deterministic, return (scalar loss, parameter
    tensors), and hand back the *same* parameter Tensor objects on every
    call so their values can be perturbed in place. Returns the maximum
    over all checked entries of |autodiff - numeric| / max(1e-8, |numeric|).
    """
    loss, params = builder()
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
             for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.values.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = builder()[0].item()
            flat[i] = orig - eps
            with no_grad():
                lo = builder()[0].item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(g.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
