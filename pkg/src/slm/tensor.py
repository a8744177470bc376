"""Dense tensors with reverse-mode automatic differentiation.

The kernel set is exactly what the model needs: elementwise arithmetic
with broadcasting, (stacked) matmul, shape moves, gathers, stabilized
row softmax, layer norm, gelu, log, reductions, fused cross-entropy and
dropout. Every op records a backward closure on its output; calling
``backward(loss)`` walks the recorded graph once in reverse topological
order and accumulates gradients into the leaves.

Arrays stay in 32-bit floats by default; passing float64 arrays into
the leaves promotes the whole graph, which the finite-difference
checker uses to keep its own roundoff below the tolerance it asserts.
Forward results are deterministic for fixed inputs: all reductions run
through sequential numpy kernels with a fixed ordering.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError

# Module switches. finite_checks makes any NaN/Inf produced by a forward
# op raise immediately instead of propagating. grad_enabled=False skips
# graph recording entirely (used by finite-difference probes and eval).
finite_checks = True
grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global grad_enabled
        self._saved = grad_enabled
        grad_enabled = False
        return self

    def __exit__(self, *exc):
        global grad_enabled
        grad_enabled = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            if data.dtype == np.float32 or data.dtype == np.float64:
                self.data = data
            else:
                self.data = data.astype(np.float32)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, ax1, ax2):
        return swapaxes(self, ax1, ax2)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _wrap(other) -> Tensor:
    return other if isinstance(other, Tensor) else Tensor(other)


def _make(data: np.ndarray, prev, backward) -> Tensor:
    """Build an op output, attaching the graph record when needed."""
    # 0-d numpy results come back as numpy scalars; keep their dtype
    # instead of letting the Tensor constructor default them to float32
    data = np.asarray(data)
    if finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    needs = grad_enabled and any(p.requires_grad for p in prev)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._prev = tuple(prev)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):

        def bw_s(out):
            if a.requires_grad:
                a._accumulate(out.grad)

        return _make(a.data + float(b), (a,), bw_s)
    b = _wrap(b)
    out_data = a.data + b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = float(b)

        def bw_s(out):
            if a.requires_grad:
                a._accumulate(out.grad * s)

        return _make(a.data * s, (a,), bw_s)
    b = _wrap(b)
    out_data = a.data * b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw)


# -- shape moves --------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(out):
        if a.requires_grad:
            a._accumulate(np.swapaxes(out.grad, ax1, ax2))

    # copy keeps downstream matmuls on contiguous memory
    return _make(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis; repeated indices accumulate in backward."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ContractError("take expects a 1-D index array")
    out_data = np.take(a.data, idx, axis=axis)

    def bw(out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            gmoved = np.moveaxis(a.grad, axis, 0)
            np.add.at(gmoved, idx, np.moveaxis(out.grad, axis, 0))

    return _make(out_data, (a,), bw)


def take_rows(a: Tensor, row_idx) -> Tensor:
    """out[i] = a[row_idx[i]] for a 2-D tensor and 1-D int rows."""
    return take(a, row_idx, axis=0)


def gather_elements(a: Tensor, col_idx) -> Tensor:
    """out[i] = a[i, col_idx[i]] for a 2-D tensor."""
    idx = np.asarray(col_idx)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ContractError("gather_elements expects [m,n] data and [m] indices")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def bw(out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, idx), out.grad)

    return _make(out_data, (a,), bw)


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / n)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _make(np.log(a.data), (a,), bw)


# -- neural kernels -----------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        if x.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate((g - dot) * y)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            red = tuple(range(g.ndim - 1))
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            red = tuple(range(g.ndim - 1))
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            gh = g * gamma.data
            t1 = gh.sum(axis=-1, keepdims=True)
            t2 = (gh * xhat).sum(axis=-1, keepdims=True)
            x._accumulate((gh - t1 / d - xhat * t2 / d) * inv)

    return _make(out_data, (x, gamma, beta), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form (matches x*Phi(x) to ~1e-3)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + th)

    def bw(out):
        if x.requires_grad:
            sech2 = 1.0 - th * th
            local = 0.5 * (1.0 + th) + 0.5 * xd * sech2 * _GELU_C * (
                1.0 + 3 * 0.044715 * xd ** 2)
            x._accumulate(out.grad * local)

    return _make(out_data, (x,), bw)


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Softmax cross-entropy, fused for numerical stability.

    With 1-D logits and an int target, returns -log softmax(logits)[target].
    With [m, n] logits and [m] targets, returns the mean loss over rows;
    an optional boolean mask restricts both the mean and the gradient to
    the selected rows (at least one row must be selected).
    Gradient w.r.t. logits is softmax minus one-hot (scaled by the mean).
    """
    if logits.ndim == 1:
        t = int(target)
        n = logits.shape[0]
        if not 0 <= t < n:
            raise IndexError(f"cross_entropy target {t} out of range [0,{n})")
        shifted = logits.data - logits.data.max()
        lse = np.log(np.exp(shifted).sum())
        out_data = np.asarray(lse - shifted[t], dtype=logits.data.dtype)

        def bw1(out):
            if logits.requires_grad:
                p = np.exp(shifted - lse)
                p[t] -= 1.0
                logits._accumulate(out.grad * p)

        return _make(out_data, (logits,), bw1)

    if logits.ndim != 2:
        raise ContractError("cross_entropy expects 1-D or 2-D logits")
    tgt = np.asarray(target)
    m, n = logits.shape
    if tgt.shape != (m,):
        raise ContractError("cross_entropy targets must be [m] for [m,n] logits")
    if mask is None:
        sel = np.arange(m)
    else:
        sel = np.flatnonzero(np.asarray(mask))
        if sel.size == 0:
            raise ContractError("cross_entropy mask selects no rows")
    tsel = tgt[sel]
    if tsel.size and (tsel.min() < 0 or tsel.max() >= n):
        raise IndexError("cross_entropy target out of range")
    rows = logits.data[sel]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    losses = lse - shifted[np.arange(sel.size), tsel]
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def bw(out):
        if logits.requires_grad:
            p = np.exp(shifted - lse[:, None])
            p[np.arange(sel.size), tsel] -= 1.0
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.data)
            logits.grad[sel] += out.grad * p / sel.size

    return _make(out_data, (logits,), bw)


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def bw(out):
        if x.requires_grad:
            x._accumulate(out.grad * keep)

    return _make(x.data * keep, (x,), bw)


# -- backward and checking ---------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss over the recorded graph."""
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def grad_check(f, params, eps: float = 1e-3) -> float:
    """Compare backward() against central finite differences, elementwise.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values. Returns the worst relative error, with the denominator
    max(|analytic|, |numeric|, 1e-8). Run the parameters in float64 when
    the loss itself is too rough for float32 differencing.
    """
    global grad_enabled, finite_checks
    for p in params:
        p.grad = None
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    saved = (grad_enabled, finite_checks)
    grad_enabled = False
    finite_checks = False
    worst = 0.0
    try:
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f1 = float(f().data)
                flat[i] = orig - eps
                f2 = float(f().data)
                flat[i] = orig
                num = (f1 - f2) / (2.0 * eps)
                denom = max(abs(float(aflat[i])), abs(num), 1e-8)
                rel = abs(float(aflat[i]) - num) / denom
                if rel > worst:
                    worst = rel
    finally:
        grad_enabled, finite_checks = saved
    return worst
