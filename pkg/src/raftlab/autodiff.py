"""Dense-tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and remembers which op produced it and from
which inputs (the `_prev` tuple), so the executed graph is the DAG hanging
off the loss tensor. `backward()` replays that DAG once in reverse
topological order. Training runs in float32; gradient-check code builds the
same graphs in float64 so finite-difference tolerances are meaningful.

Broadcasting is deliberately restricted: binary elementwise ops require
identical shapes, and the only broadcast forms are `add_bias` (row-wise bias)
and `scale_rows` (per-row scalar). Every forward op checks its output for
NaN/Inf and aborts with the op name.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(op: str, data: np.ndarray) -> None:
    # fast path: the sum is non-finite iff some element is NaN/Inf, except
    # for overflow false positives, so only confirm with the full scan then
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._prev: tuple[Tensor, ...] = ()
        self._backward = lambda: None
        if op == "leaf":
            _check_finite("leaf", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray) -> None:
        # copy on first write: g may alias another tensor's live gradient
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss down to every leaf.

        The `_prev` tuples are ordered, so gradient accumulation order is
        structural and runs are bit-reproducible.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()

    # -- basic elementwise ops (identical shapes only) --

    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other, self.dtype)
        _same_shape("add", self, other)
        out = _make("add", self.data + other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(out.grad)

        out._backward = _bw
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other, self.dtype)
        _same_shape("sub", self, other)
        out = _make("sub", self.data - other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(-out.grad)

        out._backward = _bw
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other, self.dtype)
        _same_shape("mul", self, other)
        out = _make("mul", self.data * other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self._accum(out.grad * other.data)
            if other.requires_grad:
                other._accum(out.grad * self.data)

        out._backward = _bw
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    # -- shorthand for common unary ops --

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _make(op: str, data: np.ndarray, prev: tuple[Tensor, ...]) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in prev)
    out.op = op
    out._prev = prev
    out._backward = lambda: None
    return out


# -- linear algebra --


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = _make("matmul", a.data @ b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    out = _make("transpose", x.data.T.copy(), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad.T)

    out._backward = _bw
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x is (m, n), b is (n,). The one sanctioned broadcast."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: x {x.shape} incompatible with bias {b.shape}")
    out = _make("add_bias", x.data + b.data[None, :], (x, b))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad)
        if b.requires_grad:
            b._accum(out.grad.sum(axis=0))

    out._backward = _bw
    return out


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row t of x (m, n) by s[t]; used for rationale gating."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ShapeError(f"scale_rows: x {x.shape} incompatible with scales {s.shape}")
    out = _make("scale_rows", x.data * s.data[:, None], (x, s))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * s.data[:, None])
        if s.requires_grad:
            s._accum((out.grad * x.data).sum(axis=1))

    out._backward = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _make("scale", x.data * x.data.dtype.type(c), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * x.data.dtype.type(c))

    out._backward = _bw
    return out


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.data.shape[0]):
        raise ShapeError(f"slice_rows[{lo}:{hi}] invalid for shape {x.shape}")
    out = _make("slice_rows", x.data[lo:hi, :].copy(), (x,))

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[lo:hi, :] = out.grad
            x._accum(g)

    out._backward = _bw
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.data.shape[1]):
        raise ShapeError(f"slice_cols[{lo}:{hi}] invalid for shape {x.shape}")
    out = _make("slice_cols", x.data[:, lo:hi].copy(), (x,))

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, lo:hi] = out.grad
            x._accum(g)

    out._backward = _bw
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols needs a non-empty list of 2-D tensors")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    out = _make("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    widths = [p.data.shape[1] for p in parts]

    def _bw():
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(out.grad[:, off : off + w])
            off += w

    out._backward = _bw
    return out


# -- nonlinearities --


def relu(x: Tensor) -> Tensor:
    out = _make("relu", np.maximum(x.data, 0), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * (x.data > 0))

    out._backward = _bw
    return out


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _make("gelu", (x.data * cdf).astype(x.dtype), (x,))

    def _bw():
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accum(out.grad * (cdf + x.data * pdf))

    out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = _make("sigmoid", y.astype(x.dtype), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * out.data * (1.0 - out.data))

    out._backward = _bw
    return out


def tanh(x: Tensor) -> Tensor:
    out = _make("tanh", np.tanh(x.data), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * (1.0 - out.data * out.data))

    out._backward = _bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _make("softmax", y, (x,))

    def _bw():
        if x.requires_grad:
            dot = np.sum(out.grad * out.data, axis=axis, keepdims=True)
            x._accum(out.data * (out.grad - dot))

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of x (m, n) to zero mean / unit variance, then affine."""
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make("layer_norm", xhat * gain.data[None, :] + bias.data[None, :], (x, gain, bias))

    def _bw():
        g = out.grad
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data[None, :]
            m1 = gg.mean(axis=1, keepdims=True)
            m2 = (gg * xhat).mean(axis=1, keepdims=True)
            x._accum((gg - m1 - xhat * m2) * inv)

    out._backward = _bw
    return out


# -- reductions and lookups --


def tsum(x: Tensor) -> Tensor:
    out = _make("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(np.full_like(x.data, out.grad))

    out._backward = _bw
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _make("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(np.full_like(x.data, out.grad / n))

    out._backward = _bw
    return out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows of x (m, n) selected by a binary mask (m,) -> (1, n)."""
    mask = np.asarray(mask)
    if x.data.ndim != 2 or mask.shape != (x.data.shape[0],):
        raise ShapeError(f"masked_mean: x {x.shape} incompatible with mask {mask.shape}")
    count = float(mask.sum())
    if count == 0:
        raise ContractError("masked_mean: mask selects no rows")
    w = (mask.astype(x.dtype) / x.dtype.type(count))[:, None]
    out = _make("masked_mean", (x.data * w).sum(axis=0, keepdims=True), (x,))

    def _bw():
        if x.requires_grad:
            x._accum(w * out.grad)

    out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table (V, d) by integer ids (T,); scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError("embedding: id out of range")
    out = _make("embedding", table.data[ids].copy(), (table,))

    def _bw():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

    out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; only call during training with rate > 0."""
    if not 0.0 < rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside (0, 1)")
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = _make("dropout", x.data * keep, (x,))

    def _bw():
        if x.requires_grad:
            x._accum(out.grad * keep)

    out._backward = _bw
    return out


# -- losses --


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean multi-class cross-entropy; logits (B, C), integer targets (B,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise ContractError("cross_entropy: target class out of range")
    b = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = logz - logits.data[np.arange(b), targets]
    out = _make("cross_entropy", np.asarray(nll.mean(), dtype=logits.dtype), (logits,))

    def _bw():
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(b), targets] -= 1.0
            logits._accum(out.grad * p / b)

    out._backward = _bw
    return out


def bce_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy over (optionally masked) elements.

    Stable form: max(z,0) - z*y + log1p(exp(-|z|)).
    """
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.data.shape:
        raise ShapeError(f"bce: targets {targets.shape} != logits {logits.shape}")
    if mask is None:
        sel = np.ones(logits.data.shape, dtype=logits.dtype)
    else:
        sel = np.asarray(mask).astype(logits.dtype)
        if sel.shape != logits.data.shape:
            raise ShapeError(f"bce: mask {sel.shape} != logits {logits.shape}")
    count = float(sel.sum())
    if count == 0:
        raise ContractError("bce: mask selects no elements")
    z = logits.data
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = _make("bce", np.asarray((per * sel).sum() / logits.dtype.type(count), dtype=logits.dtype), (logits,))

    def _bw():
        if logits.requires_grad:
            sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            logits._accum(out.grad * (sig - targets) * sel / count)

    out._backward = _bw
    return out


# -- optimizer --


class Adam:
    """Adam with bias correction over a name->Tensor parameter dict.

    A parameter whose grad is None is treated as having a zero gradient, so
    parameters unreachable from the loss still receive a well-defined update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param {p.data.shape} for '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
