"""Minimal dense-array kernel with reverse-mode differentiation.

Implements exactly the operations the detector's computation graph needs,
each with a hand-written backward rule, verified against central finite
differences (see :func:`gradcheck`).

Conventions:
  * A :class:`Tape` records operations in execution order; ``backward``
    replays them in reverse. One tape per forward pass, confined to one
    thread. Independent tapes may run in parallel.
  * Storage dtype is per-tape (float32 for training, float64 for gradient
    checking). Matrix products and reductions always accumulate in float64.
  * No implicit broadcasting. Binary elementwise ops require equal shapes;
    the only exceptions are a Python number operand and a size-1 node,
    both of which broadcast explicitly. Row/column broadcasts are their
    own named operations (``add_rowvec``, ``div_colvec``) so every
    backward rule stays auditable.
  * Gradients accumulate additively when a node feeds several consumers.
"""

from __future__ import annotations

import math
import numbers
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _acc_matmul(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    # float64 accumulation regardless of storage dtype
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(dtype, copy=False)


def _acc_sum(a: np.ndarray, dtype, axis=None, keepdims=False) -> np.ndarray:
    out = a.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    return np.asarray(out).astype(dtype, copy=False)


class DiffNode:
    """A dense real array recorded on a tape, with a lazily materialized grad."""

    __slots__ = ("tape", "values", "grad")

    def __init__(self, tape: "Tape", values: np.ndarray):
        self.tape = tape
        self.values = values
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.values.reshape(()))

    # -- convenience methods / operators (thin wrappers over module ops) --

    def sum(self) -> "DiffNode":
        return sum_all(self)

    def mean(self) -> "DiffNode":
        return mean_all(self)

    def reshape(self, shape) -> "DiffNode":
        return reshape(self, shape)

    @property
    def T(self) -> "DiffNode":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"DiffNode(shape={self.shape}, dtype={self.values.dtype})"


class _Record:
    __slots__ = ("out", "ins", "bwd")

    def __init__(self, out: DiffNode, ins: tuple[DiffNode, ...], bwd: Callable):
        self.out = out
        self.ins = ins
        self.bwd = bwd


class Tape:
    """Ordered recording of operations; inputs of a record always precede it."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records: list[_Record] = []

    def leaf(self, values) -> DiffNode:
        """Register an input array (parameter, feature, or constant) on this tape."""
        arr = np.asarray(values, dtype=self.dtype)
        return DiffNode(self, arr.copy())

    def _emit(self, values: np.ndarray, ins: tuple[DiffNode, ...], bwd: Callable) -> DiffNode:
        for n in ins:
            if n.tape is not self:
                raise ContractError("operand recorded on a different tape")
        out = DiffNode(self, np.asarray(values, dtype=self.dtype))
        self._records.append(_Record(out, ins, bwd))
        return out

    def backward(self, root: DiffNode) -> None:
        """Propagate gradients from a scalar root to every node that feeds it."""
        if root.tape is not self:
            raise ContractError("root recorded on a different tape")
        if root.values.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.values)
        for rec in reversed(self._records):
            g = rec.out.grad
            if g is None:
                continue
            for node, gi in zip(rec.ins, rec.bwd(g)):
                if gi is None:
                    continue
                # never mutate grad arrays in place: accumulation allocates
                node.grad = gi if node.grad is None else node.grad + gi

    def __len__(self) -> int:
        return len(self._records)


def _same_tape(*nodes: DiffNode) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Matrix product with backward dA = g @ B^T, dB = A^T @ g."""
    tape = _same_tape(a, b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {av.shape} x {bv.shape}")
    out = _acc_matmul(av, bv, tape.dtype)

    def bwd(g):
        return (_acc_matmul(g, bv.T, tape.dtype), _acc_matmul(av.T, g, tape.dtype))

    return tape._emit(out, (a, b), bwd)


def transpose(x: DiffNode) -> DiffNode:
    if x.values.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got shape {x.shape}")
    return x.tape._emit(x.values.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: DiffNode, shape) -> DiffNode:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.values.size and -1 not in shape:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    old = x.values.shape
    return x.tape._emit(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_cols(a: DiffNode, b: DiffNode) -> DiffNode:
    """Columnwise concatenation of two matrices with equal row counts."""
    tape = _same_tape(a, b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise DimensionError(f"concat_cols row mismatch: {av.shape} vs {bv.shape}")
    da = av.shape[1]
    out = np.concatenate([av, bv], axis=1)
    return tape._emit(out, (a, b), lambda g: (g[:, :da], g[:, da:]))


def take_column(x: DiffNode, j: int) -> DiffNode:
    """Extract column j of a matrix as a 1-D node."""
    xv = x.values
    if xv.ndim != 2 or not (0 <= j < xv.shape[1]):
        raise DimensionError(f"take_column({j}) on shape {xv.shape}")

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[:, j] = g
        return (gx,)

    return x.tape._emit(xv[:, j].copy(), (x,), bwd)


def take(x: DiffNode, i: int) -> DiffNode:
    """Extract element i of a vector as a scalar node."""
    xv = x.values
    if xv.ndim != 1 or not (0 <= i < xv.shape[0]):
        raise DimensionError(f"take({i}) on shape {xv.shape}")

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[i] = g
        return (gx,)

    return x.tape._emit(xv[i].copy(), (x,), bwd)


def stack(nodes: Sequence[DiffNode]) -> DiffNode:
    """Stack size-1 nodes into a 1-D vector."""
    if not nodes:
        raise ContractError("stack of zero nodes")
    tape = _same_tape(*nodes)
    for n in nodes:
        if n.values.size != 1:
            raise DimensionError(f"stack expects size-1 nodes, got shape {n.shape}")
    out = np.array([n.values.reshape(()) for n in nodes], dtype=tape.dtype)
    shapes = [n.values.shape for n in nodes]

    def bwd(g):
        return tuple(np.full(s, g[i], dtype=g.dtype) for i, s in enumerate(shapes))

    return tape._emit(out, tuple(nodes), bwd)


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(a, b, fwd, bwd_a, bwd_b, name: str) -> DiffNode:
    """Shared plumbing for binary elementwise ops.

    Accepts node/node with equal shapes, node/number, or node/size-1 node
    (explicit scalar broadcast). Anything else is a dimension error.
    """
    a_node = isinstance(a, DiffNode)
    b_node = isinstance(b, DiffNode)
    if a_node and b_node:
        tape = _same_tape(a, b)
        av, bv = a.values, b.values
        if av.shape != bv.shape and av.size != 1 and bv.size != 1:
            raise DimensionError(f"{name} shape mismatch: {av.shape} vs {bv.shape}")
        out = fwd(av, bv)

        def bwd(g):
            ga = bwd_a(g, av, bv)
            gb = bwd_b(g, av, bv)
            if av.shape != out.shape:  # a was the scalar side
                ga = _acc_sum(ga, g.dtype).reshape(av.shape)
            if bv.shape != out.shape:
                gb = _acc_sum(gb, g.dtype).reshape(bv.shape)
            return (ga, gb)

        return tape._emit(out, (a, b), bwd)
    if a_node and isinstance(b, numbers.Real):
        bv = float(b)
        return a.tape._emit(
            fwd(a.values, bv), (a,), lambda g, av=a.values: (bwd_a(g, av, bv),)
        )
    if b_node and isinstance(a, numbers.Real):
        av = float(a)
        return b.tape._emit(
            fwd(av, b.values), (b,), lambda g, bv=b.values: (bwd_b(g, av, bv),)
        )
    raise ContractError(f"{name} expects DiffNode or number operands")


def add(a, b) -> DiffNode:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> DiffNode:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> DiffNode:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> DiffNode:
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


def sigmoid(x: DiffNode) -> DiffNode:
    xv = x.values
    s = np.empty_like(xv)
    pos = xv >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    s[~pos] = ex / (1.0 + ex)
    return x.tape._emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: DiffNode) -> DiffNode:
    xv = x.values
    return x.tape._emit(np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),))


def gelu(x: DiffNode) -> DiffNode:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    xv = x.values
    t = np.tanh(_GELU_C * (xv + _GELU_A * xv**3))

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du),)

    return x.tape._emit(0.5 * xv * (1.0 + t), (x,), bwd)


def exp(x: DiffNode) -> DiffNode:
    ev = np.exp(x.values)
    return x.tape._emit(ev, (x,), lambda g: (g * ev,))


def log(x: DiffNode) -> DiffNode:
    xv = x.values
    if np.any(xv <= 0):
        raise DomainError(f"log of non-positive value (min={xv.min()})")
    return x.tape._emit(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: DiffNode) -> DiffNode:
    xv = x.values
    if np.any(xv < 0):
        raise DomainError(f"sqrt of negative value (min={xv.min()})")
    rv = np.sqrt(xv)
    return x.tape._emit(rv, (x,), lambda g: (g * 0.5 / np.maximum(rv, np.finfo(rv.dtype).tiny),))


def square(x: DiffNode) -> DiffNode:
    xv = x.values
    return x.tape._emit(xv * xv, (x,), lambda g: (g * 2.0 * xv,))


def pow_const(x: DiffNode, c: float) -> DiffNode:
    """x**c for x >= 0 and constant c >= 0. d/dx = c*x^(c-1), taken as 0 at x=0."""
    if c < 0:
        raise ConfigError(f"pow_const exponent must be >= 0, got {c}")
    xv = x.values
    if np.any(xv < 0):
        raise DomainError("pow_const of negative base")
    out = xv**c

    def bwd(g):
        if c == 0:
            return (np.zeros_like(xv),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = c * xv ** (c - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return x.tape._emit(out, (x,), bwd)


def clip(x: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clamp to [lo, hi]; gradient passes where lo <= x <= hi, else zero."""
    xv = x.values
    mask = (xv >= lo) & (xv <= hi)
    return x.tape._emit(np.clip(xv, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and normalization


def softmax(x: DiffNode, axis: int = -1) -> DiffNode:
    """Max-subtracted stable softmax along one axis."""
    xv = x.values
    if xv.size == 0:
        raise DimensionError("softmax of empty array")
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax input contains non-finite values")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = (e / _acc_sum(e, xv.dtype, axis=axis, keepdims=True)).astype(x.tape.dtype, copy=False)

    def bwd(g):
        inner = _acc_sum(g * s, g.dtype, axis=axis, keepdims=True)
        return (s * (g - inner),)

    return x.tape._emit(s, (x,), bwd)


def sum_all(x: DiffNode) -> DiffNode:
    xv = x.values
    out = _acc_sum(xv, x.tape.dtype)
    return x.tape._emit(out, (x,), lambda g: (np.full_like(xv, g.reshape(())),))


def mean_all(x: DiffNode) -> DiffNode:
    xv = x.values
    n = xv.size
    out = _acc_sum(xv, x.tape.dtype) / n
    return x.tape._emit(out, (x,), lambda g: (np.full_like(xv, g.reshape(()) / n),))


def sum_axis(x: DiffNode, axis: int, keepdims: bool = True) -> DiffNode:
    xv = x.values
    out = _acc_sum(xv, x.tape.dtype, axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape).copy(),)

    return x.tape._emit(out, (x,), bwd)


def add_rowvec(x: DiffNode, v: DiffNode) -> DiffNode:
    """x[N,d] + v[d] broadcast across rows (bias add)."""
    tape = _same_tape(x, v)
    xv, vv = x.values, v.values
    if xv.ndim != 2 or vv.shape != (xv.shape[1],):
        raise DimensionError(f"add_rowvec shapes: {xv.shape} + {vv.shape}")

    def bwd(g):
        return (g, _acc_sum(g, g.dtype, axis=0))

    return tape._emit(xv + vv[None, :], (x, v), bwd)


def div_colvec(x: DiffNode, v: DiffNode) -> DiffNode:
    """x[N,d] / v[N,1] broadcast across columns (row-wise scaling)."""
    tape = _same_tape(x, v)
    xv, vv = x.values, v.values
    if xv.ndim != 2 or vv.shape != (xv.shape[0], 1):
        raise DimensionError(f"div_colvec shapes: {xv.shape} / {vv.shape}")

    def bwd(g):
        gx = g / vv
        gv = -_acc_sum(g * xv, g.dtype, axis=1, keepdims=True) / (vv * vv)
        return (gx, gv)

    return tape._emit(xv / vv, (x, v), bwd)


# ---------------------------------------------------------------------------
# temporal / selection ops


def conv1d(x: DiffNode, kernel: DiffNode, pad: int) -> DiffNode:
    """Temporal convolution over the first axis with zero padding.

    x: [N, d_in], kernel: [w, d_in, d_out], w odd, pad == (w-1)/2 so the
    output keeps length N. Implemented as an im2col matrix product.
    """
    tape = _same_tape(x, kernel)
    xv, kv = x.values, kernel.values
    if kv.ndim != 3:
        raise DimensionError(f"conv1d kernel must be 3-D, got {kv.shape}")
    w, d_in, d_out = kv.shape
    if w % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {w}")
    if pad != (w - 1) // 2:
        raise ConfigError(f"conv1d pad must be (w-1)/2 = {(w - 1) // 2}, got {pad}")
    if xv.ndim != 2 or xv.shape[1] != d_in:
        raise DimensionError(f"conv1d input {xv.shape} vs kernel {kv.shape}")
    n = xv.shape[0]

    xp = np.zeros((n + 2 * pad, d_in), dtype=xv.dtype)
    xp[pad : pad + n] = xv
    cols = np.concatenate([xp[t : t + n] for t in range(w)], axis=1)  # [N, w*d_in]
    kflat = kv.reshape(w * d_in, d_out)
    out = _acc_matmul(cols, kflat, tape.dtype)

    def bwd(g):
        gk = _acc_matmul(cols.T, g, g.dtype).reshape(w, d_in, d_out)
        gcols = _acc_matmul(g, kflat.T, g.dtype)
        gxp = np.zeros_like(xp)
        for t in range(w):
            gxp[t : t + n] += gcols[:, t * d_in : (t + 1) * d_in]
        return (gxp[pad : pad + n], gk)

    return tape._emit(out, (x, kernel), bwd)


def topk_mean(x: DiffNode, k: int) -> DiffNode:
    """Mean of the k largest entries of a vector; ties keep the lowest index.

    Gradient 1/k flows to exactly the selected entries.
    """
    xv = x.values
    if xv.ndim != 1:
        raise DimensionError(f"topk_mean expects 1-D, got shape {xv.shape}")
    n = xv.shape[0]
    if not (1 <= k <= n):
        raise ConfigError(f"topk_mean k={k} out of range for length {n}")
    sel = np.argsort(-xv, kind="stable")[:k]
    out = _acc_sum(xv[sel], x.tape.dtype) / k

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[sel] = g.reshape(()) / k
        return (gx,)

    return x.tape._emit(out, (x,), bwd)


# ---------------------------------------------------------------------------
# finite-difference verification


class GradCheckReport:
    """Worst relative error per parameter block, plus the overall worst."""

    def __init__(self, per_block: dict[str, float]):
        self.per_block = per_block
        self.worst = max(per_block.values()) if per_block else 0.0

    def __repr__(self):
        return f"GradCheckReport(worst={self.worst:.3e})"


def gradcheck(
    build: Callable[[Tape, dict[str, DiffNode]], DiffNode],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued graph against central differences.

    ``build(tape, leaves)`` must reconstruct the same graph from any leaf
    values (pure function). Runs entirely in float64. Relative error uses
    |a-b| / (|a| + |b| + 1e-8) and the worst element per block is reported.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"gradcheck eps must be in [1e-6, 1e-3], got {eps}")

    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    tape = Tape(np.float64)
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    root = build(tape, leaves)
    if root.values.size != 1:
        raise ContractError(f"gradcheck root must be scalar, got shape {root.shape}")
    tape.backward(root)
    analytic = {
        k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k]))
        for k in arrays
    }

    def value_at(block: str, flat_idx: int, delta: float) -> float:
        probe = {k: v.copy() for k, v in arrays.items()}
        probe[block].flat[flat_idx] += delta
        t = Tape(np.float64)
        lv = {k: t.leaf(v) for k, v in probe.items()}
        return build(t, lv).item()

    per_block: dict[str, float] = {}
    for name, arr in arrays.items():
        worst = 0.0
        a = analytic[name]
        for i in range(arr.size):
            fp = value_at(name, i, +eps)
            fm = value_at(name, i, -eps)
            fd = (fp - fm) / (2.0 * eps)
            ai = a.flat[i]
            rel = abs(ai - fd) / (abs(ai) + abs(fd) + 1e-8)
            worst = max(worst, rel)
        per_block[name] = worst
    return GradCheckReport(per_block)
