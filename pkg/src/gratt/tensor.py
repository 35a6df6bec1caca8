"""Minimal reverse-mode autodiff over dense float64 arrays.

Tensors are thin wrappers around C-contiguous ``numpy.float64`` arrays of rank
at most 3.  Operations executed while a :class:`Tape` is active are recorded
in execution order (a Wengert list), so a reverse sweep over the tape is a
valid topological traversal.  Without an active tape nothing is recorded,
which is the inference path.

Broadcasting is limited to scalars.  Row-vector biases, row gathers and the
gated row selection used by the decoder are explicit operations.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3


class NonFiniteError(ValueError):
    """An op received NaN or inf where the result would be meaningless."""


LN_EPS = 1e-5

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple[Tensor, ...], backward: Callable):
        self.parents = parents
        self.backward = backward


class Tape:
    """Records differentiable operations for one forward/backward pass.

    Use as a context manager; a tape can be swept once, after which it has to
    be ``reset()`` before reuse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(parents, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already swept; call reset() before another backward")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ValueError("loss is not connected to this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for idx in range(loss.node_id, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            grads[idx] = None
            node = self.nodes[idx]
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id is None or parent._tape is not self:
                    # leaf
                    parent.grad = np.array(pg) if parent.grad is None else parent.grad + pg
                else:
                    pid = parent.node_id
                    grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss._tape is None:
        raise ValueError("loss was not computed under an active tape")
    loss._tape.backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                tape.record(out, parents, backward)
                break
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# pointwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _result(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive input")
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sgn,))


_UNARY = {"sigmoid": sigmoid, "log": log, "exp": exp, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch a pointwise op by tag; ``scale`` takes a float as ``y``."""
    if op in _UNARY:
        if y is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](as_tensor(x))
    if op in _BINARY:
        if y is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](x, y)
    if op == "scale":
        return scale(as_tensor(x), y)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k]@[k,n] or batched [B,m,k]@[B,k,n]."""
    sa, sb = a.shape, b.shape
    ok = (
        len(sa) == len(sb)
        and len(sa) in (2, 3)
        and sa[-1] == sb[-2]
        and (len(sa) == 2 or sa[0] == sb[0])
    )
    if not ok:
        raise ValueError(f"matmul shape mismatch: {sa} x {sb}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ValueError(f"transpose needs rank >= 2, got {x.shape}")
    return _result(
        np.ascontiguousarray(np.swapaxes(x.data, -1, -2)),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) > MAX_RANK:
        raise ValueError(f"rank {len(shape)} exceeds maximum rank {MAX_RANK}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[n, C] -> [H, n, C/H]."""
    n, c = x.shape
    if c % heads:
        raise ValueError(f"{heads} heads do not divide width {c}")
    d = c // heads
    out = np.ascontiguousarray(x.data.reshape(n, heads, d).transpose(1, 0, 2))
    return _result(out, (x,), lambda g: (g.transpose(1, 0, 2).reshape(n, c),))


def merge_heads(x: Tensor) -> Tensor:
    """[H, n, d] -> [n, H*d]."""
    h, n, d = x.shape
    out = np.ascontiguousarray(x.data.transpose(1, 0, 2).reshape(n, h * d))
    return _result(out, (x,), lambda g: (g.reshape(n, h, d).transpose(1, 0, 2),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias {b.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x [m,k], w [k,n], b [n] as one recorded op."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear shape mismatch: {x.shape} x {w.shape} + {b.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        return (g @ wd.T if x.requires_grad else None), xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + b.data, (x, w, b), bw)


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis.

    Entries may be ``-inf`` (masked keys) but no row may be entirely ``-inf``;
    NaN and ``+inf`` are rejected.
    """
    d = x.data
    if np.isnan(d).any() or np.isposinf(d).any():
        raise ValueError("softmax_rows: input contains NaN or +inf")
    m = d.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax_rows: a row is entirely -inf; such rows must be bypassed")
    e = np.exp(d - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    d = x.data
    if not np.isfinite(d).all():
        raise NonFiniteError("log_softmax_rows: non-finite input")
    z = d - d.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least two features")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm affine params must have shape ({n},)")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gx = gamma.data * g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# row plumbing


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a rank-2 tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), bw)


def scatter_rows(base: Tensor, idx, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` replaced by ``values`` (idx unique)."""
    idx = np.asarray(idx, dtype=np.intp)
    if values.shape != (len(idx),) + base.shape[1:]:
        raise ValueError(f"scatter_rows: values {values.shape} do not fit {len(idx)} rows of {base.shape}")
    out = base.data.copy()
    out[idx] = values.data

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _result(out, (base, values), bw)


def select_rows(cur: Tensor, prev: Tensor, bits, soft: Tensor | None = None) -> Tensor:
    """Row i is ``cur[i]`` where ``bits[i]`` else ``prev[i]``, copied exactly.

    With ``soft`` given, the gradient w.r.t. the gate is the straight-through
    one: d/d(soft_i) = sum_c g_ic (cur_ic - prev_ic).
    """
    if cur.shape != prev.shape or cur.data.ndim != 2:
        raise ValueError(f"select_rows: shapes {cur.shape} and {prev.shape}")
    on = np.asarray(bits, dtype=bool)
    if on.shape != (cur.shape[0],):
        raise ValueError(f"select_rows: {on.shape[0] if on.ndim else 0} bits for {cur.shape[0]} rows")
    col = on[:, None]
    out = np.where(col, cur.data, prev.data)
    parents = (cur, prev) if soft is None else (cur, prev, soft)
    diff = cur.data - prev.data

    def bw(g):
        grads = [np.where(col, g, 0.0), np.where(col, 0.0, g)]
        if soft is not None:
            grads.append((g * diff).sum(axis=1))
        return grads

    return _result(out, parents, bw)


def blend_rows(cur: Tensor, prev: Tensor, soft: Tensor) -> Tensor:
    """Row i is ``soft_i * cur[i] + (1 - soft_i) * prev[i]``."""
    if cur.shape != prev.shape or soft.shape != (cur.shape[0],):
        raise ValueError(f"blend_rows: shapes {cur.shape}, {prev.shape}, {soft.shape}")
    s = soft.data[:, None]
    diff = cur.data - prev.data
    out = prev.data + s * diff

    def bw(g):
        return g * s, g * (1.0 - s), (g * diff).sum(axis=1)

    return _result(out, (cur, prev, soft), bw)


def pick(x: Tensor, cols) -> Tensor:
    """``out[i] = x[i, cols[i]]`` for a rank-2 ``x``."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _result(x.data[rows, cols], (x,), bw)


# ---------------------------------------------------------------------------
# finite differences


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over checked entries of |analytic - central| / max(1, |central|).

    ``fn`` must return a scalar and be deterministic for fixed inputs; an
    ``fn`` that draws fresh noise is rejected.  ``max_entries`` limits the
    number of entries probed per input (sampled with ``rng``).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(out)
    base = out.item()
    again = fn(*inputs).item()
    if again != base:
        raise ValueError("function is not deterministic (unfrozen noise?)")

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        an = analytic.reshape(-1)
        for p in positions:
            orig = flat[p]
            flat[p] = orig + eps
            hi = fn(*inputs).item()
            flat[p] = orig - eps
            lo = fn(*inputs).item()
            flat[p] = orig
            num = (hi - lo) / (2.0 * eps)
            worst = max(worst, abs(an[p] - num) / max(1.0, abs(num)))
    return worst
