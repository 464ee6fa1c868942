"""Dense numeric substrate: numpy-backed tensors with a reverse-mode tape.

Every op works eagerly on numpy arrays. When a :class:`Tape` is active, each op
that touches a tensor with ``requires_grad`` appends a record holding a backward
closure; :meth:`Tape.backward` replays the records in reverse order.

Precision is a process-wide switch (``set_precision("f32" | "f64")``). Training
and evaluation run in f32; gradient checks flip to f64 for the whole run.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype: type = np.float32


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}")
    _dtype = _DTYPES[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = {v: k for k, v in _DTYPES.items()}[_dtype]
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


# --------------------------------------------------------------------------
# tensors and tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == _dtype else asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.data.shape}")
        return float(self.data.reshape(-1)[0])


@dataclass
class GradientRecord:
    """One recorded op: its inputs, its output, and the adjoint propagation rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[GradientRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes are single-writer")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.shape)
                if t.grad is None:
                    t.grad = gi if gi.dtype == _dtype else gi.astype(_dtype)
                else:
                    t.grad = t.grad + gi


_active_tape: Tape | None = None


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    needs = _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _active_tape.records.append(GradientRecord(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def slice_flat(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    if x.data.ndim != 1 or not 0 <= start <= stop <= x.data.shape[0]:
        raise ContractError(f"bad slice [{start}:{stop}] of shape {x.data.shape}")

    def back(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _record("slice_flat", (x,), x.data[start:stop], back)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; the embedding lookup."""
    ids = np.asarray(ids)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record("take_rows", (table,), table.data[ids], back)


def gelu(a: Tensor) -> Tensor:
    y, t = _gelu(a.data)
    return _record("gelu", (a,), y, lambda g: (g * _gelu_grad(a.data, t),))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximated GELU; also returns the tanh term for :func:`_gelu_grad`."""
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * (x * x))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    d = xd.shape[-1]

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, g * xhat

    return _record("rms_norm", (x, gain), xhat * gain.data, back)


# --------------------------------------------------------------------------
# matmul, softmax, top-k, losses


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, back)


def softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    if v.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, axis: int = -1) -> Tensor:
    v = _tensor(v)
    p = softmax_np(v.data, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (v,), p, back)


def top_k(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lower index; each result row is sorted ascending.
    """
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"top_k needs 1 <= k <= n, got k={k}, n={n}")
    order = np.argsort(-v, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the masked-in rows of ``logits`` [t, V]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    count = int(m.sum())
    if count == 0:
        return _record("cross_entropy", (logits,), np.zeros((), _dtype), lambda g: (np.zeros_like(logits.data),))
    sel = np.nonzero(m)[0]
    if targets[sel].min() < 0 or targets[sel].max() >= z.shape[1]:
        raise ContractError("target id out of range")
    zs = z[sel]
    zmax = zs.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(zs - zmax).sum(axis=1))
    nll = lse - zs[np.arange(len(sel)), targets[sel]]
    loss = np.asarray(nll.sum() / count, dtype=_dtype)

    def back(g):
        grad = np.zeros_like(z)
        p = softmax_np(zs)
        p[np.arange(len(sel)), targets[sel]] -= 1.0
        grad[sel] = p * (g / count)
        return (grad.reshape(logits.shape),)

    return _record("cross_entropy", (logits,), loss, back)


# --------------------------------------------------------------------------
# fused sparse mixture-of-experts dispatch


class RoutingWatch:
    """Collects every top-K selection made while active (used to spot routing ties)."""

    def __init__(self):
        self.selections: list[np.ndarray] = []

    def __enter__(self) -> "RoutingWatch":
        _watchers.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _watchers.remove(self)


_watchers: list[RoutingWatch] = []


@dataclass
class Dispatch:
    """Per-token routing produced by :func:`moe_dispatch`."""

    indices: np.ndarray  # [N, K] selected experts, ascending
    weights: np.ndarray  # [N, K] softmax over the selected logits
    norms: np.ndarray  # [N, K] L2 norm of each selected expert's output


def moe_dispatch(
    h: Tensor,
    logits: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
    k: int,
) -> tuple[Tensor, Dispatch]:
    """Route each row of ``h`` [N, d] to its top-``k`` experts and mix their outputs.

    The mixing weights are a softmax over the ``k`` selected router logits only.
    Selection is treated as piecewise constant: gradients reach the router through
    the selected logits and reach only the experts that were selected.
    """
    x = h.data
    z = logits.data
    n_tokens, n_exp = z.shape
    idx = top_k(z, k)
    for w in _watchers:
        w.selections.append(idx.copy())
    sel = np.take_along_axis(z, idx, axis=1)
    wts = softmax_np(sel, axis=1)

    # sort the N*K (token, slot) assignments by expert; each expert owns a contiguous slice
    flat_e = idx.reshape(-1)
    order = np.argsort(flat_e, kind="stable")
    counts = np.bincount(flat_e, minlength=n_exp)
    ends = np.cumsum(counts)
    segs = [(e, int(ends[e] - counts[e]), int(ends[e])) for e in range(n_exp) if counts[e]]
    xs = x[order // k]
    a = np.empty((order.size, w_up.shape[2]), dtype=x.dtype)
    for e, s0, s1 in segs:
        np.matmul(xs[s0:s1], w_up.data[e], out=a[s0:s1])
        a[s0:s1] += b_up.data[e]
    g, tanh_a = _gelu(a)
    ys = np.empty((order.size, x.shape[1]), dtype=x.dtype)
    for e, s0, s1 in segs:
        np.matmul(g[s0:s1], w_down.data[e], out=ys[s0:s1])
        ys[s0:s1] += b_down.data[e]
    y = np.empty_like(ys)
    y[order] = ys
    y = y.reshape(n_tokens, k, -1)
    out = (wts[:, :, None] * y).sum(axis=1)
    norms = np.sqrt((y * y).sum(axis=2))

    def back(gout):
        dw = (gout[:, None, :] * y).sum(axis=2)
        dys = (wts[:, :, None] * gout[:, None, :]).reshape(n_tokens * k, -1)[order]
        d_up = np.zeros_like(w_up.data)
        d_bup = np.zeros_like(b_up.data)
        d_down = np.zeros_like(w_down.data)
        d_bdown = np.zeros_like(b_down.data)
        dg_in = np.empty_like(g)
        for e, s0, s1 in segs:
            d_down[e] = g[s0:s1].T @ dys[s0:s1]
            d_bdown[e] = dys[s0:s1].sum(axis=0)
            np.matmul(dys[s0:s1], w_down.data[e].T, out=dg_in[s0:s1])
        da = dg_in * _gelu_grad(a, tanh_a)
        dxs = np.empty_like(xs)
        for e, s0, s1 in segs:
            d_up[e] = xs[s0:s1].T @ da[s0:s1]
            d_bup[e] = da[s0:s1].sum(axis=0)
            np.matmul(da[s0:s1], w_up.data[e].T, out=dxs[s0:s1])
        dxa = np.empty_like(dxs)
        dxa[order] = dxs
        dx = dxa.reshape(n_tokens, k, -1).sum(axis=1)
        dsel = wts * (dw - (wts * dw).sum(axis=1, keepdims=True))
        dz = np.zeros_like(z)
        np.put_along_axis(dz, idx, dsel, axis=1)
        return dx, dz, d_up, d_bup, d_down, d_bdown

    t = _record("moe_dispatch", (h, logits, w_up, b_up, w_down, b_down), out, back)
    return t, Dispatch(idx, wts, norms)


def load_balance(logits: Tensor, indices: np.ndarray, token_mask: np.ndarray | None = None) -> Tensor:
    """Switch-style balancing loss ``E * sum_e f_e * P_e`` over masked-in tokens.

    ``f_e`` is the fraction of tokens whose top-K contains ``e`` divided by K
    (held constant); ``P_e`` is the mean full-softmax router probability.
    """
    z = logits.data
    n, n_exp = z.shape
    k = indices.shape[1]
    m = np.ones(n, bool) if token_mask is None else np.asarray(token_mask, bool).reshape(-1)
    cnt = max(int(m.sum()), 1)
    probs = softmax_np(z, axis=1)
    f = np.bincount(indices[m].reshape(-1), minlength=n_exp).astype(_dtype) / (cnt * k)
    p_mean = probs[m].sum(axis=0) / cnt
    val = np.asarray(n_exp * float((f * p_mean).sum()), dtype=_dtype)

    def back(g):
        # d/dz of E * sum_e f_e * mean_i p_ie
        gp = np.zeros_like(z)
        gp[m] = (g * n_exp / cnt) * f
        return (probs * (gp - (gp * probs).sum(axis=1, keepdims=True)),)

    return _record("load_balance", (logits,), val, back)


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn`` at ``point`` with central differences.

    Coordinates whose +/- perturbation changes any top-K routing decision are
    skipped and counted rather than compared.
    """
    x0 = asarray(point).copy()
    xt = Tensor(x0.copy(), requires_grad=True)
    with RoutingWatch() as base, Tape() as tape:
        loss = fn(xt)
    tape.backward(loss)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    flat = x0.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    worst, checked, skipped = 0.0, 0, 0
    for i in coords:
        vals = []
        tied = False
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            with RoutingWatch() as w:
                vals.append(fn(Tensor(xp.reshape(x0.shape))).item())
            if not _same_routing(base.selections, w.selections):
                tied = True
        if tied:
            skipped += 1
            continue
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float(analytic.reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def _same_routing(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
