"""Small reverse-mode differentiation engine over numpy arrays.

Only the operations the ACVAE networks need are provided. Operations
record themselves on the active :class:`Tape` when at least one input
requires a gradient; outside a ``with Tape():`` block they are plain
forward evaluations, which is what evaluation code uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

_local = threading.local()


class Tensor:
    """Dense array that can take part in gradient recording."""

    __slots__ = ("value", "grad", "requires_grad", "name", "node_id")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list = []

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append((out, tuple(parents), backward_fn))

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
        """Populate ``.grad`` on every leaf reached from ``loss``.

        Leaves listed in ``params`` but unreachable get a zero gradient.
        """
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: Dict[int, Tensor] = {}
        if loss.node_id is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.node_id is None:
                    leaves[key] = p
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        if params is not None:
            for p in params:
                if id(p) not in leaves:
                    p.grad = np.zeros_like(p.value)
        return grads


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    tape = current_tape()
    if tape is None:
        raise RuntimeError("backward called outside a Tape context")
    tape.backward(loss, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(a, b):
    a, b = as_tensor(a), as_tensor(b)
    # python scalars follow the dtype of the tensor they meet
    if a.value.ndim == 0 and not a.requires_grad:
        a = Tensor(a.value.astype(b.dtype))
    if b.value.ndim == 0 and not b.requires_grad:
        b = Tensor(b.value.astype(a.dtype))
    return a, b


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    return mul(sum(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, m]``; leading axes of ``a`` are treated as rows."""
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    lead = av.shape[:-1]
    a2 = av.reshape(-1, av.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, bv.shape[1])
        ga = (g2 @ bv.T).reshape(av.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make((a2 @ bv).reshape(*lead, bv.shape[1]), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- nonlinearities ---------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); no overflow for large |x|
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


_sigmoid = expit


def softplus(x: Tensor) -> Tensor:
    xv = x.value
    return _make(_softplus(xv), (x,), lambda g: (g * _sigmoid(xv),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log σ(x)``, stable for large |x|."""
    xv = x.value
    return _make(log_expit(xv), (x,), lambda g: (g * expit(-xv),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return _make(t, (x,), lambda g: (g * (1 - t * t),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 <= slope <= 1:
        raise ValueError("leaky_relu slope must lie in [0, 1]")
    xv = x.value
    scale = np.where(xv > 0, xv.dtype.type(1), xv.dtype.type(slope))
    return _make(np.maximum(xv, xv * xv.dtype.type(slope)), (x,), lambda g: (g * scale,))


# -- indexing / shape plumbing ----------------------------------------------

def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.value[idx], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = [t.value for t in tensors]
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(np.concatenate(values, axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def time_step(x: Tensor, t: int) -> Tensor:
    """``x[:, t]`` for a ``[b, T, ...]`` tensor."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, t] = g
        return (out,)

    return _make(x.value[:, t], (x,), bw)


def stack_time(steps: Sequence[Tensor]) -> Tensor:
    """Stack ``[b, d]`` tensors into ``[b, T, d]``."""
    n = len(steps)
    return _make(np.stack([s.value for s in steps], axis=1), tuple(steps),
                 lambda g: tuple(g[:, i] for i in range(n)))


# -- recurrent / convolutional blocks ---------------------------------------

def _gru_step(xw, h, uv, d):
    """Forward GRU step from the precomputed input projection ``xw``."""
    hu = h @ uv[:, :2 * d]
    z = _sigmoid(xw[:, :d] + hu[:, :d])
    r = _sigmoid(xw[:, d:2 * d] + hu[:, d:])
    rh = r * h
    cand = np.tanh(xw[:, 2 * d:] + rh @ uv[:, 2 * d:])
    return (1 - z) * h + z * cand, (h, z, r, rh, cand)


def _gru_step_grad(g, cache, uv, d):
    """Returns (d_xw, d_h_prev, d_u) for one step."""
    h, z, r, rh, cand = cache
    d_cand = g * z
    a_c = d_cand * (1 - cand * cand)
    d_rh = a_c @ uv[:, 2 * d:].T
    a_r = d_rh * h * r * (1 - r)
    a_z = g * (cand - h) * z * (1 - z)
    a_zr = np.concatenate([a_z, a_r], axis=1)
    d_h = g * (1 - z) + d_rh * r + a_zr @ uv[:, :2 * d].T
    gu = np.concatenate([h.T @ a_zr, rh.T @ a_c], axis=1)
    return np.concatenate([a_zr, a_c], axis=1), d_h, gu


def _check_gru_shapes(e, d, w, u, b):
    if w.shape != (e, 3 * d) or u.shape != (d, 3 * d) or b.shape != (3 * d,):
        raise ValueError(f"GRU shape mismatch: input dim {e}, hidden {d}, "
                         f"w{w.shape} u{u.shape} b{b.shape}")


def gru_cell(x_t: Tensor, h_prev: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """One GRU step.

    ``w`` is ``[e, 3d]``, ``u`` is ``[d, 3d]``, ``b`` is ``[3d]`` with the
    gate blocks ordered (update, reset, candidate).
    """
    d = h_prev.shape[-1]
    _check_gru_shapes(x_t.shape[-1], d, w, u, b)
    x, wv, uv = x_t.value, w.value, u.value
    h_new, cache = _gru_step(x @ wv + b.value, h_prev.value, uv, d)

    def bw(g):
        d_xw, d_h, gu = _gru_step_grad(g, cache, uv, d)
        return d_xw @ wv.T, d_h, x.T @ d_xw, gu, d_xw.sum(axis=0)

    return _make(h_new, (x_t, h_prev, w, u, b), bw)


def gru(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Run a GRU over ``x[b, T, e]`` from a zero state; returns all states ``[b, T, d]``.

    Numerically the same as chaining :func:`gru_cell`, but backpropagates
    through time in one node.
    """
    xv, wv, uv = x.value, w.value, u.value
    B, T, e = xv.shape
    d = uv.shape[0]
    _check_gru_shapes(e, d, w, u, b)
    xw = (xv.reshape(-1, e) @ wv + b.value).reshape(B, T, 3 * d)
    h = np.zeros((B, d), dtype=xv.dtype)
    out = np.empty((B, T, d), dtype=xv.dtype)
    caches = []
    for t in range(T):
        h, cache = _gru_step(xw[:, t], h, uv, d)
        out[:, t] = h
        caches.append(cache)

    def bw(g):
        d_xw = np.empty_like(xw)
        gu = np.zeros_like(uv)
        carry = np.zeros((B, d), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            d_xw[:, t], carry, gu_t = _gru_step_grad(g[:, t] + carry, caches[t], uv, d)
            gu += gu_t
        flat = d_xw.reshape(-1, 3 * d)
        gx = (flat @ wv.T).reshape(B, T, e) if x.requires_grad else None
        return gx, xv.reshape(-1, e).T @ flat, gu, flat.sum(axis=0)

    return _make(out, (x, w, u, b), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[idx]`` along the first axis; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    unique = np.unique(idx).size == idx.size

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), bw)


def causal_conv(h: Tensor, filt: Tensor) -> Tensor:
    """Convolve each feature column of ``h[b, T, d]`` along time.

    ``filt`` has ``m`` taps; the last tap weights the current row and
    earlier taps weight earlier rows. ``m - 1`` zero rows are placed before
    the data, so output row t never sees rows after t.
    """
    fv = filt.value.reshape(-1)
    m = fv.shape[0]
    if m < 1:
        raise ValueError("causal_conv needs a filter height m >= 1")
    hv = h.value
    b, T, d = hv.shape
    padded = np.concatenate([np.zeros((b, m - 1, d), dtype=hv.dtype), hv], axis=1)
    out = np.zeros_like(hv)
    for j in range(m):
        out += fv[j] * padded[:, j:j + T]
    fshape = filt.shape

    def bw(g):
        gpad = np.zeros_like(padded)
        gf = np.empty(m, dtype=g.dtype)
        for j in range(m):
            gpad[:, j:j + T] += fv[j] * g
            gf[j] = np.sum(g * padded[:, j:j + T])
        return gpad[:, m - 1:], gf.reshape(fshape)

    return _make(out, (h, filt), bw)


# -- losses -----------------------------------------------------------------

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                          normalizer: Optional[float] = None) -> Tensor:
    """Masked next-item negative log-likelihood.

    The masked sum is divided by the number of masked positions unless an
    explicit ``normalizer`` is given.
    """
    lv = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=lv.dtype)
    V = lv.shape[-1]
    if targets.size and targets.max() >= V:
        raise ValueError(f"target index {targets.max()} out of range for {V} classes")
    count = mask.sum()
    if count == 0:
        raise ValueError("empty batch: mask selects no positions")
    norm = float(count) if normalizer is None else float(normalizer)
    logp = log_softmax_np(lv)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / norm

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
        grad *= (mask / norm)[..., None]
        return (grad * g,)

    return _make(np.asarray(loss, dtype=lv.dtype), (logits,), bw)


def masked_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    return sum(mul(x, Tensor(np.asarray(mask, dtype=x.dtype))))
