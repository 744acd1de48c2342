"""Dense 2-D float64 kernels with a tape-based reverse mode.

Every differentiable op takes and returns :class:`Tensor2`.  An op records
itself on a :class:`GradTape` only when at least one input was produced under
that tape (a watched leaf or a recorded result); everything else is treated as
a constant and never receives a gradient.  This is how the frozen model
weights stay out of the backward pass while the prompt matrix is optimized.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UsageError, VocabIndexError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor2:
    """A ``rows x cols`` float64 matrix, optionally attached to a tape."""

    __slots__ = ("data", "tape", "requires_grad")

    def __init__(self, data, tape: GradTape | None = None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor2 needs at most 2 dims, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor2({self.rows}x{self.cols}{flag})"


def as_tensor(x) -> Tensor2:
    return x if isinstance(x, Tensor2) else Tensor2(x)


class GradTape:
    """Records ops in execution order; replays them backwards.

    Only leaves registered with :meth:`watch` are reported by
    :meth:`backward`.  A tape is single-use per forward pass and not
    thread-safe.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor2, tuple[Tensor2, ...], Callable]] = []
        self._leaves: list[Tensor2] = []

    def watch(self, x) -> Tensor2:
        """Register ``x`` as a gradient-accumulating leaf.

        The returned tensor shares memory with ``x`` when ``x`` is already a
        float64 ndarray (or Tensor2), so in-place optimizer updates are seen by
        the next pass.
        """
        data = x.data if isinstance(x, Tensor2) else np.asarray(x, dtype=DTYPE)
        leaf = Tensor2(data, tape=self, requires_grad=True)
        self._leaves.append(leaf)
        return leaf

    @property
    def leaves(self) -> list[Tensor2]:
        return list(self._leaves)

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor2, parents: tuple[Tensor2, ...], vjp: Callable) -> None:
        self._ops.append((out, parents, vjp))

    def backward(self, loss: Tensor2) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` for every watched leaf, in watch order.

        Leaves that the loss does not depend on get a zero array.
        """
        if not isinstance(loss, Tensor2) or loss.tape is not self or not loss.requires_grad:
            raise UsageError("loss was not produced under this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=DTYPE)}
        for out, parents, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in parents)
            for p, gp in zip(parents, vjp(g, needs)):
                if gp is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        result = []
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            result.append(np.zeros_like(leaf.data) if g is None else g)
        return result


def _result(data: np.ndarray, parents: tuple[Tensor2, ...], vjp: Callable) -> Tensor2:
    tape = None
    for p in parents:
        if p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise UsageError("inputs are recorded on different tapes")
    if tape is None:
        return Tensor2(data)
    out = Tensor2(data, tape=tape, requires_grad=True)
    tape._record(out, parents, vjp)
    return out


# ----------------------------------------------------------------------------
# kernels
# ----------------------------------------------------------------------------


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _result(ad @ bd, (a, b), vjp)


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def vjp(g, needs):
            return (g if needs[0] else None, g if needs[1] else None)
    elif b.rows == 1 and b.cols == a.cols:
        def vjp(g, needs):
            return (g if needs[0] else None, g.sum(axis=0, keepdims=True) if needs[1] else None)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), vjp)


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _result(ad * bd, (a, b), vjp)


def scale(a: Tensor2, c: float) -> Tensor2:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g, needs: (g * c,))


def sum_all(a: Tensor2) -> Tensor2:
    a = as_tensor(a)
    shape = a.shape
    return _result(
        np.array([[a.data.sum()]], dtype=DTYPE),
        (a,),
        lambda g, needs: (np.full(shape, g[0, 0], dtype=DTYPE),),
    )


def gelu(x: Tensor2) -> Tensor2:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g, needs):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _result(out, (x,), vjp)


def softmax_rows(x: Tensor2) -> Tensor2:
    x = as_tensor(x)
    y = _softmax(x.data)

    def vjp(g, needs):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), vjp)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def layer_norm(x: Tensor2, gain: Tensor2, bias: Tensor2, eps: float = LAYER_NORM_EPS) -> Tensor2:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    for name, t in (("gain", gain), ("bias", bias)):
        if t.shape != (1, x.cols):
            raise ShapeError(f"layer_norm {name} must be (1, {x.cols}), got {t.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        if needs[1]:
            ggain = (g * xhat).sum(axis=0, keepdims=True)
        if needs[2]:
            gbias = g.sum(axis=0, keepdims=True)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), vjp)


def cross_entropy(pred_logits: Tensor2, targets: Sequence[int]) -> Tensor2:
    """Summed ``-log softmax(logits)[target]`` over rows, as a 1x1 tensor."""
    logits = as_tensor(pred_logits)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != logits.rows:
        raise ShapeError(f"cross_entropy: {logits.rows} logit rows for {tgt.shape[0]} targets")
    V = logits.cols
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        bad = int(tgt[(tgt < 0) | (tgt >= V)][0])
        raise VocabIndexError(f"target id {bad} outside vocabulary of size {V}")
    rows = np.arange(tgt.shape[0])
    logp = _log_softmax(logits.data) if logits.rows else logits.data
    loss = -logp[rows, tgt].sum() if tgt.size else 0.0

    def vjp(g, needs):
        d = np.exp(logp)
        d[rows, tgt] -= 1.0
        return (d * g[0, 0],)

    return _result(np.array([[loss]], dtype=DTYPE), (logits,), vjp)


def causal_attention(qkv: Tensor2, heads: int) -> Tensor2:
    """Multi-head causal self-attention over packed ``[q | k | v]`` columns.

    Row ``t`` of the output attends only to rows ``<= t``.
    """
    qkv = as_tensor(qkv)
    n, three_d = qkv.shape
    if three_d % 3 or (three_d // 3) % heads:
        raise ShapeError(f"qkv width {three_d} incompatible with {heads} heads")
    d = three_d // 3
    dh = d // heads
    if n == 0:
        return _result(np.zeros((0, d), dtype=DTYPE), (qkv,), lambda g, needs: (np.zeros((0, three_d)),))
    inv = 1.0 / math.sqrt(dh)
    q = qkv.data[:, :d].reshape(n, heads, dh).transpose(1, 0, 2)
    k = qkv.data[:, d:2 * d].reshape(n, heads, dh).transpose(1, 0, 2)
    v = qkv.data[:, 2 * d:].reshape(n, heads, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * inv
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores[:, mask] = -np.inf
    p = _softmax(scores, axis=-1)
    out = (p @ v).transpose(1, 0, 2).reshape(n, d)

    def vjp(g, needs):
        go = g.reshape(n, heads, dh).transpose(1, 0, 2)
        dv = p.transpose(0, 2, 1) @ go
        dp = go @ v.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        packed = np.concatenate(
            [t.transpose(1, 0, 2).reshape(n, d) for t in (dq, dk, dv)], axis=1
        )
        return (packed,)

    return _result(out, (qkv,), vjp)


def gather_rows(table: Tensor2, ids: Sequence[int]) -> Tensor2:
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = int(idx[(idx < 0) | (idx >= table.rows)][0])
        raise VocabIndexError(f"id {bad} outside table of {table.rows} rows")
    shape = table.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), vjp)


def concat_rows(parts: Sequence[Tensor2]) -> Tensor2:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat_rows needs at least one tensor")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(f"concat_rows column mismatch: {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def vjp(g, needs):
        return tuple(
            g[bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(parts))
        )

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, vjp)


def slice_rows(x: Tensor2, start: int, stop: int) -> Tensor2:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), vjp)


# ----------------------------------------------------------------------------
# gradient oracle and optimizer
# ----------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one entry at a time."""
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    base = np.array(x.data if isinstance(x, Tensor2) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, scale_floor: float = 1e-3
) -> float:
    """``max |a - n| / max(|a|, |n|, floor')`` over all entries.

    ``floor' = max(floor, scale_floor * max|a|, scale_floor * max|n|)``: entries
    that are tiny next to the largest gradient component are judged against
    the gradient's scale, since finite differences carry absolute rounding
    noise that would otherwise dominate their ratio.
    """
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if not a.size:
        return 0.0
    peak = max(float(np.abs(a).max()), float(np.abs(n).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, scale_floor * peak))
    return float((np.abs(a - n) / denom).max())


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
