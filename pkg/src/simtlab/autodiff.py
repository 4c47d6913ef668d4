"""Reverse-mode automatic differentiation on a recorded tape.

The engine is deliberately small: dense float64 tensors, explicit tapes,
and a fixed set of fused operations sufficient for GRU sequence models
with dot-product attention. Every op takes the tape as its first argument;
passing ``tape=None`` runs the same numerics without recording, which is
how frozen models are evaluated during reinforcement learning.

There is no implicit gradient zeroing: callers own the accumulate/zero
cycle (see ``zero_grads``).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; backward replays it in reverse.

    A tape is single-threaded. Parallel workers each own their own tape.
    """

    def __init__(self):
        self._records = []

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros(())
    loss.grad = loss.grad + 1.0
    if tape is None:
        return
    for fn in reversed(tape._records):
        fn()


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _track(tape, *tensors) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def _out(tape, data, tracked: bool) -> Tensor:
    t = Tensor(data)
    t.requires_grad = tracked
    return t


def zero_grads(tensors) -> None:
    """Drop accumulated gradients; the next backward starts from zero."""
    for t in tensors:
        t.grad = None


def validate_finite(named_tensors) -> None:
    """Raise NumericError on the first NaN/Inf in data or grad."""
    for name, t in named_tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in data of '{name}'")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite values in grad of '{name}'")


def uniform_tensor(shape, rng, scale: float = 0.08, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=requires_grad)


def _sigmoid(x):
    # sigmoid saturates to 0/1 in float64 beyond |x| ~ 37, so clipping is exact
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def softmax(x):
    """Plain numpy softmax over the last axis (no tape involvement)."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    tracked = _track(tape, a, b)
    out = _out(tape, a.data + b.data, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, out.grad)
        tape.record(bwd)
    return out


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}")
    tracked = _track(tape, a, b)
    out = _out(tape, a.data - b.data, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, -out.grad)
        tape.record(bwd)
    return out


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    tracked = _track(tape, a, b)
    out = _out(tape, a.data * b.data, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)
        tape.record(bwd)
    return out


def scale(tape, a: Tensor, c: float) -> Tensor:
    tracked = _track(tape, a)
    out = _out(tape, a.data * c, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * c)
        tape.record(bwd)
    return out


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2D x 2D, 1D x 2D, and 2D x 1D operands."""
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    elif ad.ndim == 2 and bd.ndim in (1, 2):
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} @ {bd.ndim}")
    tracked = _track(tape, a, b)
    out = _out(tape, ad @ bd, tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            if ad.ndim == 1:          # (k,) @ (k,n) -> (n,)
                _accum(a, bd @ g)
                _accum(b, np.outer(ad, g))
            elif bd.ndim == 1:        # (m,k) @ (k,) -> (m,)
                _accum(a, np.outer(g, bd))
                _accum(b, ad.T @ g)
            else:                     # (m,k) @ (k,n) -> (m,n)
                _accum(a, g @ bd.T)
                _accum(b, ad.T @ g)
        tape.record(bwd)
    return out


def add_bias(tape, m: Tensor, bias: Tensor) -> Tensor:
    """Add a vector bias to a vector, or row-wise to a matrix."""
    if m.data.ndim == 1:
        return add(tape, m, bias)
    if m.data.ndim != 2 or bias.data.shape != (m.data.shape[1],):
        raise ShapeError(f"add_bias: {m.data.shape} + {bias.data.shape}")
    tracked = _track(tape, m, bias)
    out = _out(tape, m.data + bias.data, tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(m, g)
            _accum(bias, g.sum(axis=0))
        tape.record(bwd)
    return out


def sigmoid(tape, a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    tracked = _track(tape, a)
    out = _out(tape, s, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * s * (1.0 - s))
        tape.record(bwd)
    return out


def tanh(tape, a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    tracked = _track(tape, a)
    out = _out(tape, t, tracked)
    if tracked:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * (1.0 - t * t))
        tape.record(bwd)
    return out


def concat(tape, parts, axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis; backward splits the gradient."""
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    tracked = _track(tape, *parts)
    out = _out(tape, out_data, tracked)
    if tracked:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def bwd():
            g = out.grad
            if g is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, np.take(g, range(lo, hi), axis=axis))
        tape.record(bwd)
    return out


def stack_rows(tape, mats) -> Tensor:
    """Stack S matrices of shape (B, h) into a (B, S, h) tensor."""
    out_data = np.stack([m.data for m in mats], axis=1)
    tracked = _track(tape, *mats)
    out = _out(tape, out_data, tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            for s, m in enumerate(mats):
                _accum(m, g[:, s, :])
        tape.record(bwd)
    return out


def embedding(tape, table: Tensor, ids) -> Tensor:
    """Gather embedding rows; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.data.shape[0]})")
    tracked = _track(tape, table)
    out = _out(tape, table.data[idx], tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)
        tape.record(bwd)
    return out


def linear_rows3(tape, feats, w: Tensor) -> Tensor:
    """Project a constant (B, R, D) feature block by a (D, K) matrix."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != w.data.shape[0]:
        raise ShapeError(f"linear_rows3: {f.shape} x {w.data.shape}")
    tracked = _track(tape, w)
    out = _out(tape, np.einsum("brd,dk->brk", f, w.data), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(w, np.einsum("brd,brk->dk", f, g))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# GRU cell (fused)
# ---------------------------------------------------------------------------

class GRUParams:
    """Gate weights and biases for one GRU cell.

    Update rule: h' = (1 - z) * h + z * tanh(x Wxn + (r * h) Whn + bn)
    with reset gate r and update gate z, so z near 0 keeps the old state.
    """

    FIELDS = ("w_xr", "w_hr", "b_r", "w_xz", "w_hz", "b_z", "w_xn", "w_hn", "b_n")

    def __init__(self, w_xr, w_hr, b_r, w_xz, w_hz, b_z, w_xn, w_hn, b_n):
        self.w_xr, self.w_hr, self.b_r = w_xr, w_hr, b_r
        self.w_xz, self.w_hz, self.b_z = w_xz, w_hz, b_z
        self.w_xn, self.w_hn, self.b_n = w_xn, w_hn, b_n

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng, scale: float = 0.08) -> "GRUParams":
        def w(shape):
            return uniform_tensor(shape, rng, scale)
        return cls(
            w((input_dim, hidden_dim)), w((hidden_dim, hidden_dim)), w((hidden_dim,)),
            w((input_dim, hidden_dim)), w((hidden_dim, hidden_dim)), w((hidden_dim,)),
            w((input_dim, hidden_dim)), w((hidden_dim, hidden_dim)), w((hidden_dim,)),
        )

    @property
    def input_dim(self) -> int:
        return self.w_xr.data.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_xr.data.shape[1]

    def named_tensors(self, prefix: str = ""):
        return [(prefix + name, getattr(self, name)) for name in self.FIELDS]

    def tensors(self):
        return [getattr(self, name) for name in self.FIELDS]


def gru_cell(tape, x: Tensor, h_prev: Tensor, params: GRUParams) -> Tensor:
    """One GRU step for a single vector or a (B, dim) batch."""
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    hd = h_prev.data[None, :] if h_prev.data.ndim == 1 else h_prev.data
    if xd.ndim != 2 or hd.ndim != 2 or xd.shape[0] != hd.shape[0]:
        raise ShapeError(f"gru_cell: x {x.data.shape} vs h {h_prev.data.shape}")
    if xd.shape[1] != params.input_dim or hd.shape[1] != params.hidden_dim:
        raise ShapeError(
            f"gru_cell: expected input {params.input_dim} / hidden {params.hidden_dim}, "
            f"got {xd.shape[1]} / {hd.shape[1]}")

    p = params
    r = _sigmoid(xd @ p.w_xr.data + hd @ p.w_hr.data + p.b_r.data)
    z = _sigmoid(xd @ p.w_xz.data + hd @ p.w_hz.data + p.b_z.data)
    rh = r * hd
    n = np.tanh(xd @ p.w_xn.data + rh @ p.w_hn.data + p.b_n.data)
    new = (1.0 - z) * hd + z * n

    tracked = _track(tape, x, h_prev, *p.tensors())
    out = _out(tape, new[0] if squeeze else new, tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            go = g[None, :] if squeeze else g
            dz = go * (n - hd)
            dn = go * z
            dh = go * (1.0 - z)

            dan = dn * (1.0 - n * n)
            _accum(p.w_xn, xd.T @ dan)
            _accum(p.w_hn, rh.T @ dan)
            _accum(p.b_n, dan.sum(axis=0))
            dx = dan @ p.w_xn.data.T
            drh = dan @ p.w_hn.data.T
            dr = drh * hd
            dh += drh * r

            daz = dz * z * (1.0 - z)
            _accum(p.w_xz, xd.T @ daz)
            _accum(p.w_hz, hd.T @ daz)
            _accum(p.b_z, daz.sum(axis=0))
            dx += daz @ p.w_xz.data.T
            dh += daz @ p.w_hz.data.T

            dar = dr * r * (1.0 - r)
            _accum(p.w_xr, xd.T @ dar)
            _accum(p.w_hr, hd.T @ dar)
            _accum(p.b_r, dar.sum(axis=0))
            dx += dar @ p.w_xr.data.T
            dh += dar @ p.w_hr.data.T

            _accum(x, dx[0] if squeeze else dx)
            _accum(h_prev, dh[0] if h_prev.data.ndim == 1 else dh)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def keyed_attention(tape, keys: Tensor, values: Tensor, query: Tensor):
    """Dot-product attention: softmax(keys . query) mixing value rows.

    Returns (context, weights). keys and values may be the same tensor.
    """
    kd, vd, qd = keys.data, values.data, query.data
    if kd.ndim != 2 or kd.shape[0] == 0:
        raise ContractError("attention requires at least one key row")
    if kd.shape[0] != vd.shape[0]:
        raise ShapeError(f"attention: {kd.shape[0]} keys vs {vd.shape[0]} values")
    if qd.shape != (kd.shape[1],):
        raise ShapeError(f"attention: query {qd.shape} vs key dim {kd.shape[1]}")
    w = softmax(kd @ qd)
    ctx_data = vd.T @ w
    tracked = _track(tape, keys, values, query)
    ctx = _out(tape, ctx_data, tracked)
    weights = _out(tape, w, tracked)
    if tracked:
        def bwd():
            gc = ctx.grad
            gw = weights.grad
            if gc is None and gw is None:
                return
            dw = np.zeros_like(w)
            if gc is not None:
                dw += vd @ gc
                _accum(values, np.outer(w, gc))
            if gw is not None:
                dw += gw
            ds = w * (dw - float(w @ dw))
            _accum(query, kd.T @ ds)
            _accum(keys, np.outer(ds, qd))
        tape.record(bwd)
    return ctx, weights


def dot_attention(tape, keys_values: Tensor, query: Tensor):
    """Attention where one matrix serves as both keys and values."""
    return keyed_attention(tape, keys_values, keys_values, query)


def batched_attention(tape, keys: Tensor, values: Tensor, query: Tensor, mask=None):
    """Row-masked attention over (B, S, dk) keys and (B, S, dv) values.

    query is (B, dk); mask is a (B, S) boolean array marking valid rows.
    Returns (context (B, dv), weights (B, S)).
    """
    kd, vd, qd = keys.data, values.data, query.data
    if kd.ndim != 3 or vd.ndim != 3 or qd.ndim != 2:
        raise ShapeError("batched_attention expects (B,S,dk), (B,S,dv), (B,dk)")
    scores = np.einsum("bsk,bk->bs", kd, qd)
    if mask is not None:
        if not mask.any(axis=1).all():
            raise ContractError("batched_attention: a batch row has no valid keys")
        scores = np.where(mask, scores, -np.inf)
    w = softmax(scores)
    ctx_data = np.einsum("bs,bsv->bv", w, vd)
    tracked = _track(tape, keys, values, query)
    ctx = _out(tape, ctx_data, tracked)
    weights = _out(tape, w, tracked)
    if tracked:
        def bwd():
            gc = ctx.grad
            gw = weights.grad
            if gc is None and gw is None:
                return
            dw = np.zeros_like(w)
            if gc is not None:
                dw += np.einsum("bsv,bv->bs", vd, gc)
                _accum(values, np.einsum("bs,bv->bsv", w, gc))
            if gw is not None:
                dw += gw
            ds = w * (dw - np.einsum("bs,bs->b", w, dw)[:, None])
            _accum(query, np.einsum("bs,bsk->bk", ds, kd))
            _accum(keys, np.einsum("bs,bk->bsk", ds, qd))
        tape.record(bwd)
    return ctx, weights


# ---------------------------------------------------------------------------
# Losses and policy-head pieces
# ---------------------------------------------------------------------------

def softmax_cross_entropy(tape, logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of the target index."""
    k = logits.data.shape[0]
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1D, got {logits.data.shape}")
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range [0, {k})")
    shifted = logits.data - logits.data.max()
    logz = np.log(np.exp(shifted).sum())
    loss = logz - shifted[target]
    p = np.exp(shifted - logz)
    tracked = _track(tape, logits)
    out = _out(tape, np.float64(loss), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            d = p.copy()
            d[target] -= 1.0
            _accum(logits, g * d)
        tape.record(bwd)
    return out


def softmax_cross_entropy_rows(tape, logits: Tensor, targets, mask, denom=None) -> Tensor:
    """Masked cross-entropy over (B, K) rows, divided by ``denom``.

    With the default denom the result is the mean over unmasked rows;
    passing a fixed denom lets callers sum per-step losses into a
    per-token mean across a whole batch.
    """
    ld = logits.data
    idx = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    if ld.ndim != 2 or idx.shape != (ld.shape[0],) or m.shape != (ld.shape[0],):
        raise ShapeError("softmax_cross_entropy_rows: inconsistent shapes")
    if idx.size and (idx.min() < 0 or idx.max() >= ld.shape[1]):
        raise IndexError("softmax_cross_entropy_rows: target out of range")
    count = m.sum() if denom is None else float(denom)
    if count == 0:
        raise ContractError("softmax_cross_entropy_rows: empty mask")
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(ld.shape[0])
    losses = logz - shifted[rows, idx]
    p = np.exp(shifted - logz[:, None])
    tracked = _track(tape, logits)
    out = _out(tape, np.float64((losses * m).sum() / count), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            d = p * m[:, None]
            d[rows, idx] -= m
            _accum(logits, (g / count) * d)
        tape.record(bwd)
    return out


def log_softmax_rows(tape, x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    tracked = _track(tape, x)
    out = _out(tape, ls, tracked)
    if tracked:
        p = np.exp(ls)

        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(x, g - p * g.sum(axis=1, keepdims=True))
        tape.record(bwd)
    return out


def pick_rows(tape, x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    tracked = _track(tape, x)
    out = _out(tape, x.data[rows, idx], tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            d = np.zeros_like(x.data)
            d[rows, idx] = g
            _accum(x, d)
        tape.record(bwd)
    return out


def rows_entropy(tape, log_probs: Tensor) -> Tensor:
    """Shannon entropy per row of a log-probability matrix."""
    ls = log_probs.data
    p = np.exp(ls)
    tracked = _track(tape, log_probs)
    out = _out(tape, -(p * ls).sum(axis=1), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(log_probs, -g[:, None] * p * (ls + 1.0))
        tape.record(bwd)
    return out


def weighted_sum(tape, v: Tensor, weights) -> Tensor:
    """Dot product of a vector with constant weights, as a scalar tensor."""
    w = np.asarray(weights, dtype=np.float64)
    if v.data.shape != w.shape:
        raise ShapeError(f"weighted_sum: {v.data.shape} vs {w.shape}")
    tracked = _track(tape, v)
    out = _out(tape, np.float64(v.data @ w), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(v, g * w)
        tape.record(bwd)
    return out


def sum_scalars(tape, scalars) -> Tensor:
    tracked = _track(tape, *scalars)
    out = _out(tape, np.float64(sum(float(s.data) for s in scalars)), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            for s in scalars:
                _accum(s, g)
        tape.record(bwd)
    return out


def masked_sq_error(tape, v: Tensor, targets, mask, denom: float) -> Tensor:
    """Sum of masked squared errors divided by a fixed denominator."""
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    diff = (v.data - t) * m
    tracked = _track(tape, v)
    out = _out(tape, np.float64((diff * diff).sum() / denom), tracked)
    if tracked:
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(v, g * 2.0 * diff / denom)
        tape.record(bwd)
    return out
