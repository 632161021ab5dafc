"""Integer transformer kernels over Q16 int64 vectors.

Every reduction here is an exact integer sum, so evaluation order cannot
change a result; the chunked matvec exists to demonstrate exactly that.
"""
from functools import lru_cache

import numpy as np

from .modelio import QuantTensor
from .qarith import (EXP_DOMAIN, FRAC_BITS, INT64_MAX, ONE, RopeTables, _bound, _narrow,
                     exp_neg_lut, inv_sqrt_q16, mul_shift, q16_mul, silu_q16)

ACT_CLAMP = 256 * ONE
RMS_EPS = 1


class CacheOverflowError(IndexError):
    pass


def _as_q16(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.int64:
        x = x.astype(np.int64)
    return x


def _check_dense(w: QuantTensor, x: np.ndarray):
    if x.ndim != 1 or x.shape[0] != w.cols:
        raise ValueError(f"dense: expected input of length {w.cols}, got shape {x.shape}")


def _dense(w: QuantTensor, x: np.ndarray, accumulate) -> np.ndarray:
    xb = _bound(x)
    acc_bound = 127 * xb * w.cols
    if acc_bound <= INT64_MAX:
        acc = accumulate(w.wide, x)
    else:
        acc = _narrow(accumulate(w.wide.astype(object), x.astype(object)))
        acc_bound = _bound(acc)
    # (acc * s) >> 16 with the product widened when int64 could overflow
    return mul_shift(acc, w.scales, FRAC_BITS, acc_bound, w.scale_bound)


def _matmul(data, x):
    return data @ x


def dense_forward(w: QuantTensor, x) -> np.ndarray:
    """``out[i] = (sum_j w[i, j] * x[j]) * s[i] >> 16``."""
    x = _as_q16(x)
    _check_dense(w, x)
    return _dense(w, x, _matmul)


def matvec_chunked(w: QuantTensor, x, chunk_size: int) -> np.ndarray:
    """Same result as :func:`dense_forward`, accumulated as per-chunk partial sums."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    x = _as_q16(x)
    _check_dense(w, x)

    def accumulate(data, xs):
        rows, cols = data.shape
        n_chunks = -(-cols // chunk_size)
        pad = n_chunks * chunk_size - cols
        if pad:
            data = np.concatenate([data, np.zeros((rows, pad), dtype=data.dtype)], axis=1)
            xs = np.concatenate([xs, np.zeros(pad, dtype=xs.dtype)])
        partials = (data.reshape(rows, n_chunks, chunk_size)
                    * xs.reshape(n_chunks, chunk_size)).sum(axis=2)
        acc = partials[:, 0].copy()
        for c in range(1, n_chunks):
            acc += partials[:, c]
        return acc

    return _dense(w, x, accumulate)


def rmsnorm(x, gamma) -> np.ndarray:
    """Integer RMSNorm: x * inv_sqrt(mean(x^2) + eps) * gamma."""
    x = _as_q16(x)
    gamma = _as_q16(gamma)
    n = x.shape[0]
    if n == 0:
        raise ValueError("rmsnorm of an empty vector")
    if gamma.shape != x.shape:
        raise ValueError("rmsnorm: gamma length differs from input length")
    xb = _bound(x)
    if xb * xb * n <= INT64_MAX:
        sumsq = int(x @ x)
    else:
        sumsq = sum(int(v) * int(v) for v in x)
    ms = (sumsq // n) >> FRAC_BITS
    r = inv_sqrt_q16(ms + RMS_EPS)
    return q16_mul(q16_mul(x, r, xb, r), gamma, (xb * r) >> FRAC_BITS)


def rope_apply(x, pos: int, tables: RopeTables) -> np.ndarray:
    """Rotate pairs (k, k + d/2) by the angle of ``pos``.

    ``x`` may be a single head vector or a stack of heads (last axis d_head).
    """
    x = _as_q16(x)
    if not 0 <= pos < tables.max_ctx:
        raise IndexError(f"position {pos} outside the rotary table (max_ctx {tables.max_ctx})")
    half = x.shape[-1] // 2
    if x.shape[-1] != 2 * tables.half_dim:
        raise ValueError("rope_apply: vector length does not match the table width")
    c = tables.cos_tab[pos]
    s = tables.sin_tab[pos]
    a, b = x[..., :half], x[..., half:]
    xb = _bound(x)
    tb = tables.bound
    out = np.empty_like(x)
    out[..., :half] = q16_mul(a, c, xb, tb) - q16_mul(b, s, xb, tb)
    out[..., half:] = q16_mul(a, s, xb, tb) + q16_mul(b, c, xb, tb)
    return out


def softmax_q16(scores) -> np.ndarray:
    """Integer softmax from the exp table, along the last axis.

    Differences to the max are clamped at 8.0 and the normalisation truncates,
    so each row of weights sums to between ONE - n and ONE.
    """
    scores = _as_q16(scores)
    if scores.size == 0:
        raise ValueError("softmax of an empty vector")
    top = scores.max(axis=-1, keepdims=True)
    if 2 * _bound(scores) <= INT64_MAX:
        gap = np.minimum(top - scores, EXP_DOMAIN)
    else:
        gap = np.minimum(top.astype(object) - scores.astype(object), EXP_DOMAIN).astype(np.int64)
    w = exp_neg_lut(gap)
    total = w.sum(axis=-1, keepdims=True)
    return (w << FRAC_BITS) // total


class LayerKv:
    """Write-once key/value store for one layer, all heads, full Q16 precision."""

    def __init__(self, n_heads: int, d_head: int, max_ctx: int):
        self.keys = np.zeros((n_heads, max_ctx, d_head), dtype=np.int64)
        self.values = np.zeros((n_heads, max_ctx, d_head), dtype=np.int64)
        self.length = 0
        self.key_bound = 0
        self.value_bound = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[1]

    def append(self, k: np.ndarray, v: np.ndarray):
        if self.length >= self.capacity:
            raise CacheOverflowError(f"KV cache full at {self.capacity} positions")
        self.keys[:, self.length] = k
        self.values[:, self.length] = v
        self.key_bound = max(self.key_bound, _bound(k))
        self.value_bound = max(self.value_bound, _bound(v))
        self.length += 1


@lru_cache(maxsize=None)
def attention_scale(d_head: int) -> int:
    return inv_sqrt_q16(d_head * ONE)


def head_attention(q, keys, values, scale: int, key_bound=None, value_bound=None) -> np.ndarray:
    """Attention over cached positions 0..T-1 for already-rotated queries.

    Works on one head (q: (d,), keys: (T, d)) or a stack of heads
    (q: (H, d), keys: (H, T, d)); the arithmetic is the same either way.
    """
    q = _as_q16(q)
    if key_bound is None:
        key_bound = _bound(keys)
    if _bound(q) * key_bound * q.shape[-1] <= INT64_MAX:
        dots = np.matmul(keys, q[..., None])[..., 0]
    else:
        dots = _narrow(np.matmul(keys.astype(object), q[..., None].astype(object))[..., 0])
    scores = q16_mul(dots >> FRAC_BITS, scale)
    p = softmax_q16(scores)
    return q16_mul(p[..., None], values, ONE, value_bound).sum(axis=-2)


def attention_step(q, k, v, cache: LayerKv, pos: int, tables: RopeTables,
                   executor=None) -> np.ndarray:
    """Causal attention for the token at ``pos``.

    ``q``, ``k``, ``v`` have shape (n_heads, d_head).  The rotated key and the
    value are appended to ``cache`` first.  With an ``executor`` each head is
    a separate task; without one all heads are evaluated as a single batch.
    Outputs are concatenated in head order.
    """
    if pos != cache.length:
        raise ValueError(f"attention at position {pos} but cache holds {cache.length}")
    if pos >= cache.capacity:
        raise CacheOverflowError(f"position {pos} exceeds cache capacity {cache.capacity}")
    q = rope_apply(q, pos, tables)
    k = rope_apply(k, pos, tables)
    cache.append(k, _as_q16(v))
    n_heads, d_head = q.shape
    scale = attention_scale(d_head)
    t = cache.length
    keys, values = cache.keys[:, :t], cache.values[:, :t]
    bounds = (cache.key_bound, cache.value_bound)

    if executor is None:
        return head_attention(q, keys, values, scale, *bounds).reshape(-1)

    def run(h):
        return head_attention(q[h], keys[h], values[h], scale, *bounds)

    return np.concatenate(list(executor.map(run, range(n_heads))))


def ffn_silu(x, w_gate: QuantTensor, w_up: QuantTensor, w_down: QuantTensor,
             matvec=dense_forward) -> np.ndarray:
    """SiLU-gated feed-forward: down(silu(gate x) * up x)."""
    g = matvec(w_gate, x)
    u = matvec(w_up, x)
    return matvec(w_down, q16_mul(silu_q16(g), u))


def residual_add_clamp(a, b) -> np.ndarray:
    a, b = _as_q16(a), _as_q16(b)
    if a.shape != b.shape:
        raise ValueError("residual add: length mismatch")
    return np.clip(a + b, -ACT_CLAMP, ACT_CLAMP)
