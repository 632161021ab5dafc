"""Scalar big-integer reference implementation used as a test oracle.

Written against the arithmetic rules only: plain Python ints and lists, no
numpy and nothing from detq's arithmetic modules.  The exp table comes from
mpmath, the inverse-sqrt seeds from an integer fourth root by bisection.
"""
import math
import struct

import mpmath

ONE = 1 << 16
CLAMP = 256 * ONE


def round_away(num, den):
    """Round num/den to the nearest int, ties away from zero (den > 0)."""
    q, r = divmod(abs(num), den)
    if 2 * r >= den:
        q += 1
    return q if num >= 0 else -q


def mul(a, b):
    return (a * b) >> 16


def _iroot4(n):
    lo, hi = 0, 1 << (n.bit_length() // 4 + 2)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if mid ** 4 <= n:
            lo = mid
        else:
            hi = mid - 1
    return lo


SEEDS = [_iroot4(2 ** (159 - 2 * e)) for e in range(64)]


def inv_sqrt(x):
    assert x > 0
    e = len(bin(x)) - 3
    y = SEEDS[e]
    for _ in range(3):
        t = (x * y * y) // 2 ** 48
        y = (y * (3 * 2 ** 32 - t)) // 2 ** 33
    return (y + 2 ** 15) // 2 ** 16


def _table():
    with mpmath.workdps(60):
        return [int(mpmath.floor(mpmath.exp(mpmath.mpf(i - 256) / 32) * ONE + mpmath.mpf(1) / 2))
                for i in range(257)]


EXP_TABLE = _table()


def exp_neg(t):
    assert 0 <= t <= 8 * ONE
    i, f = divmod(t, 2048)
    hi = EXP_TABLE[256 - i]
    lo = EXP_TABLE[255 - i] if i < 256 else EXP_TABLE[0]
    return (hi * (2048 - f) + lo * f + 1024) // 2048


def sigmoid(x):
    t = abs(x)
    if t < 8 * ONE:
        e = exp_neg(t)
    elif t < 16 * ONE:
        e = (exp_neg(t - 8 * ONE) * EXP_TABLE[0] + ONE // 2) >> 16
    else:
        e = 0
    low = (e * ONE + (ONE + e) // 2) // (ONE + e)
    return ONE - low if x > 0 else low


def silu(x):
    return mul(x, sigmoid(x))


def rope_table(theta, d_head, max_ctx):
    half = d_head // 2
    cos_t, sin_t = [], []
    for pos in range(max_ctx):
        cs, sn = [], []
        for k in range(half):
            a = pos * theta ** (-2.0 * k / d_head)
            cs.append(_round_float(math.cos(a)))
            sn.append(_round_float(math.sin(a)))
        cos_t.append(cs)
        sin_t.append(sn)
    return cos_t, sin_t


def _round_float(v):
    # exact: a double times 2**16 is exactly representable as a ratio
    n, d = (v * ONE).as_integer_ratio()
    return round_away(n, d)


def dense(rows, scales, x):
    out = []
    for row, s in zip(rows, scales):
        acc = 0
        for w, v in zip(row, x):
            acc += w * v
        out.append((acc * s) >> 16)
    return out


def rmsnorm(x, gamma):
    ss = 0
    for v in x:
        ss += v * v
    ms = (ss // len(x)) >> 16
    r = inv_sqrt(ms + 1)
    return [mul(mul(v, r), g) for v, g in zip(x, gamma)]


def rope(vec, cos_row, sin_row):
    h = len(vec) // 2
    out = [0] * len(vec)
    for k in range(h):
        a, b = vec[k], vec[k + h]
        out[k] = mul(a, cos_row[k]) - mul(b, sin_row[k])
        out[k + h] = mul(a, sin_row[k]) + mul(b, cos_row[k])
    return out


def softmax(scores):
    m = max(scores)
    w = [exp_neg(min(m - s, 8 * ONE)) for s in scores]
    total = sum(w)
    return [(v << 16) // total for v in w]


def _tensor(t):
    if hasattr(t, "scales"):
        return [list(map(int, r)) for r in t.data.tolist()], [int(s) for s in t.scales.tolist()]
    return [int(v) for v in t.tolist()]


class RefModel:
    """A ModelFile's numbers copied into Python lists."""

    def __init__(self, model):
        c = model.config
        self.n_layers, self.d, self.h = c.n_layers, c.d_model, c.n_heads
        self.dh = c.d_model // c.n_heads
        self.t = {name: _tensor(t) for name, t in model.tensors.items()}
        self.cos, self.sin = rope_table(c.rope_theta, self.dh, c.max_ctx)
        self.scale = inv_sqrt(self.dh * ONE)


def forward_all(model, tokens):
    """Logits (list of ints) after each token of ``tokens`` fed in order."""
    ref = RefModel(model) if not isinstance(model, RefModel) else model
    T = ref.t
    keys = [[[] for _ in range(ref.h)] for _ in range(ref.n_layers)]
    vals = [[[] for _ in range(ref.h)] for _ in range(ref.n_layers)]
    all_logits = []
    for pos, tok in enumerate(tokens):
        rows, scales = T["tok_embd"]
        x = [w * scales[tok] for w in rows[tok]]
        for li in range(ref.n_layers):
            p = f"blk.{li}."
            hn = rmsnorm(x, T[p + "attn_norm"])
            q = dense(*T[p + "attn_q"], hn)
            k = dense(*T[p + "attn_k"], hn)
            v = dense(*T[p + "attn_v"], hn)
            att = []
            for hd in range(ref.h):
                sl = slice(hd * ref.dh, (hd + 1) * ref.dh)
                qh = rope(q[sl], ref.cos[pos], ref.sin[pos])
                keys[li][hd].append(rope(k[sl], ref.cos[pos], ref.sin[pos]))
                vals[li][hd].append(v[sl])
                scores = []
                for kt in keys[li][hd]:
                    dot = sum(a * b for a, b in zip(qh, kt))
                    scores.append(mul(dot >> 16, ref.scale))
                probs = softmax(scores)
                for j in range(ref.dh):
                    att.append(sum(mul(pt, vt[j]) for pt, vt in zip(probs, vals[li][hd])))
            o = dense(*T[p + "attn_o"], att)
            x = [max(-CLAMP, min(CLAMP, a + b)) for a, b in zip(x, o)]
            hn = rmsnorm(x, T[p + "ffn_norm"])
            g = dense(*T[p + "ffn_gate"], hn)
            u = dense(*T[p + "ffn_up"], hn)
            f = dense(*T[p + "ffn_down"], [mul(silu(a), b) for a, b in zip(g, u)])
            x = [max(-CLAMP, min(CLAMP, a + b)) for a, b in zip(x, f)]
        x = rmsnorm(x, T["output_norm"])
        all_logits.append(dense(*T["output"], x))
    return all_logits


def argmax_low(v):
    best = 0
    for i in range(1, len(v)):
        if v[i] > v[best]:
            best = i
    return best


def greedy(model, prompt, max_new):
    ref = RefModel(model)
    seq = list(prompt)
    out = []
    for _ in range(max_new):
        logits = forward_all(ref, seq)[-1]
        tok = argmax_low(logits)
        out.append(tok)
        seq.append(tok)
    return out


# -- ChaCha20 block function (for checking the keystream wrapper) -------------

def _rotl(v, n):
    return ((v << n) | (v >> (32 - n))) & 0xFFFFFFFF


def chacha20_block(key: bytes, counter: int, nonce: bytes) -> bytes:
    const = [0x61707865, 0x3320646E, 0x79622D32, 0x6B206574]
    state = const + list(struct.unpack("<8I", key)) + [counter] + list(struct.unpack("<3I", nonce))
    w = list(state)

    def qr(a, b, c, d):
        w[a] = (w[a] + w[b]) & 0xFFFFFFFF
        w[d] = _rotl(w[d] ^ w[a], 16)
        w[c] = (w[c] + w[d]) & 0xFFFFFFFF
        w[b] = _rotl(w[b] ^ w[c], 12)
        w[a] = (w[a] + w[b]) & 0xFFFFFFFF
        w[d] = _rotl(w[d] ^ w[a], 8)
        w[c] = (w[c] + w[d]) & 0xFFFFFFFF
        w[b] = _rotl(w[b] ^ w[c], 7)

    for _ in range(10):
        qr(0, 4, 8, 12); qr(1, 5, 9, 13); qr(2, 6, 10, 14); qr(3, 7, 11, 15)
        qr(0, 5, 10, 15); qr(1, 6, 11, 12); qr(2, 7, 8, 13); qr(3, 4, 9, 14)
    return struct.pack("<16I", *[(a + b) & 0xFFFFFFFF for a, b in zip(w, state)])


def catalan_convolution(n):
    c = [1]
    for m in range(n):
        c.append(sum(c[i] * c[m - i] for i in range(m + 1)))
    return c[n]


def count_trees_by_enumeration(d):
    """Enumerate every full parenthesisation of d leaves (small d only)."""
    def trees(lo, hi):
        if hi - lo == 1:
            return [lo]
        out = []
        for mid in range(lo + 1, hi):
            out += [(a, b) for a in trees(lo, mid) for b in trees(mid, hi)]
        return out
    return len(set(map(repr, trees(0, d))))
