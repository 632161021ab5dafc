"""FP32 reference backend with an explicit reduction tree.

Every dot product and sum is evaluated as ``lanes`` strided accumulators
(element i goes to accumulator i mod lanes, in index order) followed by a
pairwise combination of the partials, i.e. the shape a SIMD unit of that
width produces.  Changing ``lanes`` changes only the order of additions.
"""
import io
import math
from dataclasses import dataclass

import numpy as np

from .engine import Engine, greedy_pick
from .modelio import ModelFile

F32 = np.float32
ALLOWED_LANES = (1, 2, 4, 8)


@dataclass(frozen=True)
class LaneConfig:
    lanes: int = 1

    def __post_init__(self):
        if self.lanes not in ALLOWED_LANES:
            raise ValueError(f"lanes must be one of {ALLOWED_LANES}, got {self.lanes}")


def _lanes(cfg) -> int:
    return cfg.lanes if isinstance(cfg, LaneConfig) else LaneConfig(int(cfg)).lanes


def _reduce_last(p: np.ndarray, lanes: int) -> np.ndarray:
    """Lane-strided sum over the last axis of an f32 array."""
    n = p.shape[-1]
    if n == 0:
        return np.zeros(p.shape[:-1], dtype=F32)
    pad = (-n) % lanes
    if pad:
        p = np.concatenate([p, np.zeros(p.shape[:-1] + (pad,), dtype=F32)], axis=-1)
    p = p.reshape(p.shape[:-1] + (-1, lanes))
    # cumsum is a strict left-to-right recurrence (no pairwise blocking); the
    # + 0.0 stands for accumulators that start at +0 (only -0.0 sums notice)
    parts = np.cumsum(p, axis=-2, dtype=F32)[..., -1, :] + F32(0.0)
    while parts.shape[-1] > 1:
        parts = parts[..., 0::2] + parts[..., 1::2]
    return parts[..., 0]


def fsum_lanes(values, cfg) -> np.float32:
    """Sum f32 ``values`` with the reduction tree selected by ``cfg``."""
    v = np.asarray(values, dtype=F32)
    return F32(_reduce_last(v.reshape(-1), _lanes(cfg)))


def fdot_lanes(w: np.ndarray, x: np.ndarray, cfg) -> np.ndarray:
    """Row-wise f32 dot products ``w @ x`` with lane-strided accumulation."""
    prods = np.asarray(w, dtype=F32) * np.asarray(x, dtype=F32)
    return _reduce_last(prods, _lanes(cfg))


class FloatEngine:
    """The integer engine's architecture evaluated in FP32."""

    def __init__(self, model: ModelFile, cfg=LaneConfig(1)):
        self.model = model
        self.config = model.config
        self.lanes = _lanes(cfg)
        c = model.config
        self.eps = F32(1.0 / 65536)
        self.clamp = F32(256.0)
        self.weights = {
            name: (t.dequantize().astype(F32) if hasattr(t, "dequantize")
                   else (t / 65536.0).astype(F32))
            for name, t in model.tensors.items()
        }
        half = c.d_head // 2
        inv_freq = [float(c.rope_theta) ** (-2.0 * k / c.d_head) for k in range(half)]
        ang = [[pos * f for f in inv_freq] for pos in range(c.max_ctx)]
        self.cos = np.array([[math.cos(a) for a in row] for row in ang], dtype=F32)
        self.sin = np.array([[math.sin(a) for a in row] for row in ang], dtype=F32)
        self.score_scale = F32(1.0 / math.sqrt(c.d_head))

    def new_cache(self):
        c = self.config
        shape = (c.n_layers, c.n_heads, c.max_ctx, c.d_head)
        return {"k": np.zeros(shape, dtype=F32), "v": np.zeros(shape, dtype=F32), "len": 0}

    def _dot(self, w, x):
        return _reduce_last(w * x, self.lanes)

    def _rmsnorm(self, x, gamma):
        ms = F32(_reduce_last(x * x, self.lanes)) / F32(x.shape[0])
        r = F32(1.0) / np.sqrt(ms + self.eps, dtype=F32)
        return x * r * gamma

    def _rope(self, x, pos):
        half = x.shape[-1] // 2
        c, s = self.cos[pos], self.sin[pos]
        a, b = x[..., :half], x[..., half:]
        return np.concatenate([a * c - b * s, a * s + b * c], axis=-1)

    def _softmax(self, s):
        e = np.exp(s - s.max(axis=-1, keepdims=True), dtype=F32)
        return e / _reduce_last(e, self.lanes)[..., None]

    def forward(self, cache, token_id: int, pos: int, snapshots=None) -> np.ndarray:
        c = self.config
        if not 0 <= token_id < c.vocab:
            raise ValueError(f"token id {token_id} outside vocabulary of {c.vocab}")
        if pos >= c.max_ctx:
            raise IndexError(f"position {pos} exceeds max_ctx {c.max_ctx}")
        if pos != cache["len"]:
            raise ValueError(f"position {pos} does not match cache length {cache['len']}")
        W = self.weights
        hs = (c.n_heads, c.d_head)
        x = W["tok_embd"][token_id].copy()
        for i in range(c.n_layers):
            p = f"blk.{i}."
            h = self._rmsnorm(x, W[p + "attn_norm"])
            q = self._rope(self._dot(W[p + "attn_q"], h).reshape(hs), pos)
            k = self._rope(self._dot(W[p + "attn_k"], h).reshape(hs), pos)
            v = self._dot(W[p + "attn_v"], h).reshape(hs)
            cache["k"][i, :, pos] = k
            cache["v"][i, :, pos] = v
            keys = cache["k"][i, :, :pos + 1]
            vals = cache["v"][i, :, :pos + 1]
            scores = _reduce_last(keys * q[:, None, :], self.lanes) * self.score_scale
            probs = self._softmax(scores)
            # out[h, j] = sum_t probs[h, t] * vals[h, t, j], reduced over t
            att = _reduce_last(np.swapaxes(vals, 1, 2) * probs[:, None, :], self.lanes)
            x = np.clip(x + self._dot(W[p + "attn_o"], att.reshape(-1)), -self.clamp, self.clamp)
            h = self._rmsnorm(x, W[p + "ffn_norm"])
            g = self._dot(W[p + "ffn_gate"], h)
            u = self._dot(W[p + "ffn_up"], h)
            act = g / (F32(1.0) + np.exp(-g, dtype=F32))
            x = np.clip(x + self._dot(W[p + "ffn_down"], act * u), -self.clamp, self.clamp)
            if snapshots is not None:
                snapshots.append(x.copy())
        cache["len"] = pos + 1
        x = self._rmsnorm(x, W["output_norm"])
        return self._dot(W["output"], x)

    def step_greedy(self, prompt_ids):
        """Yield greedy tokens forever (until the context is full)."""
        cache = self.new_cache()
        logits = None
        for pos, tok in enumerate(prompt_ids):
            logits = self.forward(cache, int(tok), pos)
        pos = len(prompt_ids)
        while True:
            tok = greedy_pick(logits)
            yield tok
            if pos >= self.config.max_ctx:
                return
            logits = self.forward(cache, tok, pos)
            pos += 1


def float_forward(model: ModelFile, prompt_ids, cfg, max_new: int = 0):
    """Greedy FP32 generation plus per-layer residual snapshots.

    Returns ``(tokens, snapshots)`` where ``snapshots[l]`` is the residual
    stream after block ``l`` at the last prompt position.
    """
    if len(prompt_ids) + max_new > model.config.max_ctx:
        raise IndexError("prompt + max_new exceeds max_ctx")
    eng = FloatEngine(model, cfg)
    cache = eng.new_cache()
    snaps = []
    logits = None
    for pos, tok in enumerate(prompt_ids):
        snaps = []
        logits = eng.forward(cache, int(tok), pos, snaps)
    tokens = []
    pos = len(prompt_ids)
    for step in range(max_new):
        tok = greedy_pick(logits)
        tokens.append(tok)
        if step + 1 < max_new:
            logits = eng.forward(cache, tok, pos)
            pos += 1
    return tokens, snaps


def _stepper(model, cfg, backend):
    if backend == "float":
        return FloatEngine(model, cfg).step_greedy
    if backend == "int":
        # the integer engine has no lane parameter; map lanes onto the matvec
        # chunk size so the two sides still use different accumulation orders
        eng = Engine(model, chunk_size=_lanes(cfg))

        def run(prompt_ids):
            cache = eng.new_cache()
            logits = None
            for pos, tok in enumerate(prompt_ids):
                logits = eng.forward(cache, int(tok), pos)
            pos = len(prompt_ids)
            while True:
                tok = greedy_pick(logits)
                yield tok
                if pos >= model.config.max_ctx:
                    return
                logits = eng.forward(cache, tok, pos)
                pos += 1
        return run
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class DivergenceRun:
    index: object  # first differing token position, or None
    tokens_a: list
    tokens_b: list


def run_divergence(model, prompt_ids, cfg_a, cfg_b, horizon: int, backend="float"):
    """Greedy-decode under two configurations in lockstep up to ``horizon`` tokens."""
    if len(prompt_ids) + horizon > model.config.max_ctx + 1:
        raise ValueError("horizon exceeds the model context")
    gen_a = _stepper(model, cfg_a, backend)(prompt_ids)
    gen_b = _stepper(model, cfg_b, backend)(prompt_ids)
    ta, tb = [], []
    for i in range(horizon):
        a, b = next(gen_a), next(gen_b)
        ta.append(a)
        tb.append(b)
        if a != b:
            return DivergenceRun(i, ta, tb)
    return DivergenceRun(None, ta, tb)


def first_divergence(model, prompt_ids, cfg_a, cfg_b, horizon: int, backend="float"):
    """Index of the first generated token that differs between two configs, else None."""
    return run_divergence(model, prompt_ids, cfg_a, cfg_b, horizon, backend).index


def measure_layer_divergence(model, input_ids, cfg_a, cfg_b) -> np.ndarray:
    """L2 distance between the two configs' residual streams after each block."""
    _, snap_a = float_forward(model, input_ids, cfg_a)
    _, snap_b = float_forward(model, input_ids, cfg_b)
    return np.array([np.linalg.norm(a.astype(np.float64) - b.astype(np.float64))
                     for a, b in zip(snap_a, snap_b)])


def divergence_report_csv(rows) -> str:
    """CSV text for divergence results.

    ``rows`` are mappings with keys kind, index, l2, token_a, token_b (missing
    keys are left empty).
    """
    buf = io.StringIO()
    buf.write("kind,index,l2,token_a,token_b\n")
    for r in rows:
        l2 = r.get("l2")
        buf.write(",".join([
            str(r.get("kind", "")),
            "" if r.get("index") is None else str(r["index"]),
            "" if l2 is None else repr(float(l2)),
            "" if r.get("token_a") is None else str(r["token_a"]),
            "" if r.get("token_b") is None else str(r["token_b"]),
        ]) + "\n")
    return buf.getvalue()
