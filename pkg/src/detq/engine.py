"""Deterministic integer forward pass and decoding loops."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .hashing import ChaChaStream, digest, encode_tokens, tokens_hash
from .kernels import (LayerKv, attention_step, dense_forward, ffn_silu, matvec_chunked,
                      residual_add_clamp, rmsnorm, softmax_q16)
from .modelio import ModelFile
from .qarith import ONE, RopeTables, build_rope_tables


class ContextOverflowError(IndexError):
    pass


class KvCache:
    """Per-layer write-once key/value stores for one generation session."""

    def __init__(self, config):
        self.layers = [LayerKv(config.n_heads, config.d_head, config.max_ctx)
                       for _ in range(config.n_layers)]
        self.max_ctx = config.max_ctx

    def __len__(self):
        return self.layers[-1].length


@dataclass
class GenerationResult:
    token_ids: list
    output_hash: bytes
    logits: list = field(default_factory=list, repr=False)


def greedy_pick(logits) -> int:
    """Index of the largest logit, lowest index on ties."""
    return int(np.argmax(np.asarray(logits)))


def sample_index(probs, draw: int) -> int:
    """Walk cumulative weights in index order for a 32-bit uniform ``draw``.

    The target is scaled to the actual (truncated) mass, and the first index
    whose running sum exceeds it is returned, so zero-weight entries are never
    picked and the last positive entry is always reachable.
    """
    probs = np.asarray(probs, dtype=np.int64)
    total = int(probs.sum())
    target = (int(draw) * total) >> 32
    return int(np.searchsorted(np.cumsum(probs), target, side="right"))


class Engine:
    """Integer inference session factory for one model.

    ``threads`` > 1 computes attention heads on a thread pool;
    ``chunk_size`` routes every dense layer through :func:`matvec_chunked`.
    Neither changes a single output bit.
    """

    def __init__(self, model: ModelFile, threads: int = 1, chunk_size=None,
                 rope_tables: RopeTables = None):
        cfg = model.config
        self.model = model
        self.config = cfg
        if rope_tables is None:
            rope_tables = build_rope_tables(cfg.rope_theta, cfg.d_head, cfg.max_ctx)
        if rope_tables.max_ctx < cfg.max_ctx or rope_tables.half_dim != cfg.d_head // 2:
            raise ValueError("rotary tables do not cover the model's context or head width")
        self.tables = rope_tables
        self.threads = int(threads)
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.matvec = (dense_forward if chunk_size is None
                       else partial(matvec_chunked, chunk_size=int(chunk_size)))
        self._layers = [model.layer(i) for i in range(cfg.n_layers)]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def new_cache(self) -> KvCache:
        return KvCache(self.config)

    def embed(self, token_id: int) -> np.ndarray:
        emb = self.model["tok_embd"]
        return emb.data[token_id].astype(np.int64) * emb.scales[token_id]

    def forward(self, cache: KvCache, token_id: int, pos: int, snapshots=None) -> np.ndarray:
        """Logits for ``token_id`` at ``pos``; appends to ``cache``.

        If ``snapshots`` is a list, the residual stream after each block is
        appended to it.
        """
        cfg = self.config
        if not 0 <= token_id < cfg.vocab:
            raise ValueError(f"token id {token_id} outside vocabulary of {cfg.vocab}")
        if pos >= cfg.max_ctx:
            raise ContextOverflowError(f"position {pos} exceeds max_ctx {cfg.max_ctx}")
        if pos != len(cache):
            raise ValueError(f"position {pos} does not match cache length {len(cache)}")
        mv = self.matvec
        h_shape = (cfg.n_heads, cfg.d_head)
        x = self.embed(token_id)
        for w, kv in zip(self._layers, cache.layers):
            h = rmsnorm(x, w["attn_norm"])
            q = mv(w["attn_q"], h).reshape(h_shape)
            k = mv(w["attn_k"], h).reshape(h_shape)
            v = mv(w["attn_v"], h).reshape(h_shape)
            att = attention_step(q, k, v, kv, pos, self.tables, self._pool)
            x = residual_add_clamp(x, mv(w["attn_o"], att))
            h = rmsnorm(x, w["ffn_norm"])
            x = residual_add_clamp(x, ffn_silu(h, w["ffn_gate"], w["ffn_up"], w["ffn_down"], mv))
            if snapshots is not None:
                snapshots.append(x)
        x = rmsnorm(x, self.model["output_norm"])
        return mv(self.model["output"], x)

    def _check_lengths(self, prompt_ids, max_new):
        if len(prompt_ids) == 0:
            raise ValueError("prompt must contain at least one token")
        if max_new < 0:
            raise ValueError("max_new must be >= 0")
        if len(prompt_ids) + max_new > self.config.max_ctx:
            raise ContextOverflowError(
                f"prompt ({len(prompt_ids)}) + max_new ({max_new}) exceeds max_ctx "
                f"{self.config.max_ctx}")

    def _decode(self, prompt_ids, max_new, pick, keep_logits) -> GenerationResult:
        prompt_ids = [int(t) for t in prompt_ids]
        self._check_lengths(prompt_ids, max_new)
        cache = self.new_cache()
        logits = None
        for pos, tok in enumerate(prompt_ids):
            logits = self.forward(cache, tok, pos)
        out, kept = [], []
        pos = len(prompt_ids)
        for step in range(max_new):
            tok = pick(logits)
            out.append(tok)
            if keep_logits:
                kept.append(logits)
            if step + 1 < max_new:
                logits = self.forward(cache, tok, pos)
                pos += 1
        return GenerationResult(out, tokens_hash(out), kept)

    def generate_greedy(self, prompt_ids, max_new: int, keep_logits=False) -> GenerationResult:
        return self._decode(prompt_ids, max_new, greedy_pick, keep_logits)

    def generate_sampled(self, prompt_ids, max_new: int, temperature: int,
                         keep_logits=False) -> GenerationResult:
        """Temperature sampling driven by ChaCha20 keyed with H(model bytes || prompt)."""
        temperature = int(temperature)
        if temperature <= 0:
            raise ValueError("temperature must be a positive Q16 value")
        stream = ChaChaStream(sampling_seed(self.model.raw, prompt_ids))

        def pick(logits):
            scaled = (np.asarray(logits, dtype=object) * ONE) // temperature
            return sample_index(softmax_q16(scaled.astype(np.int64)), stream.uint32())

        return self._decode(prompt_ids, max_new, pick, keep_logits)


def sampling_seed(model_bytes: bytes, prompt_ids) -> bytes:
    return digest(bytes(model_bytes) + encode_tokens(prompt_ids))


def forward(model: ModelFile, cache: KvCache, token_id: int, pos: int, **engine_kw):
    with Engine(model, **engine_kw) as eng:
        return eng.forward(cache, token_id, pos)


def generate_greedy(model: ModelFile, prompt_ids, max_new: int, **engine_kw) -> GenerationResult:
    with Engine(model, **engine_kw) as eng:
        return eng.generate_greedy(prompt_ids, max_new)


def generate_sampled(model: ModelFile, prompt_ids, max_new: int, temperature: int,
                     **engine_kw) -> GenerationResult:
    with Engine(model, **engine_kw) as eng:
        return eng.generate_sampled(prompt_ids, max_new, temperature)
