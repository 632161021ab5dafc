import numpy as np
import pytest

import refimpl as R
from detq.engine import (ContextOverflowError, Engine, KvCache, forward, generate_greedy,
                         generate_sampled, greedy_pick, sample_index, sampling_seed)
from detq.hashing import ChaChaStream, digest, encode_tokens, tokens_hash
from detq.kernels import softmax_q16
from detq.modelio import ModelConfig, ModelFile, QuantTensor, gen_toy_model, quantize_matrix
from detq.qarith import ONE, build_rope_tables

SMALL = ModelConfig(2, 16, 2, 24, 32, 48)


@pytest.fixture(scope="module")
def small():
    return gen_toy_model(5, SMALL)


def handcrafted():
    cfg = ModelConfig(1, 4, 2, 6, 8, 8)
    rng = np.random.default_rng(0)
    tensors = {}
    for name, rows, cols, kind in cfg.tensor_shapes():
        if kind == 1:
            tensors[name] = np.array([ONE, ONE // 2, 3 * ONE // 2, ONE][:cols], dtype=np.int64)
        else:
            tensors[name] = quantize_matrix(np.round(rng.normal(0, 1, (rows, cols)), 3))
    return ModelFile(cfg, tensors)


def test_forward_is_repeatable(small):
    eng = Engine(small)
    outs = []
    for _ in range(2):
        c = eng.new_cache()
        outs.append([eng.forward(c, t, p) for p, t in enumerate([3, 1, 4, 1, 5])])
    assert all(np.array_equal(a, b) for a, b in zip(*outs))


def test_handcrafted_model_matches_scalar_oracle():
    m = handcrafted()
    toks = [0, 7, 3, 3, 5, 1, 6, 2]
    eng = Engine(m)
    c = eng.new_cache()
    got = [eng.forward(c, t, p).tolist() for p, t in enumerate(toks)]
    assert got == R.forward_all(m, toks)


def test_forward_errors(small):
    eng = Engine(small)
    c = eng.new_cache()
    with pytest.raises(ValueError):
        eng.forward(c, SMALL.vocab, 0)
    with pytest.raises(ValueError):
        eng.forward(c, 0, 1)
    for p in range(SMALL.max_ctx):
        eng.forward(c, 1, p)
    with pytest.raises(ContextOverflowError):
        eng.forward(c, 1, SMALL.max_ctx)
    assert len(c) == SMALL.max_ctx


def test_module_level_forward(small):
    c1, c2 = KvCache(SMALL), KvCache(SMALL)
    assert np.array_equal(forward(small, c1, 2, 0), Engine(small).forward(c2, 2, 0))


def test_snapshots_per_layer(small):
    snaps = []
    Engine(small).forward(KvCache(SMALL), 1, 0, snaps)
    assert len(snaps) == SMALL.n_layers and snaps[0].shape == (SMALL.d_model,)


def test_greedy_tie_breaks_to_lowest_index():
    assert greedy_pick([3, 7, 7, 1]) == 1
    assert greedy_pick(np.array([-5, -5])) == 0


def test_greedy_invariant_under_constant_offset():
    rng = np.random.default_rng(1)
    for _ in range(200):
        logits = rng.integers(-5, 5, 10) * ONE
        assert greedy_pick(logits) == greedy_pick(logits + int(rng.integers(-100 * ONE, 100 * ONE)))


def test_greedy_matches_scalar_oracle(small):
    res = generate_greedy(small, [1, 2, 3], 6)
    assert res.token_ids == R.greedy(small, [1, 2, 3], 6)
    assert res.output_hash == digest(encode_tokens(res.token_ids))


def test_greedy_repeated_100_times(small):
    eng = Engine(small)
    assert len({eng.generate_greedy([4, 4, 2], 8).output_hash for _ in range(100)}) == 1


@pytest.mark.parametrize("kw", [dict(threads=2), dict(threads=8), dict(chunk_size=1),
                                dict(chunk_size=7), dict(threads=8, chunk_size=16)])
def test_greedy_invariant_to_threads_and_chunks(small, kw):
    base = generate_greedy(small, [9, 8, 7], 20)
    assert generate_greedy(small, [9, 8, 7], 20, **kw).output_hash == base.output_hash


def test_kv_cache_incremental_equals_recompute(small):
    eng = Engine(small)
    res = eng.generate_greedy([1, 2], 10, keep_logits=True)
    seq = [1, 2] + res.token_ids
    for n in range(10):
        c = eng.new_cache()
        for p, t in enumerate(seq[:2 + n]):
            logits = eng.forward(c, t, p)
        assert np.array_equal(logits, res.logits[n])


def test_imported_rope_tables_give_same_output(small):
    tables = build_rope_tables(SMALL.rope_theta, SMALL.d_head, SMALL.max_ctx)
    from detq.qarith import RopeTables
    imported = RopeTables.from_bytes(tables.to_bytes())
    a = Engine(small).generate_greedy([1, 2], 5)
    b = Engine(small, rope_tables=imported).generate_greedy([1, 2], 5)
    assert a.output_hash == b.output_hash
    with pytest.raises(ValueError):
        Engine(small, rope_tables=build_rope_tables(10000.0, SMALL.d_head, 4))


@pytest.mark.parametrize("prompt,max_new,err", [([], 1, ValueError), ([1], -1, ValueError),
                                                ([1] * 40, 9, ContextOverflowError)])
def test_generation_preconditions(small, prompt, max_new, err):
    with pytest.raises(err):
        generate_greedy(small, prompt, max_new)


def test_generation_may_fill_the_context(small):
    assert len(generate_greedy(small, [1] * 40, 8).token_ids) == 8
    assert generate_greedy(small, [1], 0).token_ids == []


def test_threads_argument():
    with pytest.raises(ValueError):
        Engine(gen_toy_model(1, SMALL), threads=0)


# -- sampling ------------------------------------------------------------------

def test_sampled_is_reproducible(small):
    a = generate_sampled(small, [1, 2, 3], 12, ONE)
    b = generate_sampled(small, [1, 2, 3], 12, ONE, threads=8, chunk_size=3)
    assert a.output_hash == b.output_hash


def test_sampling_seed_binds_model_and_prompt(small):
    s = sampling_seed(small.raw, [1, 2, 3])
    assert s == digest(small.raw + encode_tokens([1, 2, 3]))
    assert s != sampling_seed(small.raw, [1, 2, 4])


def test_sampled_differs_from_greedy_at_high_temperature(small):
    res = generate_sampled(small, [1, 2, 3], 30, 50 * ONE)
    assert len(set(res.token_ids)) > 5


def test_sampled_rejects_non_positive_temperature(small):
    for t in (0, -ONE):
        with pytest.raises(ValueError):
            generate_sampled(small, [1], 1, t)


def test_sample_index_walk():
    probs = [0, 100, 0, 50, 0]
    assert sample_index(probs, 0) == 1
    assert sample_index(probs, 2**32 - 1) == 3
    picks = {sample_index(probs, d) for d in range(0, 2**32, 2**22)}
    assert picks == {1, 3}
    # boundary: target equal to a running sum moves on to the next entry
    assert sample_index([1, 1], 2**31) == 1


def test_sampling_frequencies_uniform_for_flat_logits():
    vocab = 16
    scaled = (np.zeros(vocab, dtype=object) * ONE) // (1 << 40)
    probs = softmax_q16(scaled.astype(np.int64))
    stream = ChaChaStream(digest(b"flat"))
    counts = np.bincount([sample_index(probs, stream.uint32()) for _ in range(10_000)],
                         minlength=vocab)
    expect = 10_000 / vocab
    sigma = np.sqrt(10_000 * (1 / vocab) * (1 - 1 / vocab))
    assert np.all(np.abs(counts - expect) <= 3 * sigma)


def test_sampled_flat_model_spreads_over_vocab():
    cfg = ModelConfig(1, 8, 2, 8, 8, 128)
    m = gen_toy_model(1, cfg)
    t = dict(m.tensors)
    t["output"] = QuantTensor(np.zeros((8, 8), dtype=np.int8), np.full(8, ONE, dtype=np.int64))
    flat = ModelFile(cfg, t)
    res = generate_sampled(flat, [1], 120, ONE)
    assert set(res.token_ids) == set(range(8))
