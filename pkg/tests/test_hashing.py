import struct

import numpy as np
import pytest

import refimpl as R
from detq.hashing import ChaChaStream, decode_tokens, digest, encode_tokens, tokens_hash


def test_blake3_reference_vectors():
    assert digest(b"").hex() == "af1349b9f5f9a1a6a0404dea36dcc9499bcb25c9adc112b7cc9a93cae41f3262"
    assert len(digest(b"abc")) == 32


def test_token_encoding_is_u32_little_endian():
    assert encode_tokens([1, 258]) == b"\x01\x00\x00\x00\x02\x01\x00\x00"
    assert encode_tokens([]) == b""
    assert decode_tokens(encode_tokens([0, 7, 2**32 - 1])) == [0, 7, 2**32 - 1]
    assert tokens_hash([5, 6]) == digest(struct.pack("<2I", 5, 6))


@pytest.mark.parametrize("bad", [[-1], [2**32]])
def test_token_encoding_range(bad):
    with pytest.raises(ValueError):
        encode_tokens(bad)


def test_decode_rejects_partial_words():
    with pytest.raises(ValueError):
        decode_tokens(b"\x00\x01\x02")


def test_chacha_block_function_rfc8439_vector():
    key = bytes(range(32))
    nonce = bytes.fromhex("000000090000004a00000000")
    block = R.chacha20_block(key, 1, nonce)
    assert block[:16].hex() == "10f1e7e4d13b5915500fdd1fa32071c4"


def test_keystream_matches_block_function():
    key = bytes(range(7, 39))
    stream = ChaChaStream(key).read(64 * 3 + 5)
    want = b"".join(R.chacha20_block(key, i, b"\0" * 12) for i in range(4))
    assert stream == want[:len(stream)]


def test_keystream_reads_are_contiguous():
    a = ChaChaStream.from_seed(9)
    b = ChaChaStream.from_seed(9)
    assert a.read(3) + a.read(70) + a.read(1) == b.read(74)
    assert ChaChaStream.from_seed(1).read(16) != ChaChaStream.from_seed(2).read(16)


def test_seed_key_layout():
    assert ChaChaStream.from_seed(5).read(32) == ChaChaStream(b"\x05" + b"\0" * 31).read(32)
    with pytest.raises(ValueError):
        ChaChaStream(b"short")


def test_int8_symmetric_range_and_coverage():
    v = ChaChaStream.from_seed(3).int8_symmetric(100_000)
    assert v.min() == -127 and v.max() == 127
    assert len(np.unique(v)) == 255
    counts = np.bincount(v.astype(np.int64) + 127)
    mean = 100_000 / 255
    assert np.all(np.abs(counts - mean) < 5 * np.sqrt(mean))
