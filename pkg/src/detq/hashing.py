"""Digests, canonical token encoding and the ChaCha20 keystream generator."""
import struct

import blake3
import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    """BLAKE3-256 of ``data``."""
    return blake3.blake3(bytes(data)).digest()


def encode_tokens(token_ids) -> bytes:
    """Token IDs as concatenated little-endian u32 (the hashed form of x and y)."""
    ids = [int(t) for t in token_ids]
    for t in ids:
        if not 0 <= t < 1 << 32:
            raise ValueError(f"token id {t} does not fit in u32")
    return struct.pack(f"<{len(ids)}I", *ids)


def decode_tokens(data: bytes) -> list:
    if len(data) % 4:
        raise ValueError("token byte stream length is not a multiple of 4")
    return list(struct.unpack(f"<{len(data) // 4}I", data))


def tokens_hash(token_ids) -> bytes:
    return digest(encode_tokens(token_ids))


class ChaChaStream:
    """Deterministic byte stream: the ChaCha20 keystream for a 256-bit key.

    Nonce and initial counter are zero, so a key fully determines the stream.
    """

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ValueError("ChaCha20 key must be 32 bytes")
        cipher = Cipher(algorithms.ChaCha20(bytes(key), b"\x00" * 16), mode=None)
        self._enc = cipher.encryptor()

    @classmethod
    def from_seed(cls, seed: int) -> "ChaChaStream":
        return cls(int(seed).to_bytes(8, "little", signed=False) + b"\x00" * 24)

    def read(self, n: int) -> bytes:
        return self._enc.update(b"\x00" * n)

    def uint32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def int8_symmetric(self, n: int) -> np.ndarray:
        """``n`` values uniform on [-127, 127] by rejecting the byte 255."""
        out = np.empty(n, dtype=np.int8)
        filled = 0
        while filled < n:
            need = n - filled
            raw = np.frombuffer(self.read(need + need // 64 + 8), dtype=np.uint8)
            raw = raw[raw != 255][:need]
            out[filled:filled + raw.size] = raw.astype(np.int16) - 127
            filled += raw.size
        return out
