"""Hash attestations and verification by re-execution."""
import struct
from dataclasses import dataclass

from .engine import GenerationResult, generate_greedy
from .hashing import DIGEST_SIZE, digest, encode_tokens
from .modelio import deserialize

STAGES = ("model", "input", "output")
_WIRE = struct.Struct(f"<{DIGEST_SIZE}s{DIGEST_SIZE}s{DIGEST_SIZE}sQQ")


@dataclass(frozen=True)
class Attestation:
    model_id: bytes
    input_hash: bytes
    output_hash: bytes
    bond: int = 0
    challenge_period: int = 0

    def __post_init__(self):
        for name in ("model_id", "input_hash", "output_hash"):
            value = getattr(self, name)
            if not isinstance(value, (bytes, bytearray)) or len(value) != DIGEST_SIZE:
                raise ValueError(f"{name} must be a {DIGEST_SIZE}-byte digest")
            object.__setattr__(self, name, bytes(value))
        for name in ("bond", "challenge_period"):
            if not 0 <= int(getattr(self, name)) < 1 << 64:
                raise ValueError(f"{name} must fit in u64")

    def to_bytes(self) -> bytes:
        return _WIRE.pack(self.model_id, self.input_hash, self.output_hash,
                          int(self.bond), int(self.challenge_period))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Attestation":
        if len(data) != _WIRE.size:
            raise ValueError(f"attestation must be {_WIRE.size} bytes, got {len(data)}")
        return cls(*_WIRE.unpack(data))

    def to_hex(self) -> dict:
        return {
            "model_id": self.model_id.hex(),
            "input_hash": self.input_hash.hex(),
            "output_hash": self.output_hash.hex(),
            "bond": int(self.bond),
            "challenge_period": int(self.challenge_period),
        }

    @classmethod
    def from_hex(cls, d: dict) -> "Attestation":
        return cls(bytes.fromhex(d["model_id"]), bytes.fromhex(d["input_hash"]),
                   bytes.fromhex(d["output_hash"]), int(d["bond"]), int(d["challenge_period"]))


@dataclass(frozen=True)
class VerifyOutcome:
    """``stage`` is None when confirmed, else the first digest that failed."""

    stage: object = None
    expected: bytes = None
    found: bytes = None

    @property
    def confirmed(self) -> bool:
        return self.stage is None

    def __str__(self):
        return "Confirmed" if self.confirmed else f"Refuted({self.stage})"


CONFIRMED = VerifyOutcome()


def make_attestation(model_bytes: bytes, prompt_ids, result: GenerationResult,
                     bond: int = 0, period: int = 0) -> Attestation:
    return Attestation(digest(model_bytes), digest(encode_tokens(prompt_ids)),
                       digest(encode_tokens(result.token_ids)), bond, period)


def verify_by_reexecution(att: Attestation, model_bytes: bytes, prompt_ids, max_new: int,
                          generate=generate_greedy, **engine_kw) -> VerifyOutcome:
    """Check model and input digests, then re-run inference once and compare outputs.

    Raises :class:`~detq.modelio.ModelFormatError` when bytes matching the
    attested model id cannot be decoded; that is an error, not a verdict.
    """
    found = digest(model_bytes)
    if found != att.model_id:
        return VerifyOutcome("model", att.model_id, found)
    found = digest(encode_tokens(prompt_ids))
    if found != att.input_hash:
        return VerifyOutcome("input", att.input_hash, found)
    model = deserialize(model_bytes)
    result = generate(model, prompt_ids, max_new, **engine_kw)
    if result.output_hash != att.output_hash:
        return VerifyOutcome("output", att.output_hash, result.output_hash)
    return CONFIRMED


@dataclass(frozen=True)
class DisputeResult:
    winner: str  # "attester" or "challenger"
    outcome: VerifyOutcome


def dispute_game(att: Attestation, honest_model_bytes: bytes, prompt_ids, max_new: int,
                 **engine_kw) -> DisputeResult:
    """One challenger re-executes with the honest model; any refutation wins."""
    outcome = verify_by_reexecution(att, honest_model_bytes, prompt_ids, max_new, **engine_kw)
    return DisputeResult("attester" if outcome.confirmed else "challenger", outcome)
