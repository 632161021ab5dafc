"""
Attest, verify, dispute
=======================

A provider commits to (model, input, output) digests.  Anyone holding the
model can re-run inference once and confirm or refute the claim.
"""
from detq import (ModelConfig, dispute_game, gen_toy_model, generate_greedy, make_attestation,
                  verify_by_reexecution)
from detq.attest import Attestation

model = gen_toy_model(7, ModelConfig(4, 32, 2, 64, 256, 128))
prompt = list(b"attest me")

res = generate_greedy(model, prompt, 16)
att = make_attestation(model.raw, prompt, res, bond=100, period=3600)
print("attestation:", len(att.to_bytes()), "bytes")
print("honest claim ->", verify_by_reexecution(att, model.raw, prompt, 16))

# a provider that returns something else but keeps the other digests
forged = Attestation(att.model_id, att.input_hash, bytes(32), att.bond, att.challenge_period)
print("forged output ->", verify_by_reexecution(forged, model.raw, prompt, 16))
print("dispute winner:", dispute_game(forged, model.raw, prompt, 16).winner)

# verifying against the wrong input fails before any inference runs
print("wrong prompt ->", verify_by_reexecution(att, model.raw, list(b"attest you"), 16))
