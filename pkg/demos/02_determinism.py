"""
Bit-identical generation
========================

Generate from a 16-layer toy model under different thread counts and matvec
chunk sizes and compare the BLAKE3 output hashes.
"""
from detq import Engine, ModelConfig, gen_toy_model

model = gen_toy_model(1, ModelConfig(16, 64, 4, 128, 256, 512))
print("weight hash", model.weight_hash.hex()[:16], "...")

prompt = [72, 101, 108, 108, 111]
hashes = {}
for kw in ({}, {"threads": 2}, {"threads": 8}, {"chunk_size": 1}, {"chunk_size": 7}):
    with Engine(model, **kw) as eng:
        res = eng.generate_greedy(prompt, 32)
    hashes[str(kw)] = res.output_hash.hex()
    print(f"{str(kw):20s} {hashes[str(kw)][:16]}  {res.token_ids[:8]}")

print("distinct hashes:", len(set(hashes.values())))
