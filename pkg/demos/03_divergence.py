"""
Float divergence versus integer stability
=========================================

The FP32 reference runs the same architecture with 2 and 8 accumulator
lanes.  With an expansive model (gain 10) the tiny rounding differences grow
layer by layer until greedy decoding picks a different token.  The integer
engine, run with two different chunkings, never disagrees.
"""
import numpy as np

from detq import LaneConfig, ModelConfig, gen_toy_model, measure_layer_divergence
from detq.floatref import run_divergence

model = gen_toy_model(1, ModelConfig(16, 64, 4, 128, 256, 512), gain=10)
prompt = [1, 2, 3, 4]

l2 = measure_layer_divergence(model, prompt, LaneConfig(2), LaneConfig(8))
np.set_printoptions(precision=2)
print("residual L2 gap per layer:", l2)

run = run_divergence(model, prompt, LaneConfig(2), LaneConfig(8), 256)
if run.index is None:
    print("float: no divergence in 256 tokens")
else:
    i = run.index
    print(f"float: first divergence at token {i}: {run.tokens_a[i]} vs {run.tokens_b[i]}")

run = run_divergence(model, prompt, LaneConfig(2), LaneConfig(8), 64, backend="int")
print("int  : first divergence", run.index)
