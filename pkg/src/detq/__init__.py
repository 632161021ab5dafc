"""detq: bit-exact Q16 transformer inference with hash attestation.

The integer engine lives in :mod:`detq.engine`; the FP32 comparison backend
in :mod:`detq.floatref`; trust metrics in :mod:`detq.trustlab`.
"""
from .attest import Attestation, VerifyOutcome, dispute_game, make_attestation, verify_by_reexecution
from .engine import Engine, GenerationResult, KvCache, generate_greedy, generate_sampled
from .floatref import LaneConfig, first_divergence, float_forward, measure_layer_divergence
from .modelio import ModelConfig, ModelFile, deserialize, gen_toy_model, serialize, weight_hash
from .qarith import ONE, inv_sqrt_q16, sigmoid_q16, silu_q16
from .trustlab import PlatformDistribution, decay_bound, reduction_tree_count, reject_prob, trust_entropy

__version__ = "0.1.0"
