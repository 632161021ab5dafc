"""
Why summation order matters
===========================

Four float32 numbers, summed two ways.  Same inputs, same hardware, but a
different association of the additions gives a different answer.
"""
import numpy as np

from detq.floatref import LaneConfig, fsum_lanes

v = np.array([1.0, 2.0**-24, 2.0**-24, 2.0**-24], dtype=np.float32)

# one accumulator: ((1 + u) + u) + u, each tiny term is absorbed by the 1.0
print("1 lane :", repr(float(fsum_lanes(v, LaneConfig(1)))))

# two accumulators: (1 + u) + (u + u), the tiny terms meet each other first
print("2 lanes:", repr(float(fsum_lanes(v, LaneConfig(2)))))

# integer addition is associative, so the Q16 engine never has this problem
q = (v.astype(np.float64) * 2**40).astype(np.int64)
print("ints   :", q.sum() == q[0] + (q[1] + q[2]) + q[3])
