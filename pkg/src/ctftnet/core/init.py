"""Parameter initialization for complex weights.

Glorot-style: real and imaginary parts are each drawn uniformly so that the
per-part variance is 1/(2 * fan_avg) -- the complex weight then has total
variance 1/fan_avg, the usual Glorot target.  Biases start at zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import ComplexTensor

__all__ = ["glorot_complex", "zeros_param"]


def glorot_complex(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float32) -> ComplexTensor:
    fan_avg = 0.5 * (fan_in + fan_out)
    limit = float(np.sqrt(3.0 / (2.0 * fan_avg)))
    re = rng.uniform(-limit, limit, size=shape).astype(dtype)
    im = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ComplexTensor(re, im, requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> ComplexTensor:
    z = np.zeros(shape, dtype=dtype)
    return ComplexTensor(z, z.copy(), requires_grad=True)
