"""Central-difference verification of reverse-mode gradients.

``grad_check`` evaluates a deterministic scalar-valued closure, runs the
analytic backward pass, then perturbs a seeded sample of parameter
components (real and imaginary separately) and compares slopes.  The
returned figure is the worst relative error

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

over every sampled component.  Components where both slopes sit below
1e-7 x max(1, |loss|) are counted as zero: the difference quotient cannot
resolve anything under its own cancellation noise (~eps x |loss| / step),
and some gradients are exactly zero by construction (e.g. a conv bias
feeding a mean-subtracting norm).  Use 64-bit parameters; float32
round-off swamps the difference quotient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ComplexTensor, backward, no_grad

__all__ = ["grad_check", "DeterminismError"]


class DeterminismError(RuntimeError):
    """The closure returned different values on identical repeated calls."""


def grad_check(fn: Callable[[], ComplexTensor],
               params: Sequence[ComplexTensor],
               step: float = 1e-5,
               n_samples: int = 16,
               rng: np.random.Generator | None = None) -> float:
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()

    out = fn()
    with no_grad():
        probe = fn()
    if out.item() != probe.item():
        raise DeterminismError("closure is not deterministic: "
                               f"{out.item()!r} != {probe.item()!r}")
    backward(out)
    resolution = 1e-7 * max(1.0, abs(out.item()))

    worst = 0.0
    for p in params:
        flat_n = p.size
        k = min(n_samples, flat_n)
        picks = rng.choice(flat_n, size=k, replace=False)
        for part_name in ("real", "imag"):
            arr = getattr(p, part_name)
            grad = p.grad[0 if part_name == "real" else 1] if p.grad is not None else None
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1) if grad is not None else None
            for j in picks:
                keep = flat[j]
                flat[j] = keep + step
                with no_grad():
                    f_plus = fn().item()
                flat[j] = keep - step
                with no_grad():
                    f_minus = fn().item()
                flat[j] = keep
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = float(gflat[j]) if gflat is not None else 0.0
                if max(abs(analytic), abs(numeric)) < resolution:
                    continue
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
