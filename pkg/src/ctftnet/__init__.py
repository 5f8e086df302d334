"""Complex-domain speech super-resolution toolkit.

A self-contained implementation of a complex-valued encoder/decoder network
for speech bandwidth extension, together with the pieces needed to train and
evaluate it deterministically: a complex-tensor autodiff core, STFT/resampling
DSP, multi-resolution spectral + SI-SDR objectives, LSD/STOI/SI-SDR metrics,
a corpus pipeline, and a reproducible training engine with a CLI.
"""

__version__ = "0.1.0"

from . import core  # noqa: F401
