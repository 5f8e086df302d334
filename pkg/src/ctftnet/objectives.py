"""Training losses on waveforms: multi-resolution STFT terms plus SI-SDR.

Every loss builds a scalar on the autodiff tape, so gradients flow back
through the differentiable STFT into the network.  Targets are usually
plain (untracked) signals and take the fast FFT path; tracked estimates go
through the matmul route, which agrees with the FFT to ~1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core as C
from .core import ComplexTensor
from .dsp import StftConfig, Waveform, stft, stft_graph

__all__ = [
    "DEFAULT_RESOLUTIONS", "SR_RESOLUTION", "LossConfig", "LossReport",
    "spectral_convergence", "log_magnitude", "mr_stft_loss_real",
    "mr_stft_loss_complex", "sr_stft_loss", "si_sdr_loss", "total_loss",
    "batch_total_loss",
]

_EPS_SPECTRAL = 1e-7
_EPS_SISDR = 1e-8
_SISDR_CAP = 100.0

DEFAULT_RESOLUTIONS = ((256, 128, 256), (512, 256, 512), (1024, 512, 1024))
SR_RESOLUTION = (320, 80, 320)

_SPECTRAL_VARIANTS = ("mr_real", "mr_complex", "sr")


@dataclass(frozen=True)
class LossConfig:
    """Selects the spectral loss family and the SI-SDR term.

    ``spectral`` is one of ``mr_real`` (default multi-resolution loss on real
    parts), ``mr_complex`` (adds the imaginary-part terms), or ``sr`` (the
    single 320/80/320 resolution).
    """

    spectral: str = "mr_real"
    use_si_sdr: bool = True
    si_weight: float = 1.0
    resolutions: tuple = DEFAULT_RESOLUTIONS

    def __post_init__(self):
        if self.spectral not in _SPECTRAL_VARIANTS:
            raise ValueError(f"spectral must be one of {_SPECTRAL_VARIANTS}, "
                             f"got {self.spectral!r}")
        if not self.resolutions:
            raise ValueError("resolutions must be non-empty")
        if self.si_weight <= 0:
            raise ValueError("si_weight must be positive")

    def stft_configs(self):
        res = (SR_RESOLUTION,) if self.spectral == "sr" else tuple(self.resolutions)
        return [StftConfig(n_fft=n, hop=h, win_length=w) for n, h, w in res]


@dataclass
class LossReport:
    """One scalar per component; ``total`` is their (weighted) sum.

    ``graph`` is the scalar tape node behind ``total`` so callers can run
    backward(); it is None only if constructed manually.
    """

    total: float
    components: dict
    graph: ComplexTensor | None = field(default=None, repr=False, compare=False)


def _as_signal(x) -> ComplexTensor:
    if isinstance(x, Waveform):
        return ComplexTensor(x.samples)
    if isinstance(x, ComplexTensor):
        return x
    return ComplexTensor(np.asarray(x))


def _check_pair(target, estimate):
    if isinstance(target, Waveform) and isinstance(estimate, Waveform):
        if target.sample_rate != estimate.sample_rate:
            raise ValueError(f"sample rates differ: {target.sample_rate} vs "
                             f"{estimate.sample_rate}")
    t, e = _as_signal(target), _as_signal(estimate)
    if t.shape != e.shape:
        raise ValueError(f"signal shapes differ: {t.shape} vs {e.shape}")
    if t.ndim != 1:
        raise ValueError(f"losses operate on single clips, got shape {t.shape}")
    return t, e


def _abs_r(x: ComplexTensor) -> ComplexTensor:
    # |x| elementwise for real-valued tensors, with a clean subgradient at 0
    return C.add(C.crelu(x), C.crelu(C.neg(x)))


def _const(value, dtype) -> ComplexTensor:
    return ComplexTensor(np.asarray(value, dtype))


def _spectrum(sig: ComplexTensor, cfg: StftConfig) -> ComplexTensor:
    """[F, T] complex spectrum; FFT shortcut for signals off the tape."""
    if sig.requires_grad or sig._parents is not None:
        return stft_graph(sig, cfg)
    fast = stft(Waveform(sig.real, 1), cfg)
    return fast.data


def spectral_convergence(x_part: ComplexTensor, est_part: ComplexTensor) -> ComplexTensor:
    """|| X - X^ ||_F / (||X||_F + eps) on one real-valued spectral part."""
    if x_part.shape != est_part.shape:
        raise ValueError(f"shape mismatch: {x_part.shape} vs {est_part.shape}")
    diff = C.sub(x_part, est_part)
    num = C.sqrt_r(C.tsum(C.mul(diff, diff)))
    den = C.sqrt_r(C.tsum(C.mul(x_part, x_part)))
    return C.rdiv(num, C.add(den, _const(_EPS_SPECTRAL, x_part.dtype)))


def log_magnitude(x_part: ComplexTensor, est_part: ComplexTensor) -> ComplexTensor:
    """mean | log(|X|+eps) - log(|X^|+eps) | on one real-valued spectral part."""
    if x_part.shape != est_part.shape:
        raise ValueError(f"shape mismatch: {x_part.shape} vs {est_part.shape}")
    eps = _const(_EPS_SPECTRAL, x_part.dtype)
    lx = C.log_r(C.add(_abs_r(x_part), eps))
    le = C.log_r(C.add(_abs_r(est_part), eps))
    return C.tmean(_abs_r(C.sub(lx, le)))


def _resolution_terms(t: ComplexTensor, e: ComplexTensor, cfg: StftConfig,
                      parts=("real",)):
    spec_t = _spectrum(t, cfg)
    spec_e = _spectrum(e, cfg)
    out = {}
    for part in parts:
        take = C.real if part == "real" else C.imag
        xt, xe = take(spec_t), take(spec_e)
        out[f"sc_{part}_{cfg.n_fft}"] = spectral_convergence(xt, xe)
        out[f"mag_{part}_{cfg.n_fft}"] = log_magnitude(xt, xe)
    return out


def _spectral_loss(target, estimate, configs, parts):
    t, e = _check_pair(target, estimate)
    inv_s = 1.0 / len(configs)
    total = None
    components = {}
    for cfg in configs:
        for name, term in _resolution_terms(t, e, cfg, parts).items():
            term = C.mul(term, _const(inv_s, t.dtype))
            components[name] = term
            total = term if total is None else C.add(total, term)
    return total, components


def mr_stft_loss_real(target, estimate, resolutions=DEFAULT_RESOLUTIONS) -> ComplexTensor:
    """(1/S) sum_s [SC + MAG] over the real spectral parts."""
    configs = [StftConfig(n_fft=n, hop=h, win_length=w) for n, h, w in resolutions]
    return _spectral_loss(target, estimate, configs, ("real",))[0]


def mr_stft_loss_complex(target, estimate,
                         resolutions=DEFAULT_RESOLUTIONS) -> ComplexTensor:
    """Real-part terms plus the same terms on the imaginary parts."""
    configs = [StftConfig(n_fft=n, hop=h, win_length=w) for n, h, w in resolutions]
    return _spectral_loss(target, estimate, configs, ("real", "imag"))[0]


def sr_stft_loss(target, estimate) -> ComplexTensor:
    """SC + MAG at the single 320/80/320 resolution."""
    n, h, w = SR_RESOLUTION
    return _spectral_loss(target, estimate,
                          [StftConfig(n_fft=n, hop=h, win_length=w)], ("real",))[0]


def si_sdr_loss(target, estimate) -> ComplexTensor:
    """Negated scale-invariant SDR, clamped to +-100 dB before negation."""
    t, e = _check_pair(target, estimate)
    s = C.sub(t, C.tmean(t))
    s_hat = C.sub(e, C.tmean(e))
    energy = C.tsum(C.mul(s, s))
    if float(energy.real) == 0.0:
        raise ValueError("SI-SDR is undefined for an identically zero target")
    beta = C.rdiv(C.tsum(C.mul(s_hat, s)), energy)
    proj = C.mul(beta, s)
    err = C.sub(s_hat, proj)
    ratio = C.rdiv(C.tsum(C.mul(proj, proj)),
                   C.add(C.tsum(C.mul(err, err)), _const(_EPS_SISDR, t.dtype)))
    si = C.scale(C.log_r(ratio), 10.0 / np.log(10.0))
    return C.neg(C.clip_r(si, -_SISDR_CAP, _SISDR_CAP))


def total_loss(target, estimate, cfg: LossConfig = LossConfig()) -> LossReport:
    """Spectral family selected by cfg plus (optionally) weighted SI-SDR."""
    t, e = _check_pair(target, estimate)
    parts = ("real", "imag") if cfg.spectral == "mr_complex" else ("real",)
    total, components = _spectral_loss(t, e, cfg.stft_configs(), parts)
    if cfg.use_si_sdr:
        term = C.mul(si_sdr_loss(t, e), _const(cfg.si_weight, t.dtype))
        components["si_sdr"] = term
        total = C.add(total, term)
    return LossReport(total=float(total.real),
                      components={k: float(v.real) for k, v in components.items()},
                      graph=total)


def batch_total_loss(target, estimate, cfg: LossConfig = LossConfig()) -> LossReport:
    """Mean of per-clip total_loss over [B, N] signals, with merged components."""
    t, e = _as_signal(target), _as_signal(estimate)
    if t.shape != e.shape or t.ndim != 2:
        raise ValueError(f"expected matching [B, N] signals, got {t.shape} "
                         f"and {e.shape}")
    b, n = t.shape
    reports = []
    for i in range(b):
        ti = C.reshape(t[i:i + 1, :], (n,))
        ei = C.reshape(e[i:i + 1, :], (n,))
        reports.append(total_loss(ti, ei, cfg))
    inv_b = _const(1.0 / b, t.dtype)
    graph = None
    for r in reports:
        term = C.mul(r.graph, inv_b)
        graph = term if graph is None else C.add(graph, term)
    components = {k: sum(r.components[k] for r in reports) / b
                  for k in reports[0].components}
    return LossReport(total=float(graph.real), components=components, graph=graph)
