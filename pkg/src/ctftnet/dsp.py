"""Deterministic DSP: anti-alias filtering, resampling, analysis/synthesis STFT.

Everything here is a pure function of its inputs.  Two STFT routes exist on
purpose: a fast numpy ``rfft`` path for the data pipeline and metrics, and a
differentiable path built from core ops (matmul against a fixed DFT basis)
for use inside losses and the model boundary.  They agree to round-off and
are cross-checked in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from . import core as C
from .core import ComplexTensor

_FLOATS = (np.float32, np.float64)


class ColaError(ValueError):
    """Window/hop pair cannot be inverted by overlap-add synthesis."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = self.samples
        if not isinstance(s, np.ndarray) or s.ndim != 1 or s.dtype.type not in _FLOATS:
            raise TypeError("samples must be a 1-D float32/float64 array")
        if s.size < 1:
            raise ValueError("empty waveform")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains NaN or Inf")
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise ValueError(f"bad sample rate {self.sample_rate!r}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def window_array(kind: str, length: int, dtype=np.float64) -> np.ndarray:
    """Periodic analysis windows; ``sqrt_hann`` squares back to hann."""
    n = np.arange(length, dtype=np.float64)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if kind == "hann":
        w = hann
    elif kind == "sqrt_hann":
        w = np.sqrt(hann)
    else:
        raise ValueError(f"unknown window {kind!r}")
    return w.astype(dtype)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int
    hop: int
    win_length: int
    window: str = "hann"
    center_pad: bool = True

    def __post_init__(self):
        if not (0 < self.hop <= self.win_length <= self.n_fft):
            raise ValueError(
                f"need 0 < hop <= win_length <= n_fft, got "
                f"{self.hop}/{self.win_length}/{self.n_fft}")
        w = window_array(self.window, self.win_length)  # validates name
        # nonzero overlap-add of w^2 over the steady state (NOLA); a config
        # that fails this can never be synthesized and is almost certainly a
        # typo even for analysis-only use.
        w2 = w * w
        cover = np.array([w2[r::self.hop].sum() for r in range(self.hop)])
        if cover.min() <= 1e-12:
            raise ValueError("window/hop pair has zero overlap-add coverage")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def padded_window(self, dtype=np.float64) -> np.ndarray:
        """Analysis window centred inside an n_fft-long frame."""
        w = window_array(self.window, self.win_length, dtype)
        if self.win_length == self.n_fft:
            return w
        out = np.zeros(self.n_fft, dtype=dtype)
        lo = (self.n_fft - self.win_length) // 2
        out[lo:lo + self.win_length] = w
        return out

    def frame_count(self, n_samples: int) -> int:
        padded = n_samples + (self.n_fft if self.center_pad else 0)
        if padded < self.n_fft:
            raise ValueError(f"{n_samples} samples is shorter than one frame")
        return (padded - self.n_fft) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    data: ComplexTensor
    config: StftConfig
    origin_rate: int

    def __post_init__(self):
        if self.data.shape[-2] != self.config.n_bins:
            raise ValueError(
                f"expected {self.config.n_bins} bins, got {self.data.shape[-2]}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True)
class BiquadCascade:
    sos: np.ndarray                  # [n_sections, 6] (b0 b1 b2 a0 a1 a2), a0 = 1
    design: str
    cutoff_hz: float
    order: int

    def __post_init__(self):
        sos = np.asarray(self.sos, dtype=np.float64)
        if sos.ndim != 2 or sos.shape[1] != 6:
            raise ValueError("sos must be [n_sections, 6]")
        if not np.allclose(sos[:, 3], 1.0):
            raise ValueError("sections must be normalized to a0 = 1")
        if self.order != 2 * sos.shape[0]:
            raise ValueError("order must equal 2 x number of sections")
        for a1, a2 in sos[:, 4:6]:
            if np.any(np.abs(np.roots([1.0, a1, a2])) >= 1.0):
                raise ValueError("unstable section: pole on or outside unit circle")
        object.__setattr__(self, "sos", sos)

    @property
    def sections(self):
        return [tuple(row[[0, 1, 2, 4, 5]]) for row in self.sos]

    def gain_at(self, freq_hz: float, rate: int) -> float:
        """|H| at one frequency, evaluated directly from the coefficients."""
        z = np.exp(1j * 2.0 * np.pi * freq_hz / rate)
        h = 1.0 + 0.0j
        for b0, b1, b2, _, a1, a2 in self.sos:
            h *= (b0 + b1 / z + b2 / z ** 2) / (1.0 + a1 / z + a2 / z ** 2)
        return float(np.abs(h))


# ---------------------------------------------------------------------------
# filtering and resampling
# ---------------------------------------------------------------------------

def design_butterworth_lowpass(order: int, cutoff_hz: float, rate: int) -> BiquadCascade:
    if order < 2 or order % 2:
        raise ValueError(f"order must be even and >= 2, got {order}")
    if not 0.0 < cutoff_hz < rate / 2.0:
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, {rate / 2}) Hz")
    sos = scipy.signal.butter(order, cutoff_hz, btype="low", fs=rate, output="sos")
    return BiquadCascade(sos, "butterworth_lowpass", float(cutoff_hz), order)


def filter_zero_phase(wave: Waveform, filt: BiquadCascade) -> Waveform:
    """Forward-backward filtering: zero phase, same length and rate."""
    x = wave.samples.astype(np.float64)
    # settle length scales with 1/cutoff; scipy's default pad is far too short
    # for e.g. order 6 at 990 Hz on 48 kHz material
    settle = max(24, int(12 * wave.sample_rate / max(filt.cutoff_hz, 1.0)))
    y = scipy.signal.sosfiltfilt(filt.sos, x, padlen=min(settle, len(x) - 1))
    return Waveform(y.astype(wave.samples.dtype), wave.sample_rate)


def downsample(wave: Waveform, factor: int) -> Waveform:
    if factor < 1 or wave.sample_rate % factor:
        raise ValueError(f"factor {factor} does not divide rate {wave.sample_rate}")
    if factor == 1:
        return wave
    return Waveform(wave.samples[::factor].copy(), wave.sample_rate // factor)


_SINC_CUTOFF = 0.47          # cycles/input-sample; transition ends below Nyquist
_SINC_ZERO_CROSSINGS = 64
_KAISER_BETA = 8.6


def sinc_interp_kernel(factor: int, dtype=np.float64) -> np.ndarray:
    """Kaiser-windowed sinc interpolation kernel with DC gain ~ factor."""
    half = _SINC_ZERO_CROSSINGS * factor
    n = np.arange(-half, half + 1, dtype=np.float64)
    h = 2.0 * _SINC_CUTOFF * np.sinc(2.0 * _SINC_CUTOFF * n / factor)
    h *= np.kaiser(2 * half + 1, _KAISER_BETA)
    return h.astype(dtype)


def sinc_upsample(wave: Waveform, factor: int) -> Waveform:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return wave
    x = wave.samples.astype(np.float64)
    stuffed = np.zeros(x.size * factor)
    stuffed[::factor] = x
    up = scipy.signal.fftconvolve(stuffed, sinc_interp_kernel(factor), mode="same")
    return Waveform(up.astype(wave.samples.dtype), wave.sample_rate * factor)


def simulate_low_rate(wave: Waveform, lr_rate: int,
                      filter_order: int = 6) -> tuple[Waveform, Waveform]:
    """Bandwidth-reduction chain: anti-alias filter, decimate, sinc upsample.

    Returns ``(low_rate, upsampled)`` where ``upsampled`` is back at the input
    rate with exactly the input length.
    """
    if wave.sample_rate % lr_rate:
        raise ValueError(f"{lr_rate} Hz does not divide {wave.sample_rate} Hz")
    factor = wave.sample_rate // lr_rate
    if factor == 1:
        return wave, wave
    filt = design_butterworth_lowpass(filter_order, 0.99 * (lr_rate / 2.0),
                                      wave.sample_rate)
    low = downsample(filter_zero_phase(wave, filt), factor)
    up = sinc_upsample(low, factor)
    return low, Waveform(up.samples[: len(wave)], wave.sample_rate)


# ---------------------------------------------------------------------------
# STFT: fast numpy route
# ---------------------------------------------------------------------------

def _framed(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if cfg.center_pad:
        x = np.pad(x, cfg.n_fft // 2, mode="reflect")
    if x.size < cfg.n_fft:
        raise ValueError("signal shorter than one analysis frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop]
    return frames * cfg.padded_window(x.dtype)


def stft(wave: Waveform, cfg: StftConfig) -> Spectrogram:
    spec = np.fft.rfft(_framed(wave.samples, cfg), n=cfg.n_fft, axis=-1).T
    data = ComplexTensor(np.ascontiguousarray(spec.real.astype(wave.samples.dtype)),
                         np.ascontiguousarray(spec.imag.astype(wave.samples.dtype)))
    return Spectrogram(data, cfg, wave.sample_rate)


def _ola_window_sq(cfg: StftConfig, n_frames: int, length: int,
                   dtype=np.float64) -> np.ndarray:
    w2 = cfg.padded_window(dtype) ** 2
    den = np.zeros(length, dtype=dtype)
    for t in range(n_frames):
        den[t * cfg.hop:t * cfg.hop + cfg.n_fft] += w2
    return den


def _check_cola(cfg: StftConfig, den: np.ndarray) -> None:
    lo, hi = cfg.n_fft, den.size - cfg.n_fft
    if hi <= lo:
        return  # too short to have a steady state; edge math still exact
    interior = den[lo:hi]
    if interior.max() - interior.min() > 1e-10 * interior.max():
        raise ColaError(
            f"window {cfg.window!r} with hop {cfg.hop} is not constant-overlap-add; "
            "synthesis would be frame-rate modulated")


def istft(spec: Spectrogram, cfg: StftConfig, out_length: int) -> Waveform:
    if spec.config != cfg:
        raise ValueError("config does not match the spectrogram")
    frames = np.fft.irfft(spec.data.numpy().T, n=cfg.n_fft, axis=-1).astype(np.float64)
    frames *= cfg.padded_window(np.float64)
    n_frames = frames.shape[0]
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    num = np.zeros(total)
    for t in range(n_frames):
        num[t * cfg.hop:t * cfg.hop + cfg.n_fft] += frames[t]
    den = _ola_window_sq(cfg, n_frames, total)
    _check_cola(cfg, den)
    pad = cfg.n_fft // 2 if cfg.center_pad else 0
    if pad + out_length > total:
        raise ValueError(f"cannot recover {out_length} samples from {n_frames} frames")
    num, den = num[pad:pad + out_length], den[pad:pad + out_length]
    tiny = den < 1e-10 * den.max()
    if np.any(tiny):
        den = np.where(tiny, 1.0, den)
    out = (num / den).astype(spec.data.dtype)
    return Waveform(out, spec.origin_rate)


# ---------------------------------------------------------------------------
# STFT: differentiable route (core ops only)
# ---------------------------------------------------------------------------

_BASIS_CACHE: dict = {}


def dft_basis(n_fft: int, dtype=np.float64) -> ComplexTensor:
    """[n_fft, F] one-sided DFT matrix: X[k] = sum_n x[n] e^{-j2pi kn/N}."""
    key = ("fwd", n_fft, np.dtype(dtype).name)
    if key not in _BASIS_CACHE:
        n = np.arange(n_fft)[:, None]
        k = np.arange(n_fft // 2 + 1)[None, :]
        ang = 2.0 * np.pi * k * n / n_fft
        _BASIS_CACHE[key] = ComplexTensor(np.cos(ang).astype(dtype),
                                          (-np.sin(ang)).astype(dtype))
    return _BASIS_CACHE[key]


def idft_basis(n_fft: int, dtype=np.float64) -> ComplexTensor:
    """[F, n_fft] half-spectrum inverse: x[n] = Re sum_k c_k X[k] e^{+j2pi kn/N}."""
    key = ("inv", n_fft, np.dtype(dtype).name)
    if key not in _BASIS_CACHE:
        nb = n_fft // 2 + 1
        k = np.arange(nb)[:, None]
        n = np.arange(n_fft)[None, :]
        ang = 2.0 * np.pi * k * n / n_fft
        c = np.full((nb, 1), 2.0 / n_fft)
        c[0, 0] = 1.0 / n_fft
        if n_fft % 2 == 0:
            c[-1, 0] = 1.0 / n_fft
        _BASIS_CACHE[key] = ComplexTensor((c * np.cos(ang)).astype(dtype),
                                          (c * np.sin(ang)).astype(dtype))
    return _BASIS_CACHE[key]


def stft_graph(x: ComplexTensor, cfg: StftConfig) -> ComplexTensor:
    """Differentiable STFT of real-valued [..., L] tensors -> [..., F, T]."""
    dtype = x.dtype
    if cfg.center_pad:
        p = cfg.n_fft // 2
        x = C.pad_reflect(x, axis=x.ndim - 1, before=p, after=p)
    frames = C.frame(x, cfg.n_fft, cfg.hop)                 # [..., T, N]
    win = ComplexTensor(cfg.padded_window(dtype))
    spec = C.complex_matmul(C.mul(frames, win), dft_basis(cfg.n_fft, dtype))
    perm = tuple(range(spec.ndim - 2)) + (spec.ndim - 1, spec.ndim - 2)
    return C.transpose(spec, perm)                          # [..., F, T]


def istft_graph(spec: ComplexTensor, cfg: StftConfig, out_length: int) -> ComplexTensor:
    """Differentiable inverse of ``stft_graph``; returns real [..., out_length]."""
    dtype = spec.dtype
    perm = tuple(range(spec.ndim - 2)) + (spec.ndim - 1, spec.ndim - 2)
    frames = C.real(C.complex_matmul(C.transpose(spec, perm),
                                     idft_basis(cfg.n_fft, dtype)))
    win = ComplexTensor(cfg.padded_window(dtype))
    n_frames = spec.shape[-1]
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    num = C.overlap_add(C.mul(frames, win), cfg.hop, total)
    den = _ola_window_sq(cfg, n_frames, total)
    _check_cola(cfg, den)
    pad = cfg.n_fft // 2 if cfg.center_pad else 0
    if pad + out_length > total:
        raise ValueError(f"cannot recover {out_length} samples from {n_frames} frames")
    den = den[pad:pad + out_length]
    den = np.where(den < 1e-10 * den.max(), 1.0, den)
    sliced = num[..., pad:pad + out_length]
    return C.rdiv(sliced, ComplexTensor(den.astype(dtype)))
