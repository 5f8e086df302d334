"""Evaluation metrics: log-spectral distance, SI-SDR, and classic STOI.

These are plain numpy measurements (nothing here touches the autodiff tape).
STOI follows the classic procedure: 10 kHz resampling, silent-frame removal,
third-octave band envelopes, 30-frame segment correlations with a -15 dB
clipping bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from .dsp import StftConfig, Waveform, stft

__all__ = ["ClipMetrics", "MetricReport", "lsd", "si_sdr_metric", "stoi",
           "evaluate_pair", "aggregate"]

_LSD_CFG = StftConfig(n_fft=2048, hop=512, win_length=2048)
_LSD_EPS = 1e-9

_STOI_RATE = 10_000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEG = 30
_STOI_DYN_RANGE = 40.0
_STOI_BETA = -15.0


def _check_pair(reference: Waveform, estimate: Waveform):
    if reference.sample_rate != estimate.sample_rate:
        raise ValueError(f"sample rates differ: {reference.sample_rate} vs "
                         f"{estimate.sample_rate}")
    if len(reference) != len(estimate):
        raise ValueError(f"lengths differ: {len(reference)} vs {len(estimate)}")


def lsd(reference: Waveform, estimate: Waveform) -> float:
    """Mean over frames of the RMS log10 power-spectrum distance."""
    _check_pair(reference, estimate)
    px = np.log10(np.abs(stft(reference, _LSD_CFG).data.numpy()) ** 2 + _LSD_EPS)
    pe = np.log10(np.abs(stft(estimate, _LSD_CFG).data.numpy()) ** 2 + _LSD_EPS)
    per_frame = np.sqrt(np.mean((px - pe) ** 2, axis=0))
    return float(per_frame.mean())


def si_sdr_metric(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant SDR in dB, capped to [-100, 100]."""
    _check_pair(reference, estimate)
    s = reference.samples.astype(np.float64)
    s_hat = estimate.samples.astype(np.float64)
    s = s - s.mean()
    s_hat = s_hat - s_hat.mean()
    energy = np.dot(s, s)
    if energy == 0.0:
        raise ValueError("SI-SDR is undefined for an identically zero reference")
    beta = np.dot(s_hat, s) / energy
    proj = beta * s
    err = s_hat - proj
    ratio = np.dot(proj, proj) / (np.dot(err, err) + 1e-8)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(ratio)
    return float(np.clip(val, -100.0, 100.0))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

def _to_10k(wave: Waveform) -> np.ndarray:
    if wave.sample_rate == _STOI_RATE:
        return wave.samples.astype(np.float64)
    g = np.gcd(wave.sample_rate, _STOI_RATE)
    return resample_poly(wave.samples.astype(np.float64),
                         _STOI_RATE // g, wave.sample_rate // g)


def _stoi_window() -> np.ndarray:
    # symmetric hann without the zero endpoints (the classic convention)
    return np.hanning(_STOI_FRAME + 2)[1:-1]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames more than 40 dB below the loudest frame of the reference."""
    w = _stoi_window()
    starts = range(0, x.size - _STOI_FRAME + 1, _STOI_HOP)
    xf = np.array([w * x[i:i + _STOI_FRAME] for i in starts])
    yf = np.array([w * y[i:i + _STOI_FRAME] for i in starts])
    if xf.size == 0:
        raise ValueError("clip too short for STOI")
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    mask = energies > energies.max() - _STOI_DYN_RANGE
    xf, yf = xf[mask], yf[mask]
    n = xf.shape[0]
    out_len = (n - 1) * _STOI_HOP + _STOI_FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(n):
        sl = slice(i * _STOI_HOP, i * _STOI_HOP + _STOI_FRAME)
        xs[sl] += xf[i]
        ys[sl] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """[bands, frames] third-octave magnitudes of the 512-point STFT."""
    w = _stoi_window()
    starts = range(0, x.size - _STOI_FRAME + 1, _STOI_HOP)
    frames = np.array([w * x[i:i + _STOI_FRAME] for i in starts])
    spec = np.fft.rfft(frames, n=_STOI_NFFT, axis=1)          # [T, 257]
    power = np.abs(spec) ** 2
    f = np.linspace(0, _STOI_RATE, _STOI_NFFT + 1)[:_STOI_NFFT // 2 + 1]
    centers = _STOI_MIN_FREQ * 2.0 ** (np.arange(_STOI_BANDS) / 3.0)
    lows, highs = centers * 2.0 ** (-1 / 6), centers * 2.0 ** (1 / 6)
    bands = np.zeros((_STOI_BANDS, frames.shape[0]))
    for j in range(_STOI_BANDS):
        lo = int(np.argmin(np.abs(f - lows[j])))
        hi = int(np.argmin(np.abs(f - highs[j])))
        bands[j] = np.sqrt(power[:, lo:hi].sum(axis=1))
    return bands


def stoi(reference: Waveform, estimate: Waveform) -> float:
    """Classic short-time objective intelligibility in [0, 1]."""
    _check_pair(reference, estimate)
    if reference.duration < 0.5:
        raise ValueError("STOI needs at least 0.5 s of audio")
    x, y = _to_10k(reference), _to_10k(estimate)
    x, y = _remove_silent_frames(x, y)
    xb, yb = _band_envelopes(x), _band_envelopes(y)
    n_frames = xb.shape[1]
    if n_frames < _STOI_SEG:
        raise ValueError("clip too short for STOI after silence removal")
    clip_gain = 10.0 ** (-_STOI_BETA / 20.0)
    eps = np.finfo(float).eps
    total = 0.0
    count = 0
    for m in range(_STOI_SEG, n_frames + 1):
        xs = xb[:, m - _STOI_SEG:m]
        ys = yb[:, m - _STOI_SEG:m]
        alpha = np.sqrt((xs ** 2).sum(axis=1, keepdims=True)
                        / (ys ** 2).sum(axis=1, keepdims=True).clip(eps))
        y_prime = np.minimum(alpha * ys, xs * (1.0 + clip_gain))
        xn = xs - xs.mean(axis=1, keepdims=True)
        yn = y_prime - y_prime.mean(axis=1, keepdims=True)
        xn /= np.linalg.norm(xn, axis=1, keepdims=True).clip(eps)
        yn /= np.linalg.norm(yn, axis=1, keepdims=True).clip(eps)
        total += float((xn * yn).sum())
        count += _STOI_BANDS
    return total / count


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipMetrics:
    clip_id: str
    lsd: float
    stoi: float
    si_sdr: float


@dataclass(frozen=True)
class MetricReport:
    clips: tuple
    lsd: float
    stoi: float
    si_sdr: float


def evaluate_pair(clip_id: str, reference: Waveform, estimate: Waveform,
                  with_stoi: bool = True) -> ClipMetrics:
    return ClipMetrics(clip_id=clip_id,
                       lsd=lsd(reference, estimate),
                       stoi=stoi(reference, estimate) if with_stoi else float("nan"),
                       si_sdr=si_sdr_metric(reference, estimate))


def aggregate(clips) -> MetricReport:
    """Arithmetic mean over clips, in stable (input) order."""
    clips = tuple(clips)
    if not clips:
        raise ValueError("no clips to aggregate")
    return MetricReport(clips=clips,
                        lsd=float(np.mean([c.lsd for c in clips])),
                        stoi=float(np.mean([c.stoi for c in clips])),
                        si_sdr=float(np.mean([c.si_sdr for c in clips])))
