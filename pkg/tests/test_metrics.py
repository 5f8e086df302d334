"""Metric oracles: constructed LSD offsets, SNR identities, STOI behaviour."""

import numpy as np
import pytest

from ctftnet.dsp import Waveform
from ctftnet.metrics import (ClipMetrics, aggregate, evaluate_pair, lsd,
                             si_sdr_metric, stoi)


def speech_like(seed, n=32000, rate=16000):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    f0 = rng.uniform(120, 250)
    x = np.zeros(n)
    for k in range(1, 9):
        x += rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * k * f0 * t
                                                + rng.uniform(0, 2 * np.pi))
    x *= 0.5 + 0.5 * np.sin(2 * np.pi * 2.3 * t) ** 2   # syllabic envelope
    x += 0.01 * rng.standard_normal(n)
    return Waveform((0.3 * x / np.abs(x).max()).astype(np.float64), rate)


# ---------------------------------------------------------------------------
# LSD
# ---------------------------------------------------------------------------

def test_lsd_identity_is_zero():
    x = speech_like(0)
    assert lsd(x, x) == 0.0


def test_lsd_constant_power_offset():
    # |X̂|² = 10·|X|² everywhere -> per-bin log10 distance exactly 1
    x = speech_like(1)
    scaled = Waveform(x.samples * np.sqrt(10.0), x.sample_rate)
    # the 1e-9 floor perturbs only bins ~1e-9 in power; loud signal keeps
    # every frame's RMS at 1.0 to within the tolerance
    np.testing.assert_allclose(lsd(x, scaled), 1.0, atol=1e-4)


def test_lsd_mismatch_errors():
    x = speech_like(2)
    with pytest.raises(ValueError):
        lsd(x, Waveform(x.samples[:-1], x.sample_rate))
    with pytest.raises(ValueError):
        lsd(x, Waveform(x.samples, 8000))


# ---------------------------------------------------------------------------
# SI-SDR metric
# ---------------------------------------------------------------------------

def test_si_sdr_metric_identity_and_polarity_cap():
    base = speech_like(3)
    x = Waveform(2.0 * base.samples, base.sample_rate)
    assert si_sdr_metric(x, x) == 100.0
    flipped = Waveform(-x.samples, x.sample_rate)
    assert si_sdr_metric(x, flipped) == 100.0
    # the 1e-8 error floor is absolute, so a scaled copy reaches the cap
    # only while alpha^2 * signal energy stays above 100
    for alpha in (0.5, 5.0):
        scaled = Waveform(alpha * x.samples, x.sample_rate)
        assert si_sdr_metric(x, scaled) == 100.0


def test_si_sdr_metric_equal_power_orthogonal_noise():
    x = speech_like(4)
    s = x.samples - x.samples.mean()
    rng = np.random.default_rng(5)
    n = rng.standard_normal(s.size)
    n -= n.mean()
    n -= (np.dot(n, s) / np.dot(s, s)) * s          # exactly orthogonal
    n *= np.linalg.norm(s) / np.linalg.norm(n)      # equal power
    est = Waveform(s + n, x.sample_rate)
    ref = Waveform(s, x.sample_rate)
    assert abs(si_sdr_metric(ref, est)) < 0.1


def test_si_sdr_metric_zero_reference():
    z = Waveform(np.zeros(100), 16000)
    with pytest.raises(ValueError):
        si_sdr_metric(z, z)


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

def test_stoi_self_intelligibility():
    for seed in (6, 7):
        x = speech_like(seed)
        assert stoi(x, x) >= 0.99


def test_stoi_decorrelated_noise_scores_low():
    x = speech_like(8)
    rng = np.random.default_rng(9)
    noise = Waveform(0.3 * rng.standard_normal(len(x)), x.sample_rate)
    assert stoi(x, noise) <= 0.2


def test_stoi_degraded_orders_sensibly():
    x = speech_like(10)
    rng = np.random.default_rng(11)
    light = Waveform(x.samples + 0.01 * rng.standard_normal(len(x)),
                     x.sample_rate)
    heavy = Waveform(x.samples + 0.5 * rng.standard_normal(len(x)),
                     x.sample_rate)
    s_light, s_heavy = stoi(x, light), stoi(x, heavy)
    assert s_light > s_heavy
    assert 0.0 <= s_heavy <= s_light <= 1.0 + 1e-9


def test_stoi_too_short_rejected():
    x = speech_like(12, n=4000)   # 0.25 s
    with pytest.raises(ValueError):
        stoi(x, x)


def test_stoi_works_at_48k_input():
    x = speech_like(13, n=96000, rate=48000)
    assert stoi(x, x) >= 0.99


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_evaluate_pair_and_aggregate():
    x, y = speech_like(14), speech_like(15)
    noisy = Waveform(x.samples + 0.05 * y.samples, x.sample_rate)
    a = evaluate_pair("clip-a", x, x)
    b = evaluate_pair("clip-b", x, noisy)
    rep = aggregate([a, b])
    assert rep.clips == (a, b)
    np.testing.assert_allclose(rep.lsd, (a.lsd + b.lsd) / 2)
    np.testing.assert_allclose(rep.stoi, (a.stoi + b.stoi) / 2)
    np.testing.assert_allclose(rep.si_sdr, (a.si_sdr + b.si_sdr) / 2)
    assert isinstance(a, ClipMetrics) and a.lsd == 0.0 and a.si_sdr == 100.0


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_stoi_skippable_in_evaluate_pair():
    x = speech_like(16)
    m = evaluate_pair("c", x, x, with_stoi=False)
    assert np.isnan(m.stoi) and m.lsd == 0.0
