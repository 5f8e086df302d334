"""Corpus pipeline tests: WAV round trips, length standardization, pair
synthesis band limits, manifest determinism, caching, and batch iteration."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctftnet.data import (Manifest, ManifestRules, PairedExample,
                          StaleCacheError, WavError, band_limit_db,
                          batch_iterator, build_manifest, cache_path,
                          load_pair, make_lr_hr_pair, pair_digest,
                          prepare_cache, probe_wav, read_wav,
                          standardize_length, synthesize_pair, write_wav)
from ctftnet.dsp import Waveform


def tone(freq, seconds, rate, amp=0.5, dtype=np.float32):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(dtype), rate)


def noise(seconds, rate, seed=0, amp=0.3):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    return Waveform((amp * rng.standard_normal(n)).astype(np.float32), rate)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

class TestWavIo:
    def test_float32_round_trip_is_bit_exact(self, tmp_path):
        wave = noise(0.1, 48000, seed=1)
        write_wav(tmp_path / "a.wav", wave, encoding="float32")
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 48000
        np.testing.assert_array_equal(back.samples, wave.samples)

    def test_pcm16_round_trip_within_quantization(self, tmp_path):
        wave = tone(440, 0.1, 16000, amp=0.8)
        write_wav(tmp_path / "a.wav", wave, encoding="pcm16")
        back = read_wav(tmp_path / "a.wav")
        assert np.max(np.abs(back.samples - wave.samples)) <= 0.5 / 32768

    def test_pcm16_full_scale_negative_maps_to_minus_one(self, tmp_path):
        raw = np.array([-32768, -1, 0, 1, 32767], dtype="<i2")
        payload = raw.tobytes()
        header = (b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
                  + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000,
                                          16000, 2, 16)
                  + b"data" + struct.pack("<I", len(payload)))
        (tmp_path / "a.wav").write_bytes(header + payload)
        back = read_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(
            back.samples,
            [-1.0, -1 / 32768, 0.0, 1 / 32768, 32767 / 32768], atol=0)

    def test_pcm16_writer_clips_out_of_range(self, tmp_path):
        wave = Waveform(np.array([1.5, -1.5], dtype=np.float32), 8000)
        write_wav(tmp_path / "a.wav", wave, encoding="pcm16")
        back = read_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(back.samples, [32767 / 32768, -1.0])

    def test_stereo_keeps_channel_zero_with_warning(self, tmp_path):
        left = np.array([0.1, 0.2, 0.3], dtype="<f4")
        right = np.array([-0.1, -0.2, -0.3], dtype="<f4")
        payload = np.column_stack([left, right]).ravel().tobytes()
        header = (b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
                  + b"fmt " + struct.pack("<IHHIIHH", 16, 3, 2, 8000,
                                          64000, 8, 32)
                  + b"data" + struct.pack("<I", len(payload)))
        (tmp_path / "a.wav").write_bytes(header + payload)
        with pytest.warns(UserWarning, match="channel 0"):
            back = read_wav(tmp_path / "a.wav")
        np.testing.assert_array_equal(back.samples, left)

    def test_probe_reads_header_only(self, tmp_path):
        wave = noise(0.25, 48000)
        write_wav(tmp_path / "a.wav", wave)
        assert probe_wav(tmp_path / "a.wav") == (48000, 12000, 1)

    def test_rejects_non_riff(self, tmp_path):
        (tmp_path / "a.wav").write_bytes(b"\x00" * 64)
        with pytest.raises(WavError, match="RIFF"):
            read_wav(tmp_path / "a.wav")

    def test_rejects_missing_data_chunk(self, tmp_path):
        header = (b"RIFF" + struct.pack("<I", 28) + b"WAVE"
                  + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000,
                                          16000, 2, 16))
        (tmp_path / "a.wav").write_bytes(header)
        with pytest.raises(WavError, match="missing"):
            read_wav(tmp_path / "a.wav")

    def test_rejects_truncated_payload(self, tmp_path):
        wave = noise(0.1, 8000)
        write_wav(tmp_path / "a.wav", wave)
        blob = (tmp_path / "a.wav").read_bytes()
        (tmp_path / "a.wav").write_bytes(blob[:len(blob) // 2])
        with pytest.raises(WavError, match="truncated"):
            read_wav(tmp_path / "a.wav")

    def test_rejects_unsupported_24_bit(self, tmp_path):
        payload = b"\x00" * 9
        header = (b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
                  + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000,
                                          24000, 3, 24)
                  + b"data" + struct.pack("<I", len(payload)))
        (tmp_path / "a.wav").write_bytes(header + payload)
        with pytest.raises(WavError, match="unsupported"):
            read_wav(tmp_path / "a.wav")
        with pytest.raises(WavError, match="unsupported"):
            probe_wav(tmp_path / "a.wav")


# ---------------------------------------------------------------------------
# standardize_length
# ---------------------------------------------------------------------------

class TestStandardizeLength:
    def test_short_clip_zero_padded_at_end(self):
        wave = noise(2.0, 48000)
        out = standardize_length(wave, 4.0)
        assert len(out) == 192000
        np.testing.assert_array_equal(out.samples[:96000], wave.samples)
        assert not out.samples[96000:].any()

    def test_long_clip_trimmed_at_end(self):
        wave = noise(7.0, 48000)
        out = standardize_length(wave, 4.0)
        assert len(out) == 192000
        np.testing.assert_array_equal(out.samples, wave.samples[:192000])

    def test_exact_clip_returned_unchanged(self):
        wave = noise(4.0, 48000)
        assert standardize_length(wave, 4.0) is wave

    @given(n=st.integers(1, 40000), target=st.floats(0.05, 2.0))
    @settings(max_examples=25, deadline=None)
    def test_idempotent(self, n, target):
        wave = Waveform(np.linspace(-1, 1, n, dtype=np.float32), 16000)
        once = standardize_length(wave, target)
        twice = standardize_length(once, target)
        assert len(once) == int(round(target * 16000))
        np.testing.assert_array_equal(twice.samples, once.samples)


# ---------------------------------------------------------------------------
# pair synthesis
# ---------------------------------------------------------------------------

class TestPairs:
    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="length"):
            PairedExample(hr=noise(1.0, 8000), lr_upsampled=noise(0.5, 8000),
                          source_lr_rate=4000)

    def test_mismatched_rates_rejected(self):
        a = Waveform(np.zeros(8000, dtype=np.float32), 8000)
        b = Waveform(np.zeros(8000, dtype=np.float32), 16000)
        with pytest.raises(ValueError, match="rate"):
            PairedExample(hr=a, lr_upsampled=b, source_lr_rate=4000)

    def test_degenerate_rate_gives_identical_branches(self):
        hr = noise(0.5, 16000, seed=3)
        pair = make_lr_hr_pair(hr, 16000)
        np.testing.assert_array_equal(pair.lr_upsampled.samples, hr.samples)

    def test_non_integer_factor_rejected(self):
        with pytest.raises(ValueError):
            make_lr_hr_pair(noise(0.25, 48000), 7000)

    def test_low_tone_survives_round_trip_within_half_db(self):
        hr = tone(500, 1.0, 48000)
        pair = make_lr_hr_pair(hr, 2000)
        spec_in = np.abs(np.fft.rfft(hr.samples.astype(np.float64)))
        spec_out = np.abs(np.fft.rfft(
            pair.lr_upsampled.samples.astype(np.float64)))
        k = 500  # 1 s of signal: bin index == frequency in Hz
        drop_db = 20 * np.log10(spec_out[k] / spec_in[k])
        assert abs(drop_db) < 0.5

    def test_white_noise_band_limited_to_minus_60_db(self):
        pair = make_lr_hr_pair(noise(1.0, 48000, seed=7), 2000)
        assert band_limit_db(pair) <= -60.0

    def test_band_limit_all_desk_rates(self):
        for lr_rate in (2000, 4000, 8000, 12000, 16000):
            pair = make_lr_hr_pair(noise(0.5, 48000, seed=11), lr_rate)
            assert band_limit_db(pair) <= -60.0, lr_rate

    def test_silent_pair_reports_minus_inf(self):
        silent = Waveform(np.zeros(8000, dtype=np.float32), 16000)
        pair = make_lr_hr_pair(silent, 4000)
        assert band_limit_db(pair) == -np.inf

    def test_synthesize_standardizes_then_converts_rate(self):
        src = noise(1.0, 48000, seed=5)
        pair = synthesize_pair(src, 4000, hr_rate=16000, clip_seconds=0.5)
        assert pair.hr.sample_rate == 16000
        assert len(pair.hr) == 8000
        assert band_limit_db(pair) <= -60.0


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def make_corpus(root, speakers=10, clips=2, rate=16000, seconds=0.3,
                with_mic2=True):
    rng = np.random.default_rng(99)
    for s in range(speakers):
        d = root / f"p{s + 1:03d}"
        d.mkdir(parents=True)
        for c in range(clips):
            samples = 0.3 * rng.standard_normal(int(seconds * rate))
            wave = Waveform(samples.astype(np.float32), rate)
            write_wav(d / f"p{s + 1:03d}_{c + 1:03d}_mic1.wav", wave)
            if with_mic2:
                write_wav(d / f"p{s + 1:03d}_{c + 1:03d}_mic2.wav", wave)
    return root


class TestManifest:
    def test_split_counts_and_filters(self, tmp_path):
        make_corpus(tmp_path, speakers=10)
        rules = ManifestRules(n_test=2, n_val=3, exclude_speakers=("p003",))
        manifest = build_manifest(tmp_path, rules)
        speakers = {r.speaker for r in manifest.records}
        assert "p003" not in speakers and len(speakers) == 9
        assert all("mic1" in r.path for r in manifest.records)
        by_split = {s: {r.speaker for r in manifest.split(s)}
                    for s in ("train", "val", "test")}
        assert len(by_split["test"]) == 2 and len(by_split["val"]) == 3
        assert len(by_split["train"]) == 4
        assert not (by_split["train"] & by_split["val"] & by_split["test"])

    def test_records_carry_duration_and_rate(self, tmp_path):
        make_corpus(tmp_path, speakers=3, seconds=0.5)
        manifest = build_manifest(tmp_path, ManifestRules(n_test=1, n_val=1))
        for r in manifest.records:
            assert r.rate == 16000 and r.duration == pytest.approx(0.5)

    def test_same_rules_byte_identical_jsonl(self, tmp_path):
        make_corpus(tmp_path / "corpus", speakers=6)
        rules = ManifestRules(n_test=2, n_val=1)
        for run in ("a", "b"):
            build_manifest(tmp_path / "corpus", rules).save(
                tmp_path / f"{run}.jsonl")
        assert ((tmp_path / "a.jsonl").read_bytes()
                == (tmp_path / "b.jsonl").read_bytes())

    def test_seed_changes_split_assignment(self, tmp_path):
        make_corpus(tmp_path, speakers=8)
        picks = []
        for seed in range(6):
            m = build_manifest(tmp_path, ManifestRules(n_test=2, n_val=2,
                                                       seed=seed))
            picks.append(frozenset(r.speaker for r in m.split("test")))
        assert len(set(picks)) > 1

    def test_jsonl_round_trip(self, tmp_path):
        make_corpus(tmp_path / "corpus", speakers=4)
        manifest = build_manifest(tmp_path / "corpus",
                                  ManifestRules(n_test=1, n_val=1))
        manifest.save(tmp_path / "m.jsonl")
        assert Manifest.load(tmp_path / "m.jsonl") == manifest
        first = json.loads(
            (tmp_path / "m.jsonl").read_text().splitlines()[0])
        assert set(first) == {"id", "path", "speaker", "split", "duration",
                              "rate"}

    def test_empty_corpus_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no speaker"):
            build_manifest(tmp_path, ManifestRules(n_test=0, n_val=0))

    def test_too_few_speakers_for_split_rejected(self, tmp_path):
        make_corpus(tmp_path, speakers=3)
        with pytest.raises(ValueError, match="cannot cover"):
            build_manifest(tmp_path, ManifestRules(n_test=2, n_val=1))

    def test_duplicate_ids_rejected(self, tmp_path):
        make_corpus(tmp_path, speakers=2, clips=1)
        manifest = build_manifest(tmp_path, ManifestRules(n_test=0, n_val=0))
        with pytest.raises(ValueError, match="duplicate"):
            Manifest(manifest.records + (manifest.records[0],))


# ---------------------------------------------------------------------------
# cache + batch iteration
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root, speakers=5, clips=4, rate=16000, seconds=0.3,
                with_mic2=False)
    # 5 speakers x 4 clips; 1 test + 1 val speaker leaves 12 train clips
    return build_manifest(root, ManifestRules(n_test=1, n_val=1))


class TestBatches:
    KW = dict(lr_rate=4000, batch_size=8, seed=0, clip_seconds=0.25)

    def test_train_drops_last_partial_batch(self, small_manifest):
        batches = list(batch_iterator(small_manifest, **self.KW))
        assert [len(b) for b in batches] == [8]
        assert all(isinstance(p, PairedExample) for p in batches[0])

    def test_eval_keeps_last_partial_batch(self, small_manifest):
        batches = list(batch_iterator(small_manifest, split="test", **self.KW))
        assert [len(b) for b in batches] == [4]
        batches = list(batch_iterator(small_manifest, batch_size=5, lr_rate=4000,
                                      seed=0, clip_seconds=0.25,
                                      drop_last=False))
        assert [len(b) for b in batches] == [5, 5, 2]

    def test_same_seed_same_epoch_identical_order(self, small_manifest):
        runs = [[p.clip_id for b in batch_iterator(small_manifest, **self.KW)
                 for p in b] for _ in range(2)]
        assert runs[0] == runs[1]

    def test_epochs_reshuffle(self, small_manifest):
        orders = []
        for epoch in range(4):
            ids = [p.clip_id for b in batch_iterator(small_manifest,
                                                     epoch=epoch, **self.KW)
                   for p in b]
            orders.append(tuple(ids))
        assert len(set(orders)) > 1

    def test_eval_split_is_manifest_ordered(self, small_manifest):
        ids = [p.clip_id for b in batch_iterator(small_manifest, split="val",
                                                 **self.KW) for p in b]
        assert ids == [r.id for r in small_manifest.split("val")]

    def test_pair_shapes_and_band_limit(self, small_manifest):
        (batch,) = batch_iterator(small_manifest, **self.KW)
        for pair in batch:
            assert len(pair.hr) == 4000 and pair.hr.sample_rate == 16000
            assert pair.hr.samples.dtype == np.float32
            assert band_limit_db(pair) <= -60.0

    def test_unknown_split_rejected(self, small_manifest):
        with pytest.raises(ValueError, match="no 'dev'"):
            next(batch_iterator(small_manifest, split="dev", **self.KW))

    def test_bad_batch_size_rejected(self, small_manifest):
        with pytest.raises(ValueError, match="batch_size"):
            next(batch_iterator(small_manifest, lr_rate=4000, batch_size=0,
                                seed=0))

    def test_cache_matches_on_the_fly(self, small_manifest, tmp_path):
        n = prepare_cache(small_manifest, 4000, tmp_path / "cache",
                          clip_seconds=0.25, split="train")
        assert n == 12
        fresh = {p.clip_id: p for b in batch_iterator(small_manifest,
                                                      **self.KW) for p in b}
        cached = {p.clip_id: p
                  for b in batch_iterator(small_manifest,
                                          cache_dir=tmp_path / "cache",
                                          **self.KW) for p in b}
        assert set(fresh) == set(cached)
        for cid, pair in fresh.items():
            np.testing.assert_allclose(cached[cid].hr.samples,
                                       pair.hr.samples, atol=1e-7)
            np.testing.assert_allclose(cached[cid].lr_upsampled.samples,
                                       pair.lr_upsampled.samples, atol=1e-7)

    def test_cache_builds_lazily_on_miss(self, small_manifest, tmp_path):
        record = small_manifest.split("val")[0]
        path = cache_path(tmp_path, record.id, 4000)
        assert not path.exists()
        pair = load_pair(record, 4000, clip_seconds=0.25, cache_dir=tmp_path)
        assert path.exists()
        again = load_pair(record, 4000, clip_seconds=0.25, cache_dir=tmp_path)
        np.testing.assert_array_equal(again.hr.samples, pair.hr.samples)

    def test_stale_cache_raises_with_rebuild_hint(self, small_manifest,
                                                  tmp_path):
        record = small_manifest.split("val")[0]
        load_pair(record, 4000, clip_seconds=0.25, cache_dir=tmp_path)
        path = cache_path(tmp_path, record.id, 4000)
        stored = dict(np.load(path))
        stored["digest"] = np.array("deadbeef")
        np.savez(path, **stored)
        with pytest.raises(StaleCacheError, match="degrade"):
            load_pair(record, 4000, clip_seconds=0.25, cache_dir=tmp_path)

    def test_digest_sensitive_to_parameters(self):
        base = pair_digest(4000, 16000, 4.0)
        assert pair_digest(8000, 16000, 4.0) != base
        assert pair_digest(4000, None, 4.0) != base
        assert pair_digest(4000, 16000, 2.0) != base
        assert pair_digest(4000, 16000, 4.0) == base
