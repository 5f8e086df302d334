"""Corpus plumbing: WAV I/O, 4-second standardization, low-rate/high-rate
pair synthesis, JSON-Lines manifests with a deterministic speaker split, and
seeded batch iteration with an optional float32 pair cache.

The WAV reader/writer is deliberately minimal: RIFF with pcm16 or float32
payloads, mono preferred, channel 0 extracted (with a warning) otherwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import Waveform, simulate_low_rate

__all__ = ["WavError", "StaleCacheError", "ClipRecord", "Manifest",
           "ManifestRules", "PairedExample", "read_wav", "write_wav",
           "probe_wav", "standardize_length", "make_lr_hr_pair",
           "synthesize_pair", "band_limit_db", "build_manifest",
           "pair_digest", "cache_path", "prepare_cache", "load_pair",
           "batch_iterator"]

_BAND_LIMIT_DB = -60.0


class WavError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def _parse_riff(blob: bytes, path) -> tuple[tuple, bytes]:
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    fmt = payload = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        size = struct.unpack_from("<I", blob, pos + 4)[0]
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)       # chunks are word-aligned
    if fmt is None or payload is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    return fmt, payload


def _decode(fmt, payload, path) -> tuple[np.ndarray, int, int]:
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or block_align != channels * bits // 8:
        raise WavError(f"{path}: inconsistent fmt fields")
    if (tag, bits) == (1, 16):
        raw = np.frombuffer(payload[:len(payload) - len(payload) % block_align],
                            dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif (tag, bits) == (3, 32):
        raw = np.frombuffer(payload[:len(payload) - len(payload) % block_align],
                            dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise WavError(f"{path}: unsupported encoding "
                       f"(format tag {tag}, {bits}-bit)")
    return samples, channels, rate


def read_wav(path) -> Waveform:
    path = Path(path)
    fmt, payload = _parse_riff(path.read_bytes(), path)
    samples, channels, rate = _decode(fmt, payload, path)
    if channels > 1:
        warnings.warn(f"{path}: {channels} channels, keeping channel 0")
        samples = samples[::channels].copy()
    return Waveform(samples, rate)


def probe_wav(path) -> tuple[int, int, int]:
    """(sample_rate, n_frames, channels) from the header, payload untouched."""
    path = Path(path)
    fmt, payload = _parse_riff(path.read_bytes(), path)
    tag, channels, rate, _, block_align, bits = fmt
    if (tag, bits) not in ((1, 16), (3, 32)):
        raise WavError(f"{path}: unsupported encoding "
                       f"(format tag {tag}, {bits}-bit)")
    return rate, len(payload) // block_align, channels


def write_wav(path, wave: Waveform, encoding: str = "float32") -> None:
    if encoding == "pcm16":
        scaled = np.clip(np.rint(wave.samples.astype(np.float64) * 32768.0),
                         -32768, 32767).astype("<i2")
        payload, tag, bits = scaled.tobytes(), 1, 16
    elif encoding == "float32":
        payload, tag, bits = wave.samples.astype("<f4").tobytes(), 3, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    header = (b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
              + b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, wave.sample_rate,
                                      wave.sample_rate * block, block, bits)
              + b"data" + struct.pack("<I", len(payload)))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# clip preparation
# ---------------------------------------------------------------------------

def standardize_length(wave: Waveform, target_seconds: float = 4.0) -> Waveform:
    n = int(round(target_seconds * wave.sample_rate))
    if len(wave) == n:
        return wave
    if len(wave) > n:
        return Waveform(wave.samples[:n].copy(), wave.sample_rate)
    padded = np.zeros(n, dtype=wave.samples.dtype)
    padded[:len(wave)] = wave.samples
    return Waveform(padded, wave.sample_rate)


@dataclass(frozen=True)
class PairedExample:
    hr: Waveform
    lr_upsampled: Waveform
    source_lr_rate: int
    clip_id: str = ""

    def __post_init__(self):
        if len(self.hr) != len(self.lr_upsampled):
            raise ValueError("hr and lr_upsampled lengths differ")
        if self.hr.sample_rate != self.lr_upsampled.sample_rate:
            raise ValueError("hr and lr_upsampled rates differ")


def make_lr_hr_pair(hr: Waveform, lr_rate: int, clip_id: str = "") -> PairedExample:
    _, up = simulate_low_rate(hr, lr_rate)
    return PairedExample(hr=hr, lr_upsampled=up, source_lr_rate=lr_rate,
                         clip_id=clip_id)


def synthesize_pair(source: Waveform, lr_rate: int, hr_rate: int | None = None,
                    clip_seconds: float | None = 4.0,
                    clip_id: str = "") -> PairedExample:
    """standardize -> (optionally) bring to the model rate -> LR chain.

    ``clip_seconds=None`` keeps the natural clip length (evaluation runs on
    whole utterances; only training standardizes).
    """
    wave = source
    if clip_seconds is not None:
        wave = standardize_length(wave, clip_seconds)
    if hr_rate is not None and hr_rate != wave.sample_rate:
        wave = simulate_low_rate(wave, hr_rate)[0]
    return make_lr_hr_pair(wave, lr_rate, clip_id)


def band_limit_db(pair: PairedExample) -> float:
    """Mean periodogram density above the source LR Nyquist, in dB relative
    to the mean passband density (the suppression the sinc stopband buys)."""
    x = pair.lr_upsampled.samples.astype(np.float64)
    x = x * np.hanning(x.size)          # control truncation leakage
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / pair.lr_upsampled.sample_rate)
    nyq = pair.source_lr_rate / 2.0
    stop = power[freqs > nyq]
    passband = power[(freqs > 0.02 * nyq) & (freqs < 0.75 * nyq)]
    if stop.size == 0 or passband.size == 0 or passband.mean() < 1e-30:
        return -np.inf
    if stop.mean() == 0.0:
        return -np.inf
    return 10.0 * np.log10(stop.mean() / passband.mean())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipRecord:
    id: str
    path: str
    speaker: str
    split: str
    duration: float
    rate: int


@dataclass(frozen=True)
class ManifestRules:
    n_test: int = 11
    n_val: int = 5
    seed: int = 0
    exclude_speakers: tuple = ("p280", "p315")
    mic_filter: str | None = "mic1"


@dataclass(frozen=True)
class Manifest:
    records: tuple

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate clip ids in manifest")

    def split(self, name: str) -> tuple:
        return tuple(r for r in self.records if r.split == name)

    def save(self, path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(ClipRecord(**json.loads(line)))
        return cls(tuple(records))


def build_manifest(corpus_root, rules: ManifestRules = ManifestRules()) -> Manifest:
    root = Path(corpus_root)
    speakers = sorted(d.name for d in root.iterdir()
                      if d.is_dir() and d.name not in rules.exclude_speakers)
    if not speakers:
        raise ValueError(f"no speaker directories under {root}")
    if rules.n_test + rules.n_val >= len(speakers):
        raise ValueError(f"{len(speakers)} speakers cannot cover "
                         f"{rules.n_test} test + {rules.n_val} val")
    order = np.random.default_rng(rules.seed).permutation(len(speakers))
    test = {speakers[i] for i in order[:rules.n_test]}
    val = {speakers[i] for i in order[rules.n_test:rules.n_test + rules.n_val]}

    records = []
    for speaker in speakers:
        for f in sorted((root / speaker).glob("*.wav")):
            if rules.mic_filter is not None and rules.mic_filter not in f.name:
                continue
            rate, frames, _ = probe_wav(f)
            split = ("test" if speaker in test
                     else "val" if speaker in val else "train")
            records.append(ClipRecord(id=f.stem, path=str(f), speaker=speaker,
                                      split=split, duration=frames / rate,
                                      rate=rate))
    if not records:
        raise ValueError(f"no usable clips under {root}")
    return Manifest(tuple(records))


# ---------------------------------------------------------------------------
# pair cache + batches
# ---------------------------------------------------------------------------

def pair_digest(lr_rate: int, hr_rate: int | None, clip_seconds: float) -> str:
    text = (f"pair-v1 lr={lr_rate} hr={hr_rate} clip={clip_seconds!r} "
            f"butter=6/0.99 sinc=0.47/64/8.6")
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def cache_path(cache_dir, clip_id: str, lr_rate: int) -> Path:
    return Path(cache_dir) / f"{clip_id}__{lr_rate}.npz"


def _synthesize_record(record: ClipRecord, lr_rate, hr_rate, clip_seconds):
    return synthesize_pair(read_wav(record.path), lr_rate, hr_rate,
                           clip_seconds, clip_id=record.id)


def load_pair(record: ClipRecord, lr_rate: int, hr_rate: int | None = None,
              clip_seconds: float = 4.0, cache_dir=None) -> PairedExample:
    if cache_dir is None:
        return _synthesize_record(record, lr_rate, hr_rate, clip_seconds)
    digest = pair_digest(lr_rate, hr_rate, clip_seconds)
    path = cache_path(cache_dir, record.id, lr_rate)
    if path.exists():
        stored = np.load(path)
        if str(stored["digest"]) != digest:
            raise StaleCacheError(
                f"{path} was built with different pipeline parameters; "
                "delete the cache directory or re-run the degrade step")
        rate = int(stored["rate"])
        return PairedExample(hr=Waveform(stored["hr"], rate),
                             lr_upsampled=Waveform(stored["lr"], rate),
                             source_lr_rate=lr_rate, clip_id=record.id)
    pair = _synthesize_record(record, lr_rate, hr_rate, clip_seconds)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, hr=pair.hr.samples.astype(np.float32),
             lr=pair.lr_upsampled.samples.astype(np.float32),
             rate=pair.hr.sample_rate, digest=digest)
    return load_pair(record, lr_rate, hr_rate, clip_seconds, cache_dir)


def prepare_cache(manifest: Manifest, lr_rate: int, cache_dir,
                  hr_rate: int | None = None, clip_seconds: float = 4.0,
                  split: str | None = None) -> int:
    count = 0
    for record in manifest.records:
        if split is not None and record.split != split:
            continue
        load_pair(record, lr_rate, hr_rate, clip_seconds, cache_dir)
        count += 1
    return count


def batch_iterator(manifest: Manifest, lr_rate: int, batch_size: int, seed: int,
                   *, split: str = "train", hr_rate: int | None = None,
                   clip_seconds: float = 4.0, cache_dir=None, epoch: int = 0,
                   drop_last: bool | None = None, band_check: bool = True):
    """Stream of lists of PairedExample; shuffled per (seed, epoch) in
    training, manifest order otherwise.  The first pair of every epoch is
    spot-checked against the band-limit invariant."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    records = list(manifest.split(split))
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    if split == "train":
        order = np.random.default_rng((seed, epoch)).permutation(len(records))
    else:
        order = np.arange(len(records))
    if drop_last is None:
        drop_last = split == "train"

    checked = False
    batch = []
    for idx in order:
        pair = load_pair(records[idx], lr_rate, hr_rate, clip_seconds, cache_dir)
        if band_check and not checked:
            db = band_limit_db(pair)
            if db > _BAND_LIMIT_DB:
                raise RuntimeError(
                    f"pair {pair.clip_id!r} keeps {db:.1f} dB above "
                    f"{lr_rate // 2} Hz; degradation chain is broken")
            checked = np.isfinite(db)   # silent clip: try the next one
        batch.append(pair)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch and not drop_last:
        yield batch
