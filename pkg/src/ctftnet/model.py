"""The full network: a complex U-Net over spectrograms with attention blocks
between selected encoders and a conformer at the bottleneck, plus the
waveform-to-waveform enhancement wrapper (STFT in, iSTFT out).

Geometry: the one-sided spectrum is trimmed to n_fft/2 bins (the Nyquist bin
is dropped on the way in and restored as zero on the way out) so that eight
stride-2 levels divide it cleanly.  Time is processed in fixed-width blocks
of ``block_width`` frames — the attention FC layers are bound to that width —
with longer inputs folded into the batch axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import core as C
from .attention import CgabBlock, ConformerBottleneck, FtbBlock
from .core import ComplexTensor
from .dsp import Spectrogram, StftConfig, Waveform, istft, stft
from .layers import DecoderBlock, EncoderBlock, Module, SkipBlock
from .layers import count_parameters as _count_parameters
from .objectives import LossConfig

__all__ = ["DESK_CHANNELS", "ModelConfig", "CtftNet", "build_model",
           "count_parameters", "desk_config", "paper_config", "enhance"]

DESK_CHANNELS = (1, 16, 32, 64, 64, 128, 128, 256, 256)
_LEVELS = 8

_PLACEMENTS = ("paper_two_blocks", "every_encoder", "none")
_VARIANTS = ("cgab_parallel", "cgab_series", "ftb_only")
_BOTTLENECKS = ("conformer", "transformer", "identity")
_ACTIVATIONS = ("crelu", "snake")
_BN_VARIANTS = ("whitened", "naive")

_SEGMENT_SECONDS = 4.0
_CROSSFADE_SECONDS = 0.5


def _down(n: int) -> int:
    # output length of a k=3, s=2, p=1 convolution
    return (n - 1) // 2 + 1


def _replace_low_band(y: np.ndarray, x: np.ndarray, low_hz: float,
                      rate: int) -> np.ndarray:
    """Zero-phase brickwall replacement of y's spectrum below ``low_hz``
    with x's.  Overwriting STFT bins instead would not survive re-analysis:
    a masked spectrogram is no longer the STFT of any waveform, and
    overlap-add smears the band seam back into the replaced bins."""
    k = int(np.floor(low_hz * x.size / rate)) + 1
    sy, sx = np.fft.rfft(y), np.fft.rfft(x)
    sy[:k] = sx[:k]
    return np.fft.irfft(sy, n=x.size)


def _reflect_pad_cols(a: np.ndarray, pad: int) -> np.ndarray:
    """Reflect-pad the last axis on the right, bouncing as often as needed
    (np.pad's "reflect" refuses pads longer than the axis)."""
    if pad == 0:
        return a
    n = a.shape[-1]
    if n == 1:
        idx = np.zeros(pad, dtype=int)
    else:
        period = 2 * (n - 1)
        pos = np.arange(n, n + pad) % period
        idx = np.where(pos < n, pos, period - pos)
    return np.concatenate([a, a[..., idx]], axis=-1)


@dataclass(frozen=True)
class ModelConfig:
    stft: StftConfig = StftConfig(n_fft=1024, hop=256, win_length=1024)
    sample_rate: int = 16000
    channels: tuple = DESK_CHANNELS
    kernel: tuple = (3, 3)
    stride: tuple = (2, 2)
    padding: tuple = (1, 1)
    block_width: int = 256
    cgab_placement: str = "paper_two_blocks"
    attention_variant: str = "cgab_parallel"
    cgab_kernel_1d: int = 9
    bottleneck: str = "conformer"
    conformer_layers: int = 2
    conformer_heads: int = 4
    conformer_ff_mult: int = 4
    conformer_kernel: int = 15
    dropout: float = 0.1
    activation: str = "crelu"
    bn_variant: str = "whitened"
    dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != _LEVELS + 1 or self.channels[0] != 1:
            raise ValueError(f"channel plan needs 1 input channel plus "
                             f"{_LEVELS} encoder widths, got {self.channels}")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.f_bins % (2 ** _LEVELS) != 0:
            raise ValueError(f"trimmed bin count {self.f_bins} is not divisible "
                             f"by 2^{_LEVELS}")
        if self.block_width < 1:
            raise ValueError("block_width must be positive")
        for name, value, allowed in (
                ("cgab_placement", self.cgab_placement, _PLACEMENTS),
                ("attention_variant", self.attention_variant, _VARIANTS),
                ("bottleneck", self.bottleneck, _BOTTLENECKS),
                ("activation", self.activation, _ACTIVATIONS),
                ("bn_variant", self.bn_variant, _BN_VARIANTS)):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.bottleneck != "identity":
            d = self.channels[-1] * self.ladder()[-1][0]
            if d % self.conformer_heads:
                raise ValueError(f"bottleneck width {d} is not divisible by "
                                 f"{self.conformer_heads} heads")

    @property
    def f_bins(self) -> int:
        """Frequency bins fed to the net (Nyquist bin trimmed)."""
        return self.stft.n_fft // 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def ladder(self):
        """(F, T) at the input of each level plus the bottleneck, length 9."""
        sizes = [(self.f_bins, self.block_width)]
        for _ in range(_LEVELS):
            f, t = sizes[-1]
            sizes.append((_down(f), _down(t)))
        return sizes

    def cgab_levels(self) -> tuple:
        """Encoder indices (0-based) whose output gets an attention block."""
        if self.cgab_placement == "none":
            return ()
        if self.cgab_placement == "every_encoder":
            return tuple(range(_LEVELS))
        return (0, 6)   # between encoders 1-2 and 7-8

    def canonical_text(self) -> str:
        """Sorted key=value lines; the checkpoint digest hashes this."""
        flat = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, StftConfig):
                for sub in ("n_fft", "hop", "win_length", "window", "center_pad"):
                    flat[f"stft.{sub}"] = getattr(v, sub)
            elif isinstance(v, LossConfig):
                flat["loss.spectral"] = v.spectral
                flat["loss.use_si_sdr"] = v.use_si_sdr
                flat["loss.si_weight"] = v.si_weight
                flat["loss.resolutions"] = ";".join(
                    f"{n}/{h}/{w}" for n, h, w in v.resolutions)
            elif isinstance(v, tuple):
                flat[f.name] = ",".join(str(x) for x in v)
            else:
                flat[f.name] = v
        return "\n".join(f"{k}={flat[k]!r}" for k in sorted(flat)) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode()).digest()


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    wide = (1,) + tuple(2 * c for c in DESK_CHANNELS[1:])
    defaults = dict(channels=wide, sample_rate=48000)
    defaults.update(overrides)
    return ModelConfig(**defaults)


class CtftNet(Module):
    """Spectrogram-to-spectrogram map: [B, 1, F, T] -> [B, 1, F, T]."""

    def __init__(self, cfg: ModelConfig):
        if cfg.activation == "snake":
            raise NotImplementedError(
                "snake activation is a recorded config value only")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        naive = cfg.bn_variant == "naive"
        ch = cfg.channels
        ladder = cfg.ladder()

        self.encoders = [
            EncoderBlock(ch[i], ch[i + 1], cfg.kernel, cfg.stride, cfg.padding,
                         rng=rng, dtype=dt, naive_bn=naive)
            for i in range(_LEVELS)]

        self.cgabs = []
        for lvl in cfg.cgab_levels():
            c, (f, t) = ch[lvl + 1], ladder[lvl + 1]
            if cfg.attention_variant == "ftb_only":
                block = FtbBlock(c, f, t, cfg.cgab_kernel_1d, rng=rng,
                                 dtype=dt, naive_bn=naive)
            else:
                arrangement = ("series" if cfg.attention_variant == "cgab_series"
                               else "parallel")
                block = CgabBlock(c, f, t, cfg.cgab_kernel_1d, arrangement,
                                  rng=rng, dtype=dt, naive_bn=naive)
            self.cgabs.append(block)
        self._cgab_at = {lvl: i for i, lvl in enumerate(cfg.cgab_levels())}

        self.skips = [SkipBlock(ch[i + 1], rng=rng, dtype=dt, naive_bn=naive)
                      for i in range(_LEVELS)]

        if cfg.bottleneck == "identity":
            self.bottleneck = None
        else:
            self.bottleneck = ConformerBottleneck(
                ch[-1], ladder[-1][0], cfg.conformer_layers, cfg.conformer_heads,
                cfg.conformer_ff_mult, cfg.conformer_kernel, cfg.dropout,
                use_conv_module=(cfg.bottleneck == "conformer"),
                rng=rng, dtype=dt)

        # decoders[i] inverts encoders[i]; decoders[0] is the linear output map
        self.decoders = []
        for i in range(_LEVELS):
            n_f, n_t = ladder[i]
            m_f, m_t = ladder[i + 1]
            out_pad = (n_f - (2 * m_f - 1), n_t - (2 * m_t - 1))
            self.decoders.append(
                DecoderBlock(2 * ch[i + 1], ch[i], cfg.kernel, cfg.stride,
                             cfg.padding, out_pad, activation=(i != 0),
                             rng=rng, dtype=dt, naive_bn=naive))

    # -- forward ------------------------------------------------------------

    def _check_input(self, spec: ComplexTensor):
        if spec.ndim != 4 or spec.shape[1] != 1:
            raise ValueError(f"expected [B, 1, F, T], got {spec.shape}")
        if spec.shape[2] != self.cfg.f_bins:
            raise ValueError(f"expected F = {self.cfg.f_bins}, got {spec.shape[2]}")
        if spec.shape[3] % self.cfg.block_width:
            raise ValueError(f"T = {spec.shape[3]} is not a multiple of the "
                             f"block width {self.cfg.block_width}")

    def forward(self, spec: ComplexTensor, training: bool = False,
                update_stats=None, rng=None) -> ComplexTensor:
        self._check_input(spec)
        b, bw = spec.shape[0], self.cfg.block_width
        k = spec.shape[3] // bw
        x = spec
        if k > 1:   # fold time blocks into the batch axis
            x = C.concat([x[:, :, :, i * bw:(i + 1) * bw] for i in range(k)],
                         axis=0)

        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc.forward(x, training, update_stats)
            if i in self._cgab_at:
                x = self.cgabs[self._cgab_at[i]].forward(x, training, update_stats)
            skips.append(self.skips[i].forward(x, training, update_stats))

        if self.bottleneck is not None:
            x = self.bottleneck.forward(x, training, rng)

        for i in reversed(range(_LEVELS)):
            x = self.decoders[i].forward(x, skips[i], training, update_stats)

        if k > 1:
            x = C.concat([x[i * b:(i + 1) * b] for i in range(k)], axis=3)
        return x

    # -- inference ----------------------------------------------------------

    def _enhance_block(self, wave: Waveform) -> np.ndarray:
        cfg = self.cfg
        spec = stft(wave, cfg.stft)
        full = spec.data.numpy()                        # [F+1, T] complex
        n_frames = full.shape[1]
        pad_t = (-n_frames) % cfg.block_width
        body = _reflect_pad_cols(full[:-1, :], pad_t)   # trim the Nyquist bin
        x = ComplexTensor(np.ascontiguousarray(body.real)[None, None],
                          np.ascontiguousarray(body.imag)[None, None])
        with C.no_grad():
            y = self.forward(x, training=False)
        out = y.numpy()[0, 0][:, :n_frames]
        restored = np.concatenate([out, np.zeros((1, n_frames), complex)], axis=0)
        dt = wave.samples.dtype
        out_spec = Spectrogram(ComplexTensor(restored.real.astype(dt),
                                             restored.imag.astype(dt)),
                               cfg.stft, wave.sample_rate)
        return istft(out_spec, cfg.stft, len(wave)).samples

    def enhance(self, wave: Waveform, low_band_copy_hz=None) -> Waveform:
        """Waveform in, waveform out, same length and rate.

        The input must already be at the model's sample rate (upsample low-
        rate material first).  Inputs longer than 4 s are processed in
        overlapping segments blended with a 0.5 s linear crossfade.
        """
        cfg = self.cfg
        if wave.sample_rate != cfg.sample_rate:
            raise ValueError(f"model runs at {cfg.sample_rate} Hz, "
                             f"got {wave.sample_rate} Hz")
        seg = int(_SEGMENT_SECONDS * cfg.sample_rate)
        fade = int(_CROSSFADE_SECONDS * cfg.sample_rate)
        n = len(wave)
        if n <= seg:
            out = self._enhance_block(wave).astype(np.float64)
        else:
            starts = list(range(0, n - seg, seg - fade)) + [n - seg]
            acc = np.zeros(n, dtype=np.float64)
            weight = np.zeros(n, dtype=np.float64)
            ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
            for s in starts:
                piece = Waveform(wave.samples[s:s + seg], wave.sample_rate)
                block = self._enhance_block(piece)
                w = np.ones(seg)
                if s > 0:
                    w[:fade] = ramp
                if s + seg < n:
                    w[seg - fade:] = ramp[::-1] + (1.0 / fade)
                acc[s:s + seg] += block.astype(np.float64) * w
                weight[s:s + seg] += w
            out = acc / weight
        if low_band_copy_hz is not None:
            out = _replace_low_band(out, wave.samples.astype(np.float64),
                                    low_band_copy_hz, cfg.sample_rate)
        return Waveform(out.astype(wave.samples.dtype), wave.sample_rate)


def build_model(cfg: ModelConfig) -> CtftNet:
    return CtftNet(cfg)


def count_parameters(net: CtftNet) -> int:
    return _count_parameters(net)
