"""Global attention over the T-F plane (CGAB) and the conformer bottleneck.

A CGAB is bound to one (C, F, T) shape at construction: its two attention
paths end in fully connected maps along the F and T axes respectively, so
those lengths are baked into the weights.  The model feeds it fixed-width
blocks (see ctft-model).
"""

from __future__ import annotations

import numpy as np

from . import core as C
from .core import ComplexTensor
from .layers import (ComplexBatchNorm, ComplexConv2d, ComplexLayerNorm,
                     ComplexLinear, Module, complex_dropout)


class _ConvBnRelu(Module):
    """1x1-style 2D conv -> BN -> CReLU used throughout the CGAB."""

    def __init__(self, in_ch, out_ch, kernel=(1, 1), padding=(0, 0), *, rng, dtype,
                 naive_bn=False):
        self.conv = ComplexConv2d(in_ch, out_ch, kernel, (1, 1), padding,
                                  rng=rng, dtype=dtype)
        self.bn = ComplexBatchNorm(out_ch, naive=naive_bn, dtype=dtype)

    def forward(self, x, training, update_stats):
        return C.crelu(self.bn.forward(self.conv.forward(x), training, update_stats))


class _AttentionPath(Module):
    """One CGAB path: gate the input along one axis, then a per-axis FC.

    With ``axis="freq"`` the gate is an F x T map built from a 1D conv over
    time with C*F input channels, and the FC maps F -> F per (channel, time).
    The time path is the mirror image.
    """

    def __init__(self, channels, f_bins, t_frames, axis, kernel_1d, *, rng, dtype,
                 naive_bn=False):
        self.axis = axis
        self.c, self.f, self.t = channels, f_bins, t_frames
        fold, out = ((channels * f_bins, f_bins) if axis == "freq"
                     else (channels * t_frames, t_frames))
        pad = (kernel_1d - 1) // 2
        self.stage1 = _ConvBnRelu(channels, channels, rng=rng, dtype=dtype,
                                  naive_bn=naive_bn)
        self.stage2 = _ConvBnRelu(fold, out, kernel=(1, kernel_1d),
                                  padding=(0, pad), rng=rng, dtype=dtype,
                                  naive_bn=naive_bn)
        self.fc = ComplexLinear(out, out, rng=rng, dtype=dtype)

    def forward(self, e, training=False, update_stats=None):
        b = e.shape[0]
        a = self.stage1.forward(e, training, update_stats)       # [B,C,F,T]
        if self.axis == "freq":
            folded = C.reshape(a, (b, self.c * self.f, 1, self.t))
            gate = self.stage2.forward(folded, training, update_stats)
            gate = C.reshape(gate, (b, 1, self.f, self.t))       # broadcast over C
            gated = C.mul(e, gate)
            swapped = C.transpose(gated, (0, 1, 3, 2))           # [B,C,T,F]
            out = C.transpose(self.fc.forward(swapped), (0, 1, 3, 2))
        else:
            a_t = C.transpose(a, (0, 1, 3, 2))                   # [B,C,T,F]
            folded = C.reshape(a_t, (b, self.c * self.t, 1, self.f))
            gate = self.stage2.forward(folded, training, update_stats)
            gate = C.reshape(gate, (b, 1, self.t, self.f))
            gated = C.mul(C.transpose(e, (0, 1, 3, 2)), gate)    # [B,C,T,F]
            swapped = C.transpose(gated, (0, 1, 3, 2))           # [B,C,F,T]
            out = self.fc.forward(swapped)                       # FC over T
        return out                                               # [B,C,F,T]


class CgabBlock(Module):
    """Complex global attention block: parallel time/frequency attention paths
    concatenated on channels and fused back to C channels.

    ``arrangement="series"`` chains the paths instead (ablation); the fuse
    conv then takes C channels.
    """

    def __init__(self, channels, f_bins, t_frames, kernel_1d=9,
                 arrangement="parallel", *, rng, dtype=np.float32, naive_bn=False):
        if arrangement not in ("parallel", "series"):
            raise ValueError(f"unknown arrangement {arrangement!r}")
        self.shape_bound = (channels, f_bins, t_frames)
        self.arrangement = arrangement
        self.freq_path = _AttentionPath(channels, f_bins, t_frames, "freq",
                                        kernel_1d, rng=rng, dtype=dtype,
                                        naive_bn=naive_bn)
        self.time_path = _AttentionPath(channels, f_bins, t_frames, "time",
                                        kernel_1d, rng=rng, dtype=dtype,
                                        naive_bn=naive_bn)
        fuse_in = channels if arrangement == "series" else 2 * channels
        self.fuse = _ConvBnRelu(fuse_in, channels, rng=rng, dtype=dtype,
                                naive_bn=naive_bn)

    def forward(self, e, training=False, update_stats=None):
        c, f, t = self.shape_bound
        if e.shape[1:] != (c, f, t):
            raise ValueError(f"CGAB bound to {(c, f, t)}, got {e.shape[1:]}")
        if self.arrangement == "series":
            mid = self.freq_path.forward(e, training, update_stats)
            merged = self.time_path.forward(mid, training, update_stats)
        else:
            fr = self.freq_path.forward(e, training, update_stats)
            tm = self.time_path.forward(e, training, update_stats)
            merged = C.concat([fr, tm], axis=1)
        return self.fuse.forward(merged, training, update_stats)


class FtbBlock(Module):
    """Frequency-path-only ablation of the CGAB (no concat, C->C out conv)."""

    def __init__(self, channels, f_bins, t_frames, kernel_1d=9, *,
                 rng, dtype=np.float32, naive_bn=False):
        self.shape_bound = (channels, f_bins, t_frames)
        self.freq_path = _AttentionPath(channels, f_bins, t_frames, "freq",
                                        kernel_1d, rng=rng, dtype=dtype,
                                        naive_bn=naive_bn)
        self.fuse = _ConvBnRelu(channels, channels, rng=rng, dtype=dtype,
                                naive_bn=naive_bn)

    def forward(self, e, training=False, update_stats=None):
        c, f, t = self.shape_bound
        if e.shape[1:] != (c, f, t):
            raise ValueError(f"FTB bound to {(c, f, t)}, got {e.shape[1:]}")
        out = self.freq_path.forward(e, training, update_stats)
        return self.fuse.forward(out, training, update_stats)


# ---------------------------------------------------------------------------
# complex multi-head self-attention
# ---------------------------------------------------------------------------

class ComplexMhsa(Module):
    """Scores are Re(Q K^H)/sqrt(d_head) through a real softmax; the map stays
    complex-linear in V.  ``scoring="magnitude"`` swaps in |Q K^H| (ablation).
    No positional encoding, so the layer is permutation-equivariant.
    """

    def __init__(self, d_model, heads, scoring="real", *, rng, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        if scoring not in ("real", "magnitude"):
            raise ValueError(f"unknown scoring {scoring!r}")
        self.d, self.h, self.scoring = d_model, heads, scoring
        self.wq = ComplexLinear(d_model, d_model, rng=rng, dtype=dtype)
        self.wk = ComplexLinear(d_model, d_model, rng=rng, dtype=dtype)
        self.wv = ComplexLinear(d_model, d_model, rng=rng, dtype=dtype)
        self.wo = ComplexLinear(d_model, d_model, rng=rng, dtype=dtype)

    def _split(self, x, b, s):
        return C.transpose(C.reshape(x, (b, s, self.h, self.d // self.h)),
                           (0, 2, 1, 3))                         # [B,h,S,dh]

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ValueError(f"expected [B,S,{self.d}], got {x.shape}")
        b, s, _ = x.shape
        q = self._split(self.wq.forward(x), b, s)
        k = self._split(self.wk.forward(x), b, s)
        v = self._split(self.wv.forward(x), b, s)
        kh = C.conj(C.transpose(k, (0, 1, 3, 2)))
        logits = C.complex_matmul(q, kh)                         # [B,h,S,S]
        raw = C.cabs(logits) if self.scoring == "magnitude" else C.real(logits)
        scaled = C.scale(raw, 1.0 / np.sqrt(self.d / self.h))
        weights = C.softmax_r(scaled, axis=-1)
        ctx = C.complex_matmul(weights, v)                       # [B,h,S,dh]
        merged = C.reshape(C.transpose(ctx, (0, 2, 1, 3)), (b, s, self.d))
        return self.wo.forward(merged)


# ---------------------------------------------------------------------------
# conformer bottleneck
# ---------------------------------------------------------------------------

class _FeedForward(Module):
    def __init__(self, d, mult, *, rng, dtype):
        self.up = ComplexLinear(d, d * mult, rng=rng, dtype=dtype)
        self.down = ComplexLinear(d * mult, d, rng=rng, dtype=dtype)

    def forward(self, x, p, rng):
        return complex_dropout(self.down.forward(C.crelu(self.up.forward(x))), p, rng)


class _ConvModule(Module):
    """Pointwise -> CReLU -> depthwise over the sequence axis -> CReLU ->
    pointwise, all complex."""

    def __init__(self, d, kernel, *, rng, dtype):
        if kernel % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {kernel}")
        self.pw_in = ComplexLinear(d, d, rng=rng, dtype=dtype)
        fan = np.sqrt(3.0 / kernel)
        self.dw_weight = C.Parameter("weight", ComplexTensor(
            rng.uniform(-fan, fan, (d, kernel)).astype(dtype),
            rng.uniform(-fan, fan, (d, kernel)).astype(dtype), requires_grad=True))
        self.dw_bias = C.Parameter("bias", ComplexTensor(
            np.zeros(d, dtype), np.zeros(d, dtype), requires_grad=True))
        self.pw_out = ComplexLinear(d, d, rng=rng, dtype=dtype)

    def forward(self, x, p, rng):
        y = C.crelu(self.pw_in.forward(x))
        y = C.crelu(C.complex_depthwise_conv1d(y, self.dw_weight.tensor,
                                               self.dw_bias.tensor))
        return complex_dropout(self.pw_out.forward(y), p, rng)


class ConformerLayer(Module):
    """Macaron sandwich with pre-norm residuals::

        x + FF/2 -> x + MHSA -> x + ConvModule -> x + FF/2

    Zeroing every branch's weights makes the layer an identity map.
    """

    def __init__(self, d, heads, ff_mult=4, conv_kernel=15, dropout=0.1,
                 use_conv_module=True, scoring="real", *, rng, dtype=np.float32):
        self.dropout = dropout
        self.norm_ff1 = ComplexLayerNorm(d, dtype=dtype)
        self.ff1 = _FeedForward(d, ff_mult, rng=rng, dtype=dtype)
        self.norm_att = ComplexLayerNorm(d, dtype=dtype)
        self.attention = ComplexMhsa(d, heads, scoring, rng=rng, dtype=dtype)
        if use_conv_module:
            self.norm_conv = ComplexLayerNorm(d, dtype=dtype)
            self.conv = _ConvModule(d, conv_kernel, rng=rng, dtype=dtype)
        else:
            self.conv = None
        self.norm_ff2 = ComplexLayerNorm(d, dtype=dtype)
        self.ff2 = _FeedForward(d, ff_mult, rng=rng, dtype=dtype)

    def forward(self, x, training=False, rng=None):
        p = self.dropout if training else 0.0
        half = ComplexTensor(np.asarray(0.5, x.dtype))
        x = C.add(x, C.mul(half, self.ff1.forward(self.norm_ff1.forward(x), p, rng)))
        att = self.attention.forward(self.norm_att.forward(x))
        x = C.add(x, complex_dropout(att, p, rng))
        if self.conv is not None:
            x = C.add(x, self.conv.forward(self.norm_conv.forward(x), p, rng))
        x = C.add(x, C.mul(half, self.ff2.forward(self.norm_ff2.forward(x), p, rng)))
        return x


class ConformerBottleneck(Module):
    """Folds [B,C,F',T'] to a T'-long sequence of C*F' features, runs the
    conformer stack, unfolds back."""

    def __init__(self, channels, f_bins, n_layers=2, heads=4, ff_mult=4,
                 conv_kernel=15, dropout=0.1, use_conv_module=True,
                 scoring="real", *, rng, dtype=np.float32):
        self.channels, self.f_bins = channels, f_bins
        self.d = channels * f_bins
        self.stack = [ConformerLayer(self.d, heads, ff_mult, conv_kernel, dropout,
                                     use_conv_module, scoring, rng=rng, dtype=dtype)
                      for _ in range(n_layers)]

    def forward(self, x, training=False, rng=None):
        b, c, f, t = x.shape
        if (c, f) != (self.channels, self.f_bins):
            raise ValueError(f"bottleneck bound to {(self.channels, self.f_bins)}, "
                             f"got {(c, f)}")
        seq = C.reshape(C.transpose(x, (0, 3, 1, 2)), (b, t, self.d))
        for layer in self.stack:
            seq = layer.forward(seq, training, rng)
        return C.transpose(C.reshape(seq, (b, t, c, f)), (0, 2, 3, 1))
