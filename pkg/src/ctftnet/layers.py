"""Complex building blocks: conv/linear wrappers, batch norm, encoder/decoder
and skip blocks, layer norm, dropout.

Modules register parameters and buffers by attribute scan, so names follow
attribute paths deterministically (insertion order), e.g. ``conv.weight``.
Forward passes take explicit ``training`` flags instead of module-level mode
state; batch-norm running statistics are the only mutable state and update
only when asked to.
"""

from __future__ import annotations

import numpy as np

from . import core as C
from .core import ComplexTensor, Parameter, glorot_complex, zeros_param


def _const(value, dtype) -> ComplexTensor:
    return ComplexTensor(np.asarray(value, dtype=dtype))


class Module:
    """Tiny container base: walks attributes to find parameters and buffers."""

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Module, Parameter, Buffer)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter, Buffer)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = path
                yield path, val.tensor
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{path}.")

    def parameters(self) -> list[ComplexTensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in self._children():
            path = f"{prefix}{key}"
            if isinstance(val, Buffer):
                yield path, val.tensor
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{path}.")

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


class Buffer:
    """Non-trainable named state (running statistics); checkpointed."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: ComplexTensor):
        self.tensor = tensor


def count_parameters(module: Module) -> int:
    """Number of real-valued scalars (real + imaginary parts both count)."""
    return sum(2 * t.size for _, t in module.named_parameters())


# ---------------------------------------------------------------------------
# primitive layers
# ---------------------------------------------------------------------------

class ComplexConv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=(1, 1), stride=(1, 1), padding=(0, 0),
                 bias=True, strict_sign=False, *, rng, dtype=np.float32):
        kf, kt = kernel
        fan = kf * kt
        self.stride, self.padding, self.strict_sign = stride, padding, strict_sign
        self.weight = Parameter("weight", glorot_complex(
            (out_ch, in_ch, kf, kt), in_ch * fan, out_ch * fan, rng, dtype))
        self.bias = Parameter("bias", zeros_param((out_ch,), dtype)) if bias else None

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return C.complex_conv2d(x, self.weight.tensor,
                                self.bias.tensor if self.bias else None,
                                self.stride, self.padding, self.strict_sign)


class ComplexConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel=(1, 1), stride=(1, 1), padding=(0, 0),
                 output_padding=(0, 0), bias=True, strict_sign=False, *,
                 rng, dtype=np.float32):
        kf, kt = kernel
        fan = kf * kt
        self.stride, self.padding = stride, padding
        self.output_padding, self.strict_sign = output_padding, strict_sign
        self.weight = Parameter("weight", glorot_complex(
            (in_ch, out_ch, kf, kt), out_ch * fan, in_ch * fan, rng, dtype))
        self.bias = Parameter("bias", zeros_param((out_ch,), dtype)) if bias else None

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return C.complex_conv_transpose2d(x, self.weight.tensor,
                                          self.bias.tensor if self.bias else None,
                                          self.stride, self.padding,
                                          self.output_padding, self.strict_sign)


class ComplexLinear(Module):
    """y = x W^T + b with weight [out, in]."""

    def __init__(self, in_features, out_features, bias=True, *, rng, dtype=np.float32):
        self.weight = Parameter("weight", glorot_complex(
            (out_features, in_features), in_features, out_features, rng, dtype))
        self.bias = Parameter("bias", zeros_param((out_features,), dtype)) if bias else None

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ValueError(
                f"linear expects trailing dim {self.weight.shape[1]}, got {x.shape[-1]}")
        squeeze = x.ndim == 1
        if squeeze:
            x = C.reshape(x, (1, x.shape[0]))
        y = C.complex_matmul(x, C.transpose(self.weight.tensor, (1, 0)))
        if self.bias is not None:
            y = C.add(y, self.bias.tensor)
        return C.reshape(y, (y.shape[-1],)) if squeeze else y


def complex_dropout(x: ComplexTensor, p: float, rng) -> ComplexTensor:
    """Zero whole complex elements (one mask for both parts), scaled by 1/(1-p).

    Pass ``rng=None`` (or p=0) for inference: identity.
    """
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, x.dtype)
    return C.mul(x, ComplexTensor(keep))


# ---------------------------------------------------------------------------
# complex batch normalization
# ---------------------------------------------------------------------------

def _inv_sqrt_2x2(vrr, vri, vii):
    """Closed-form inverse square root of [[vrr, vri], [vri, vii]].

    Returns (wrr, wri, wii) built from differentiable primitives, so the
    whitening backward comes for free off the tape.
    """
    tau = C.add(vrr, vii)
    det = C.sub(C.mul(vrr, vii), C.mul(vri, vri))
    s = C.sqrt_r(det)
    t = C.sqrt_r(C.add(tau, C.scale(s, 2.0)))
    denom = C.mul(s, t)
    wrr = C.rdiv(C.add(vii, s), denom)
    wii = C.rdiv(C.add(vrr, s), denom)
    wri = C.neg(C.rdiv(vri, denom))
    return wrr, wri, wii


class ComplexBatchNorm(Module):
    """Whitening batch norm over [B,C,F,T]: per channel, the (real, imag)
    pair is decorrelated by the inverse square root of its 2x2 covariance,
    then mapped through a learned symmetric 2x2 matrix plus complex shift.

    ``naive=True`` replaces whitening with per-component standardization
    (kept for ablation).  Fresh statistics make eval mode an identity map.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, naive=False,
                 dtype=np.float32):
        self.channels, self.momentum, self.eps, self.naive = channels, momentum, eps, naive
        root = np.full(channels, 1.0 / np.sqrt(2.0), dtype=dtype)
        self.gamma = Parameter("gamma", ComplexTensor(          # (g_rr, g_ii)
            root.copy(), root.copy(), requires_grad=True))
        self.gamma_off = Parameter("gamma_off", zeros_param((channels,), dtype))
        self.beta = Parameter("beta", zeros_param((channels,), dtype))
        half = np.full(channels, 0.5, dtype=dtype)
        self.running_mean = Buffer(ComplexTensor(np.zeros(channels, dtype),
                                                 np.zeros(channels, dtype)))
        self.running_cov = Buffer(ComplexTensor(half.copy(), half.copy()))  # (V_rr, V_ii)
        self.running_cov_off = Buffer(ComplexTensor(np.zeros(channels, dtype)))

    def _col(self, arr):
        return C.reshape(arr, (1, self.channels, 1, 1))

    def forward(self, x: ComplexTensor, training: bool,
                update_stats: bool | None = None) -> ComplexTensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [B,{self.channels},F,T], got {x.shape}")
        if update_stats is None:
            update_stats = training
        dtype = x.dtype
        axes = (0, 2, 3)
        eps = _const(self.eps, dtype)

        if training:
            if x.shape[0] * x.shape[2] * x.shape[3] < 2:
                raise ValueError("batch norm needs at least 2 samples per channel")
            xr, xi = C.real(x), C.imag(x)
            mr = C.tmean(xr, axis=axes, keepdims=True)
            mi = C.tmean(xi, axis=axes, keepdims=True)
            cr, ci_ = C.sub(xr, mr), C.sub(xi, mi)
            vrr = C.add(C.tmean(C.mul(cr, cr), axis=axes, keepdims=True), eps)
            vii = C.add(C.tmean(C.mul(ci_, ci_), axis=axes, keepdims=True), eps)
            vri = C.tmean(C.mul(cr, ci_), axis=axes, keepdims=True)
            if update_stats:
                self._update_running(mr, mi, vrr, vii, vri)
        else:
            rm, rc, ro = (self.running_mean.tensor, self.running_cov.tensor,
                          self.running_cov_off.tensor)
            cr = C.sub(C.real(x), self._col(ComplexTensor(rm.real)))
            ci_ = C.sub(C.imag(x), self._col(ComplexTensor(rm.imag)))
            vrr = self._col(ComplexTensor(rc.real + self.eps))
            vii = self._col(ComplexTensor(rc.imag + self.eps))
            vri = self._col(ComplexTensor(ro.real.copy()))

        if self.naive:
            yr = C.rdiv(cr, C.sqrt_r(vrr))
            yi = C.rdiv(ci_, C.sqrt_r(vii))
        else:
            wrr, wri, wii = _inv_sqrt_2x2(vrr, vri, vii)
            yr = C.add(C.mul(wrr, cr), C.mul(wri, ci_))
            yi = C.add(C.mul(wri, cr), C.mul(wii, ci_))

        g_rr = self._col(C.real(self.gamma.tensor))
        g_ii = self._col(C.imag(self.gamma.tensor))
        g_ri = self._col(C.real(self.gamma_off.tensor))
        b_r = self._col(C.real(self.beta.tensor))
        b_i = self._col(C.imag(self.beta.tensor))
        zr = C.add(C.add(C.mul(g_rr, yr), C.mul(g_ri, yi)), b_r)
        zi = C.add(C.add(C.mul(g_ri, yr), C.mul(g_ii, yi)), b_i)
        return C.make_complex(zr, zi)

    def _update_running(self, mr, mi, vrr, vii, vri):
        m = self.momentum
        rm, rc, ro = (self.running_mean.tensor, self.running_cov.tensor,
                      self.running_cov_off.tensor)
        rm.real[:] = (1 - m) * rm.real + m * mr.real.reshape(-1)
        rm.imag[:] = (1 - m) * rm.imag + m * mi.real.reshape(-1)
        rc.real[:] = (1 - m) * rc.real + m * (vrr.real.reshape(-1) - self.eps)
        rc.imag[:] = (1 - m) * rc.imag + m * (vii.real.reshape(-1) - self.eps)
        ro.real[:] = (1 - m) * ro.real + m * vri.real.reshape(-1)


class ComplexLayerNorm(Module):
    """Center by the complex mean over the last axis, scale by RMS magnitude."""

    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.dim, self.eps = dim, eps
        self.gamma = Parameter("gamma", ComplexTensor(
            np.ones(dim, dtype), np.zeros(dim, dtype), requires_grad=True))
        self.beta = Parameter("beta", zeros_param((dim,), dtype))

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"layer norm over dim {self.dim}, got {x.shape}")
        mu = C.tmean(x, axis=-1, keepdims=True)
        c = C.sub(x, mu)
        power = C.tmean(C.real(C.mul(c, C.conj(c))), axis=-1, keepdims=True)
        rms = C.sqrt_r(C.add(power, _const(self.eps, x.dtype)))
        return C.add(C.mul(C.rdiv(c, rms), self.gamma.tensor), self.beta.tensor)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class EncoderBlock(Module):
    """CReLU(BN(Conv(x))); halves F and T at the default stride."""

    def __init__(self, in_ch, out_ch, kernel=(3, 3), stride=(2, 2), padding=(1, 1),
                 *, rng, dtype=np.float32, naive_bn=False):
        if kernel[0] % 2 == 0 or kernel[1] % 2 == 0:
            raise ValueError(f"kernel must be odd in both axes, got {kernel}")
        if not set(stride) <= {1, 2}:
            raise ValueError(f"stride components must be 1 or 2, got {stride}")
        self.conv = ComplexConv2d(in_ch, out_ch, kernel, stride, padding,
                                  rng=rng, dtype=dtype)
        self.bn = ComplexBatchNorm(out_ch, naive=naive_bn, dtype=dtype)

    def forward(self, x, training=False, update_stats=None):
        return C.crelu(self.bn.forward(self.conv.forward(x), training, update_stats))


class SkipBlock(Module):
    """Shape-preserving CReLU(BN(1x1 Conv(e))) on an encoder output."""

    def __init__(self, channels, *, rng, dtype=np.float32, naive_bn=False):
        self.conv = ComplexConv2d(channels, channels, (1, 1), (1, 1), (0, 0),
                                  rng=rng, dtype=dtype)
        self.bn = ComplexBatchNorm(channels, naive=naive_bn, dtype=dtype)

    def forward(self, e, training=False, update_stats=None):
        return C.crelu(self.bn.forward(self.conv.forward(e), training, update_stats))


class DecoderBlock(Module):
    """Concat skip features, transpose-conv back up, then BN + CReLU.

    The terminal decoder of the U-Net sets ``activation=False`` and becomes a
    pure linear transpose convolution (spectrogram values must keep sign).
    """

    def __init__(self, in_ch, out_ch, kernel=(3, 3), stride=(2, 2), padding=(1, 1),
                 output_padding=(1, 1), activation=True, *, rng,
                 dtype=np.float32, naive_bn=False):
        self.tconv = ComplexConvTranspose2d(in_ch, out_ch, kernel, stride, padding,
                                            output_padding, rng=rng, dtype=dtype)
        self.activation = activation
        self.bn = ComplexBatchNorm(out_ch, naive=naive_bn, dtype=dtype) if activation else None

    def forward(self, x, skip, training=False, update_stats=None):
        if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
            raise ValueError(f"skip shape {skip.shape} does not align with {x.shape}")
        y = self.tconv.forward(C.concat([x, skip], axis=1))
        if not self.activation:
            return y
        return C.crelu(self.bn.forward(y, training, update_stats))
