"""Structured complex operations: 2-D convolutions (plus their transposed
form), depthwise 1-D convolution, signal framing and overlap-add.

All real-arithmetic kernels funnel through im2col + GEMM (forward / weight
gradient) or per-tap GEMM + strided scatter (transposed direction), so both
directions are single-pass BLAS work.  The complex combination rule is

    out_r = W_r * S_r - W_i * S_i
    out_i = W_r * S_i + W_i * S_r        (* = real cross-correlation)

with an optional ``strict_sign`` flag flipping the sign of the ``W_i * S_r``
term; the flipped form breaks complex algebra (see the z * conj(z) test) and
exists only so the discrepancy is documented and testable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ComplexTensor, _record

__all__ = [
    "complex_conv2d",
    "complex_conv_transpose2d",
    "complex_depthwise_conv1d",
    "frame",
    "overlap_add",
]


def _pair(v):
    return (int(v[0]), int(v[1]))


# ---------------------------------------------------------------------------
# real-valued 2-D correlation kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kf: int, kt: int, sf: int, st: int,
            pf: int, pt: int) -> tuple[np.ndarray, int, int]:
    """[B,C,F,T] -> patch matrix [B*Fo*To, C*kf*kt] plus output spatial dims."""
    if pf or pt:
        x = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    v = sliding_window_view(x, (kf, kt), axis=(2, 3))[:, :, ::sf, ::st]
    b, c, fo, to = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(b * fo * to, c * kf * kt)
    return np.ascontiguousarray(cols), fo, to


def _corr(x, w, sf, st, pf, pt):
    """Strided cross-correlation; x [B,Ci,F,T], w [Co,Ci,kf,kt] -> [B,Co,Fo,To]."""
    co, ci, kf, kt = w.shape
    cols, fo, to = _im2col(x, kf, kt, sf, st, pf, pt)
    out = cols @ w.reshape(co, ci * kf * kt).T
    return out.reshape(x.shape[0], fo, to, co).transpose(0, 3, 1, 2)


def _corr_weight_grad(x, g, kf, kt, sf, st, pf, pt):
    """d/dw of <g, corr(x, w)>; returns [Co,Ci,kf,kt]."""
    b, co, fo, to = g.shape
    cols, _, _ = _im2col(x, kf, kt, sf, st, pf, pt)
    gm = g.transpose(0, 2, 3, 1).reshape(b * fo * to, co)
    return (gm.T @ cols).reshape(co, x.shape[1], kf, kt)


def _adjoint_corr(g, w, sf, st, pf, pt, out_f, out_t, opf=0, opt=0):
    """Transpose of `_corr` as a linear map in its signal argument.

    g [B,Co,Fo,To], w [Co,Ci,kf,kt] -> [B,Ci,out_f,out_t] where
    out_f = (Fo-1)*sf + kf + opf - 2*pf (and likewise for time).
    """
    b, co, fo, to = g.shape
    _, ci, kf, kt = w.shape
    canvas_f = (fo - 1) * sf + kf + opf
    canvas_t = (to - 1) * st + kt + opt
    acc = np.zeros((b, ci, canvas_f, canvas_t), dtype=g.dtype)
    gm = g.transpose(0, 2, 3, 1).reshape(b * fo * to, co)
    patches = (gm @ w.reshape(co, ci * kf * kt)).reshape(b, fo, to, ci, kf, kt)
    for a in range(kf):
        for c in range(kt):
            acc[:, :, a:a + sf * fo:sf, c:c + st * to:st] += \
                patches[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    if out_f != canvas_f - 2 * pf or out_t != canvas_t - 2 * pt:
        raise ValueError("inconsistent adjoint output shape")
    return acc[:, :, pf:pf + out_f, pt:pt + out_t]


def _corr_input_grad(g, w, sf, st, pf, pt, f_in, t_in):
    """d/dx of <g, corr(x, w)>: scatter into the padded canvas, then crop."""
    b, co, fo, to = g.shape
    _, ci, kf, kt = w.shape
    fp, tp = f_in + 2 * pf, t_in + 2 * pt
    acc = np.zeros((b, ci, fp, tp), dtype=g.dtype)
    gm = g.transpose(0, 2, 3, 1).reshape(b * fo * to, co)
    patches = (gm @ w.reshape(co, ci * kf * kt)).reshape(b, fo, to, ci, kf, kt)
    for a in range(kf):
        for c in range(kt):
            acc[:, :, a:a + sf * fo:sf, c:c + st * to:st] += \
                patches[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    return acc[:, :, pf:pf + f_in, pt:pt + t_in]


# ---------------------------------------------------------------------------
# complex convolution ops
# ---------------------------------------------------------------------------

def complex_conv2d(x: ComplexTensor, w: ComplexTensor, b: ComplexTensor | None,
                   stride=(1, 1), padding=(0, 0),
                   strict_sign: bool = False) -> ComplexTensor:
    """Complex 2-D convolution (cross-correlation convention).

    x [B,Ci,F,T], w [Co,Ci,kf,kt], optional bias [Co].
    """
    sf, st = _pair(stride)
    pf, pt = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x [B,Ci,F,T] and w [Co,Ci,kf,kt]")
    bsz, ci, f_in, t_in = x.shape
    co, wci, kf, kt = w.shape
    if wci != ci:
        raise ValueError(f"channel mismatch: input has {ci}, weight expects {wci}")
    fo = (f_in + 2 * pf - kf) // sf + 1
    to = (t_in + 2 * pt - kt) // st + 1
    if fo <= 0 or to <= 0 or f_in + 2 * pf < kf or t_in + 2 * pt < kt:
        raise ValueError(f"zero-size conv output for input {f_in}x{t_in}, "
                         f"kernel {kf}x{kt}, stride {sf}x{st}, padding {pf}x{pt}")
    sig = -1.0 if strict_sign else 1.0

    cols_r, _, _ = _im2col(x.real, kf, kt, sf, st, pf, pt)
    cols_i, _, _ = _im2col(x.imag, kf, kt, sf, st, pf, pt)
    wm_r = w.real.reshape(co, -1).T
    wm_i = w.imag.reshape(co, -1).T
    out_r = cols_r @ wm_r - cols_i @ wm_i
    out_i = cols_i @ wm_r + sig * (cols_r @ wm_i)
    out_r = out_r.reshape(bsz, fo, to, co).transpose(0, 3, 1, 2)
    out_i = out_i.reshape(bsz, fo, to, co).transpose(0, 3, 1, 2)
    if b is not None:
        out_r = out_r + b.real.reshape(1, co, 1, 1)
        out_i = out_i + b.imag.reshape(1, co, 1, 1)
    out = ComplexTensor(np.ascontiguousarray(out_r), np.ascontiguousarray(out_i))

    parents = (x, w) if b is None else (x, w, b)

    def bwd(gr, gi):
        gx = gw = gb = None
        if x.requires_grad:
            t1 = _corr_input_grad(gr, w.real, sf, st, pf, pt, f_in, t_in)
            t2 = _corr_input_grad(gi, w.imag, sf, st, pf, pt, f_in, t_in)
            t3 = _corr_input_grad(gr, w.imag, sf, st, pf, pt, f_in, t_in)
            t4 = _corr_input_grad(gi, w.real, sf, st, pf, pt, f_in, t_in)
            gx = (t1 + sig * t2, t4 - t3)
        if w.requires_grad:
            u1 = _corr_weight_grad(x.real, gr, kf, kt, sf, st, pf, pt)
            u2 = _corr_weight_grad(x.imag, gi, kf, kt, sf, st, pf, pt)
            u3 = _corr_weight_grad(x.imag, gr, kf, kt, sf, st, pf, pt)
            u4 = _corr_weight_grad(x.real, gi, kf, kt, sf, st, pf, pt)
            gw = (u1 + u2, sig * u4 - u3)
        if b is not None and b.requires_grad:
            gb = (gr.sum(axis=(0, 2, 3)), gi.sum(axis=(0, 2, 3)))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, bwd, "conv2d")


def complex_conv_transpose2d(x: ComplexTensor, w: ComplexTensor,
                             b: ComplexTensor | None, stride=(1, 1),
                             padding=(0, 0), output_padding=(0, 0),
                             strict_sign: bool = False) -> ComplexTensor:
    """Complex transposed (fractionally strided) 2-D convolution.

    x [B,Ci,F,T], w [Ci,Co,kf,kt]; output spatial size
    (F-1)*stride - 2*padding + kernel + output_padding.
    """
    sf, st = _pair(stride)
    pf, pt = _pair(padding)
    opf, opt = _pair(output_padding)
    if opf >= sf or opt >= st:
        raise ValueError("output_padding must be smaller than stride")
    bsz, ci, f_in, t_in = x.shape
    wci, co, kf, kt = w.shape
    if wci != ci:
        raise ValueError(f"channel mismatch: input has {ci}, weight expects {wci}")
    fo = (f_in - 1) * sf - 2 * pf + kf + opf
    to = (t_in - 1) * st - 2 * pt + kt + opt
    if fo <= 0 or to <= 0:
        raise ValueError("zero-size transposed-conv output")
    sig = -1.0 if strict_sign else 1.0

    # treat w [Ci,Co,kf,kt] as the correlation kernel whose adjoint we apply
    def adj(src, kern):
        return _adjoint_corr(src, kern, sf, st, pf, pt, fo, to, opf, opt)

    out_r = adj(x.real, w.real) - adj(x.imag, w.imag)
    out_i = adj(x.imag, w.real) + sig * adj(x.real, w.imag)
    if b is not None:
        out_r = out_r + b.real.reshape(1, co, 1, 1)
        out_i = out_i + b.imag.reshape(1, co, 1, 1)
    out = ComplexTensor(out_r, out_i)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(gr, gi):
        gx = gw = gb = None
        if x.requires_grad:
            # gradient through the adjoint is the forward correlation
            t1 = _corr(gr, w.real, sf, st, pf, pt)
            t2 = _corr(gi, w.imag, sf, st, pf, pt)
            t3 = _corr(gr, w.imag, sf, st, pf, pt)
            t4 = _corr(gi, w.real, sf, st, pf, pt)
            gx = (t1 + sig * t2, t4 - t3)
        if w.requires_grad:
            def wg(u, g):
                # d/dk <g, adjoint(u, k)> = d/dk <corr(g, k), u>
                return _corr_weight_grad(g, u, kf, kt, sf, st, pf, pt)
            u1 = wg(x.real, gr)
            u2 = wg(x.imag, gi)
            u3 = wg(x.imag, gr)
            u4 = wg(x.real, gi)
            gw = (u1 + u2, sig * u4 - u3)
        if b is not None and b.requires_grad:
            gb = (gr.sum(axis=(0, 2, 3)), gi.sum(axis=(0, 2, 3)))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, bwd, "conv_transpose2d")


# ---------------------------------------------------------------------------
# depthwise 1-D convolution (sequence axis), 'same' zero padding
# ---------------------------------------------------------------------------

def complex_depthwise_conv1d(x: ComplexTensor, w: ComplexTensor,
                             b: ComplexTensor | None) -> ComplexTensor:
    """Per-feature 1-D convolution over the middle axis: x [B,S,D], w [D,k]."""
    bsz, s, d = x.shape
    wd, k = w.shape
    if wd != d:
        raise ValueError(f"depthwise channel mismatch: {d} vs {wd}")
    pl, pr = (k - 1) // 2, k - 1 - (k - 1) // 2

    def run(sig_arr, kern):
        xp = np.pad(sig_arr, ((0, 0), (pl, pr), (0, 0)))
        v = sliding_window_view(xp, k, axis=1)  # [B,S,D,k]
        return np.einsum("bsdk,dk->bsd", v, kern, optimize=True)

    out_r = run(x.real, w.real) - run(x.imag, w.imag)
    out_i = run(x.imag, w.real) + run(x.real, w.imag)
    if b is not None:
        out_r = out_r + b.real.reshape(1, 1, d)
        out_i = out_i + b.imag.reshape(1, 1, d)
    out = ComplexTensor(out_r, out_i)
    parents = (x, w) if b is None else (x, w, b)

    def input_grad(g, kern):
        gp = np.pad(g, ((0, 0), (k - 1 - pl, k - 1 - pr), (0, 0)))
        v = sliding_window_view(gp, k, axis=1)
        return np.einsum("bsdk,dk->bsd", v, kern[:, ::-1], optimize=True)

    def weight_grad(sig_arr, g):
        xp = np.pad(sig_arr, ((0, 0), (pl, pr), (0, 0)))
        v = sliding_window_view(xp, k, axis=1)
        return np.einsum("bsdk,bsd->dk", v, g, optimize=True)

    def bwd(gr, gi):
        gx = gw = gb = None
        if x.requires_grad:
            gx = (input_grad(gr, w.real) + input_grad(gi, w.imag),
                  input_grad(gi, w.real) - input_grad(gr, w.imag))
        if w.requires_grad:
            gw = (weight_grad(x.real, gr) + weight_grad(x.imag, gi),
                  weight_grad(x.real, gi) - weight_grad(x.imag, gr))
        if b is not None and b.requires_grad:
            gb = (gr.sum(axis=(0, 1)), gi.sum(axis=(0, 1)))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, bwd, "depthwise_conv1d")


# ---------------------------------------------------------------------------
# framing / overlap-add (the STFT's differentiable skeleton)
# ---------------------------------------------------------------------------

def _frame_indices(length: int, win: int, hop: int) -> np.ndarray:
    n_frames = 1 + (length - win) // hop
    return (np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]).reshape(-1)


def frame(x: ComplexTensor, win: int, hop: int) -> ComplexTensor:
    """Slice [..., L] into overlapping windows [..., T, win]."""
    length = x.shape[-1]
    if length < win:
        raise ValueError(f"signal length {length} shorter than window {win}")
    vr = sliding_window_view(x.real, win, axis=-1)[..., ::hop, :]
    vi = sliding_window_view(x.imag, win, axis=-1)[..., ::hop, :]
    out = ComplexTensor(np.ascontiguousarray(vr), np.ascontiguousarray(vi))
    idx = _frame_indices(length, win, hop)

    def bwd(gr, gi):
        zr = np.zeros(x.shape, dtype=x.dtype)
        zi = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(zr, (Ellipsis, idx), gr.reshape(gr.shape[:-2] + (-1,)))
        np.add.at(zi, (Ellipsis, idx), gi.reshape(gi.shape[:-2] + (-1,)))
        return ((zr, zi),)

    return _record(out, (x,), bwd, "frame")


def overlap_add(frames: ComplexTensor, hop: int, length: int) -> ComplexTensor:
    """Scatter-add windows [..., T, win] back into a signal [..., length]."""
    t, win = frames.shape[-2], frames.shape[-1]
    if (t - 1) * hop + win > length:
        raise ValueError("frames overrun the requested output length")
    idx = _frame_indices(length, win, hop)[: t * win]
    lead = frames.shape[:-2]
    zr = np.zeros(lead + (length,), dtype=frames.dtype)
    zi = np.zeros(lead + (length,), dtype=frames.dtype)
    np.add.at(zr, (Ellipsis, idx), frames.real.reshape(lead + (-1,)))
    np.add.at(zi, (Ellipsis, idx), frames.imag.reshape(lead + (-1,)))
    out = ComplexTensor(zr, zi)

    def bwd(gr, gi):
        return ((gr[..., idx].reshape(frames.shape), gi[..., idx].reshape(frames.shape)),)

    return _record(out, (frames,), bwd, "overlap_add")
