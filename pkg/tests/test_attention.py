"""CGAB / MHSA / conformer contracts, including a scalar attention oracle."""

import numpy as np
import pytest

from ctftnet import core as C
from ctftnet.attention import (CgabBlock, ComplexMhsa, ConformerBottleneck,
                               ConformerLayer, FtbBlock)
from ctftnet.core import ComplexTensor

F64 = np.float64


def rand_ct(rng, shape, requires_grad=False, dtype=F64):
    return ComplexTensor(rng.standard_normal(shape).astype(dtype),
                         rng.standard_normal(shape).astype(dtype),
                         requires_grad=requires_grad)


def probe_loss(y, seed=0):
    pr = np.random.default_rng(seed)
    p = ComplexTensor(pr.standard_normal(y.shape).astype(y.dtype),
                      pr.standard_normal(y.shape).astype(y.dtype))
    return C.tsum(C.add(C.mul(C.real(y), C.real(p)), C.mul(C.imag(y), C.imag(p))))


def zero_(t):
    t.real[:] = 0.0
    t.imag[:] = 0.0


def copy_params(src, dst):
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        b.real[:] = a.real
        b.imag[:] = a.imag


# ---------------------------------------------------------------------------
# CGAB / FTB
# ---------------------------------------------------------------------------

def test_cgab_shape_preservation():
    rng = np.random.default_rng(0)
    blk = CgabBlock(16, 64, 48, rng=rng, dtype=np.float32)
    x = rand_ct(rng, (2, 16, 64, 48), dtype=np.float32)
    y = blk.forward(x, training=True, update_stats=False)
    assert y.shape == (2, 16, 64, 48)


def test_cgab_zero_input_gives_crelu_of_fuse_beta():
    rng = np.random.default_rng(1)
    blk = CgabBlock(2, 8, 6, rng=rng, dtype=F64)
    blk.fuse.bn.beta.tensor.real[:] = [0.5, -0.5]
    blk.fuse.bn.beta.tensor.imag[:] = [-0.1, 0.3]
    x = ComplexTensor(np.zeros((2, 2, 8, 6)), np.zeros((2, 2, 8, 6)))
    y = blk.forward(x, training=True, update_stats=False)
    np.testing.assert_allclose(y.real[0, :, 0, 0], [0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(y.imag[0, :, 0, 0], [0.0, 0.3], atol=1e-12)


def test_cgab_rejects_unbound_shape():
    rng = np.random.default_rng(2)
    blk = CgabBlock(2, 8, 6, rng=rng)
    with pytest.raises(ValueError):
        blk.forward(ComplexTensor(np.zeros((1, 2, 8, 7), dtype=np.float32)))


def test_cgab_grad_check():
    rng = np.random.default_rng(3)
    blk = CgabBlock(2, 6, 5, kernel_1d=3, rng=rng, dtype=F64)
    x = rand_ct(rng, (2, 2, 6, 5), requires_grad=True)
    err = C.grad_check(
        lambda: probe_loss(blk.forward(x, training=True, update_stats=False)),
        [x] + blk.parameters(), n_samples=6)
    assert err < 1e-5


def test_cgab_series_arrangement():
    rng = np.random.default_rng(4)
    blk = CgabBlock(2, 8, 6, arrangement="series", rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 2, 8, 6))
    assert blk.forward(x, training=True, update_stats=False).shape == (1, 2, 8, 6)


def test_ftb_shape_zero_and_freq_path_equivalence():
    rng = np.random.default_rng(5)
    ftb = FtbBlock(2, 8, 6, rng=rng, dtype=F64)
    x = rand_ct(rng, (2, 2, 8, 6))
    assert ftb.forward(x, training=True, update_stats=False).shape == x.shape
    # zero input -> constant decided by the fuse BN shift
    ftb.fuse.bn.beta.tensor.real[:] = [1.0, 2.0]
    z = ComplexTensor(np.zeros((1, 2, 8, 6)), np.zeros((1, 2, 8, 6)))
    out = ftb.forward(z, training=True, update_stats=False)
    np.testing.assert_allclose(out.real[0, :, 3, 3], [1.0, 2.0], atol=1e-12)
    # the frequency path is the same computation inside CGAB and FTB
    cgab = CgabBlock(2, 8, 6, rng=np.random.default_rng(6), dtype=F64)
    copy_params(ftb.freq_path, cgab.freq_path)
    a = ftb.freq_path.forward(x, training=True, update_stats=False)
    b = cgab.freq_path.forward(x, training=True, update_stats=False)
    assert np.array_equal(a.real, b.real) and np.array_equal(a.imag, b.imag)


# ---------------------------------------------------------------------------
# MHSA
# ---------------------------------------------------------------------------

def mhsa_oracle(x, wq, wk, wv, wo, bq, bk, bv, bo, heads):
    """Plain-python reference: complex projections, Re(QK^H) softmax, complex mix."""
    b, s, d = x.shape
    dh = d // heads
    q = x @ wq.T + bq
    k = x @ wk.T + bk
    v = x @ wv.T + bv
    out = np.zeros((b, s, d), dtype=complex)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = q[bi, :, sl], k[bi, :, sl], v[bi, :, sl]
            scores = np.zeros((s, s))
            for i in range(s):
                for j in range(s):
                    scores[i, j] = np.real(np.sum(qh[i] * np.conj(kh[j]))) / np.sqrt(dh)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            out[bi, :, sl] = w @ vh
    return out @ wo.T + bo


def test_mhsa_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    att = ComplexMhsa(8, 2, rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 4, 8))
    got = att.forward(x).numpy()
    want = mhsa_oracle(x.numpy(),
                       att.wq.weight.tensor.numpy(), att.wk.weight.tensor.numpy(),
                       att.wv.weight.tensor.numpy(), att.wo.weight.tensor.numpy(),
                       att.wq.bias.tensor.numpy(), att.wk.bias.tensor.numpy(),
                       att.wv.bias.tensor.numpy(), att.wo.bias.tensor.numpy(), 2)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mhsa_single_token_is_projection_chain():
    rng = np.random.default_rng(8)
    att = ComplexMhsa(6, 3, rng=rng, dtype=F64)
    x = rand_ct(rng, (2, 1, 6))
    got = att.forward(x).numpy()
    want = att.wo.forward(att.wv.forward(x)).numpy()
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mhsa_identical_tokens_identical_rows():
    rng = np.random.default_rng(9)
    att = ComplexMhsa(8, 2, rng=rng, dtype=F64)
    row = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    x = np.tile(row, (1, 5, 1))
    out = att.forward(ComplexTensor(x.real.copy(), x.imag.copy())).numpy()
    for i in range(1, 5):
        np.testing.assert_allclose(out[0, i], out[0, 0], atol=1e-12)


def test_mhsa_permutation_equivariance():
    rng = np.random.default_rng(10)
    att = ComplexMhsa(8, 4, rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 6, 8))
    perm = rng.permutation(6)
    out = att.forward(x).numpy()
    xp = x.numpy()[:, perm]
    out_p = att.forward(ComplexTensor(xp.real.copy(), xp.imag.copy())).numpy()
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-10)


def test_mhsa_complex_linear_in_v():
    rng = np.random.default_rng(11)
    att = ComplexMhsa(8, 2, rng=rng, dtype=F64)
    zero_(att.wo.bias.tensor)
    x = rand_ct(rng, (1, 5, 8))
    base = att.forward(x).numpy()
    alpha = 0.8 - 1.7j
    att.wv.weight.tensor.real[:], att.wv.weight.tensor.imag[:] = (
        (alpha * att.wv.weight.tensor.numpy()).real,
        (alpha * att.wv.weight.tensor.numpy()).imag)
    att.wv.bias.tensor.real[:], att.wv.bias.tensor.imag[:] = (
        (alpha * att.wv.bias.tensor.numpy()).real,
        (alpha * att.wv.bias.tensor.numpy()).imag)
    scaled = att.forward(x).numpy()
    np.testing.assert_allclose(scaled, alpha * base, atol=1e-10)


def test_mhsa_softmax_rows_and_grad():
    rng = np.random.default_rng(12)
    att = ComplexMhsa(8, 2, rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 4, 8), requires_grad=True)
    err = C.grad_check(lambda: probe_loss(att.forward(x)),
                       [x] + att.parameters(), n_samples=8)
    assert err < 1e-6


def test_mhsa_magnitude_scoring_variant():
    rng = np.random.default_rng(13)
    att = ComplexMhsa(8, 2, scoring="magnitude", rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 4, 8), requires_grad=True)
    assert att.forward(x).shape == (1, 4, 8)
    err = C.grad_check(lambda: probe_loss(att.forward(x)), [x], n_samples=6)
    assert err < 1e-5


def test_mhsa_validation():
    rng = np.random.default_rng(14)
    with pytest.raises(ValueError):
        ComplexMhsa(10, 4, rng=rng)
    att = ComplexMhsa(8, 2, rng=rng)
    with pytest.raises(ValueError):
        att.forward(ComplexTensor(np.zeros((1, 4, 6), dtype=np.float32)))


# ---------------------------------------------------------------------------
# conformer
# ---------------------------------------------------------------------------

def test_conformer_layer_identity_with_zero_branches():
    rng = np.random.default_rng(15)
    layer = ConformerLayer(8, 2, rng=rng, dtype=F64)
    for lin in (layer.ff1.down, layer.ff2.down, layer.attention.wo,
                layer.conv.pw_out):
        zero_(lin.weight.tensor)
        zero_(lin.bias.tensor)
    x = rand_ct(rng, (2, 5, 8))
    y = layer.forward(x)
    np.testing.assert_allclose(y.numpy(), x.numpy(), atol=1e-12)


def test_conformer_bottleneck_shape_preservation():
    rng = np.random.default_rng(16)
    bk = ConformerBottleneck(256, 2, rng=rng, dtype=np.float32)
    x = rand_ct(rng, (1, 256, 2, 12), dtype=np.float32)
    assert bk.forward(x).shape == (1, 256, 2, 12)


def test_conformer_fold_unfold_inverse():
    rng = np.random.default_rng(17)
    bk = ConformerBottleneck(4, 3, n_layers=1, heads=1, rng=rng, dtype=F64)
    layer = bk.stack[0]
    for lin in (layer.ff1.down, layer.ff2.down, layer.attention.wo,
                layer.conv.pw_out):
        zero_(lin.weight.tensor)
        zero_(lin.bias.tensor)
    x = rand_ct(rng, (2, 4, 3, 5))
    y = bk.forward(x)
    np.testing.assert_allclose(y.numpy(), x.numpy(), atol=1e-12)


def test_conformer_grad_check():
    rng = np.random.default_rng(18)
    bk = ConformerBottleneck(4, 4, n_layers=2, heads=2, conv_kernel=3,
                             rng=rng, dtype=F64)  # d = 16, h = 2
    # Zero-initialised depthwise biases put whole windows of clipped
    # activations exactly on the CReLU kink, where finite differences and the
    # one-sided subgradient legitimately disagree.  Test in general position.
    for name, p in bk.named_parameters():
        if name.endswith("dw_bias"):
            p.real[:] = 0.3 * rng.standard_normal(p.shape)
            p.imag[:] = 0.3 * rng.standard_normal(p.shape)
    x = rand_ct(rng, (1, 4, 4, 6), requires_grad=True)  # S = 6
    err = C.grad_check(lambda: probe_loss(bk.forward(x)),
                       [x] + bk.parameters(), n_samples=4)
    assert err < 1e-5


def test_conformer_dropout_deterministic_and_train_only():
    rng = np.random.default_rng(19)
    bk = ConformerBottleneck(2, 4, n_layers=1, heads=2, dropout=0.5,
                             rng=rng, dtype=F64)
    x = rand_ct(rng, (1, 2, 4, 6))
    e1 = bk.forward(x, training=False).numpy()
    e2 = bk.forward(x, training=False).numpy()
    np.testing.assert_array_equal(e1, e2)
    t1 = bk.forward(x, training=True, rng=np.random.default_rng(1)).numpy()
    t2 = bk.forward(x, training=True, rng=np.random.default_rng(1)).numpy()
    t3 = bk.forward(x, training=True, rng=np.random.default_rng(2)).numpy()
    np.testing.assert_array_equal(t1, t2)
    assert not np.array_equal(t1, t3)
    assert not np.array_equal(t1, e1)


def test_conformer_without_conv_module():
    rng = np.random.default_rng(20)
    bk = ConformerBottleneck(2, 4, n_layers=1, heads=2, use_conv_module=False,
                             rng=rng, dtype=F64)
    assert bk.stack[0].conv is None
    x = rand_ct(rng, (1, 2, 4, 5))
    assert bk.forward(x).shape == x.shape
