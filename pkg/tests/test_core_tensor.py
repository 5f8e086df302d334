"""Autodiff core: elementwise algebra, matmul oracle, backward soundness."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctftnet import core as C
from ctftnet.core import ComplexTensor


def ct(z, requires_grad=False):
    z = np.asarray(z, dtype=np.complex128)
    return ComplexTensor(z.real.copy(), z.imag.copy(), requires_grad=requires_grad)


def rand_ct(rng, shape, requires_grad=False):
    return ComplexTensor(rng.standard_normal(shape), rng.standard_normal(shape),
                         requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# algebra
# ---------------------------------------------------------------------------

def test_mul_against_numpy_complex():
    rng = np.random.default_rng(1)
    a, b = rand_ct(rng, (4, 5)), rand_ct(rng, (4, 5))
    got = C.mul(a, b).numpy()
    want = a.numpy() * b.numpy()
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mul_conj_is_squared_magnitude():
    rng = np.random.default_rng(2)
    z = rand_ct(rng, (6,))
    out = C.mul(z, C.conj(z))
    np.testing.assert_allclose(out.real, np.abs(z.numpy()) ** 2, atol=1e-12)
    assert np.all(out.imag == 0.0)  # exact: r*i - i*r


def test_abs_pythagorean():
    assert C.cabs(ct([3 + 4j])).item() == pytest.approx(5.0, abs=1e-12)


def test_matmul_identity_and_i_squared():
    eye = ct(np.eye(3))
    rng = np.random.default_rng(3)
    a = rand_ct(rng, (3, 3))
    np.testing.assert_allclose(C.complex_matmul(a, eye).numpy(), a.numpy(), atol=1e-14)
    j = ct([[1j]])
    np.testing.assert_allclose(C.complex_matmul(j, j).numpy(), [[-1 + 0j]], atol=1e-15)


def test_matmul_scalar_loop_oracle():
    rng = np.random.default_rng(4)
    a, b = rand_ct(rng, (3, 4)), rand_ct(rng, (4, 2))
    am, bm = a.numpy(), b.numpy()
    want = np.zeros((3, 2), dtype=np.complex128)
    for i in range(3):
        for j in range(2):
            acc = 0 + 0j
            for k in range(4):
                acc += am[i, k] * bm[k, j]
            want[i, j] = acc
    np.testing.assert_allclose(C.complex_matmul(a, b).numpy(), want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mul_commutative_associative_distributive(seed):
    rng = np.random.default_rng(seed)
    x, y, z = (rand_ct(rng, (3, 3)) for _ in range(3))
    xy = C.mul(x, y).numpy()
    np.testing.assert_allclose(xy, C.mul(y, x).numpy(), atol=1e-12)
    np.testing.assert_allclose(C.mul(C.mul(x, y), z).numpy(),
                               C.mul(x, C.mul(y, z)).numpy(), atol=1e-12)
    np.testing.assert_allclose(C.mul(x, C.add(y, z)).numpy(),
                               C.add(C.mul(x, y), C.mul(x, z)).numpy(), atol=1e-12)


def test_reshape_round_trip_bit_exact():
    rng = np.random.default_rng(5)
    a = rand_ct(rng, (3, 4, 5))
    back = C.reshape(C.reshape(a, (60,)), (3, 4, 5))
    assert np.array_equal(back.real, a.real) and np.array_equal(back.imag, a.imag)


def test_crelu_quadrants_and_idempotence():
    z = ct([1 + 1j, -2 + 3j, -1 - 1j])
    out = C.crelu(z)
    np.testing.assert_array_equal(out.numpy(), [1 + 1j, 0 + 3j, 0 + 0j])
    again = C.crelu(out)
    assert np.array_equal(again.real, out.real) and np.array_equal(again.imag, out.imag)


def test_pad_reflect_matches_numpy_and_supports_wide_pads():
    rng = np.random.default_rng(6)
    a = rand_ct(rng, (2, 7))
    got = C.pad_reflect(a, axis=1, before=3, after=4)
    want = np.pad(a.numpy(), ((0, 0), (3, 4)), mode="reflect")
    np.testing.assert_array_equal(got.numpy(), want)
    # wider than n-1: chain of reflections
    small = ct([1.0, 2.0, 3.0])
    wide = C.pad_reflect(small, axis=0, before=0, after=6)
    np.testing.assert_array_equal(
        wide.real, [1, 2, 3, 2, 1, 2, 3, 2, 1])


def test_softmax_rows_nonnegative_and_sum_to_one():
    rng = np.random.default_rng(7)
    x = ComplexTensor(rng.standard_normal((5, 9)) * 10)
    s = C.softmax_r(x, axis=-1)
    assert np.all(s.real >= 0)
    np.testing.assert_allclose(s.real.sum(axis=-1), 1.0, atol=1e-7)
    assert np.all(s.imag == 0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_identity_quadratic():
    # L = sum(z_r^2) -> dL/dz_r = 2 z_r, dL/dz_i = 0
    rng = np.random.default_rng(8)
    z = rand_ct(rng, (4,), requires_grad=True)
    r = C.real(z)
    loss = C.tsum(C.mul(r, r))
    C.backward(loss)
    np.testing.assert_allclose(z.grad[0], 2 * z.real, atol=1e-14)
    np.testing.assert_allclose(z.grad[1], 0.0, atol=1e-14)


def test_backward_double_use_accumulates():
    z = ct([2.0 + 1j], requires_grad=True)
    # L = Re(z) + Re(z): two graph paths into the same leaf
    loss = C.tsum(C.add(C.real(z), C.real(z)))
    C.backward(loss)
    np.testing.assert_allclose(z.grad[0], [2.0])


def test_backward_requires_scalar_real():
    z = ct([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        C.backward(C.real(z))
    with pytest.raises(ValueError):
        C.backward(C.tsum(z * ct([1j, 1j])))


def test_backward_detached_warns():
    z = ct([1.0])
    with pytest.warns(C.tensor.DetachedLossWarning):
        C.backward(C.tsum(z))


def test_graph_consumed_after_backward():
    z = ct([1.0], requires_grad=True)
    loss = C.tsum(C.mul(C.real(z), C.real(z)))
    C.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        C.backward(loss)


def test_finite_difference_matmul_magnitude():
    # L = sum |W x|^2 against central differences
    rng = np.random.default_rng(9)
    w = rand_ct(rng, (3, 4), requires_grad=True)
    x = rand_ct(rng, (4, 2))

    def fn():
        y = C.complex_matmul(w, x)
        return C.tsum(C.real(C.mul(y, C.conj(y))))

    err = C.grad_check(fn, [w], step=1e-5, n_samples=12)
    assert err < 1e-6


def test_grad_check_detects_nondeterminism():
    state = {"n": 0.0}

    def fn():
        state["n"] += 1.0
        return C.tsum(ct([state["n"]]))

    with pytest.raises(C.DeterminismError):
        C.grad_check(fn, [], n_samples=1)


ELEMENTWISE_CASES = [
    ("add", lambda a, b: C.add(a, b), 2),
    ("sub", lambda a, b: C.sub(a, b), 2),
    ("mul", lambda a, b: C.mul(a, b), 2),
    ("neg", lambda a: C.neg(a), 1),
    ("conj", lambda a: C.conj(a), 1),
    ("scale", lambda a: C.scale(a, 0.7 - 1.3j), 1),
    ("cabs", lambda a: C.cabs(a), 1),
    ("crelu", lambda a: C.crelu(a), 1),
    ("real", lambda a: C.real(a), 1),
    ("imag", lambda a: C.imag(a), 1),
    ("reshape", lambda a: C.reshape(a, (6, 4)), 1),
    ("transpose", lambda a: C.transpose(a, (2, 0, 1)), 1),
    ("slice", lambda a: a[:, 1:3, ::2], 1),
    ("pad_constant", lambda a: C.pad_constant(a, ((0, 0), (1, 2), (0, 1))), 1),
    ("pad_reflect", lambda a: C.pad_reflect(a, 1, 2, 5), 1),
    ("sum_axis", lambda a: C.tsum(a, axis=(0, 2)), 1),
    ("mean_keep", lambda a: C.tmean(a, axis=1, keepdims=True), 1),
]


@pytest.mark.parametrize("name,op,arity", ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
def test_grad_elementwise_ops(name, op, arity):
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    args = [rand_ct(rng, (2, 4, 3), requires_grad=True) for _ in range(arity)]
    # probe with a fixed random linear functional so every output matters
    probes = {}

    def fn():
        y = op(*args)
        if y.shape not in probes:
            pr = np.random.default_rng(0)
            probes[y.shape] = (pr.standard_normal(y.shape), pr.standard_normal(y.shape))
        cr, ci_ = probes[y.shape]
        probe = ComplexTensor(cr, ci_)
        return C.tsum(C.add(C.mul(C.real(y), C.real(probe)),
                            C.mul(C.imag(y), C.imag(probe))))

    err = C.grad_check(fn, args, n_samples=10)
    assert err < 1e-6, f"{name}: relative error {err}"


def test_grad_real_transcendentals_and_div():
    rng = np.random.default_rng(11)
    a = ComplexTensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
    b = ComplexTensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)

    def fn():
        y = C.rdiv(C.exp_r(C.log_r(C.sqrt_r(a))), b)
        return C.tsum(C.mul(y, y))

    err = C.grad_check(fn, [a, b], n_samples=9)
    assert err < 1e-6


def test_grad_concat_softmax_make_complex():
    rng = np.random.default_rng(12)
    a = rand_ct(rng, (2, 3), requires_grad=True)
    b = rand_ct(rng, (2, 3), requires_grad=True)

    def fn():
        merged = C.concat([a, b], axis=1)
        weights = C.softmax_r(C.real(merged), axis=-1)
        mixed = C.mul(merged, weights)
        rebuilt = C.make_complex(C.imag(mixed), C.real(mixed))
        return C.tsum(C.real(C.mul(rebuilt, C.conj(rebuilt))))

    err = C.grad_check(fn, [a, b], n_samples=6)
    assert err < 1e-6


def test_grad_clip_zero_outside():
    a = ComplexTensor(np.array([0.5, 3.0, -2.0]), requires_grad=True)

    def fn():
        return C.tsum(C.clip_r(a, -1.0, 1.0))

    C.backward(fn())
    np.testing.assert_array_equal(a.grad[0], [1.0, 0.0, 0.0])


def test_broadcasting_backward_shapes():
    rng = np.random.default_rng(13)
    a = rand_ct(rng, (4, 1, 3), requires_grad=True)
    b = rand_ct(rng, (5, 1), requires_grad=True)

    def fn():
        y = C.mul(a, b)
        return C.tsum(C.real(C.mul(y, C.conj(y))))

    err = C.grad_check(fn, [a, b], n_samples=8)
    assert err < 1e-6
    assert a.grad[0].shape == (4, 1, 3) and b.grad[0].shape == (5, 1)


def test_determinism_same_seed_bit_identical():
    def build(seed):
        rng = np.random.default_rng(seed)
        x = rand_ct(rng, (8, 8), requires_grad=True)
        y = C.crelu(C.complex_matmul(x, C.conj(x)))
        loss = C.tsum(C.cabs(y))
        C.backward(loss)
        return loss.item(), x.grad[0].copy(), x.grad[1].copy()

    l1, g1r, g1i = build(42)
    l2, g2r, g2i = build(42)
    assert l1 == l2
    assert np.array_equal(g1r, g2r) and np.array_equal(g1i, g2i)


def test_mixed_precision_rejected():
    a = ComplexTensor(np.zeros(3, dtype=np.float32))
    b = ComplexTensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(TypeError):
        C.add(a, b)
