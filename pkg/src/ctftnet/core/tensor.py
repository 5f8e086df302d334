"""Complex tensors with reverse-mode automatic differentiation.

A :class:`ComplexTensor` carries a pair of equally-shaped real numpy arrays
(real part, imaginary part).  Operations on tensors record backward rules on
the implicit tape (the parent links of each result), and :func:`backward`
replays the tape in reverse topological order, accumulating gradients as
real pairs ``(dL/d real, dL/d imag)`` -- the natural convention for real
scalar losses and the one finite differences verify directly.

Only leaf tensors created with ``requires_grad=True`` retain their gradient
in ``.grad`` after a backward pass; intermediate gradients are freed as soon
as they have been consumed.  The graph of a tensor is consumed by backward
(a second backward through the same result raises).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ComplexTensor",
    "Parameter",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add", "sub", "neg", "mul", "scale", "conj",
    "real", "imag", "make_complex", "cabs", "crelu",
    "exp_r", "log_r", "sqrt_r", "rdiv", "clip_r",
    "complex_matmul",
    "reshape", "transpose", "getitem", "concat",
    "pad_constant", "pad_reflect", "reflect_indices",
    "tsum", "tmean", "stop_gradient", "softmax_r",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class _GradMode(threading.local):
    enabled = True


_MODE = _GradMode()


class no_grad:
    """Context manager disabling tape recording (inference / oracles)."""

    def __enter__(self):
        self._prev = _MODE.enabled
        _MODE.enabled = False
        return self

    def __exit__(self, *exc):
        _MODE.enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _MODE.enabled


class ComplexTensor:
    """N-dimensional complex array: a (real, imag) pair of float arrays."""

    __slots__ = ("real", "imag", "requires_grad", "grad", "_parents", "_bwd", "_op")

    def __init__(self, real, imag=None, requires_grad: bool = False):
        real = np.asarray(real)
        if real.dtype not in _FLOAT_DTYPES:
            real = real.astype(np.float64)
        if imag is None:
            imag = np.zeros_like(real)
        else:
            imag = np.asarray(imag, dtype=real.dtype)
        if real.shape != imag.shape:
            raise ValueError(f"real/imag shape mismatch: {real.shape} vs {imag.shape}")
        self.real = real
        self.imag = imag
        self.requires_grad = bool(requires_grad)
        self.grad = None  # pair (d/d real, d/d imag) on leaves after backward
        self._parents = None
        self._bwd = None
        self._op = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> "ComplexTensor":
        return ComplexTensor(np.zeros(shape, dtype), np.zeros(shape, dtype), requires_grad)

    @staticmethod
    def from_complex(z, requires_grad: bool = False, dtype=None) -> "ComplexTensor":
        z = np.asarray(z)
        dtype = dtype or (np.float32 if z.dtype == np.complex64 else np.float64)
        return ComplexTensor(z.real.astype(dtype), z.imag.astype(dtype), requires_grad)

    # -- views ---------------------------------------------------------------

    @property
    def shape(self):
        return self.real.shape

    @property
    def ndim(self) -> int:
        return self.real.ndim

    @property
    def size(self) -> int:
        return self.real.size

    @property
    def dtype(self):
        return self.real.dtype

    def numpy(self) -> np.ndarray:
        """Dense complex view (copy)."""
        return self.real + 1j * self.imag

    def item(self) -> float:
        if self.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.real.reshape(()))

    def astype(self, dtype) -> "ComplexTensor":
        return ComplexTensor(self.real.astype(dtype), self.imag.astype(dtype),
                             self.requires_grad)

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.real, self.imag, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, gr: np.ndarray, gi: np.ndarray) -> None:
        if self.grad is None:
            self.grad = (gr.astype(self.dtype, copy=True),
                         gi.astype(self.dtype, copy=True))
        else:
            self.grad[0].__iadd__(gr)
            self.grad[1].__iadd__(gi)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return complex_matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter:
    """A named trainable leaf: the unit of checkpointing and optimization."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: ComplexTensor):
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self.name = name
        self.tensor = tensor

    @property
    def shape(self):
        return self.tensor.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Reverse topological order of the operations reachable from a tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _as_tensor(x, dtype) -> ComplexTensor:
    if isinstance(x, ComplexTensor):
        return x
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        return ComplexTensor(arr.real.astype(dtype), arr.imag.astype(dtype))
    return ComplexTensor(arr.astype(dtype))


def _check_dtype(*tensors: ComplexTensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed tensor precisions: {dt} vs {t.dtype}")


def _record(out: ComplexTensor, parents: Sequence[ComplexTensor],
            bwd: Callable, op: str) -> ComplexTensor:
    """Attach a backward rule when recording is active and any parent needs it."""
    if _MODE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def trace(result: ComplexTensor) -> Tape:
    """Topologically ordered tape of every recorded op below ``result``."""
    order, visited, stack = [], set(), [(result, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._parents:
            for p in node._parents:
                if id(p) not in visited and p._parents is not None:
                    stack.append((p, False))
                elif id(p) not in visited and p.requires_grad:
                    visited.add(id(p))
                    order.append(p)
    return Tape(order)


class DetachedLossWarning(UserWarning):
    pass


def backward(loss: ComplexTensor) -> None:
    """Reverse-mode sweep from a real scalar; accumulates ``.grad`` on leaves.

    The graph below ``loss`` is consumed: parent links are dropped after use,
    so calling backward twice on the same result raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if np.any(loss.imag != 0):
        raise ValueError("backward expects a real-valued loss (imaginary part is nonzero)")
    if loss._parents == ():
        raise RuntimeError("graph below this tensor was already consumed by backward()")
    if loss._parents is None and not loss.requires_grad:
        import warnings
        warnings.warn("loss is detached from every tracked parameter", DetachedLossWarning)
        return

    tape = trace(loss)
    grads: dict[int, list[np.ndarray]] = {
        id(loss): [np.ones_like(loss.real), np.zeros_like(loss.real)]
    }
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            if node.requires_grad:
                node.accumulate_grad(g[0], g[1])
            continue
        if node._bwd is None:
            raise RuntimeError(
                "gradient reached a node whose tape was consumed by an earlier "
                "backward(); recompute the forward pass instead of reusing results")
        contribs = node._bwd(g[0], g[1])
        for parent, pg in zip(node._parents, contribs):
            if pg is None or not parent.requires_grad:
                continue
            if parent._parents is None:
                # leaf: accumulate straight into .grad
                parent.accumulate_grad(pg[0], pg[1])
            else:
                buf = grads.get(id(parent))
                if buf is None:
                    grads[id(parent)] = [np.array(pg[0], copy=True),
                                         np.array(pg[1], copy=True)]
                else:
                    buf[0] += pg[0]
                    buf[1] += pg[1]
        node._parents = ()
        node._bwd = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _check_dtype(a, b)
    out = ComplexTensor(a.real + b.real, a.imag + b.imag)

    def bwd(gr, gi):
        return ((_unbroadcast(gr, a.shape), _unbroadcast(gi, a.shape)),
                (_unbroadcast(gr, b.shape), _unbroadcast(gi, b.shape)))

    return _record(out, (a, b), bwd, "add")


def sub(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _check_dtype(a, b)
    out = ComplexTensor(a.real - b.real, a.imag - b.imag)

    def bwd(gr, gi):
        return ((_unbroadcast(gr, a.shape), _unbroadcast(gi, a.shape)),
                (_unbroadcast(-gr, b.shape), _unbroadcast(-gi, b.shape)))

    return _record(out, (a, b), bwd, "sub")


def neg(a: ComplexTensor) -> ComplexTensor:
    out = ComplexTensor(-a.real, -a.imag)
    return _record(out, (a,), lambda gr, gi: ((-gr, -gi),), "neg")


def mul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Elementwise complex product (broadcasting)."""
    _check_dtype(a, b)
    ar, ai, br, bi = a.real, a.imag, b.real, b.imag
    out = ComplexTensor(ar * br - ai * bi, ar * bi + ai * br)

    def bwd(gr, gi):
        # dL/da = g * conj(b);  dL/db = g * conj(a)
        ga = (_unbroadcast(gr * br + gi * bi, a.shape),
              _unbroadcast(gi * br - gr * bi, a.shape))
        gb = (_unbroadcast(gr * ar + gi * ai, b.shape),
              _unbroadcast(gi * ar - gr * ai, b.shape))
        return ga, gb

    return _record(out, (a, b), bwd, "mul")


def scale(a: ComplexTensor, c) -> ComplexTensor:
    """Multiply by a python scalar constant (real or complex)."""
    cr, ci = float(np.real(c)), float(np.imag(c))
    if ci == 0.0:
        out = ComplexTensor(a.real * cr, a.imag * cr)
    else:
        out = ComplexTensor(a.real * cr - a.imag * ci, a.real * ci + a.imag * cr)

    def bwd(gr, gi):
        return ((gr * cr + gi * ci, gi * cr - gr * ci),)

    return _record(out, (a,), bwd, "scale")


def conj(a: ComplexTensor) -> ComplexTensor:
    out = ComplexTensor(a.real, -a.imag)
    return _record(out, (a,), lambda gr, gi: ((gr, -gi),), "conj")


def real(a: ComplexTensor) -> ComplexTensor:
    """Real part, as a real-valued tensor (imaginary part identically zero)."""
    out = ComplexTensor(a.real, np.zeros_like(a.real))
    return _record(out, (a,), lambda gr, gi: ((gr, np.zeros_like(gr)),), "real")


def imag(a: ComplexTensor) -> ComplexTensor:
    """Imaginary part as a real-valued tensor."""
    out = ComplexTensor(a.imag, np.zeros_like(a.imag))
    return _record(out, (a,), lambda gr, gi: ((np.zeros_like(gr), gr),), "imag")


def make_complex(re: ComplexTensor, im: ComplexTensor) -> ComplexTensor:
    """Assemble a complex tensor from two real-valued tensors' real parts."""
    _check_dtype(re, im)
    rr, ir = np.broadcast_arrays(re.real, im.real)
    out = ComplexTensor(rr.copy(), ir.copy())

    def bwd(gr, gi):
        z = np.zeros_like(gr)
        return ((_unbroadcast(gr, re.shape), _unbroadcast(z, re.shape)),
                (_unbroadcast(gi, im.shape), _unbroadcast(z, im.shape)))

    return _record(out, (re, im), bwd, "make_complex")


def cabs(a: ComplexTensor) -> ComplexTensor:
    """Complex magnitude |z| = sqrt(r^2 + i^2) as a real-valued tensor."""
    m = np.hypot(a.real, a.imag)
    out = ComplexTensor(m, np.zeros_like(m))

    def bwd(gr, gi):
        safe = np.where(m == 0.0, 1.0, m)
        scale_ = gr / safe
        return ((np.where(m == 0.0, 0.0, scale_ * a.real),
                 np.where(m == 0.0, 0.0, scale_ * a.imag)),)

    return _record(out, (a,), bwd, "cabs")


def crelu(a: ComplexTensor) -> ComplexTensor:
    """Split ReLU: max(0, real) + j max(0, imag)."""
    mr = a.real > 0
    mi = a.imag > 0
    out = ComplexTensor(np.where(mr, a.real, 0.0).astype(a.dtype),
                        np.where(mi, a.imag, 0.0).astype(a.dtype))
    return _record(out, (a,), lambda gr, gi: ((gr * mr, gi * mi),), "crelu")


# -- real-domain transcendentals (operate on the real part; inputs are
#    real-valued tensors by construction) -----------------------------------

def exp_r(a: ComplexTensor) -> ComplexTensor:
    e = np.exp(a.real)
    out = ComplexTensor(e, np.zeros_like(e))
    return _record(out, (a,), lambda gr, gi: ((gr * e, np.zeros_like(gr)),), "exp_r")


def log_r(a: ComplexTensor) -> ComplexTensor:
    out = ComplexTensor(np.log(a.real), np.zeros_like(a.real))
    return _record(out, (a,),
                   lambda gr, gi: ((gr / a.real, np.zeros_like(gr)),), "log_r")


def sqrt_r(a: ComplexTensor) -> ComplexTensor:
    s = np.sqrt(a.real)
    out = ComplexTensor(s, np.zeros_like(s))

    def bwd(gr, gi):
        return ((gr * (0.5 / s), np.zeros_like(gr)),)

    return _record(out, (a,), bwd, "sqrt_r")


def rdiv(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Divide a complex tensor by a real-valued tensor (broadcasting)."""
    _check_dtype(a, b)
    br = b.real
    out = ComplexTensor(a.real / br, a.imag / br)

    def bwd(gr, gi):
        ga = (_unbroadcast(gr / br, a.shape), _unbroadcast(gi / br, a.shape))
        gb_r = -(gr * out.real + gi * out.imag) / br
        gb = (_unbroadcast(gb_r, b.shape), _unbroadcast(np.zeros_like(gb_r), b.shape))
        return ga, gb

    return _record(out, (a, b), bwd, "rdiv")


def clip_r(a: ComplexTensor, lo: float, hi: float) -> ComplexTensor:
    """Clamp the real part to [lo, hi]; gradient is zero where clamped."""
    inside = (a.real >= lo) & (a.real <= hi)
    out = ComplexTensor(np.clip(a.real, lo, hi), np.zeros_like(a.real))
    return _record(out, (a,),
                   lambda gr, gi: ((gr * inside, np.zeros_like(gr)),), "clip_r")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _cmm(ar, ai, br, bi):
    return ar @ br - ai @ bi, ar @ bi + ai @ br


def complex_matmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Batched complex matrix product: (a_r b_r - a_i b_i) + j(a_r b_i + a_i b_r)."""
    _check_dtype(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    outr, outi = _cmm(a.real, a.imag, b.real, b.imag)
    out = ComplexTensor(outr, outi)

    def bwd(gr, gi):
        # dL/dA = G @ B^H ; dL/dB = A^H @ G   (H = conjugate transpose)
        bT_r = np.swapaxes(b.real, -1, -2)
        bT_i = np.swapaxes(b.imag, -1, -2)
        aT_r = np.swapaxes(a.real, -1, -2)
        aT_i = np.swapaxes(a.imag, -1, -2)
        ga_r, ga_i = _cmm(gr, gi, bT_r, -bT_i)
        gb_r, gb_i = _cmm(aT_r, -aT_i, gr, gi)
        batch_a = a.shape[:-2]
        batch_b = b.shape[:-2]
        return ((_unbroadcast(ga_r, batch_a + a.shape[-2:]),
                 _unbroadcast(ga_i, batch_a + a.shape[-2:])),
                (_unbroadcast(gb_r, batch_b + b.shape[-2:]),
                 _unbroadcast(gb_i, batch_b + b.shape[-2:])))

    return _record(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: ComplexTensor, shape) -> ComplexTensor:
    old = a.shape
    out = ComplexTensor(a.real.reshape(shape), a.imag.reshape(shape))
    return _record(out, (a,),
                   lambda gr, gi: ((gr.reshape(old), gi.reshape(old)),), "reshape")


def transpose(a: ComplexTensor, axes) -> ComplexTensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = ComplexTensor(a.real.transpose(axes), a.imag.transpose(axes))
    return _record(out, (a,),
                   lambda gr, gi: ((gr.transpose(inv), gi.transpose(inv)),), "transpose")


def getitem(a: ComplexTensor, key) -> ComplexTensor:
    out = ComplexTensor(a.real[key], a.imag[key])

    def bwd(gr, gi):
        zr = np.zeros(a.shape, dtype=a.dtype)
        zi = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(zr, key, gr)
        np.add.at(zi, key, gi)
        return ((zr, zi),)

    return _record(out, (a,), bwd, "getitem")


def concat(tensors: Sequence[ComplexTensor], axis: int) -> ComplexTensor:
    _check_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = ComplexTensor(np.concatenate([t.real for t in tensors], axis),
                        np.concatenate([t.imag for t in tensors], axis))

    def bwd(gr, gi):
        cuts = np.cumsum(sizes)[:-1]
        grs = np.split(gr, cuts, axis)
        gis = np.split(gi, cuts, axis)
        return tuple((r, i) for r, i in zip(grs, gis))

    return _record(out, tuple(tensors), bwd, "concat")


def pad_constant(a: ComplexTensor, pad_width) -> ComplexTensor:
    """Zero padding; ``pad_width`` follows numpy conventions."""
    pw = tuple((int(b), int(e)) for b, e in pad_width)
    out = ComplexTensor(np.pad(a.real, pw), np.pad(a.imag, pw))
    sl = tuple(slice(b, dim + b) for (b, _), dim in zip(pw, a.shape))
    return _record(out, (a,), lambda gr, gi: ((gr[sl], gi[sl]),), "pad_constant")


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Index map realizing reflect padding of a length-``n`` axis.

    Reflection is applied repeatedly so the pad may exceed ``n - 1`` (a single
    numpy reflect pad cannot).
    """
    if n == 1:
        return np.zeros(before + 1 + after, dtype=np.intp)
    idx = np.arange(n, dtype=np.intp)
    b, e = before, after
    while b > 0 or e > 0:
        db, de = min(b, n - 1), min(e, n - 1)
        idx = np.pad(idx, (db, de), mode="reflect")
        b -= db
        e -= de
        n = idx.size
    return idx


def pad_reflect(a: ComplexTensor, axis: int, before: int, after: int) -> ComplexTensor:
    axis = axis % a.ndim
    idx = reflect_indices(a.shape[axis], before, after)
    out = ComplexTensor(np.take(a.real, idx, axis=axis),
                        np.take(a.imag, idx, axis=axis))

    def bwd(gr, gi):
        zr = np.zeros(a.shape, dtype=a.dtype)
        zi = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(np.moveaxis(zr, axis, 0), idx, np.moveaxis(gr, axis, 0))
        np.add.at(np.moveaxis(zi, axis, 0), idx, np.moveaxis(gi, axis, 0))
        return ((zr, zi),)

    return _record(out, (a,), bwd, "pad_reflect")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: ComplexTensor, axis=None, keepdims: bool = False) -> ComplexTensor:
    out = ComplexTensor(a.real.sum(axis=axis, keepdims=keepdims),
                        a.imag.sum(axis=axis, keepdims=keepdims))

    def bwd(gr, gi):
        return ((_expand_reduced(gr, a.shape, axis, keepdims),
                 _expand_reduced(gi, a.shape, axis, keepdims)),)

    return _record(out, (a,), bwd, "sum")


def tmean(a: ComplexTensor, axis=None, keepdims: bool = False) -> ComplexTensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)])
    inv = 1.0 / float(count)
    out = ComplexTensor(a.real.mean(axis=axis, keepdims=keepdims),
                        a.imag.mean(axis=axis, keepdims=keepdims))

    def bwd(gr, gi):
        return ((_expand_reduced(gr * inv, a.shape, axis, keepdims),
                 _expand_reduced(gi * inv, a.shape, axis, keepdims)),)

    return _record(out, (a,), bwd, "mean")


def stop_gradient(a: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(a.real.copy(), a.imag.copy())


def softmax_r(a: ComplexTensor, axis: int = -1) -> ComplexTensor:
    """Numerically stable softmax over the real part of a real-valued tensor.

    The shift by the (detached) rowwise max leaves the function unchanged, so
    gradients remain exact.
    """
    m = ComplexTensor(a.real.max(axis=axis, keepdims=True))
    e = exp_r(sub(a, m))
    s = tsum(e, axis=axis, keepdims=True)
    return rdiv(e, s)
