"""Reverse-mode automatic differentiation on 64-bit numpy arrays.

The engine is tape-based: every primitive records a backward closure on an
explicit :class:`Tape`, and :func:`backward` replays the records in reverse.
The primitive set is the minimal closure needed by the network layers of this
package (dense/batched matmul, sparse-by-dense products, elementwise ops,
feature concat/slice, reductions, bias broadcast, a full-length sequence
convolution, and batch normalization).

Conventions:
  * all buffers are float64;
  * tensors have at most 3 axes;
  * sparse operands are constants (their entries carry no gradient);
  * gradients accumulate across multiple uses of the same tensor.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as _sp
from scipy.fft import next_fast_len, rfft, irfft


def _tune_glibc_allocator():
    """Keep freed medium-size buffers in the heap instead of unmapping them.

    A reverse-mode tape allocates hundreds of ~100 KB arrays per step; with
    glibc's default 128 KB mmap/trim thresholds every one of them is returned
    to the kernel on free and page-faulted back in on the next step, which
    dominates the runtime.  Raising both thresholds makes the allocator
    recycle these buffers (measured >10x end-to-end on training loops).
    No-op on platforms without glibc's mallopt.
    """
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_glibc_allocator()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def _shapes(*arrays):
    return " vs ".join(str(np.shape(a)) for a in arrays)


class Tensor:
    """A float64 array with an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 3:
            raise ShapeError(f"tensors are limited to 3 axes, got {self.data.shape}")
        self.grad = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = " trainable" if self.trainable else ""
        return f"Tensor({self.name or 'anon'}, shape={self.data.shape}{tag})"


class _Record:
    __slots__ = ("fn", "visits")

    def __init__(self, fn):
        self.fn = fn
        self.visits = 0


class Tape:
    """Ordered record of primitive operations; operands precede results."""

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def push(self, backward_fn):
        self.records.append(_Record(backward_fn))

    def __len__(self):
        return len(self.records)


def _acc(t: Tensor, g):
    # Assign-or-add; never mutate an existing grad buffer in place.
    t.grad = g if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor):
    """Populate gradients of every tensor reachable from ``loss``.

    The loss must be a scalar result recorded on ``tape``.  Each record is
    visited exactly once, so the pass is linear in tape length.
    """
    if loss.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones(())
    for rec in reversed(tape.records):
        rec.visits += 1
        rec.fn()


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives


def _lead_sum(g, n_keep):
    """Sum over all axes except the last ``n_keep`` via a BLAS dot product.

    Much faster than ufunc reductions for the tall-skinny shapes this engine
    produces (hundreds of rows, a handful of trailing features).
    """
    keep = g.shape[g.ndim - n_keep:] if n_keep else ()
    flat = np.ascontiguousarray(g).reshape(-1, int(np.prod(keep)) if keep else 1)
    out = np.ones(flat.shape[0]) @ flat
    return out.reshape(keep) if keep else out[0]


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0 and g.shape[extra:] == tuple(shape):
        return _lead_sum(g, len(shape))
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {_shapes(a, b)}") from None


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    tape.push(bwd)
    return out


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data - b.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    tape.push(bwd)
    return out


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    tape.push(bwd)
    return out


def scale(tape, a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    tape.push(lambda: _acc(a, out.grad * c))
    return out


def add_const(tape, a: Tensor, c) -> Tensor:
    """Add a constant array (no gradient flows into ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    _check_broadcast(a.data, c)
    out = Tensor(a.data + c)
    tape.push(lambda: _acc(a, _unbroadcast(out.grad, a.data.shape)))
    return out


def mul_const(tape, a: Tensor, c) -> Tensor:
    """Multiply by a constant array (no gradient flows into ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    _check_broadcast(a.data, c)
    out = Tensor(a.data * c)
    tape.push(lambda: _acc(a, _unbroadcast(out.grad * c, a.data.shape)))
    return out


def tanh(tape, a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    tape.push(lambda: _acc(a, out.grad * (1.0 - y * y)))
    return out


ACTIVATIONS = {"tanh": tanh, "identity": lambda tape, a: a}


# ---------------------------------------------------------------------------
# linear algebra


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Dense matmul: 2-D x 2-D, or 3-D x 3-D with matching leading axis."""
    ad, bd = a.data, b.data
    ok = (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]) or (
        ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0] and ad.shape[2] == bd.shape[1]
    )
    if not ok:
        raise ShapeError(f"matmul shapes incompatible: {_shapes(ad, bd)}")
    out = Tensor(np.matmul(ad, bd))

    def bwd():
        g = out.grad
        if ad.ndim == 2:
            _acc(a, g @ bd.T)
            _acc(b, ad.T @ g)
        else:
            _acc(a, np.matmul(g, bd.transpose(0, 2, 1)))
            _acc(b, np.matmul(ad.transpose(0, 2, 1), g))

    tape.push(bwd)
    return out


def sparse_matmul(tape, smat, x: Tensor, smat_t=None) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor.

    ``smat`` is scipy CSR with shape (p, n); ``x`` has shape (n, ...) and the
    trailing axes are flattened for the product.  The adjoint multiplies by
    the transpose; callers holding a symmetric matrix can pass it again as
    ``smat_t`` to skip the conversion.
    """
    if not _sp.issparse(smat):
        raise ShapeError("sparse_matmul expects a scipy sparse matrix")
    xd = x.data
    if xd.ndim < 1 or xd.shape[0] != smat.shape[1]:
        raise ShapeError(f"sparse_matmul shapes incompatible: {smat.shape} vs {xd.shape}")
    lead = xd.shape[0]
    flat = xd.reshape(lead, -1)
    out = Tensor((smat @ flat).reshape((smat.shape[0],) + xd.shape[1:]))

    def bwd():
        st = smat.T.tocsr() if smat_t is None else smat_t
        g = out.grad.reshape(smat.shape[0], -1)
        _acc(x, (st @ g).reshape(xd.shape))

    tape.push(bwd)
    return out


# ---------------------------------------------------------------------------
# structural primitives


def concat_features(tape, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat needs matching leading axes: {_shapes(a, b)}")
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))

    def bwd():
        g = out.grad
        _acc(a, g[..., :na])
        _acc(b, g[..., na:])

    tape.push(bwd)
    return out


def slice_features(tape, a: Tensor, start: int, stop: int) -> Tensor:
    """Slice the last (feature) axis; adjoints route back into place."""
    if not (0 <= start < stop <= a.data.shape[-1]):
        raise ShapeError(f"bad slice [{start}:{stop}] for shape {a.data.shape}")
    out = Tensor(a.data[..., start:stop])

    def bwd():
        g = np.zeros_like(a.data)
        g[..., start:stop] = out.grad
        _acc(a, g)

    tape.push(bwd)
    return out


def reshape(tape, a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    tape.push(lambda: _acc(a, out.grad.reshape(a.data.shape)))
    return out


def transpose01(tape, a: Tensor) -> Tensor:
    """Swap the first two axes of a 3-axis tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"transpose01 needs 3 axes, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.transpose(1, 0, 2)))
    tape.push(lambda: _acc(a, np.ascontiguousarray(out.grad.transpose(1, 0, 2))))
    return out


def _axis_sum(data, axis):
    # dot-product reductions beat ufunc reductions at these shapes
    if data.ndim == 2 and axis == 1:
        return data @ np.ones(data.shape[1])
    if data.ndim == 2 and axis == 0:
        return np.ones(data.shape[0]) @ data
    return data.sum(axis=axis)


def reduce_sum(tape, a: Tensor, axis: int) -> Tensor:
    out = Tensor(_axis_sum(a.data, axis))
    shape = a.data.shape

    def bwd():
        g = np.expand_dims(out.grad, axis)
        _acc(a, np.broadcast_to(g, shape))

    tape.push(bwd)
    return out


def reduce_mean(tape, a: Tensor, axis: int) -> Tensor:
    """Mean over one axis; ``axis=0`` is the batch-reduce-mean."""
    n = a.data.shape[axis]
    out = Tensor(_axis_sum(a.data, axis) / n)
    shape = a.data.shape

    def bwd():
        g = np.expand_dims(out.grad / n, axis)
        _acc(a, np.broadcast_to(g, shape))

    tape.push(bwd)
    return out


def add_bias(tape, x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a bias tensor; the adjoint sums over broadcast axes."""
    xd, bd = x.data, b.data
    _check_broadcast(xd, bd)
    out = Tensor(xd + bd)

    def bwd():
        g = out.grad
        _acc(x, g if xd.shape == g.shape else _unbroadcast(g, xd.shape))
        if bd.shape == g.shape:
            _acc(b, g)
        elif bd.ndim == 3 and g.ndim == 3 and bd.shape[1] == 1 \
                and bd.shape[0] == g.shape[0] and bd.shape[2] == g.shape[2]:
            # (V, 1, F) bias on a (V, B, F) activation: batched dot
            _acc(b, np.matmul(np.ones((1, g.shape[1])), g))
        else:
            _acc(b, _unbroadcast(g, bd.shape))

    tape.push(bwd)
    return out


def channel_affine(tape, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-trailing-feature scale and shift, y = x * gamma + beta."""
    xd = x.data
    f = xd.shape[-1]
    if gamma.data.shape != (f,) or beta.data.shape != (f,):
        raise ShapeError(f"affine parameters must have shape ({f},), got "
                         f"{_shapes(gamma, beta)}")
    out = Tensor(xd * gamma.data + beta.data)

    def bwd():
        g = out.grad
        _acc(x, g * gamma.data)
        _acc(gamma, _lead_sum(g * xd, 1))
        _acc(beta, _lead_sum(g, 1))

    tape.push(bwd)
    return out


# ---------------------------------------------------------------------------
# full-length sequence convolution

# "Same"-padded cross-correlation along the node axis with a kernel as long
# as the sequence itself.  Computed via real FFTs; the zero padding is sized
# so no circular wrap-around occurs, which makes the result equal to the
# direct double-loop sum up to roundoff.


def conv1d_full(tape, x: Tensor, kernel: Tensor) -> Tensor:
    """x: (B, V, C_in), kernel: (V, C_in, C_out) -> (B, V, C_out)."""
    xd, kd = x.data, kernel.data
    if xd.ndim != 3 or kd.ndim != 3 or kd.shape[0] != xd.shape[1] or kd.shape[1] != xd.shape[2]:
        raise ShapeError(f"conv1d_full shapes incompatible: {_shapes(xd, kd)}")
    B, V, Ci = xd.shape
    Co = kd.shape[2]
    pad_left = (V - 1) // 2
    P = 2 * V - 1
    L = next_fast_len(P)

    xpad = np.zeros((B, P, Ci))
    xpad[:, pad_left : pad_left + V, :] = xd
    X = rfft(xpad, n=L, axis=1)  # (B, Lf, Ci)
    Kf = rfft(kd, n=L, axis=0)  # (Lf, Ci, Co)
    spec = np.einsum("blc,lco->blo", X, np.conj(Kf))
    out = Tensor(irfft(spec, n=L, axis=1)[:, :V, :])

    def bwd():
        g = out.grad
        G = rfft(g, n=L, axis=1)  # (B, Lf, Co)
        # dL/dx: full linear convolution of g with the kernel, then crop the
        # padded window back to the original sequence.
        gx_spec = np.einsum("blo,lco->blc", G, Kf)
        gxpad = irfft(gx_spec, n=L, axis=1)[:, :P, :]
        _acc(x, gxpad[:, pad_left : pad_left + V, :])
        # dL/dk[t] = sum_{b,i} xpad[b, i+t, :] g[b, i, :]
        gk_spec = np.einsum("blc,blo->lco", X, np.conj(G))
        _acc(kernel, irfft(gk_spec, n=L, axis=0)[:V, :, :])

    tape.push(bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization core


def batchnorm_norm(tape, x: Tensor, eps: float):
    """Normalize per trailing feature over all leading axes (training mode).

    Returns ``(xhat, mean, var)`` where mean/var are plain arrays over the
    reduction axes.  The backward pass accounts for the dependence of the
    batch statistics on the inputs.
    """
    xd = x.data
    n = int(np.prod(xd.shape[:-1]))
    mean = _lead_sum(xd, 1) / n
    xc = xd - mean
    var = _lead_sum(xc * xc, 1) / n
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = Tensor(xhat)

    def bwd():
        g = out.grad
        gsum = _lead_sum(g, 1)
        gxhat_sum = _lead_sum(g * xhat, 1)
        _acc(x, istd * (g - gsum / n - xhat * gxhat_sum / n))

    tape.push(bwd)
    return out, mean, var


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(fn, point, epsilon, coords=None):
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` maps a flat float64 vector to ``(value, gradient_vector)`` where
    the gradient comes from the reverse-mode engine.  ``coords`` optionally
    restricts the check to a subset of coordinates.  Returns the maximum
    relative error, with denominator ``max(1, |g_i|)``.
    """
    if not (1e-7 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    point = np.asarray(point, dtype=np.float64).ravel()
    if not np.all(np.isfinite(point)):
        raise ValueError("gradient_check requires a finite point")
    value, grad = fn(point)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise ValueError("function evaluation is not finite at the base point")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != point.shape:
        raise ShapeError(f"gradient shape {grad.shape} != point shape {point.shape}")
    if coords is None:
        coords = range(point.size)
    worst = 0.0
    for i in coords:
        xp = point.copy()
        xp[i] += epsilon
        fp, _ = fn(xp)
        xm = point.copy()
        xm[i] -= epsilon
        fm, _ = fn(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite evaluation while probing coordinate {i}")
        fd = (fp - fm) / (2.0 * epsilon)
        err = abs(fd - grad[i]) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return worst
