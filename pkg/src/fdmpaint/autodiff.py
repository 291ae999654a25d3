"""Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active (``with Tape() as
tape:``), every operation whose inputs require gradients appends a record
(output, inputs, backward closure) to the tape. Records are appended in
execution order, so the list is already topologically sorted;
``tape.backward(loss)`` walks it once in reverse and accumulates gradients
into the ``.grad`` buffers of the gradient-requiring leaves.

Training runs in float32; tests build float64 tensors for finite-difference
shadow checks. All ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientError, ConfigError, ShapeError

_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations for one backward pass.

    Confined to a single thread; a tape must not outlive the step that
    built it (optimizer updates mutate parameter data in place).
    """

    def __init__(self):
        self._records = []      # (output, inputs, backward_fn)
        self._produced = set()  # ids of tensors created by recorded ops

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, output, inputs, backward_fn):
        self._records.append((output, inputs, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss):
        """Populate ``.grad`` on every gradient-requiring leaf under ``loss``."""
        if loss.data.size != 1:
            raise GradientError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not self._records:
            raise GradientError("backward on an empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for output, inputs, backward_fn in reversed(self._records):
            gout = grads.pop(id(output), None)
            if gout is None:
                continue  # output did not contribute to the loss
            partials = backward_fn(gout)
            for tensor, g in zip(inputs, partials):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = tensor
        for key, tensor in leaves.items():
            g = grads[key]
            if tensor.grad is None:
                tensor.grad = np.array(g, dtype=tensor.data.dtype, copy=True)
            else:
                tensor.grad = tensor.grad + g


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # ---- introspection ----
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- operator sugar ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out_data, inputs, backward_fn):
    """Build the output tensor and register the op on the active tape."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _record(np.power(a.data, p), (a,), backward)


def square(a):
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _record(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def absolute(a):
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), backward)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (np.where(mask, g, g * slope),)

    return _record(np.where(mask, a.data, a.data * slope), (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed stably; d/dx = sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    out_data = np.logaddexp(0.0, x).astype(x.dtype)

    def backward(g):
        return (g * _sigmoid(x),)

    return _record(out_data, (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stopgrad(a):
    """Value of ``a`` cut out of the gradient graph."""
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _record(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.data.shape).copy(),)

    return _record(out_data, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def getitem(a, key):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _record(a.data[key], (a,), backward)


def embedding(table, indices):
    """Row gather ``table[indices]``; gradients scatter-add into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(table.data[idx], (table,), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            ggamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gbeta = g.sum(axis=axes)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _record(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution via im2col
# ---------------------------------------------------------------------------

_SUPPORTED_KERNELS = (1, 3, 4)


def _im2col(x, k, stride, pad):
    """(B, C, H, W) -> contiguous (B, C*k*k, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(cols, x_shape, k, stride, pad, ho, wo):
    """Adjoint of ``_im2col``: scatter-add columns back onto the image."""
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, i, j]
            )
    if pad > 0:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def _check_conv_geometry(h, w, k, stride, pad):
    if k not in _SUPPORTED_KERNELS:
        raise ConfigError(f"conv kernel size {k} unsupported (expected one of {_SUPPORTED_KERNELS})")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ConfigError(
            f"conv output extent is not integral for input {h}x{w}, "
            f"kernel {k}, stride {stride}, pad {pad}"
        )
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ConfigError(f"input {h}x{w} smaller than kernel {k} with pad {pad}")


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W) or (Cin, H, W); ``w`` is (Cout, Cin, k, k);
    ``b``, when given, is (Cout,).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    cout, cin, k, k2 = w.data.shape
    if k != k2:
        raise ConfigError(f"conv kernels must be square, got {w.data.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv input channels {xd.shape[1]} != kernel input channels {cin}"
        )
    bsz, _, h, wdt = xd.shape
    _check_conv_geometry(h, wdt, k, stride, pad)
    cols, ho, wo = _im2col(xd, k, stride, pad)
    wmat = w.data.reshape(cout, cin * k * k)
    out_data = np.matmul(wmat, cols).reshape(bsz, cout, ho, wo)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1)
    if squeeze:
        out_data = out_data[0]

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gd = g[None] if squeeze else g
        gflat = gd.reshape(bsz, cout, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", gflat, cols).reshape(w.data.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gflat)
            gx = _col2im(gcols, xd.shape, k, stride, pad, ho, wo)
            if squeeze:
                gx = gx[0]
        if b is not None and b.requires_grad:
            gb = gflat.sum(axis=(0, 2))
        if b is None:
            return gx, gw
        return gx, gw, gb

    return _record(out_data, inputs, backward)


def conv_transpose2d(x, w, b=None, stride=2, pad=1):
    """Adjoint of a stride-2 4x4 conv: doubles the spatial extents.

    ``x`` is (B, Cin, H, W) or (Cin, H, W); ``w`` is (Cin, Cout, 4, 4).
    Only the (k=4, stride=2, pad=1) upsampling geometry is supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, cout, k, k2 = w.data.shape
    if k != 4 or k2 != 4 or stride != 2 or pad != 1:
        raise ConfigError(
            f"conv_transpose2d supports only kernel 4, stride 2, pad 1; "
            f"got kernel {(k, k2)}, stride {stride}, pad {pad}"
        )
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv_transpose input channels {xd.shape[1]} != kernel input channels {cin}"
        )
    bsz, _, h, wdt = xd.shape
    ho, wo = stride * h, stride * wdt
    wmat = w.data.reshape(cin, cout * k * k)  # conv weight layout (out=cin, in=cout)
    xflat = xd.reshape(bsz, cin, h * wdt)
    gcols = np.matmul(wmat.T, xflat)  # (B, cout*k*k, h*w)
    out_data = _col2im(gcols, (bsz, cout, ho, wo), k, stride, pad, h, wdt)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1)
    if squeeze:
        out_data = out_data[0]

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gd = g[None] if squeeze else g
        cols, _, _ = _im2col(gd, k, stride, pad)  # (B, cout*k*k, h*w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, cols).reshape(xd.shape)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.einsum("bil,bkl->ik", xflat, cols).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            gb = gd.sum(axis=(0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, gb

    return _record(out_data, inputs, backward)


def backward(loss, tape):
    """Run reverse-mode accumulation for ``loss`` over ``tape``."""
    tape.backward(loss)
