"""Minimal reverse-mode autodiff over N-d numpy arrays.

Layout is fixed to (batch, channels, height, width) for image tensors,
row-major. Ops record themselves on an explicit Tape; backward replays the
record in exact reverse order. No broadcasting except the conv bias over
output channels. float32 is the working precision, float64 is used for
gradient checks.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit

_next_tid = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dim."""


class Tensor:
    """Immutable-by-convention array node. Do not write to .data after creation."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.tid = next(_next_tid)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered op record plus gradient buffers keyed by tensor identity.

    Single-owner: a Tape must not be shared across threads. Independent
    tapes may run concurrently.
    """

    def __init__(self):
        self._ops = []  # (output_tid, backward_fn)
        self._grads = {}

    def leaf(self, data):
        return Tensor(data, tape=self)

    def _record(self, out, backward):
        self._ops.append((out.tid, backward))

    def _accum(self, t, g, owned=False):
        """Add g into t's gradient buffer. owned=True promises g is a fresh
        array this op just allocated, so it can seed the buffer directly."""
        buf = self._grads.get(t.tid)
        if buf is None:
            if owned and g.dtype == t.data.dtype:
                self._grads[t.tid] = g
            else:
                self._grads[t.tid] = g.astype(t.data.dtype, copy=True)
        else:
            buf += g

    def backward(self, root, seed=None):
        """Propagate gradients from root through the recorded ops in reverse.

        root must be scalar unless an explicit seed gradient is given.
        """
        if seed is None:
            if root.data.size != 1:
                raise ShapeError(
                    f"backward root must be scalar, got shape {root.shape}"
                )
            seed = np.ones_like(root.data)
        self._grads.clear()
        self._grads[root.tid] = np.asarray(seed, dtype=root.data.dtype).copy()
        for out_tid, backward in reversed(self._ops):
            g = self._grads.get(out_tid)
            if g is None:
                continue  # unused branch, gradient stays zero
            backward(g)

    def grad(self, t):
        g = self._grads.get(t.tid)
        if g is None:
            return np.zeros_like(t.data)
        return g


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t is None or t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape {a.shape} != {b.shape}")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    _same_shape(a.data, b.data, "add")
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g)
            tape._accum(b, g)
        tape._record(out, backward)
    return out


def sub(a, b):
    _same_shape(a.data, b.data, "sub")
    tape = _tape_of(a, b)
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g)
            tape._accum(b, -g, owned=True)
        tape._record(out, backward)
    return out


def mul(a, b):
    _same_shape(a.data, b.data, "mul")
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * b.data, owned=True)
            tape._accum(b, g * a.data, owned=True)
        tape._record(out, backward)
    return out


def div(a, b):
    _same_shape(a.data, b.data, "div")
    tape = _tape_of(a, b)
    out = Tensor(a.data / b.data, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g / b.data, owned=True)
            tape._accum(b, -g * a.data / (b.data * b.data), owned=True)
        tape._record(out, backward)
    return out


def scale(a, c):
    """a * c for a python scalar c."""
    c = float(c)
    tape = _tape_of(a)
    out = Tensor(a.data * np.asarray(c, dtype=a.data.dtype), tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * c, owned=True)
        tape._record(out, backward)
    return out


def add_const(a, c):
    c = float(c)
    tape = _tape_of(a)
    out = Tensor(a.data + np.asarray(c, dtype=a.data.dtype), tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g)
        tape._record(out, backward)
    return out


def absolute(a):
    tape = _tape_of(a)
    out = Tensor(np.abs(a.data), tape)
    if tape is not None:
        sign = np.sign(a.data)
        def backward(g):
            tape._accum(a, g * sign, owned=True)
        tape._record(out, backward)
    return out


def sqrt(a):
    tape = _tape_of(a)
    val = np.sqrt(a.data)
    out = Tensor(val, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * (0.5 / val), owned=True)
        tape._record(out, backward)
    return out


def clamp_min(a, c):
    """max(a, c) elementwise; gradient is zero on the clamped region."""
    c = float(c)
    tape = _tape_of(a)
    mask = a.data > c
    out = Tensor(np.where(mask, a.data, np.asarray(c, dtype=a.data.dtype)), tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * mask, owned=True)
        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# activations

def leaky_relu(a, alpha=0.1):
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"leaky_relu alpha must be in (0, 1], got {alpha}")
    tape = _tape_of(a)
    mask = a.data >= 0
    out = Tensor(np.where(mask, a.data, a.data * a.data.dtype.type(alpha)), tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, np.where(mask, g, g * g.dtype.type(alpha)), owned=True)
        tape._record(out, backward)
    return out


def sigmoid(a):
    tape = _tape_of(a)
    val = expit(a.data)  # overflow-safe logistic
    out = Tensor(val, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * val * (1.0 - val), owned=True)
        tape._record(out, backward)
    return out


def tanh(a):
    tape = _tape_of(a)
    val = np.tanh(a.data)
    out = Tensor(val, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, g * (1.0 - val * val), owned=True)
        tape._record(out, backward)
    return out


def activation(a, kind, alpha=0.1):
    """Dispatch by name: leaky_relu / sigmoid / tanh / linear."""
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "linear":
        return a
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions

def sum_all(a):
    tape = _tape_of(a)
    out = Tensor(np.sum(a.data), tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, np.full_like(a.data, g), owned=True)
        tape._record(out, backward)
    return out


def mean_all(a):
    tape = _tape_of(a)
    n = a.data.size
    out = Tensor(np.sum(a.data) / n, tape)
    if tape is not None:
        def backward(g):
            tape._accum(a, np.full_like(a.data, g / n), owned=True)
        tape._record(out, backward)
    return out


def sum_channels(a):
    """Sum over the channel axis of a (B,C,H,W) tensor, keeping the axis."""
    if a.data.ndim != 4:
        raise ShapeError(f"sum_channels expects 4-d input, got {a.shape}")
    tape = _tape_of(a)
    out = Tensor(a.data.sum(axis=1, keepdims=True), tape)
    if tape is not None:
        c = a.data.shape[1]
        def backward(g):
            tape._accum(a, np.repeat(g, c, axis=1), owned=True)
        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# structure

def concat_channels(*tensors):
    """Concatenate (B,C,H,W) tensors along the channel axis, argument order."""
    if len(tensors) == 0:
        raise ValueError("concat_channels needs at least one input")
    first = tensors[0].data
    for t in tensors[1:]:
        if t.data.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels expects 4-d inputs")
        if t.data.shape[0] != first.shape[0]:
            raise ShapeError(
                f"concat_channels: batch {t.data.shape[0]} != {first.shape[0]}")
        if t.data.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: spatial {t.data.shape[2:]} != {first.shape[2:]}")
    tape = _tape_of(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), tape)
    if tape is not None:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]
        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=1)):
                tape._accum(t, piece)
        tape._record(out, backward)
    return out


def slice_channels(a, start, stop):
    tape = _tape_of(a)
    out = Tensor(a.data[:, start:stop].copy(), tape)
    if tape is not None:
        def backward(g):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            tape._accum(a, full, owned=True)
        tape._record(out, backward)
    return out


def concat_batch(*tensors):
    """Stack (B,C,H,W) tensors along the batch axis (used to run one conv
    over every frame of a window at once)."""
    first = tensors[0].data
    for t in tensors[1:]:
        if t.data.shape[1:] != first.shape[1:]:
            raise ShapeError(
                f"concat_batch: trailing dims {t.data.shape[1:]} != {first.shape[1:]}")
    tape = _tape_of(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0), tape)
    if tape is not None:
        splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]
        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=0)):
                tape._accum(t, piece)
        tape._record(out, backward)
    return out


def slice_batch(a, start, stop):
    tape = _tape_of(a)
    out = Tensor(a.data[start:stop].copy(), tape)
    if tape is not None:
        def backward(g):
            full = np.zeros_like(a.data)
            full[start:stop] = g
            tape._accum(a, full, owned=True)
        tape._record(out, backward)
    return out


def upsample_nearest(a, factor):
    """Nearest-neighbour upsampling; backward sums over each replicated block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects 4-d input, got {a.shape}")
    f = int(factor)
    tape = _tape_of(a)
    out = Tensor(np.repeat(np.repeat(a.data, f, axis=2), f, axis=3), tape)
    if tape is not None and f == 1:
        def backward1(g):
            tape._accum(a, g)
        tape._record(out, backward1)
    elif tape is not None:
        b, c, h, w = a.data.shape
        def backward(g):
            gb = g.reshape(b, c, h, f, w, f).sum(axis=(3, 5))
            tape._accum(a, gb, owned=True)
        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution (im2col + GEMM, channels-first column layout so every copy is
# over contiguous blocks)

def _im2col(x, k, stride, padding):
    b, cin, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3))  # (cin, b, hp, wp)
    cols = np.empty((cin, k, k, b, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xt[:, :, ki:ki + ho * stride:stride,
                                 kj:kj + wo * stride:stride]
    return cols.reshape(cin * k * k, b * ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo):
    b, cin, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxt = np.zeros((cin, b, hp, wp), dtype=dcols.dtype)
    patches = dcols.reshape(cin, k, k, b, ho, wo)
    for ki in range(k):
        for kj in range(k):
            dxt[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += \
                patches[:, ki, kj]
    dx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding].copy()
    return dx


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-d convolution (cross-correlation) with zero padding.

    x: (B,Cin,H,W), kernel: (Cout,Cin,k,k), bias: (Cout,) or None.
    Output spatial size: floor((H + 2p - k)/stride) + 1.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d, got {xd.shape}")
    if kd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {kd.shape}")
    cout, cin, k, k2 = kd.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input channels {xd.shape[1]} != kernel in-channels {cin}")
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeError(
            f"conv2d: padded spatial {xd.shape[2:]}+2*{padding} smaller than kernel {k}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} != ({cout},)")

    b = xd.shape[0]
    cols, ho, wo = _im2col(xd, k, stride, padding)  # (cin*k*k, b*ho*wo)
    kmat = kd.reshape(cout, cin * k * k)
    out_mat = kmat @ cols  # (cout, b*ho*wo)
    if bias is not None:
        out_mat += bias.data[:, None]
    out_data = np.ascontiguousarray(
        out_mat.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    tape = _tape_of(x, kernel, bias)
    out = Tensor(out_data, tape)
    if tape is not None:
        def backward(g):
            gmat = np.ascontiguousarray(
                g.transpose(1, 0, 2, 3)).reshape(cout, b * ho * wo)
            dk = (gmat @ cols.T).reshape(kd.shape)
            tape._accum(kernel, dk, owned=True)
            if bias is not None:
                tape._accum(bias, gmat.sum(axis=1), owned=True)
            dcols = kmat.T @ gmat
            tape._accum(x, _col2im(dcols, xd.shape, k, stride, padding, ho, wo),
                        owned=True)
        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# ConvLSTM cell

def convlstm_step(x, h, c, kernel, bias, alpha_unused=None):
    """One ConvLSTM step: gates i,f,o,g from a conv over [x, h].

    kernel: (4*Ch, Cx+Ch, k, k) producing the i, f, o, g pre-activations in
    that channel-block order. Returns (h_next, c_next).
    """
    if x.data.shape[2:] != h.data.shape[2:] or h.data.shape != c.data.shape:
        raise ShapeError(
            f"convlstm_step: spatial/state mismatch x{x.shape} h{h.shape} c{c.shape}")
    ch = h.data.shape[1]
    if kernel.data.shape[0] != 4 * ch:
        raise ShapeError(
            f"convlstm_step: kernel out-channels {kernel.data.shape[0]} != 4*{ch}")
    k = kernel.data.shape[2]
    gates = conv2d(concat_channels(x, h), kernel, bias, stride=1, padding=k // 2)
    i = sigmoid(slice_channels(gates, 0, ch))
    f = sigmoid(slice_channels(gates, ch, 2 * ch))
    o = sigmoid(slice_channels(gates, 2 * ch, 3 * ch))
    g = tanh(slice_channels(gates, 3 * ch, 4 * ch))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(f, params, h=1e-5, rel_floor=1e-8):
    """Compare tape gradients of f against central finite differences.

    f takes a list of leaf Tensors and returns a Tensor; a sum reduction is
    applied if the output is not scalar. params is a list of float64 numpy
    arrays. Returns a per-parameter report with the max relative error,
    where rel = |a - n| / max(|a|, |n|, rel_floor).
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def run(ps, want_grads):
        tape = Tape()
        leaves = [tape.leaf(p) for p in ps]
        out = f(leaves)
        val = out.data
        if not np.all(np.isfinite(val)):
            raise FloatingPointError("grad_check: function returned non-finite values")
        if val.size != 1:
            out = sum_all(out)
        if want_grads:
            tape.backward(out)
            return float(out.data), [tape.grad(t) for t in leaves]
        return float(out.data)

    _, analytic = run(params, True)
    report = []
    for pi, p in enumerate(params):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = run(params, False)
            flat[j] = orig - h
            fm = run(params, False)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        a = analytic[pi]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), rel_floor)
        rel = np.abs(a - num) / denom
        report.append({
            "param": pi,
            "max_rel_error": float(rel.max()) if rel.size else 0.0,
            "max_abs_error": float(np.abs(a - num).max()) if rel.size else 0.0,
            "analytic": a,
            "numeric": num,
        })
    return report
