"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive ops in execution order; backward() replays the
records in reverse, accumulating gradients additively at fan-out. Parameters
live in a ParamStore whose gradient buffers are shared with the leaf tensors
created from it, so one backward pass populates the store directly.

Only the layer set needed by the networks in this package is provided:
affine/matmul, ReLU, sigmoid, concat, elementwise arithmetic, log/exp,
logaddexp, min/max, reductions, row gather, segment sum, and a shift-right
used by the log-domain count recursion.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigError, NumericalError


def _check_finite(data, ctx):
    # cheap sentinel: any NaN/Inf in the buffer poisons the sum
    with np.errstate(all="ignore"):
        bad = data.size and not np.isfinite(data.sum())
    if bad:
        raise NumericalError(f"non-finite values produced by {ctx}")


class Tensor:
    """Dense float64 array with an optional gradient, tied to one Tape."""

    __slots__ = ("data", "grad", "tape", "needs_grad")

    def __init__(self, data, tape, needs_grad, ctx="tensor"):
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, ctx)
        self.data = data
        self.grad = None
        self.tape = tape
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    # arithmetic sugar; non-Tensor operands become constants on the same tape
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.tape), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Ordered op record; recording order is a topological order by construction."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def constant(self, data):
        return Tensor(data, self, needs_grad=False, ctx="constant")

    def leaf(self, data):
        return Tensor(data, self, needs_grad=True, ctx="leaf")

    def record(self, out, bwd):
        self._nodes.append((out, bwd))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ConfigError("loss must be a Tensor on this tape")
        if loss.data.shape != ():
            raise ConfigError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        _acc(loss, np.ones((), dtype=np.float64))
        for out, bwd in reversed(self._nodes):
            if out.grad is not None:
                bwd(out.grad)


def backward(loss):
    """Populate gradients for everything reachable from the scalar `loss`."""
    loss.tape.backward(loss)


class ParamStore:
    """Named trainable arrays with paired gradient buffers and Adam state."""

    def __init__(self):
        self._values = {}
        self._grads = {}
        self._m = {}
        self._v = {}
        self._step = 0

    def add(self, name, value):
        if name in self._values:
            raise ConfigError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        _check_finite(value, f"parameter {name!r}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self._values

    def names(self):
        return list(self._values)

    def value(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def grad(self, name):
        return self._grads[name]

    def num_params(self):
        return sum(v.size for v in self._values.values())

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def leaf_on(self, tape, name):
        """Leaf tensor sharing this store's value and grad buffers."""
        t = Tensor.__new__(Tensor)
        t.data = self.value(name)
        t.grad = self._grads[name]
        t.tape = tape
        t.needs_grad = True
        return t

    def clone(self):
        other = ParamStore()
        for name, value in self._values.items():
            other.add(name, value.copy())
        return other

    def load_values(self, mapping):
        """Replace values in place (keeps buffer identity); shapes must match."""
        for name, value in mapping.items():
            cur = self.value(name)
            value = np.asarray(value, dtype=np.float64)
            if value.shape != cur.shape:
                raise ConfigError(f"shape mismatch loading {name!r}")
            cur[...] = value


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update from the store's current gradients, in place."""
    store._step += 1
    t = store._step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, value in store._values.items():
        g = store._grads[name]
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(value)
            store._v[name] = np.zeros_like(value)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# primitive ops


def _coerce(x, tape):
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        b = _coerce(b, a.tape)
    else:
        a = _coerce(a, b.tape)
    if a.tape is not b.tape:
        raise ConfigError("operands live on different tapes")
    return a, b


def _acc(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(tape, data, needs_grad, bwd, ctx):
    out = Tensor(data, tape, needs_grad, ctx=ctx)
    if needs_grad:
        tape.record(out, bwd)
    return out


def add(a, b):
    a, b = _pair(a, b)

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _emit(a.tape, a.data + b.data, a.needs_grad or b.needs_grad, bwd, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _emit(a.tape, a.data - b.data, a.needs_grad or b.needs_grad, bwd, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    return _emit(a.tape, out, a.needs_grad or b.needs_grad, bwd, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _emit(a.tape, data, a.needs_grad or b.needs_grad, bwd, "div")


def matmul(a, b):
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigError("matmul supports 2-D operands only")
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.needs_grad:
            _acc(a, g @ b.data.T)
        if b.needs_grad:
            _acc(b, a.data.T @ g)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _emit(a.tape, out, a.needs_grad or b.needs_grad, bwd, "matmul")


def relu(x):
    mask = x.data > 0

    def bwd(g):
        _acc(x, g * mask)

    return _emit(x.tape, np.where(mask, x.data, 0.0), x.needs_grad, bwd, "relu")


def sigmoid(x):
    s = expit(x.data)

    def bwd(g):
        _acc(x, g * s * (1.0 - s))

    return _emit(x.tape, s, x.needs_grad, bwd, "sigmoid")


def exp(x):
    with np.errstate(over="ignore"):
        e = np.exp(x.data)

    def bwd(g):
        _acc(x, g * e)

    return _emit(x.tape, e, x.needs_grad, bwd, "exp")


def log(x):
    if x.data.size and x.data.min() <= 0.0:
        raise NumericalError("log of non-positive value")

    def bwd(g):
        _acc(x, g / x.data)

    return _emit(x.tape, np.log(x.data), x.needs_grad, bwd, "log")


def logaddexp(a, b):
    a, b = _pair(a, b)
    wa = expit(a.data - b.data)  # d/da log(e^a + e^b)

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * wa, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _emit(a.tape, np.logaddexp(a.data, b.data), a.needs_grad or b.needs_grad, bwd, "logaddexp")


def minimum(a, b):
    a, b = _pair(a, b)
    take_a = a.data <= b.data  # ties route to the first operand

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * take_a, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _emit(a.tape, np.where(take_a, a.data, b.data), a.needs_grad or b.needs_grad, bwd, "minimum")


def maximum(a, b):
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def bwd(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * take_a, a.data.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _emit(a.tape, np.where(take_a, a.data, b.data), a.needs_grad or b.needs_grad, bwd, "maximum")


def clip(x, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    return minimum(maximum(x, lo), hi)


def tsum(x, axis=None, keepdims=False):
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, shape))

    return _emit(x.tape, x.data.sum(axis=axis, keepdims=keepdims), x.needs_grad, bwd, "sum")


def tmean(x, axis=None, keepdims=False):
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g / count, shape))

    return _emit(x.tape, x.data.mean(axis=axis, keepdims=keepdims), x.needs_grad, bwd, "mean")


def concat(parts, axis):
    parts = list(parts)
    tape = parts[0].tape
    for p in parts:
        if p.tape is not tape:
            raise ConfigError("concat operands live on different tapes")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(p, g[tuple(idx)])

    data = np.concatenate([p.data for p in parts], axis=axis)
    return _emit(tape, data, any(p.needs_grad for p in parts), bwd, "concat")


def gather(x, idx):
    """Select rows of a 1-D or 2-D tensor; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]

    def bwd(g):
        if g.ndim == 1:
            _acc(x, kernels.segment_sum(g[:, None], idx, n)[:, 0])
        else:
            _acc(x, kernels.segment_sum(g, idx, n))

    return _emit(x.tape, x.data[idx], x.needs_grad, bwd, "gather")


def reshape(x, shape):
    """View with a new shape; gradient reshapes back."""
    orig = x.data.shape

    def bwd(g):
        _acc(x, g.reshape(orig))

    return _emit(x.tape, x.data.reshape(shape), x.needs_grad, bwd, "reshape")


def segment_sum(x, segments, num_segments):
    """Sum rows of a 2-D tensor into `num_segments` groups."""
    segments = np.asarray(segments, dtype=np.int64)

    def bwd(g):
        _acc(x, g[segments])

    data = kernels.segment_sum(x.data, segments, num_segments)
    return _emit(x.tape, data, x.needs_grad, bwd, "segment_sum")


def shift_right(x, fill):
    """1-D shift by one: out[0] = fill, out[j] = x[j-1]."""
    if x.data.ndim != 1:
        raise ConfigError("shift_right expects a 1-D tensor")
    data = np.empty_like(x.data)
    data[0] = fill
    data[1:] = x.data[:-1]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:-1] = g[1:]
        _acc(x, gx)

    return _emit(x.tape, data, x.needs_grad, bwd, "shift_right")


def rowdot(a, b):
    """Row-wise inner product of two (n, d) tensors, result (n, 1)."""
    return tsum(mul(a, b), axis=1, keepdims=True)


def softplus(x):
    """log(1 + exp(x)) via logaddexp against 0, stable for large |x|."""
    return logaddexp(x, x.tape.constant(np.zeros_like(x.data)))


# ---------------------------------------------------------------------------
# MLP helpers


def init_mlp(store, prefix, sizes, rng, out_scale=1.0):
    """He-normal weights and zero biases for an MLP with the given layer sizes.

    out_scale damps the final affine; residual stacks with multiplicative
    couplings blow up at unit scale, so model code passes < 1.
    """
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least one layer")
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        if i == last:
            w *= out_scale
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_forward(store, prefix, x, layer_sizes):
    """Affine stack with ReLU on hidden layers and a linear final layer."""
    if x.data.shape[-1] != layer_sizes[0]:
        raise ConfigError(
            f"{prefix}: input dim {x.data.shape[-1]} != expected {layer_sizes[0]}"
        )
    n_layers = len(layer_sizes) - 1
    tape = x.tape
    for i in range(n_layers):
        w = store.leaf_on(tape, f"{prefix}.W{i}")
        b = store.leaf_on(tape, f"{prefix}.b{i}")
        x = add(matmul(x, w), b)
        if i < n_layers - 1:
            x = relu(x)
    return x


def mse(pred, target):
    """Mean squared error over all entries, scalar."""
    d = sub(pred, target)
    return tmean(mul(d, d))
