"""Small reverse-mode automatic differentiation engine on top of numpy.

Only what the VAE needs: elementwise arithmetic with broadcasting, matmul,
1-D convolution and its transpose (channels-last layout ``(batch, length,
channels)``), a handful of nonlinearities and reductions.  Every op records a
closure that maps the output adjoint to input adjoints; ``Variable.backward``
walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ConfigError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Forward-only evaluation; ops skip recording parents and closures."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Variable:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None):
        if isinstance(value, Variable):
            value = value.value
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.value.size != 1:
                raise ConfigError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p != 2:
            raise ConfigError("only squaring is supported")
        return square(self)


def _topological_order(root):
    """Nodes reachable from root, outputs before inputs; iterative DFS."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


def as_variable(x):
    return x if isinstance(x, Variable) else Variable(x)


def parameter(value, name=None):
    return Variable(value, requires_grad=True, name=name)


def _result(value, parents, backward):
    out = Variable(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast adjoint back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    """Wrap operands; bare scalars take the dtype of the other operand."""
    if not isinstance(a, Variable) and np.ndim(a) == 0 and isinstance(b, Variable):
        a = Variable(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Variable) and np.ndim(b) == 0 and isinstance(a, Variable):
        b = Variable(np.asarray(b, dtype=a.dtype))
    return as_variable(a), as_variable(b)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# elementwise


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def backward(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return _result(out, (a, b), backward)


def square(x):
    x = as_variable(x)
    return _result(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def relu(x):
    x = as_variable(x)
    out = np.maximum(x.value, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),))


def exp(x):
    x = as_variable(x)
    out = np.exp(x.value)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_variable(x)
    return _result(np.log(x.value), (x,), lambda g: (g / x.value,))


def tanh(x):
    x = as_variable(x)
    out = np.tanh(x.value)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


# reductions; accumulate in float64


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_variable(x)
    out = np.sum(x.value, axis=axis, dtype=np.float64)
    if axis is not None:
        out = out.astype(x.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(out, (x,), backward)


def mean(x, axis=None):
    x = as_variable(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / n)


# shape


def reshape(x, shape):
    x = as_variable(x)
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_variable(x)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


# linear algebra


def matmul(a, b):
    """``a @ b`` for 2-D ``b`` and any leading batch dims on ``a``."""
    a, b = as_variable(a), as_variable(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.value.T
        a2 = a.value.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.value[None, :]
        g2 = g.reshape(-1, b.shape[1]) if g.ndim > 1 else g[None, :]
        return ga, a2.T @ g2

    return _result(a.value @ b.value, (a, b), backward)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _conv_out_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over the length axis.

    x: (batch, length, c_in); w: (c_in, kernel, c_out); b: (c_out,).
    Explicit sliding window: one strided (batch, l_out, c_in) @ (c_in, c_out)
    product per kernel tap, summed.
    """
    x, w = as_variable(x), as_variable(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ConfigError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    length = x.shape[1]
    k = w.shape[1]
    l_out = _conv_out_length(length, k, stride, padding)
    if l_out < 1:
        raise ConfigError(f"conv1d: kernel {k} too large for length {length}")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (0, 0))) if padding else x.value
    span = (l_out - 1) * stride + 1
    out = None
    for j in range(k):
        t = np.matmul(xp[:, j : j + span : stride], w.value[:, j, :])
        out = t if out is None else out + t

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.empty(w.shape, dtype=w.dtype)
        for j in range(k):
            window = xp[:, j : j + span : stride]
            gw[:, j, :] = np.tensordot(window, g, axes=([0, 1], [0, 1]))
            if gxp is not None:
                gxp[:, j : j + span : stride] += np.matmul(g, w.value[:, j, :].T)
        if gxp is not None and padding:
            gxp = gxp[:, padding : padding + length]
        return gxp, gw

    y = _result(out, (x, w), backward)
    return y if b is None else add(y, b)


def conv_transpose1d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv1d` with the same geometry arguments.

    x: (batch, length, c_in); w: (c_in, kernel, c_out).  Output length is
    ``(length - 1) * stride - 2 * padding + kernel + output_padding``.
    """
    x, w = as_variable(x), as_variable(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ConfigError(f"conv_transpose1d: input {x.shape} incompatible with weight {w.shape}")
    batch, length, _ = x.shape
    _, k, c_out = w.shape
    l_out = (length - 1) * stride - 2 * padding + k + output_padding
    if l_out < 1 or (output_padding and output_padding >= stride):
        raise ConfigError("conv_transpose1d: invalid geometry")
    full = max((length - 1) * stride + k, padding + l_out)
    span = (length - 1) * stride + 1
    dtype = np.result_type(x.dtype, w.dtype)
    yfull = np.zeros((batch, full, c_out), dtype=dtype)
    for j in range(k):
        yfull[:, j : j + span : stride] += np.matmul(x.value, w.value[:, j, :])
    out = np.ascontiguousarray(yfull[:, padding : padding + l_out])

    def backward(g):
        gfull = np.zeros((batch, full, c_out), dtype=g.dtype)
        gfull[:, padding : padding + l_out] = g
        gx = np.zeros(x.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.empty(w.shape, dtype=w.dtype)
        for j in range(k):
            window = gfull[:, j : j + span : stride]
            gw[:, j, :] = np.tensordot(x.value, window, axes=([0, 1], [0, 1]))
            if gx is not None:
                gx += np.matmul(window, w.value[:, j, :].T)
        return gx, gw

    y = _result(out, (x, w), backward)
    return y if b is None else add(y, b)


# checking and optimisation


def gradcheck(f, params, eps=1e-6, eps_abs=1e-6):
    """Largest relative error between AD and central-difference gradients.

    ``f`` maps the list ``params`` of Variables to a scalar Variable.  Each
    parameter entry is perturbed by +-eps in place.  Relative error per entry
    is ``|ad - fd| / (|fd| + eps_abs)``.
    """
    if not 0 < eps <= 1e-2:
        raise ConfigError("gradcheck eps must lie in (0, 1e-2]")
    for p in params:
        p.zero_grad()
    out = f(params)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("gradcheck: function value is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        ad = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).value)
            flat[i] = orig - eps
            fm = float(f(params).value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("gradcheck: function value is not finite")
            fd = (fp - fm) / (2 * eps)
            err = abs(ad.reshape(-1)[i] - fd) / (abs(fd) + eps_abs)
            worst = max(worst, err)
    return worst


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on the ``params`` arrays.

    Moments are kept in float64.  Non-finite gradients abort the step before
    anything is modified.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype)
    return params, state
