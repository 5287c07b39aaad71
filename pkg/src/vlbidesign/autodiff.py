"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: every operation builds a node holding its inputs and a
closure that maps the output gradient to input gradients.  ``backward``
walks the recorded graph in reverse topological order.  Supported
primitives cover what the Gibbs sampler and the reconstruction decoders
need: elementwise arithmetic, matrix multiply, 2-D convolution with zero
padding, nearest up-sampling, strided down-sampling, concatenate/slice,
the usual nonlinearities, sum / max-with-index reductions, sqrt, division,
and sin/cos (used when recombining amplitudes with estimated phases).

CPU only, first-order only, static shapes.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Raised on malformed programs (shape mismatch, zero division, ...)."""


def _fail(op, msg):
    raise AutodiffError(f"{op}: {msg}")


class Tensor:
    """A node in the recorded computation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is populated (same
    shape as ``data``) by a backward pass when ``requires_grad`` is set.
    """

    __slots__ = ("data", "requires_grad", "grad", "name",
                 "_parents", "_backward", "_op", "_tie")

    def __init__(self, data, requires_grad=False, name=None,
                 _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._tie = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self, params=None):
        backward(self, params)


def as_tensor(x):
    """Wrap scalars/arrays as constant (non-trainable) tensors."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward=backward_fn if req else None, _op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        _fail(op, f"shapes {a.shape} and {b.shape} do not broadcast")


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bwd, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        _fail("div", "zero denominator")

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bwd, "div")


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _node(-a.data, (a,), bwd, "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        _fail("matmul", f"expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        _fail("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd, "matmul")


# -- nonlinearities -----------------------------------------------------

def sigmoid(a):
    a = as_tensor(a)
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bwd, "tanh")


def relu(a):
    a = as_tensor(a)

    def bwd(g):
        return (g * (a.data > 0),)

    return _node(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def absolute(a):
    a = as_tensor(a)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _node(np.abs(a.data), (a,), bwd, "abs")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        _fail("sqrt", "negative argument")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _node(out, (a,), bwd, "sqrt")


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        return (g * np.cos(a.data),)

    return _node(np.sin(a.data), (a,), bwd, "sin")


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g * np.sin(a.data),)

    return _node(np.cos(a.data), (a,), bwd, "cos")


# -- reductions ---------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _node(out, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tmax(a, axis=None):
    """Max with recorded argmax; gradient routes to the (first) arg-max.

    Ties are recorded on the node so a finite-difference check can flag
    the evaluation point as non-smooth.
    """
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        k = int(np.argmax(flat))
        out = flat[k]
        tie = int(np.sum(flat == out)) > 1

        def bwd(g):
            gx = np.zeros_like(a.data).reshape(-1)
            gx[k] = g
            return (gx.reshape(a.shape),)

        node = _node(out, (a,), bwd, "max")
    else:
        idx = np.argmax(a.data, axis=axis)
        out = np.max(a.data, axis=axis)
        tie = bool(np.any(np.sum(a.data == np.expand_dims(out, axis), axis=axis) > 1))

        def bwd(g):
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            return (gx,)

        node = _node(out, (a,), bwd, "max")
    node._tie = tie
    return node


# -- structure ----------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), bwd, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bwd, "concat")


def getitem(a, idx):
    a = as_tensor(a)

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(a.data[idx], (a,), bwd, "slice")


# -- image primitives ---------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(b * ho * wo, c * kh * kw), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x_shape
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution (cross-correlation), zero padding.

    x: (B, C, H, W), w: (F, C, kh, kw) -> (B, F, Ho, Wo).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        _fail("conv2d", f"expects 4-D operands, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        _fail("conv2d", f"channel mismatch: {x.shape} vs {w.shape}")
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wflat = w.data.reshape(f, c * kh * kw)
    out = (cols @ wflat.T).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)

    def bwd(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        gw = (gflat.T @ cols).reshape(f, c, kh, kw)
        gcols = gflat @ wflat
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo)
        return (gx, gw)

    return _node(out, (x, w), bwd, "conv2d")


def downsample2(x):
    """Strided down-sample by 2 (keep every other pixel)."""
    x = as_tensor(x)
    if x.ndim != 4:
        _fail("downsample2", f"expects 4-D input, got {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::2, ::2] = g
        return (gx,)

    return _node(x.data[:, :, ::2, ::2].copy(), (x,), bwd, "downsample2")


def upsample2(x):
    """Nearest-neighbour up-sample by 2."""
    x = as_tensor(x)
    if x.ndim != 4:
        _fail("upsample2", f"expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), bwd, "upsample2")


# -- recording / backward ----------------------------------------------

def record_and_eval(program, *inputs):
    """Run ``program`` on tensors; the graph is recorded as a side effect."""
    out = program(*[as_tensor(x) for x in inputs])
    if not isinstance(out, Tensor):
        raise AutodiffError("program did not return a Tensor")
    return out


def _toposort(out):
    """Topological order (leaves first) of grad-requiring nodes under out."""
    order = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(out, params=None):
    """Populate ``grad`` on every trainable tensor reachable from ``out``.

    ``out`` must be scalar (size 1).  If ``params`` (a ParameterSet or an
    iterable of tensors) is given, unreachable members get a zero gradient.
    """
    if not isinstance(out, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if out.size != 1:
        raise AutodiffError(f"backward expects a scalar output, got shape {out.shape}")
    order = _toposort(out)
    grads = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    if params is not None:
        tensors = params.tensors() if isinstance(params, ParameterSet) else list(params)
        reached = {id(n) for n in order}
        for t in tensors:
            if t.requires_grad and id(t) not in reached:
                t.grad = np.zeros_like(t.data)


class ParameterSet:
    """Named collection of trainable tensors (Ising θ and decoder ω live here)."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_arrays(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter: {k}")
            if self._params[k].data.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
            self._params[k].data = np.asarray(v, dtype=np.float64).copy()


# -- finite-difference validation --------------------------------------

class FDReport:
    """Result of a finite-difference gradient check."""

    def __init__(self, max_rel_error, per_param, nonsmooth):
        self.max_rel_error = max_rel_error
        self.per_param = per_param
        self.nonsmooth = nonsmooth

    def __repr__(self):
        flag = " (non-smooth point)" if self.nonsmooth else ""
        return f"FDReport(max_rel_error={self.max_rel_error:.3e}{flag})"


def _graph_has_tie(out):
    seen = set()
    stack = [out]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n._tie:
            return True
        stack.extend(n._parents)
    return False


def finite_diff_check(program, params, step=1e-5, eps=1e-8,
                      max_entries_per_param=None, rng=None):
    """Compare analytic gradients of ``program()`` against central differences.

    ``program`` is a zero-argument callable returning a scalar Tensor and
    closing over the tensors in ``params``.  Returns an FDReport whose
    ``max_rel_error`` is max over checked entries of
    |analytic - central| / (|central| + eps).  ``max_entries_per_param``
    caps the entries probed per tensor (random subset, seeded by ``rng``).
    """
    if isinstance(params, ParameterSet):
        named = list(params.items())
    else:
        named = [(t.name or f"p{i}", t) for i, t in enumerate(params)]
    out = program()
    if out.size != 1:
        raise AutodiffError("finite_diff_check expects a scalar program")
    nonsmooth = _graph_has_tie(out)
    backward(out, [t for _, t in named])
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in named}
    per_param = {}
    worst = 0.0
    for name, t in named:
        n = t.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            r = rng if rng is not None else np.random.default_rng(0)
            entries = r.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        err = 0.0
        for k in entries:
            orig = t.data.flat[k]
            t.data.flat[k] = orig + step
            fp = float(program().data)
            t.data.flat[k] = orig - step
            fm = float(program().data)
            t.data.flat[k] = orig
            central = (fp - fm) / (2.0 * step)
            a = analytic[name].flat[k]
            err = max(err, abs(a - central) / (abs(central) + eps))
        per_param[name] = err
        worst = max(worst, err)
    return FDReport(worst, per_param, nonsmooth)
