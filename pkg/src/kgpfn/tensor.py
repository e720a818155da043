"""Dense tensors with reverse-mode differentiation on an explicit tape.

The tape is define-by-run: every forward pass appends primitive records in
topological order, and ``backward`` walks them in reverse. Tensors without a
tape handle are plain constants; mixing tensors from two different tapes is
an error. Two precisions are supported: float64 for gradient checks and
verification oracles, float32 for training.

Primitives deliberately cover only what the model blocks need. Matrix
products offer a ``row_stable`` variant (einsum-backed) whose output rows are
bit-identical whether a row is computed alone or inside a batch; the scorer
uses it on every candidate-dependent product so that batched and
one-at-a-time scoring agree exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolationError, GradCheckError

_LN_EPS = 1e-5


class _Node:
    """One primitive on the tape."""

    __slots__ = ("op", "parents", "value", "fwd", "vjp", "needs_grad", "is_leaf")

    def __init__(self, op, parents, value, fwd, vjp, needs_grad, is_leaf=False):
        self.op = op
        self.parents = parents          # node ids of differentiable inputs
        self.value = value
        self.fwd = fwd                  # fwd(*parent_values) -> value (replay)
        self.vjp = vjp                  # vjp(grad, *parent_values) -> grads per parent
        self.needs_grad = needs_grad
        self.is_leaf = is_leaf


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Single-threaded; build one tape per forward pass and discard it after
    ``backward``. ``dtype`` fixes the working precision of every node.
    """

    def __init__(self, dtype=np.float64):
        if dtype not in (np.float32, np.float64):
            raise ContractViolationError(f"unsupported tape dtype {dtype}")
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []
        self._params: dict[str, int] = {}

    def _push(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, array, requires_grad=True) -> "Tensor":
        """Record an input tensor. Gradients flow to it when requires_grad."""
        value = np.asarray(array, dtype=self.dtype)
        nid = self._push(_Node("leaf", (), value, None, None, requires_grad,
                               is_leaf=requires_grad))
        return Tensor(value, tape=self, nid=nid)

    def param(self, name, array) -> "Tensor":
        """Leaf cached by name: repeated calls reuse one node per tape."""
        nid = self._params.get(name)
        if nid is not None:
            return Tensor(self.nodes[nid].value, tape=self, nid=nid)
        t = self.leaf(array)
        self._params[name] = t.nid
        return t

    @property
    def param_nodes(self) -> dict[str, int]:
        return dict(self._params)

    def replay(self):
        """Recompute every recorded value in order; returns the new values.

        With unchanged leaf values the result is bit-identical to the
        recorded pass (all primitives are deterministic).
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                values.append(node.value)
            else:
                values.append(node.fwd(*[values[p] for p in node.parents]))
        return values


class Tensor:
    """A dense array, optionally attached to a tape node.

    Immutable by convention: primitives allocate fresh outputs and no code
    path writes through ``data`` after construction.
    """

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=None):
        self.data = np.asarray(data)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" node={self.nid}" if self.tape is not None else ""
        return f"<Tensor shape={self.data.shape}{tag}>"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _tape_of(tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractViolationError("operands live on different tapes")
    return tape


def _record(op, inputs, out_data, fwd, vjp) -> Tensor:
    """Record one primitive if any input is taped; otherwise stay eager.

    ``fwd``/``vjp`` receive the differentiable inputs' values in order;
    constant operands must be captured in the closures.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out_data)
    parents = tuple(t.nid for t in inputs if t.tape is not None)
    needs = any(tape.nodes[p].needs_grad for p in parents)
    nid = tape._push(_Node(op, parents, out_data, fwd, vjp, needs))
    return Tensor(out_data, tape=tape, nid=nid)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _cast_like(tape, x):
    if tape is None:
        return np.asarray(x, dtype=np.float64)
    return np.asarray(x, dtype=tape.dtype)


def _binary(op, a, b, f, dfa, dfb):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of((a, b))
    ad = _cast_like(tape, a.data)
    bd = _cast_like(tape, b.data)
    out = f(ad, bd)
    a_taped, b_taped = a.tape is not None, b.tape is not None
    if a_taped and b_taped:
        fwd = f
        vjp = lambda g, x, y: (_unbroadcast(dfa(g, x, y), x.shape),
                               _unbroadcast(dfb(g, x, y), y.shape))
    elif a_taped:
        fwd = lambda x: f(x, bd)
        vjp = lambda g, x: (_unbroadcast(dfa(g, x, bd), x.shape),)
    elif b_taped:
        fwd = lambda y: f(ad, y)
        vjp = lambda g, y: (_unbroadcast(dfb(g, ad, y), y.shape),)
    else:
        fwd = vjp = None
    return _record(op, (a, b), out, fwd, vjp)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(op, a, f, df):
    a = _as_tensor(a)
    tape = _tape_of((a,))
    ad = _cast_like(tape, a.data)
    out = f(ad)
    if a.tape is None:
        return _record(op, (a,), out, None, None)
    return _record(op, (a,), out, f, lambda g, x: (df(g, x),))


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda g, x: -g)


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0),
                  lambda g, x: g * (x > 0))


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x: g * np.exp(x))


def log(a):
    return _unary("log", a, np.log, lambda g, x: g / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda g, x: g * 0.5 / np.sqrt(x))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsigmoid(a):
    """log(sigmoid(x)) in the overflow-safe form -softplus(-x)."""

    def f(x):
        return np.where(x < 0, x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    return _unary("logsigmoid", a, f, lambda g, x: g * _sigmoid(-x))


def _softmax_last(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    """Numerically stable softmax over the last axis."""

    def vjp(g, x):
        p = _softmax_last(x)
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _unary("softmax", a, _softmax_last, vjp)


def logsumexp(a):
    """Stable log-sum-exp over the last axis (axis is reduced away)."""

    def f(x):
        m = x.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]

    def vjp(g, x):
        return (g[..., None] * _softmax_last(x),)

    return _unary("logsumexp", a, f, vjp)


def layer_norm(a, eps=_LN_EPS):
    """Normalize the last axis to zero mean, unit variance (no affine)."""

    def f(x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps)

    def vjp(g, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _unary("layer_norm", a, f, vjp)


def matmul(a, b, row_stable=False):
    """Matrix product; 2-D or identically batched >=3-D operands.

    ``row_stable=True`` routes through einsum, guaranteeing that output row
    i is bit-identical whether computed alone or inside a batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolationError("matmul operands must be >=2-D")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ContractViolationError(
            f"matmul batch shapes differ: {a.shape} vs {b.shape}")

    if row_stable:
        def mm(x, y):
            x = np.ascontiguousarray(x)
            y = np.ascontiguousarray(y)
            if x.ndim == 2:
                return np.einsum("ik,kj->ij", x, y)
            return np.einsum("...ik,...kj->...ij", x, y)
    else:
        def mm(x, y):
            return x @ y

    def f(x, y):
        return mm(x, y)

    def vjp(g, x, y):
        return (mm(g, y.swapaxes(-1, -2)), mm(x.swapaxes(-1, -2), g))

    tape = _tape_of((a, b))
    ad, bd = _cast_like(tape, a.data), _cast_like(tape, b.data)
    out = f(ad, bd)
    a_taped, b_taped = a.tape is not None, b.tape is not None
    if a_taped and b_taped:
        return _record("matmul", (a, b), out, f, vjp)
    if a_taped:
        return _record("matmul", (a, b), out, lambda x: mm(x, bd),
                       lambda g, x: (mm(g, bd.swapaxes(-1, -2)),))
    if b_taped:
        return _record("matmul", (a, b), out, lambda y: mm(ad, y),
                       lambda g, y: (mm(ad.swapaxes(-1, -2), g),))
    return _record("matmul", (a, b), out, None, None)


def sum_all(a):
    """Reduce every element to one scalar."""
    return _unary("sum_all", a, lambda x: np.asarray(x.sum()),
                  lambda g, x: np.broadcast_to(g, x.shape).copy())


def sum_axis(a, axis):
    def f(x):
        return x.sum(axis=axis)

    def vjp(g, x):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _unary("sum_axis", a, f, vjp)


def mean_axis(a, axis):
    a = _as_tensor(a)
    n = a.shape[axis]

    def f(x):
        return x.mean(axis=axis)

    def vjp(g, x):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy() / n,)

    return _unary("mean_axis", a, f, vjp)


def gather(a, index):
    """Select rows along axis 0. Adjoint is scatter_add at the same index."""
    index = np.asarray(index, dtype=np.intp)

    def f(x):
        return x[index]

    def vjp(g, x):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return _unary("gather", a, f, vjp)


def scatter_add(a, index, size):
    """Sum rows of ``a`` into a (size, ...) output at ``index`` (axis 0).

    Accumulation is sequential in row order, so results are deterministic.
    Adjoint is a gather of the upstream gradient at the same index.
    """
    index = np.asarray(index, dtype=np.intp)
    a = _as_tensor(a)
    if len(index) != a.shape[0]:
        raise ContractViolationError("scatter_add index length != rows")

    def f(x):
        out = np.zeros((size,) + x.shape[1:], dtype=x.dtype)
        np.add.at(out, index, x)
        return out

    def vjp(g, x):
        return (g[index],)

    return _unary("scatter_add", a, f, vjp)


def concat(tensors: Sequence, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    tape = _tape_of(tensors)
    datas = [_cast_like(tape, t.data) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    if tape is None:
        return Tensor(out)
    if any(t.tape is None for t in tensors):
        raise ContractViolationError("concat mixes taped and constant inputs")
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def f(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, *xs):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, f, vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def f(x):
        return np.ascontiguousarray(x[sl])

    def vjp(g, x):
        out = np.zeros_like(x)
        out[sl] = g
        return (out,)

    return _unary("narrow", a, f, vjp)


def reshape(a, shape):
    shape = tuple(shape)

    def f(x):
        return np.ascontiguousarray(x).reshape(shape)

    def vjp(g, x):
        return (np.ascontiguousarray(g).reshape(x.shape),)

    return _unary("reshape", a, f, vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def f(x):
        return np.ascontiguousarray(x.transpose(axes))

    def vjp(g, x):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _unary("transpose", a, f, vjp)


def detach(a) -> Tensor:
    """Cut the tensor off the tape (stop-gradient)."""
    a = _as_tensor(a)
    return Tensor(a.data.copy())


def _rope_angles(x_shape, positions, base, dtype):
    d = x_shape[-1]
    half = d // 2
    positions = np.asarray(positions, dtype=np.float64)
    freqs = np.float64(base) ** (-2.0 * np.arange(half) / d)
    angles = positions[..., None] * freqs          # (..., half)
    angles = np.broadcast_to(angles, x_shape[:-1] + (half,))
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x, position, base=10000.0):
    """Rotate consecutive coordinate pairs by position-dependent angles.

    Pair i of the last axis is rotated by position * base**(-2i/d). The map
    is orthogonal, so norms are preserved exactly up to rounding.
    ``position`` is a single index or an array matching the leading axes.
    """
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ContractViolationError("rope_apply needs an even last extent")
    tape = _tape_of((x,))
    dtype = np.float64 if tape is None else tape.dtype
    cos, sin = _rope_angles(x.shape, position, base, dtype)

    def rotate(v, co, si):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * co - od * si
        out[..., 1::2] = ev * si + od * co
        return out

    def f(v):
        return rotate(v, cos, sin)

    def vjp(g, v):
        return (rotate(g, cos, -sin),)   # transpose of a rotation

    return _unary("rope", x, f, vjp)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over the whole tape.

    Returns a map node-id -> gradient for every leaf with requires_grad;
    leaves the loss does not depend on get zero gradients.
    """
    if loss.tape is not tape:
        raise ContractViolationError("loss is not on this tape")
    if loss.data.size != 1:
        raise ContractViolationError("loss must be scalar")
    grads: dict[int, np.ndarray] = {
        loss.nid: np.ones_like(tape.nodes[loss.nid].value)}
    for nid in range(loss.nid, -1, -1):
        node = tape.nodes[nid]
        g = grads.pop(nid, None)
        if g is None or not node.parents:
            continue
        parent_vals = [tape.nodes[p].value for p in node.parents]
        pgrads = node.vjp(g, *parent_vals)
        for p, pg in zip(node.parents, pgrads):
            if not tape.nodes[p].needs_grad:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
        if node.is_leaf:
            grads[nid] = g
    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.is_leaf:
            out[nid] = grads.get(nid, np.zeros_like(node.value))
    return out


def param_grads(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients for every named parameter registered on the tape."""
    node_grads = backward(tape, loss)
    return {name: node_grads[nid] for name, nid in tape.param_nodes.items()}


def grad_check(fn: Callable[[Tensor], Tensor], point, step=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps one leaf tensor to a scalar tensor on the leaf's tape and
    must be deterministic. The error per coordinate is
    |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractViolationError("step must be positive")
    point = np.asarray(point, dtype=np.float64)

    tape = Tape(np.float64)
    x = tape.leaf(point)
    y = fn(x)
    if y.data.size != 1:
        raise ContractViolationError("grad_check target must be scalar")
    analytic = backward(tape, y)[x.nid].reshape(-1)

    def value_at(p):
        t = Tape(np.float64)
        with np.errstate(all="ignore"):
            v = fn(t.leaf(p)).item()
        if not np.isfinite(v):
            raise GradCheckError("non-finite function value")
        return v

    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + step
        try:
            up = value_at(shifted.reshape(point.shape))
            shifted[i] = flat[i] - step
            down = value_at(shifted.reshape(point.shape))
        except GradCheckError as err:
            raise GradCheckError(str(err), coordinate=i) from None
        fd = (up - down) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
