"""Reverse-mode automatic differentiation on dense numpy arrays.

A Tensor wraps an ndarray; primitive ops record vector-Jacobian callbacks
onto the active ComputationTape. backward(loss) replays the tape in reverse
and accumulates gradients into every requires_grad leaf.
"""

import threading

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class NumericError(RuntimeError):
    """Raised on non-finite values where finite ones are required."""


class Tensor:
    """Dense array with an optional gradient slot.

    data is never mutated by ops; the optimizer updates parameters in
    place between tape recordings, which is the one sanctioned exception.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class ComputationTape:
    """Ordered record of primitive ops; parents always precede children."""

    def __init__(self):
        self.nodes = []
        self._closed = False

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _push_tape(tape):
    _tape_stack().append(tape)


def _pop_tape(tape):
    stack = _tape_stack()
    if not stack or stack[-1] is not tape:
        raise RuntimeError("tape exited out of order")
    stack.pop()


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _record(out, parents, vjp):
    """Attach a tape node when recording is active and any parent needs grad."""
    tape = active_tape()
    if tape is None or tape._closed:
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, parents, vjp))
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The loss must be a scalar recorded on a tape; the tape is consumed.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise NumericError("backward: loss is not connected to a recorded computation")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = vjp(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                # leaf parameter: accumulate into the public grad slot;
                # copy views so in-place clipping cannot corrupt siblings
                if p.grad is None:
                    p.grad = pg.copy() if pg.base is not None else pg
                else:
                    p.grad = p.grad + pg
            else:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
    tape.nodes.clear()
    tape._closed = True


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the parent shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_const(x, like):
    """Coerce a non-Tensor operand to an ndarray in the partner dtype."""
    return np.asarray(x, dtype=like.dtype)


def _check_broadcast(op, a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not conformable") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast("add", a.shape, b.shape)
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))
    if isinstance(a, Tensor):
        out = Tensor(a.data + _as_const(b, a))
        return _record(out, (a,), lambda g: (_sum_to_shape(g, a.shape),))
    out = Tensor(_as_const(a, b) + b.data)
    return _record(out, (b,), lambda g: (_sum_to_shape(g, b.shape),))


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast("sub", a.shape, b.shape)
        out = Tensor(a.data - b.data)
        return _record(out, (a, b), lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))
    if isinstance(a, Tensor):
        out = Tensor(a.data - _as_const(b, a))
        return _record(out, (a,), lambda g: (_sum_to_shape(g, a.shape),))
    out = Tensor(_as_const(a, b) - b.data)
    return _record(out, (b,), lambda g: (_sum_to_shape(-g, b.shape),))


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast("mul", a.shape, b.shape)
        out = Tensor(a.data * b.data)
        return _record(
            out, (a, b),
            lambda g: (_sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)),
        )
    if isinstance(a, Tensor):
        c = _as_const(b, a)
        out = Tensor(a.data * c)
        return _record(out, (a,), lambda g: (_sum_to_shape(g * c, a.shape),))
    c = _as_const(a, b)
    out = Tensor(c * b.data)
    return _record(out, (b,), lambda g: (_sum_to_shape(g * c, b.shape),))


def div(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_broadcast("div", a.shape, b.shape)
        out = Tensor(a.data / b.data)

        def vjp(g):
            return (
                _sum_to_shape(g / b.data, a.shape),
                _sum_to_shape(-g * a.data / (b.data * b.data), b.shape),
            )

        return _record(out, (a, b), vjp)
    if isinstance(a, Tensor):
        c = _as_const(b, a)
        out = Tensor(a.data / c)
        return _record(out, (a,), lambda g: (_sum_to_shape(g / c, a.shape),))
    c = _as_const(a, b)
    out = Tensor(c / b.data)
    return _record(out, (b,), lambda g: (_sum_to_shape(-g * c / (b.data * b.data), b.shape),))


def matmul(a, b):
    """Matrix product with numpy stacked-batch semantics, both operands ndim >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.shape:
            ga = _sum_to_shape(ga, a.shape)
        if gb.shape != b.shape:
            gb = _sum_to_shape(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def dot(a, b):
    """Inner product of two 1-d tensors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expects equal-length 1-d tensors, got {a.shape} and {b.shape}")
    out = Tensor(np.dot(a.data, b.data))
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        gs = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            gs.append(g[tuple(idx)])
        return tuple(gs)

    return _record(out, tuple(parts), vjp)


def slice_(a, key):
    """Basic slicing view; gradient scatters back into the sliced region."""
    out = Tensor(a.data[key])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record(out, (a,), vjp)


def index_select(a, indices, axis=0):
    """Gather rows along one axis with an integer index array."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("index_select: indices must be integers")
    out = Tensor(np.take(a.data, idx, axis=axis))

    def vjp(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            ga_m = np.moveaxis(ga, axis, 0)
            np.add.at(ga_m, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record(out, (a,), vjp)


def embedding(table, ids):
    """Row lookup: table [V, D], ids any integer shape, out ids.shape + (D,)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    out = Tensor(table.data[ids.ravel()].reshape(ids.shape + (table.shape[1],)))

    def vjp(g):
        gt = np.zeros_like(table.data)
        flat_ids = ids.ravel()
        gg = g.reshape(-1, table.shape[1])
        if flat_ids.size > 2048:
            # np.add.at is an unvectorized scalar loop; for large lookups a
            # sort + segmented reduction is several times faster
            order = np.argsort(flat_ids, kind="stable")
            sids = flat_ids[order]
            starts = np.flatnonzero(np.append(True, np.diff(sids) != 0))
            gt[sids[starts]] = np.add.reduceat(gg[order], starts, axis=0)
        else:
            np.add.at(gt, flat_ids, gg)
        return (gt,)

    return _record(out, (table,), vjp)


def pad_axis(a, axis, before, after):
    """Zero-pad one axis; gradient slices the padding back off."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(a.data, widths))
    n = a.shape[axis]

    def vjp(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return _record(out, (a,), vjp)


def unfold(a, size, axis):
    """Sliding windows of a given size (stride 1) along one axis.

    The window axis is appended right after `axis`, so [n, T, C] with
    axis=1 becomes [n, T-size+1, size, C].
    """
    if a.shape[axis] < size:
        raise ShapeError(f"unfold: axis of length {a.shape[axis]} shorter than window {size}")
    view = np.lib.stride_tricks.sliding_window_view(a.data, size, axis=axis)
    # sliding_window_view appends the window axis last; bring it next to axis
    out_arr = np.moveaxis(view, -1, axis + 1).copy()
    out = Tensor(out_arr)

    def vjp(g):
        ga = np.zeros_like(a.data)
        n_out = a.shape[axis] - size + 1
        for j in range(size):
            idx = [slice(None)] * a.ndim
            idx[axis] = slice(j, j + n_out)
            gsel = [slice(None)] * g.ndim
            gsel[axis + 1] = j
            ga[tuple(idx)] += g[tuple(gsel)]
        return (ga,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis):
    """Max over one axis; gradient flows to the first argmax per slice."""
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis))
    n = a.shape[axis]

    def vjp(g):
        # scatter in an axis-last contiguous buffer, then restore the axis
        moved = np.zeros(np.moveaxis(a.data, axis, -1).shape, dtype=a.dtype)
        flat = moved.reshape(-1, n)
        np.put_along_axis(flat, idx.reshape(-1, 1), np.asarray(g).reshape(-1, 1), axis=1)
        return (np.moveaxis(moved, -1, axis),)

    return _record(out, (a,), vjp)


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def exp(a):
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def tanh(a):
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(a):
    out = Tensor(_sigmoid(a.data))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softplus(a):
    out = Tensor(np.logaddexp(0.0, a.data))
    return _record(out, (a,), lambda g: (g * _sigmoid(a.data),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Gaussian error linear unit, tanh approximation.

    Built from in-place multiplies: an integer-power ufunc call on float32
    falls back to libm pow per element, which is ~20x slower than x*x*x.
    """
    x = a.data
    inner = x * x
    inner *= x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    o = t + 1.0
    o *= x
    o *= 0.5
    out = Tensor(o)

    def vjp(g):
        dt = t * t
        np.subtract(1.0, dt, out=dt)
        sq = x * x
        sq *= 3 * 0.044715
        sq += 1.0
        dt *= sq
        dt *= _GELU_C
        dt *= x
        dt += t
        dt += 1.0
        dt *= 0.5
        dt *= g
        return (dt,)

    return _record(out, (a,), vjp)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)

    def vjp(g):
        y = np.exp(out.data)
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    d = x.shape[-1]

    def vjp(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = _sum_to_shape(g * xhat, gain.shape)
        gbias = _sum_to_shape(g, bias.shape)
        return gx, ggain, gbias

    return _record(out, (a, gain, bias), vjp)


def dropout(a, p, rng, train=True):
    """Inverted dropout driven by an explicit rng; identity when not training."""
    if not train or p <= 0.0:
        return a
    draw = a.dtype if a.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(a.shape, dtype=draw) >= p).astype(a.dtype)
    keep /= 1.0 - p
    return mul(a, keep)
