"""Reverse-mode differentiation over a fixed vocabulary of array primitives.

Every public primitive (``exp``, ``matmul``, ``soft_relu`` ...) accepts plain
numpy arrays or :class:`Var` handles.  With plain arrays it simply evaluates;
as soon as one argument is a ``Var`` the call is recorded on that variable's
tape.  Model code is therefore written once and runs both as a cheap numpy
evaluation and as a differentiable forward pass.

    tape = Tape()
    x = tape.param("x", np.array(3.0))
    y = square(x)
    grads = backward(tape, y)      # {"x": array(6.)}
"""

import numpy as np

from detvi import specials

ARCSIN_GRAD_LIMIT = 1.0 - 1e-9


class TapeError(RuntimeError):
    """Structural misuse of a tape (unknown primitive, reused tape, ...)."""


class Var:
    """Handle to a node on a tape; carries the primal value."""

    __slots__ = ("tape", "id", "value")
    # Make ndarray binary operators defer to the reflected Var methods.
    __array_ufunc__ = None

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Append-only record of primitive applications.

    ``nodes[i]`` is ``(op, input_ids, input_values, attrs, output_value)``;
    parameter leaves are nodes with op ``"param"`` and are also listed in
    ``params`` by name.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}
        self.consumed = False

    def param(self, name, value):
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        # Copy: a tape never aliases caller-owned parameter storage.
        value = np.array(value, dtype=np.float64)
        var = Var(self, len(self.nodes), value)
        self.nodes.append(("param", (), (), {}, value))
        self.params[name] = var.id
        return var

    def record(self, op, inputs, **attrs):
        """Append ``op`` applied to ``inputs`` (Vars or arrays); return its Var."""
        if op not in PRIMITIVES:
            raise TapeError(f"unknown primitive {op!r}")
        ids, values = [], []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise TapeError("inputs belong to a different tape")
                ids.append(x.id)
                values.append(x.value)
            else:
                ids.append(None)
                values.append(np.asarray(x, dtype=np.float64))
        forward = PRIMITIVES[op][0]
        out = forward(*values, **attrs)
        var = Var(self, len(self.nodes), out)
        self.nodes.append((op, tuple(ids), tuple(values), attrs, out))
        return var


def value(x):
    """Primal value of a Var or array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def stop_gradient(x):
    return np.array(value(x))


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _apply(op, *args, **attrs):
    tape = _tape_of(args)
    if tape is None:
        vals = [np.asarray(a, dtype=np.float64) for a in args]
        return PRIMITIVES[op][0](*vals, **attrs)
    return tape.record(op, args, **attrs)


def record(tape, op, inputs, **attrs):
    return tape.record(op, inputs, **attrs)


# --------------------------------------------------------------------------
# primitive table: op -> (forward(*values, **attrs), vjp(g, out, *values, **attrs))
# vjp returns one cotangent per input, already reduced to the input's shape.


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# Binary vjps take ``needs``: which inputs are on the tape.  Cotangents for
# constant inputs are skipped (returned as None).


def _vjp_add(g, out, a, b, needs=(True, True)):
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


def _vjp_sub(g, out, a, b, needs=(True, True)):
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    )


def _vjp_mul(g, out, a, b, needs=(True, True)):
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _vjp_div(g, out, a, b, needs=(True, True)):
    if not needs[1]:
        return _unbroadcast(g / b, a.shape), None
    gb = g / b
    return (
        _unbroadcast(gb, a.shape) if needs[0] else None,
        _unbroadcast(-gb * out, b.shape),
    )


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return np.matmul(a, b)


def _vjp_matmul(g, out, a, b, needs=(True, True)):
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
    return ga, gb


def _arcsin_vjp(g, out, x):
    xc = np.clip(x, -ARCSIN_GRAD_LIMIT, ARCSIN_GRAD_LIMIT)
    return (g / np.sqrt(1.0 - xc * xc),)


def _lse_forward(x, axis=-1):
    return specials.log_sum_exp(x, axis=axis)


def _lse_vjp(g, out, x, axis=-1):
    p = np.exp(x - np.expand_dims(out, axis))
    return (np.expand_dims(g, axis) * p,)


def _sum_forward(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _clamp_forward(x, lo=-np.inf, hi=np.inf):
    return np.clip(x, lo, hi)


def _clamp_vjp(g, out, x, lo=-np.inf, hi=np.inf):
    return (g * ((x >= lo) & (x <= hi)),)


def _where_forward(a, b, cond=None):
    return np.where(cond, a, b)


def _where_vjp(g, out, a, b, cond=None, needs=(True, True)):
    return (
        _unbroadcast(np.where(cond, g, 0.0), a.shape) if needs[0] else None,
        _unbroadcast(np.where(cond, 0.0, g), b.shape) if needs[1] else None,
    )


def _getitem_vjp(g, out, x, index=None):
    gx = np.zeros_like(x)
    np.add.at(gx, index, g)
    return (gx,)


def _diag_embed(x):
    n = x.shape[-1]
    out = np.zeros(x.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = x
    return out


def _diagonal(x):
    return np.diagonal(x, axis1=-2, axis2=-1).copy()


def _concat_forward(*xs, axis=-1):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis=-1):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


PRIMITIVES = {
    "param": (None, None),
    "add": (np.add, _vjp_add),
    "subtract": (np.subtract, _vjp_sub),
    "multiply": (np.multiply, _vjp_mul),
    "divide": (np.divide, _vjp_div),
    "negative": (np.negative, lambda g, out, x: (-g,)),
    "matmul": (_matmul, _vjp_matmul),
    "exp": (np.exp, lambda g, out, x: (g * out,)),
    "log": (np.log, lambda g, out, x: (g / x,)),
    "sqrt": (np.sqrt, lambda g, out, x: (g * 0.5 / out,)),
    "square": (np.square, lambda g, out, x: (2.0 * g * x,)),
    "arcsin": (np.arcsin, _arcsin_vjp),
    "std_normal_pdf": (specials.std_normal_pdf, lambda g, out, x: (-g * x * out,)),
    "std_normal_cdf": (
        specials.std_normal_cdf,
        lambda g, out, x: (g * specials.std_normal_pdf(x),),
    ),
    "soft_relu": (specials.soft_relu, lambda g, out, x: (g * specials.std_normal_cdf(x),)),
    "logsumexp": (_lse_forward, _lse_vjp),
    "sum": (_sum_forward, _sum_vjp),
    "clamp": (_clamp_forward, _clamp_vjp),
    "where": (_where_forward, _where_vjp),
    "transpose": (
        lambda x: np.swapaxes(x, -1, -2),
        lambda g, out, x: (np.swapaxes(g, -1, -2),),
    ),
    "reshape": (
        lambda x, shape=None: np.reshape(x, shape),
        lambda g, out, x, shape=None: (np.reshape(g, x.shape),),
    ),
    "getitem": (lambda x, index=None: x[index], _getitem_vjp),
    "diag_embed": (_diag_embed, lambda g, out, x: (_diagonal(g),)),
    "diagonal": (_diagonal, lambda g, out, x: (_diag_embed(g),)),
    "concat": (_concat_forward, _concat_vjp),
}




def register_primitive(op, forward, vjp):
    """Add a fused primitive; ``vjp(g, out, *inputs, **attrs)`` returns one cotangent per input."""
    if op in PRIMITIVES:
        raise TapeError(f"primitive {op!r} already registered")
    PRIMITIVES[op] = (forward, vjp)


def apply(op, *args, **attrs):
    """Evaluate a registered primitive, recording it if any argument is a Var."""
    if op not in PRIMITIVES or op == "param":
        raise TapeError(f"unknown primitive {op!r}")
    return _apply(op, *args, **attrs)


_NEEDS_AWARE = frozenset({"add", "subtract", "multiply", "divide", "matmul", "where"})

# --------------------------------------------------------------------------
# public primitive functions


def add(a, b):
    return _apply("add", a, b)


def subtract(a, b):
    return _apply("subtract", a, b)


def multiply(a, b):
    return _apply("multiply", a, b)


def divide(a, b):
    return _apply("divide", a, b)


def negative(x):
    return _apply("negative", x)


def matmul(a, b):
    return _apply("matmul", a, b)


def exp(x):
    return _apply("exp", x)


def log(x):
    return _apply("log", x)


def sqrt(x):
    return _apply("sqrt", x)


def square(x):
    return _apply("square", x)


def arcsin(x):
    return _apply("arcsin", x)


def std_normal_pdf(x):
    return _apply("std_normal_pdf", x)


def std_normal_cdf(x):
    return _apply("std_normal_cdf", x)


def soft_relu(x):
    return _apply("soft_relu", x)


def logsumexp(x, axis=-1):
    return _apply("logsumexp", x, axis=axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _apply("sum", x, axis=axis, keepdims=keepdims)


def clamp(x, lo=-np.inf, hi=np.inf):
    """Clip to [lo, hi]; the gradient is 1 inside and 0 where clipped."""
    return _apply("clamp", x, lo=lo, hi=hi)


def where(cond, a, b):
    """Select with a constant boolean mask; no gradient flows to the mask."""
    return _apply("where", a, b, cond=np.asarray(cond, dtype=bool))


def transpose(x):
    return _apply("transpose", x)


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(shape))


def getitem(x, index):
    return _apply("getitem", x, index=index)


def diag_embed(x):
    return _apply("diag_embed", x)


def diagonal(x):
    return _apply("diagonal", x)


def concat(xs, axis=-1):
    return _apply("concat", *xs, axis=axis)


def relu(x):
    return clamp(x, 0.0, np.inf)


# --------------------------------------------------------------------------


def backward(tape, root):
    """Gradients of the scalar ``root`` w.r.t. every registered parameter.

    Returns ``{name: gradient array}``.  A tape supports exactly one
    backward pass.
    """
    if not isinstance(root, Var) or root.tape is not tape:
        raise TapeError("root must be a Var recorded on this tape")
    if root.value.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    tape.consumed = True

    adjoints = [None] * (root.id + 1)
    adjoints[root.id] = np.ones_like(root.value)
    for node_id in range(root.id, -1, -1):
        g = adjoints[node_id]
        if g is None:
            continue
        op, ids, values, attrs, out = tape.nodes[node_id]
        if op == "param":
            continue
        if op in _NEEDS_AWARE:
            attrs = dict(attrs, needs=tuple(i is not None for i in ids))
        cotangents = PRIMITIVES[op][1](g, out, *values, **attrs)
        adjoints[node_id] = None
        for input_id, ct in zip(ids, cotangents):
            if input_id is None:
                continue
            # Adjoints are never updated in place, so sharing arrays is safe.
            if adjoints[input_id] is None:
                adjoints[input_id] = np.asarray(ct, dtype=np.float64)
            else:
                adjoints[input_id] = adjoints[input_id] + ct
    grads = {}
    for name, pid in tape.params.items():
        g = adjoints[pid] if pid < len(adjoints) else None
        grads[name] = np.zeros_like(tape.nodes[pid][4]) if g is None else np.array(g)
    return grads


def value_and_grad(loss, params):
    """Evaluate ``loss(vars)`` on a fresh tape; return (value, grads)."""
    tape = Tape()
    handles = {k: tape.param(k, v) for k, v in params.items()}
    out = loss(handles)
    return float(np.squeeze(out.value)), backward(tape, out)


def finite_diff_check(loss, params, eps=1e-5, max_coords=200, seed=0):
    """Largest relative error between tape gradients and central differences.

    ``loss`` maps a dict of parameter arrays (or Vars) to a scalar.  At most
    ``max_coords`` coordinates are probed, chosen by a seeded draw over the
    flattened concatenation of all blocks.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = value_and_grad(loss, params)

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    worst = 0.0
    for name, i in coords:
        base = params[name]
        plus = dict(params)
        minus = dict(params)
        plus[name] = base.copy()
        minus[name] = base.copy()
        plus[name].flat[i] += eps
        minus[name].flat[i] -= eps
        fd = (float(np.squeeze(loss(plus))) - float(np.squeeze(loss(minus)))) / (2 * eps)
        g = float(grads[name].flat[i])
        err = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
