"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive evaluates eagerly with numpy, appends one record to the
tape of its inputs and registers an adjoint.  :func:`backward` walks the
tape in reverse, so gradient accumulation order is fixed by recording
order and results are bit-reproducible.

    tape = Tape()
    w = tape.leaf(np.ones(3), "w")
    loss = ad.sum(ad.multiply(w, w))
    grads = ad.backward(tape, loss)     # {w: array([2., 2., 2.])}
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GradientCheckError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node", "name", "__weakref__")

    def __init__(self, value, tape=None, node=-1, name=None):
        self.value = value
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node >= 0

    def __repr__(self):
        tag = self.name or ("leaf" if self.is_leaf else "node" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.shape})"

    @property
    def is_leaf(self) -> bool:
        return self.requires_grad and self.tape.nodes[self.node][0] == ()

    # operator sugar for hand-written tests and models
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications.

    ``nodes[k]`` is ``(inputs, adjoint)`` where ``adjoint(g)`` maps the
    output cotangent to one cotangent per input.  Leaves have no inputs.
    With ``grad=False`` nothing is recorded and every result is a constant,
    which is what evaluation passes want.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: list[tuple[tuple[Tensor, ...], Callable | None]] = []
        self.leaves: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        _check_finite("leaf", value)
        if not self.grad:
            return Tensor(value, self, -1, name)
        t = Tensor(value, self, len(self.nodes), name)
        self.nodes.append(((), None))
        self.leaves.append(t)
        return t

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, -1)

    def _record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
        _check_finite(op, value)
        if not self.grad or not any(t.requires_grad for t in inputs):
            return Tensor(value, self, -1)
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append((tuple(inputs), adjoint))
        return t


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise FloatingPointError(f"{op}: non-finite value produced")


def _as_tensor(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape, -1)


def _tape_of(*xs) -> Tape:
    found = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if found is None:
                found = x.tape
            elif x.tape is not found:
                raise ValueError("inputs recorded on different tapes")
    return Tape(grad=False) if found is None else found


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return tape._record(
        "add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape._record(
        "sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def multiply(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _broadcast_shape("multiply", a, b)
    av, bv = a.value, b.value
    return tape._record(
        "multiply",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` a (k, m) matrix."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def adjoint(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return tape._record("matmul", av @ bv, (a, b), adjoint)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def adjoint(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return tape._record("concat", out, xs, adjoint)


def gather_rows(table, index) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape.

    The result has shape ``index.shape + table.shape[1:]``.
    """
    tape = _tape_of(table)
    table = _as_tensor(table, tape)
    index = np.asarray(index, dtype=np.int64)
    tv = table.value
    if tv.ndim < 1:
        raise ShapeError("gather_rows: table must have at least one dimension")
    if index.size and (index.min() < 0 or index.max() >= tv.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of shape {tv.shape}")

    def adjoint(g):
        out = np.zeros_like(tv)
        np.add.at(out, index.ravel(), g.reshape((-1,) + tv.shape[1:]))
        return (out,)

    return tape._record("gather_rows", tv[index], (table,), adjoint)


def reshape(x, shape) -> Tensor:
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return tape._record("reshape", out, (x,), lambda g: (g.reshape(old),))


def take(x, index, axis: int = -1) -> Tensor:
    """``np.take(x, index, axis)``: an integer or a slice along one axis."""
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    shape = x.shape
    sel = [slice(None)] * len(shape)
    try:
        sel[axis] = index
        out = x.value[tuple(sel)]
    except (IndexError, TypeError):
        raise ShapeError(f"take: bad index {index!r} on axis {axis} of shape {shape}") from None

    def adjoint(g):
        full = np.zeros(shape)
        full[tuple(sel)] = g
        return (full,)

    return tape._record("take", np.array(out), (x,), adjoint)


def sigmoid(x) -> Tensor:
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    s = _sigmoid(x.value)
    return tape._record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    t = np.tanh(x.value)
    return tape._record("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    on = x.value > 0
    return tape._record("relu", np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def _lse(v: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp over the last axis and the matching (masked) softmax."""
    if mask is None:
        m = v.max(axis=-1, keepdims=True)
        e = np.exp(v - m)
    else:
        if not np.all(mask.any(axis=-1)):
            raise ValueError("log_sum_exp: empty index subset")
        m = np.where(mask, v, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, v - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return (m + np.log(s))[..., 0], e / s


def log_sum_exp(x, mask=None) -> Tensor:
    """``log(sum(exp(x)))`` over the last axis, restricted to ``mask``.

    ``mask`` is a boolean array broadcastable to ``x``; unselected entries
    contribute nothing and receive zero gradient.
    """
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if x.value.ndim == 0:
        raise ShapeError("log_sum_exp: needs at least one axis")
    out, p = _lse(x.value, mask)
    return tape._record("log_sum_exp", out, (x,), lambda g: (g[..., None] * p,))


def log_softmax(x, mask=None) -> Tensor:
    """``x - log_sum_exp(x, mask)`` over the last axis.

    Entries outside ``mask`` are still returned (shifted by the same
    normalizer) but are not part of the normalizing sum.
    """
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if x.value.ndim == 0:
        raise ShapeError("log_softmax: needs at least one axis")
    lse, p = _lse(x.value, mask)
    return tape._record(
        "log_softmax",
        x.value - lse[..., None],
        (x,),
        lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
    )


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_layer(x, Wx, Wh, b, h0, c0) -> Tensor:
    """A full unidirectional LSTM pass as one primitive.

    ``x`` is (B, T, n), ``Wx`` (n, 4H), ``Wh`` (H, 4H), ``b`` (4H,) and
    ``h0``/``c0`` (B, H).  Gates are laid out [input, forget, output,
    cell].  Returns (B, T + 1, H): ``h0`` followed by the hidden state
    after each step.  The adjoint is backpropagation through time.
    """
    tape = _tape_of(x, Wx, Wh, b, h0, c0)
    x, Wx, Wh, b, h0, c0 = (_as_tensor(t, tape) for t in (x, Wx, Wh, b, h0, c0))
    xv, Wxv, Whv = x.value, Wx.value, Wh.value
    if xv.ndim != 3:
        raise ShapeError(f"lstm_layer: x must be (B, T, n), got {xv.shape}")
    B, T, n = xv.shape
    H = Whv.shape[0]
    if Wxv.shape != (n, 4 * H) or Whv.shape != (H, 4 * H) or b.shape != (4 * H,) \
            or h0.shape != (B, H) or c0.shape != (B, H):
        raise ShapeError(
            f"lstm_layer: shapes x{xv.shape} Wx{Wxv.shape} Wh{Whv.shape} b{b.shape} "
            f"h0{h0.shape} c0{c0.shape}"
        )
    proj = xv @ Wxv + b.value
    hs = np.empty((B, T + 1, H))
    cs = np.empty((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    hs[:, 0], cs[:, 0] = h0.value, c0.value
    for t in range(T):
        z = proj[:, t] + hs[:, t] @ Whv
        a = np.concatenate([_sigmoid(z[:, : 3 * H]), np.tanh(z[:, 3 * H :])], axis=1)
        gates[:, t] = a
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])

    def adjoint(G):
        dz_all = np.empty((B, T, 4 * H))
        dWh = np.zeros_like(Whv)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = np.tanh(cs[:, t + 1])
            dh = dh + G[:, t + 1]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [dc * g * i * (1 - i), dc * cs[:, t] * f * (1 - f), dh * tc * o * (1 - o), dc * i * (1 - g * g)],
                axis=1,
            )
            dz_all[:, t] = dz
            dWh += hs[:, t].T @ dz
            dh = dz @ Whv.T
            dc = dc * f
        flat = dz_all.reshape(B * T, 4 * H)
        return (
            dz_all @ Wxv.T,
            xv.reshape(B * T, n).T @ flat,
            dWh,
            flat.sum(axis=0),
            dh + G[:, 0],
            dc,
        )

    return tape._record("lstm_layer", hs, (x, Wx, Wh, b, h0, c0), adjoint)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    shape = x.shape
    out = np.sum(x.value, axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return tape._record("sum", np.asarray(out), (x,), adjoint)


def mean(x, axis=None) -> Tensor:
    tape = _tape_of(x)
    x = _as_tensor(x, tape)
    shape = x.shape
    count = x.value.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean: empty input")
    out = np.mean(x.value, axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return tape._record("mean", np.asarray(out), (x,), adjoint)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "multiply": multiply,
    "matmul": matmul,
    "concat": concat,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "take": take,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log_softmax": log_softmax,
    "log_sum_exp": log_sum_exp,
    "lstm_layer": lstm_layer,
    "sum": sum,
    "mean": mean,
}


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every leaf of ``tape``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape and loss.requires_grad:
        raise ValueError("backward: loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node] = np.ones_like(loss.value)
    for k in range(len(tape.nodes) - 1, -1, -1):
        g = grads.get(k)
        inputs, adjoint = tape.nodes[k]
        if g is None or adjoint is None:
            continue
        del grads[k]
        for t, gt in zip(inputs, adjoint(g)):
            if not t.requires_grad:
                continue
            if t.node in grads:
                grads[t.node] = grads[t.node] + gt
            else:
                grads[t.node] = gt
    out = {}
    for leaf in tape.leaves:
        g = grads.get(leaf.node)
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        _check_finite(f"gradient of {leaf.name or 'leaf'}", out[leaf])
    return out


def value_and_grad(
    f: Callable[[Tape, dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f`` on fresh leaves and return its value and gradients by name."""
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    loss = f(tape, leaves)
    grads = backward(tape, loss)
    return float(loss.value), {name: grads[t] for name, t in leaves.items()}


def check_gradients(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    With ``max_coords`` only that many coordinates per parameter, drawn
    without replacement using ``seed``, are differenced.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = value_and_grad(f, params)

    def value_at(name, flat_index, delta):
        p = dict(params)
        arr = params[name].copy()
        arr.flat[flat_index] += delta
        p[name] = arr
        tape = Tape(grad=False)
        try:
            v = f(tape, {k: tape.leaf(x, k) for k, x in p.items()}).value
        except FloatingPointError as exc:
            raise GradientCheckError(f"non-finite value at {name}[{flat_index}]") from exc
        v = float(v)
        if not np.isfinite(v):
            raise GradientCheckError(f"non-finite value at {name}[{flat_index}]")
        return v

    worst = 0.0
    pick = np.random.default_rng(seed)
    for name, arr in params.items():
        coords = range(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(pick.choice(arr.size, size=max_coords, replace=False)).tolist()
        for idx in coords:
            num = (value_at(name, idx, epsilon) - value_at(name, idx, -epsilon)) / (2 * epsilon)
            ana = float(analytic[name].flat[idx])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst
