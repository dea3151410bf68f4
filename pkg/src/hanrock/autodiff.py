"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`GradientTape` is active and at least one operand is tracked, records a
node whose closure maps the output gradient to operand gradients.  The tape is
rebuilt for every batch.

Values default to float32.  Operations keep the dtype of their operands, so a
model built in float64 gives a float64 graph (used by the gradient checks).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# each thread records onto its own tape stack
_LOCAL = threading.local()


def _tapes() -> list["GradientTape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack
# when not None, relu appends its active-unit pattern here (kink detection)
_RELU_LOG: list | None = None


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient contains NaN or Inf."""


class Tensor:
    """An n-dimensional array, optionally tracked for differentiation.

    Leaves with ``requires_grad=True`` are parameters; a ``name`` identifies
    them in a :class:`GradientMap`.
    """

    __slots__ = ("data", "name", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class GradientTape:
    """Ordered record of the primitives executed while the tape is active.

    Use as a context manager; nodes are appended in execution order, so the
    record is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)


class GradientMap(dict):
    """Parameter name -> gradient array of the parameter's shape."""


def active_tape() -> GradientTape | None:
    stack = _tapes()
    return stack[-1] if stack else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        dtype = x.dtype
    return Tensor(x, dtype=dtype or DEFAULT_DTYPE)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True, dtype=np.asarray(data).dtype)


# ---------------------------------------------------------------------------
# initialisation


def tensor_init(shape: Sequence[int], scheme: str = "zeros", *, value: float = 0.0,
                low: float = -0.1, high: float = 0.1, seed=None, dtype=DEFAULT_DTYPE,
                name: str | None = None, requires_grad: bool = False) -> Tensor:
    """Create a tensor of ``shape`` filled by ``scheme``.

    Schemes: ``zeros``, ``constant`` (``value``), ``uniform`` (``low``/``high``)
    and ``glorot`` (uniform on +-sqrt(6 / (fan_in + fan_out)), with fans taken
    from the last two axes).  ``seed`` may be an int or a numpy Generator.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: dimensions must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "constant":
        data = np.full(shape, value)
    elif scheme == "uniform":
        data = rng.uniform(low, high, size=shape)
    elif scheme == "glorot":
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_out, fan_in = shape[-2], shape[-1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), name=name, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# graph plumbing


def _result(data: np.ndarray, parents: tuple, backward: Callable, kind: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced a non-finite value")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from exc
    n = len(ts)
    return _result(out, tuple(ts),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    if _RELU_LOG is not None:
        _RELU_LOG.append(pos.reshape(-1))
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (a,),
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def masked_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask`` positions; masked entries are exactly 0.

    A slice with no unmasked position yields all zeros.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    neg_inf = np.where(mask, a.data, -np.inf)
    top = neg_inf.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - top, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = (e / np.where(denom > 0, denom, 1.0)).astype(a.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "masked_softmax")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def weighted_sum(weights, values) -> Tensor:
    """Pool ``values[..., t, :]`` with ``weights[..., t]`` over the second-last axis."""
    w, v = _pair(weights, values)
    if w.shape != v.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match values {v.shape}")
    out = np.einsum("...t,...td->...d", w.data, v.data)

    def backward(g):
        gw = np.einsum("...d,...td->...t", g, v.data)
        gv = w.data[..., None] * g[..., None, :]
        return gw, gv

    return _result(out, (w, v), backward, "weighted_sum")


def take_rows(matrix, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d ``matrix`` at integer ``ids`` (any shape)."""
    m = as_tensor(matrix)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= m.shape[0]):
        raise IndexError(f"row id out of range [0, {m.shape[0]})")

    def backward(g):
        full = np.zeros_like(m.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, m.shape[1]))
        return (full,)

    return _result(m.data[ids], (m,), backward, "take_rows")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


_PRIMITIVES = {
    "matmul": matmul, "add": add, "mul": mul, "concat": concat, "sigmoid": sigmoid,
    "tanh": tanh, "relu": relu, "exp": exp, "softmax": softmax, "sum": sum,
    "weighted_sum": weighted_sum,
}


def apply_primitive(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("softmax", x, axis=0)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(operands, **kwargs)
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: GradientTape,
             params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> GradientMap:
    """Gradients of the scalar ``loss`` with respect to ``params``.

    Parameters that the loss does not reach get exact zeros.  The tape is not
    mutated, so calling this twice gives identical maps.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if isinstance(params, Mapping):
        named = dict(params)
    elif params is not None:
        named = {p.name: p for p in params}
    else:
        named = _leaves(tape)
    is_leaf = loss.requires_grad and loss._backward is None
    if loss not in tape and not is_leaf:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not is_leaf:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = GradientMap()
    for name, p in named.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        out[name] = np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


def _leaves(tape: GradientTape) -> dict[str, Tensor]:
    found: dict[str, Tensor] = {}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad and p._backward is None and p.name is not None:
                found.setdefault(p.name, p)
    return found


def value_and_grad(fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> tuple[float, GradientMap]:
    with GradientTape() as tape:
        loss = fn()
    if not loss.requires_grad:
        # constant in every parameter
        return float(loss.data), GradientMap({k: np.zeros_like(p.data) for k, p in params.items()})
    return float(loss.data), backward(loss, tape, params)


def _eval_with_pattern(fn: Callable[[], Tensor]) -> tuple[float, np.ndarray]:
    global _RELU_LOG
    _RELU_LOG = []
    try:
        value = float(fn().data)
        pattern = np.concatenate(_RELU_LOG) if _RELU_LOG else np.zeros(0, dtype=bool)
    finally:
        _RELU_LOG = None
    return value, pattern


def finite_difference_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                            epsilon: float = 1e-3, skip_kinks: bool = False,
                            stats: dict | None = None, order: int = 2, accept_below: float = 0.0) -> float:
    """Max relative disagreement between reverse-mode and finite differences.

    ``fn`` rebuilds the forward pass from the current ``params`` data.  The
    relative error per entry is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    ``order`` selects the central stencil: 2 (points +-e) or 4 (points +-e,
    +-2e, truncation error O(e^4)).  With ``order=4`` and ``accept_below > 0``
    the outer points are only evaluated when the two-point estimate disagrees
    by at least ``accept_below``.

    With ``skip_kinks`` an entry whose stencil changes the on/off pattern of
    any relu is excluded, since the difference then spans a point of
    non-differentiability.  ``stats`` receives ``checked``/``skipped`` counts.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    _, grads = value_and_grad(fn, params)
    base = _eval_with_pattern(fn)[1] if skip_kinks else None
    worst = 0.0
    checked = skipped = 0
    def evaluate(flat, i, orig, ks):
        values, kink = [], False
        try:
            for k in ks:
                flat[i] = orig + k * epsilon
                if skip_kinks:
                    v, pat = _eval_with_pattern(fn)
                    kink = kink or not np.array_equal(pat, base)
                else:
                    v = float(fn().data)
                values.append(v)
        finally:
            flat[i] = orig
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteError(f"fn returned a non-finite value perturbing {name}[{i}]")
        return values, kink

    def rel(a, b):
        return abs(a - b) / max(1e-8, abs(a) + abs(b))

    for name, p in params.items():
        flat = p.data.reshape(-1)
        g_ad = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            ga = float(g_ad[i])
            values, kink = evaluate(flat, i, orig, (1.0, -1.0))
            err = rel(ga, (values[0] - values[1]) / (2 * epsilon))
            if order == 4 and not kink and not err < accept_below:
                outer, kink = evaluate(flat, i, orig, (2.0, -2.0))
                g_fd = (8 * (values[0] - values[1]) - (outer[0] - outer[1])) / (12 * epsilon)
                err = rel(ga, g_fd)
            if kink:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
