"""
Minimal reverse-mode automatic differentiation over numpy arrays, MLP
evaluation and the Adam optimizer.

Expressions are built from a closed set of primitives (see ``PRIMITIVES``);
anything else raises ``UnsupportedPrimitiveError`` while the expression is
being built, never during the backward pass.
"""

import logging
from collections.abc import MutableMapping
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .exceptions import InvalidInputError, UnsupportedPrimitiveError

_LOGGER = logging.getLogger(__name__)

# below this rotation angle Rodrigues coefficients use their Taylor series
_SMALL_ANGLE = 1e-3

__all__ = [
    "Tensor",
    "ParamStore",
    "MlpSpec",
    "AdamState",
    "PRIMITIVES",
    "constant",
    "add",
    "mul",
    "matmul",
    "relu",
    "gather",
    "tsum",
    "mean",
    "sq_norm",
    "absolute",
    "rodrigues",
    "rodrigues_matrix",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "clip_norm",
    "grad",
    "value_and_grad",
    "init_mlp_params",
    "mlp_forward",
    "adam_init",
    "adam_step",
]


class Tensor(object):
    """
    A node of the tape: a value, the nodes it was computed from and the
    vector-Jacobian product mapping its output gradient to its inputs.
    """

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "name")

    def __init__(self, value, parents=(), vjp=None, op="leaf", requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fun = _UFUNC_PRIMITIVES.get(ufunc) if method == "__call__" and not kwargs else None
        if fun is None:
            raise UnsupportedPrimitiveError(
                f"numpy.{ufunc.__name__} ({method}) is not a differentiable primitive"
            )
        return fun(*inputs)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError("Division by a tensor is not a primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return gather(self, index)

    def __pow__(self, power):
        raise UnsupportedPrimitiveError("Power is not a primitive; use sq_norm or mul")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def constant(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(value, parents, vjp, op):
    return Tensor(value, parents=parents, vjp=vjp, op=op)


def add(a, b):
    a, b = constant(a), constant(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), vjp, "add")


def neg(a):
    return mul(a, -1.0)


def mul(a, b):
    a, b = constant(a), constant(b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), vjp, "mul")


def matmul(a, b):
    """numpy ``matmul`` semantics, including batching and 1-D operands."""
    a, b = constant(a), constant(b)
    if a.ndim == 0 or b.ndim == 0:
        raise InvalidInputError("matmul needs operands with at least one dimension")

    def vjp(g):
        av = a.value[None, :] if a.ndim == 1 else a.value
        bv = b.value[:, None] if b.ndim == 1 else b.value
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    try:
        value = a.value @ b.value
    except ValueError as e:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e
    return _node(value, (a, b), vjp, "matmul")


def relu(a):
    a = constant(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def gather(a, index):
    """``a[index]`` for any numpy index; the gradient scatters back with ``add.at``."""
    a = constant(a)
    if isinstance(index, Tensor):
        raise UnsupportedPrimitiveError("Indices must be constant, not tensors")

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), vjp, "gather")


def tsum(a, axis=None, keepdims=False):
    a = constant(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None):
    a = constant(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def sq_norm(a, axis=None, keepdims=False):
    """Sum of squares over ``axis`` (all entries when None)."""
    a = constant(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * a.value * g,)

    return _node(np.sum(a.value * a.value, axis=axis, keepdims=keepdims), (a,), vjp, "sq_norm")


def absolute(a):
    a = constant(a)
    sign = np.sign(a.value)
    return _node(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def reshape(a, shape):
    a = constant(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1=-1, ax2=-2):
    a = constant(a)
    return _node(
        np.swapaxes(a.value, ax1, ax2),
        (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
        "swapaxes",
    )


def concat(tensors, axis=0):
    tensors = [constant(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors, axis=0):
    tensors = [constant(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.value for t in tensors], axis=axis), tensors, vjp, "stack")


def clip_norm(a, cap):
    """Rescale every row (last axis) to Euclidean norm at most ``cap``."""
    a = constant(a)
    norms = np.linalg.norm(a.value, axis=-1, keepdims=True)
    over = norms > cap
    safe = np.where(over, norms, 1.0)
    scale = np.where(over, cap / safe, 1.0)

    def vjp(g):
        unit = a.value / safe
        radial = np.sum(unit * g, axis=-1, keepdims=True) * unit
        return (np.where(over, scale * (g - radial), g),)

    return _node(a.value * scale, (a,), vjp, "clip_norm")


def _skew(r):
    z = np.zeros(r.shape[:-1])
    return np.stack(
        [
            np.stack([z, -r[..., 2], r[..., 1]], axis=-1),
            np.stack([r[..., 2], z, -r[..., 0]], axis=-1),
            np.stack([-r[..., 1], r[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _unskew(m):
    """Components of <m, [e_j]x> for j = 0, 1, 2."""
    return np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def _rodrigues_coefficients(theta):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives divided by t."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0, (t * np.cos(t) - np.sin(t)) / t**3)
    db = np.where(
        small, -1.0 / 12.0 + t2 / 180.0, (t * np.sin(t) - 2.0 + 2.0 * np.cos(t)) / t**4
    )
    return a, b, da, db


def rodrigues_matrix(axis_angle):
    """Plain numpy Rodrigues formula: (..., 3) axis-angle -> (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=float)
    k = _skew(r)
    a, b, _, _ = _rodrigues_coefficients(np.linalg.norm(r, axis=-1))
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues(axis_angle):
    """
    Differentiable axis-angle to rotation matrix, batched over leading axes.

    R = I + a(t) K + b(t) K^2 with K the cross-product matrix of r and t = |r|.
    """
    r = constant(axis_angle)
    if r.shape[-1] != 3:
        raise InvalidInputError(f"Axis-angle needs a trailing axis of 3, got {r.shape}")
    k = _skew(r.value)
    k2 = k @ k
    a, b, da, db = _rodrigues_coefficients(np.linalg.norm(r.value, axis=-1))
    value = np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2

    def vjp(g):
        radial = da * np.sum(g * k, axis=(-2, -1)) + db * np.sum(g * k2, axis=(-2, -1))
        sym = -(g @ k + k @ g)
        return (
            radial[..., None] * r.value
            + a[..., None] * _unskew(g)
            + b[..., None] * _unskew(sym),
        )

    return _node(value, (r,), vjp, "rodrigues")


PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "gather": gather,
    "sum": tsum,
    "sq_norm": sq_norm,
    "abs": absolute,
    "rodrigues": rodrigues,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "concat": concat,
    "stack": stack,
    "clip_norm": clip_norm,
}

_UFUNC_PRIMITIVES = {
    np.add: add,
    np.subtract: lambda a, b: add(a, neg(b)),
    np.multiply: mul,
    np.matmul: matmul,
    np.negative: neg,
    np.absolute: absolute,
}


def _topological_order(root):
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order[::-1]


def backward(output):
    """
    Propagate d(output)/d(node) through the tape.

    :param Tensor output: scalar expression
    :return dict[int, numpy.ndarray]: gradient per node id
    """
    if output.value.size != 1:
        raise InvalidInputError(f"Objective must be a scalar, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.value)}
    for node in _topological_order(output):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


class ParamStore(MutableMapping):
    """
    Named parameter arrays. Behaves like a dict; values are validated to be
    finite float arrays on assignment.
    """

    def __init__(self, entries=None):
        self.data = {}
        for k, v in dict(entries or {}).items():
            self[k] = v

    def __setitem__(self, item, value):
        arr = np.array(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"Parameter '{item}' has non-finite values")
        self.data[item] = arr

    def __getitem__(self, item):
        return self.data[item]

    def __iter__(self):
        return iter(self.data)

    def __len__(self):
        return len(self.data)

    def __delitem__(self, key):
        del self.data[key]

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.data.items()}
        return f"{type(self).__name__}({shapes})"

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.data.items()})

    def zeros_like(self):
        return ParamStore({k: np.zeros_like(v) for k, v in self.data.items()})

    @property
    def n_values(self):
        return int(sum(v.size for v in self.data.values()))

    def same_layout(self, other):
        return list(self.keys()) == list(other.keys()) and all(
            self[k].shape == other[k].shape for k in self
        )


def value_and_grad(objective, params):
    """
    Evaluate ``objective`` on leaf tensors built from ``params`` and
    differentiate it.

    :param callable(dict[str, Tensor]) -> Tensor objective: scalar expression
    :param ParamStore params: point of evaluation
    :return (float, ParamStore): objective value and its gradient
    """
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = objective(leaves)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitiveError(
            f"Objective returned {type(out).__name__}; it must be built from tape primitives"
        )
    grads = backward(out) if out.requires_grad else {}
    result = ParamStore()
    for k, leaf in leaves.items():
        result[k] = grads.get(id(leaf), np.zeros_like(leaf.value))
    return float(out.value), result


def grad(objective, params):
    """Gradient of a scalar ``objective`` at ``params`` (see ``value_and_grad``)."""
    return value_and_grad(objective, params)[1]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, input first. Hidden layers use ReLU, the last is linear."""

    widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise InvalidInputError("An MLP needs an input width and at least one layer")
        if min(widths) < 1:
            raise InvalidInputError(f"MLP widths must be positive, got {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def param_names(self, prefix=""):
        names = []
        for i in range(self.n_layers):
            names += [f"{prefix}w{i}", f"{prefix}b{i}"]
        return names


def init_mlp_params(spec, rng, prefix="", params=None, last_scale=1.0):
    """
    He-initialized weights and zero biases for ``spec``.

    :param MlpSpec spec: layer widths
    :param numpy.random.Generator rng: randomness source
    :param str prefix: prepended to every parameter name
    :param ParamStore params: store to fill (a new one when None)
    :param float last_scale: multiplier on the output layer's weights
    :return ParamStore: the filled store
    """
    params = ParamStore() if params is None else params
    for i, (w_in, w_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        w = rng.standard_normal((w_in, w_out)) * np.sqrt(2.0 / w_in)
        if i == spec.n_layers - 1:
            w *= last_scale
        params[f"{prefix}w{i}"] = w
        params[f"{prefix}b{i}"] = np.zeros(w_out)
    return params


def mlp_forward(spec, params, x, prefix=""):
    """
    Evaluate the MLP on one input vector or a batch of row vectors.

    Works on plain arrays, or on tensors when ``params`` holds tensors (the
    training path).

    :param MlpSpec spec: layer widths
    :param Mapping params: weights ``{prefix}w{i}`` (in, out) and biases ``{prefix}b{i}``
    :param array-like | Tensor x: (in,) or (q, in) input
    :return numpy.ndarray | Tensor: (out,) or (q, out) output
    """
    in_width = x.shape[-1] if hasattr(x, "shape") else len(x)
    if in_width != spec.widths[0]:
        raise InvalidInputError(f"MLP expects input width {spec.widths[0]}, got {in_width}")
    taped = isinstance(x, Tensor) or any(
        isinstance(params[n], Tensor) for n in spec.param_names(prefix)
    )
    h = x if taped or isinstance(x, np.ndarray) else np.asarray(x, dtype=float)
    for i in range(spec.n_layers):
        w, b = params[f"{prefix}w{i}"], params[f"{prefix}b{i}"]
        if w.shape != (spec.widths[i], spec.widths[i + 1]) or b.shape != (spec.widths[i + 1],):
            raise InvalidInputError(f"Layer {prefix}{i} parameters do not match widths")
        if taped:
            h = add(matmul(h, w), b)
            if i < spec.n_layers - 1:
                h = relu(h)
        else:
            h = h @ w + b
            if i < spec.n_layers - 1:
                h = np.maximum(h, 0.0)
    return h


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self):
        return AdamState(
            m={k: x.copy() for k, x in self.m.items()},
            v={k: x.copy() for k, x in self.v.items()},
            step=self.step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state, params, grads, lr):
    """
    One bias-corrected Adam update. Inputs are left untouched.

    :param AdamState state: moments and step counter
    :param ParamStore params: current parameters
    :param ParamStore grads: gradient of the loss at ``params``
    :param float lr: learning rate
    :return (AdamState, ParamStore): updated state and parameters
    """
    if not params.same_layout(grads):
        raise InvalidInputError("Gradient store does not match the parameter layout")
    for k, v in params.items():
        if k not in state.m or state.m[k].shape != v.shape:
            raise InvalidInputError(f"Adam moments do not match parameter '{k}'")
    new_state = AdamState(
        step=state.step + 1, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    t = new_state.step
    b1, b2 = state.beta1, state.beta2
    new_params = ParamStore()
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_state.m[k], new_state.v[k] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_state, new_params
