"""
Automatic differentiation for the latent dynamics

Forward mode uses tagged dual numbers over numpy arrays; nesting two tags gives
the second-order directional derivatives the slowness loss needs. Reverse mode
records primitives on a single-owner Tape. The components of a Dual may be tape
variables, so a forward pass over duals can itself be differentiated in reverse
(reverse-over-forward).

Every function here dispatches on its arguments: Duals of the highest tag are
peeled first, then tape variables, then plain numpy.
"""

import itertools
import logging
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ErrorType, LatentSimError

logger = logging.getLogger(__name__)

_tags = itertools.count(1)


def _new_tag() -> int:
    return next(_tags)


class _Arithmetic:
    """Operator overloads shared by Dual and Var."""

    __slots__ = ()
    # numpy must hand mixed expressions back to the reflected operators
    __array_ufunc__ = None

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Dual(_Arithmetic):
    """Value plus one tangent component, tagged by derivative level."""

    __slots__ = ("value", "deriv", "tag")

    def __init__(self, value, deriv, tag: Optional[int] = None):
        self.value = value
        self.deriv = deriv
        self.tag = _new_tag() if tag is None else tag

    @property
    def shape(self) -> Tuple[int, ...]:
        return _shape(self.value)

    def __repr__(self) -> str:
        return f"Dual(tag={self.tag}, value={self.value!r}, deriv={self.deriv!r})"


class Var(_Arithmetic):
    """Handle on one node of a Tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"


class Tape:
    """Ordered record of primitives with their vector-Jacobian products.

    A tape belongs to one thread. Workers that train in parallel build their own.
    """

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._edges: List[Tuple[Tuple[int, Callable], ...]] = []
        self._names: List[str] = []

    def __len__(self) -> int:
        return len(self._values)

    def variable(self, value) -> Var:
        """Register an input array."""
        return self._push(np.array(value, dtype=np.float64), (), "input")

    def _push(self, value, edges, name: str) -> Var:
        index = len(self._values)
        value = np.asarray(value, dtype=np.float64)
        self._values.append(value)
        self._edges.append(edges)
        self._names.append(name)
        return Var(self, index, value)

    def gradient(self, output: Var, wrt: Sequence[Var]) -> List[np.ndarray]:
        """Replay adjoints from a scalar output back to the requested inputs."""
        if output.tape is not self:
            raise ValueError("Output was recorded on a different tape")
        if output.value.size != 1:
            raise ValueError(f"Gradient needs a scalar output, got shape {output.shape}")

        adjoints: List[Optional[np.ndarray]] = [None] * (output.index + 1)
        adjoints[output.index] = np.ones_like(output.value)

        for node in range(output.index, -1, -1):
            g = adjoints[node]
            if g is None:
                continue
            for parent, vjp in self._edges[node]:
                contribution = _unbroadcast(vjp(g), self._values[parent].shape)
                if not np.all(np.isfinite(contribution)):
                    raise LatentSimError(
                        message="Non-finite adjoint during reverse pass",
                        error_type=ErrorType.NON_FINITE,
                        context={'primitive': self._names[node], 'node': node},
                    )
                current = adjoints[parent]
                adjoints[parent] = contribution if current is None else current + contribution

        grads = []
        for var in wrt:
            g = adjoints[var.index] if var.index <= output.index else None
            grads.append(np.zeros_like(var.value) if g is None else np.asarray(g))
        return grads


# ---------------------------------------------------------------------------
# dispatch helpers
# ---------------------------------------------------------------------------

def _shape(x) -> Tuple[int, ...]:
    if isinstance(x, (Dual, Var)):
        return x.shape
    return np.shape(x)


def _top(*xs) -> int:
    tag = 0
    for x in xs:
        if isinstance(x, Dual) and x.tag > tag:
            tag = x.tag
    return tag


def _split(x, tag: int):
    if isinstance(x, Dual) and x.tag == tag:
        return x.value, x.deriv
    return x, None


def _pack(value, deriv, tag: int):
    if deriv is None:
        return value
    return Dual(value, deriv, tag)


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("Cannot mix variables from different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _edges(*pairs) -> Tuple[Tuple[int, Callable], ...]:
    return tuple((x.index, vjp) for x, vjp in pairs if isinstance(x, Var))


def _unbroadcast(g, shape: Tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.broadcast_to(g, shape)


def _dsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _scale(d, c):
    return None if d is None else mul(d, c)


def _match(d, shape):
    """Broadcast a tangent up to the shape of its value."""
    if d is None or _shape(d) == tuple(shape):
        return d
    return add(d, np.zeros(shape))


def shape_of(x) -> Tuple[int, ...]:
    """Shape of a numpy array, dual or tape variable."""
    return _shape(x)


def primal(x) -> np.ndarray:
    """Strip every tangent level and tape handle."""
    while isinstance(x, Dual):
        x = x.value
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def tangent(y, tag: int):
    """Tangent of y at the given level, zeros when y does not depend on it."""
    if isinstance(y, Dual) and y.tag == tag:
        return _match(y.deriv, y.shape)
    return np.zeros(_shape(y))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    tag = _top(a, b)
    if tag:
        av, ad = _split(a, tag)
        bv, bd = _split(b, tag)
        value = add(av, bv)
        return _pack(value, _match(_dsum(ad, bd), _shape(value)), tag)
    tape = _tape_of(a, b)
    if tape is not None:
        return tape._push(_val(a) + _val(b), _edges((a, lambda g: g), (b, lambda g: g)), "add")
    return np.add(a, b)


def sub(a, b):
    tag = _top(a, b)
    if tag:
        av, ad = _split(a, tag)
        bv, bd = _split(b, tag)
        value = sub(av, bv)
        deriv = _dsum(ad, None if bd is None else neg(bd))
        return _pack(value, _match(deriv, _shape(value)), tag)
    tape = _tape_of(a, b)
    if tape is not None:
        return tape._push(_val(a) - _val(b), _edges((a, lambda g: g), (b, lambda g: -g)), "sub")
    return np.subtract(a, b)


def neg(x):
    tag = _top(x)
    if tag:
        return Dual(neg(x.value), neg(x.deriv), tag)
    if isinstance(x, Var):
        return x.tape._push(-x.value, ((x.index, lambda g: -g),), "neg")
    return np.negative(x)


def mul(a, b):
    tag = _top(a, b)
    if tag:
        av, ad = _split(a, tag)
        bv, bd = _split(b, tag)
        value = mul(av, bv)
        return _pack(value, _match(_dsum(_scale(ad, bv), _scale(bd, av)), _shape(value)), tag)
    tape = _tape_of(a, b)
    if tape is not None:
        a_val, b_val = _val(a), _val(b)
        return tape._push(
            a_val * b_val,
            _edges((a, lambda g: g * b_val), (b, lambda g: g * a_val)),
            "mul",
        )
    return np.multiply(a, b)


def div(a, b):
    tag = _top(a, b)
    if tag:
        av, ad = _split(a, tag)
        bv, bd = _split(b, tag)
        value = div(av, bv)
        numerator = ad
        if bd is not None:
            numerator = _dsum(numerator, neg(mul(value, bd)))
        deriv = None if numerator is None else div(numerator, bv)
        return _pack(value, _match(deriv, _shape(value)), tag)
    tape = _tape_of(a, b)
    if tape is not None:
        a_val, b_val = _val(a), _val(b)
        out = a_val / b_val
        return tape._push(
            out,
            _edges((a, lambda g: g / b_val), (b, lambda g: -g * out / b_val)),
            "div",
        )
    return np.divide(a, b)


def power(x, exponent: float):
    """x ** exponent for a constant exponent."""
    exponent = float(exponent)
    tag = _top(x)
    if tag:
        value = power(x.value, exponent)
        return Dual(value, mul(x.deriv, mul(exponent, power(x.value, exponent - 1.0))), tag)
    if isinstance(x, Var):
        x_val = x.value
        return x.tape._push(
            np.power(x_val, exponent),
            ((x.index, lambda g: g * exponent * np.power(x_val, exponent - 1.0)),),
            "power",
        )
    return np.power(x, exponent)


def exp(x):
    tag = _top(x)
    if tag:
        value = exp(x.value)
        return Dual(value, mul(x.deriv, value), tag)
    if isinstance(x, Var):
        out = np.exp(x.value)
        return x.tape._push(out, ((x.index, lambda g: g * out),), "exp")
    return np.exp(x)


def log(x):
    tag = _top(x)
    if tag:
        return Dual(log(x.value), div(x.deriv, x.value), tag)
    if isinstance(x, Var):
        x_val = x.value
        return x.tape._push(np.log(x_val), ((x.index, lambda g: g / x_val),), "log")
    return np.log(x)


def tanh(x):
    tag = _top(x)
    if tag:
        value = tanh(x.value)
        return Dual(value, mul(x.deriv, sub(1.0, mul(value, value))), tag)
    if isinstance(x, Var):
        out = np.tanh(x.value)
        return x.tape._push(out, ((x.index, lambda g: g * (1.0 - out * out)),), "tanh")
    return np.tanh(x)


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid(x):
    tag = _top(x)
    if tag:
        s = sigmoid(x.value)
        return Dual(s, mul(x.deriv, mul(s, sub(1.0, s))), tag)
    if isinstance(x, Var):
        s = _np_sigmoid(x.value)
        return x.tape._push(s, ((x.index, lambda g: g * s * (1.0 - s)),), "sigmoid")
    return _np_sigmoid(x)


def silu(x):
    """x * sigmoid(x)."""
    tag = _top(x)
    if tag:
        s = sigmoid(x.value)
        value = mul(x.value, s)
        slope = mul(s, add(1.0, mul(x.value, sub(1.0, s))))
        return Dual(value, mul(x.deriv, slope), tag)
    if isinstance(x, Var):
        x_val = x.value
        s = _np_sigmoid(x_val)
        return x.tape._push(
            x_val * s,
            ((x.index, lambda g: g * s * (1.0 + x_val * (1.0 - s))),),
            "silu",
        )
    return np.asarray(x) * _np_sigmoid(x)


def sin(x):
    tag = _top(x)
    if tag:
        return Dual(sin(x.value), mul(x.deriv, cos(x.value)), tag)
    if isinstance(x, Var):
        x_val = x.value
        return x.tape._push(np.sin(x_val), ((x.index, lambda g: g * np.cos(x_val)),), "sin")
    return np.sin(x)


def cos(x):
    tag = _top(x)
    if tag:
        return Dual(cos(x.value), neg(mul(x.deriv, sin(x.value))), tag)
    if isinstance(x, Var):
        x_val = x.value
        return x.tape._push(np.cos(x_val), ((x.index, lambda g: -g * np.sin(x_val)),), "cos")
    return np.cos(x)


def sum_(x, axis=None, keepdims: bool = False):
    tag = _top(x)
    if tag:
        return Dual(sum_(x.value, axis, keepdims), sum_(x.deriv, axis, keepdims), tag)
    if isinstance(x, Var):
        shape = x.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return x.tape._push(np.sum(x.value, axis=axis, keepdims=keepdims), ((x.index, vjp),), "sum")
    return np.sum(x, axis=axis, keepdims=keepdims)


def dot(a, b):
    """Inner product over the last axis."""
    return sum_(mul(a, b), axis=-1)


def _matmul_vjps(a_val: np.ndarray, b_val: np.ndarray):
    if a_val.ndim > 2 or b_val.ndim > 2:
        raise ValueError("matmul on tape variables supports at most 2-D operands")
    if a_val.ndim == 2 and b_val.ndim == 2:
        return (lambda g: g @ b_val.T), (lambda g: a_val.T @ g)
    if a_val.ndim == 1 and b_val.ndim == 2:
        return (lambda g: b_val @ g), (lambda g: np.outer(a_val, g))
    if a_val.ndim == 2 and b_val.ndim == 1:
        return (lambda g: np.outer(g, b_val)), (lambda g: a_val.T @ g)
    return (lambda g: g * b_val), (lambda g: g * a_val)


def matmul(a, b):
    tag = _top(a, b)
    if tag:
        av, ad = _split(a, tag)
        bv, bd = _split(b, tag)
        deriv = None
        if ad is not None:
            deriv = matmul(ad, bv)
        if bd is not None:
            deriv = _dsum(deriv, matmul(av, bd))
        return _pack(matmul(av, bv), deriv, tag)
    tape = _tape_of(a, b)
    if tape is not None:
        a_val, b_val = _val(a), _val(b)
        vjp_a, vjp_b = _matmul_vjps(a_val, b_val)
        return tape._push(a_val @ b_val, _edges((a, vjp_a), (b, vjp_b)), "matmul")
    return np.matmul(a, b)


def _np_solve(matrix, rhs):
    try:
        return np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as exc:
        raise LatentSimError(
            message=f"Linear solve failed: {exc}",
            error_type=ErrorType.LINEAR_SOLVE,
            context={'shape': tuple(np.shape(matrix))},
        ) from exc


def solve(matrix, rhs):
    """X with matrix @ X = rhs for a square 2-D matrix."""
    tag = _top(matrix, rhs)
    if tag:
        mv, md = _split(matrix, tag)
        rv, rd = _split(rhs, tag)
        x = solve(mv, rv)
        residual = rd
        if md is not None:
            residual = _dsum(residual, neg(matmul(md, x)))
        return _pack(x, None if residual is None else solve(mv, residual), tag)
    tape = _tape_of(matrix, rhs)
    if tape is not None:
        m_val, r_val = _val(matrix), _val(rhs)
        x_val = _np_solve(m_val, r_val)

        def vjp_rhs(g):
            return _np_solve(m_val.T, g)

        def vjp_matrix(g):
            g_rhs = _np_solve(m_val.T, g)
            if x_val.ndim == 1:
                return -np.outer(g_rhs, x_val)
            return -g_rhs @ x_val.T

        return tape._push(x_val, _edges((matrix, vjp_matrix), (rhs, vjp_rhs)), "solve")
    return _np_solve(matrix, rhs)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, index):
    tag = _top(x)
    if tag:
        return Dual(getitem(x.value, index), getitem(x.deriv, index), tag)
    if isinstance(x, Var):
        shape = x.shape
        advanced = _is_advanced(index)

        def vjp(g):
            out = np.zeros(shape)
            if advanced:
                np.add.at(out, index, g)
            else:
                out[index] = g
            return out

        return x.tape._push(x.value[index], ((x.index, vjp),), "getitem")
    return np.asarray(x)[index]


def reshape(x, shape):
    tag = _top(x)
    if tag:
        return Dual(reshape(x.value, shape), reshape(x.deriv, shape), tag)
    if isinstance(x, Var):
        original = x.shape
        return x.tape._push(x.value.reshape(shape), ((x.index, lambda g: g.reshape(original)),), "reshape")
    return np.reshape(x, shape)


def transpose(x, axes=None):
    tag = _top(x)
    if tag:
        return Dual(transpose(x.value, axes), transpose(x.deriv, axes), tag)
    if isinstance(x, Var):
        inverse = None if axes is None else np.argsort(axes)
        return x.tape._push(
            np.transpose(x.value, axes),
            ((x.index, lambda g: np.transpose(g, inverse)),),
            "transpose",
        )
    return np.transpose(x, axes)


def concat(xs: Sequence[Any], axis: int = -1):
    tag = _top(*xs)
    if tag:
        parts = [_split(x, tag) for x in xs]
        value = concat([v for v, _ in parts], axis)
        if all(d is None for _, d in parts):
            return value
        derivs = [np.zeros(_shape(v)) if d is None else d for v, d in parts]
        return Dual(value, concat(derivs, axis), tag)
    tape = _tape_of(*xs)
    if tape is not None:
        values = [_val(x) for x in xs]
        out = np.concatenate(values, axis=axis)
        ax = axis % out.ndim
        bounds = np.cumsum([0] + [v.shape[ax] for v in values])
        pairs = []
        for i, x in enumerate(xs):
            lo, hi = int(bounds[i]), int(bounds[i + 1])
            pairs.append((x, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=ax)))
        return tape._push(out, _edges(*pairs), "concat")
    return np.concatenate([np.asarray(x) for x in xs], axis=axis)


def stack(xs: Sequence[Any], axis: int = -1):
    tag = _top(*xs)
    if tag:
        parts = [_split(x, tag) for x in xs]
        value = stack([v for v, _ in parts], axis)
        if all(d is None for _, d in parts):
            return value
        derivs = [np.zeros(_shape(v)) if d is None else _match(d, _shape(v)) for v, d in parts]
        return Dual(value, stack(derivs, axis), tag)
    tape = _tape_of(*xs)
    if tape is not None:
        values = [_val(x) for x in xs]
        out = np.stack(values, axis=axis)
        ax = axis % out.ndim
        pairs = [(x, lambda g, i=i: np.take(g, i, axis=ax)) for i, x in enumerate(xs)]
        return tape._push(out, _edges(*pairs), "stack")
    return np.stack([np.asarray(x) for x in xs], axis=axis)


# ---------------------------------------------------------------------------
# derivative drivers
# ---------------------------------------------------------------------------

def value_and_jvp(f: Callable, x, v):
    """f(x) and J_f(x) v from one pass over dual inputs."""
    if _shape(v) != _shape(x):
        raise ValueError(f"Direction shape {_shape(v)} does not match point shape {_shape(x)}")
    tag = _new_tag()
    y = f(Dual(x, v, tag))
    value, _ = _split(y, tag)
    out = tangent(y, tag)
    if isinstance(out, np.ndarray) and not np.all(np.isfinite(out)):
        logger.warning("Non-finite Jacobian-vector product at the evaluation point")
    return value, out


def jvp(f: Callable, x, v):
    """J_f(x) v without forming J."""
    return value_and_jvp(f, x, v)[1]


class Dual2:
    """Two nested tangent levels seeded at one point.

    The input is a Dual at the inner level whose value and tangent are Duals at
    the outer level: (value, d2) and (d1, d1d2). After evaluating an expression on
    ``variable``, ``parts`` recovers value, d1, d2 and the mixed second
    derivative d1d2.
    """

    def __init__(self, value, d1, d2, d1d2=None):
        self.outer = _new_tag()
        self.inner = _new_tag()
        inner_deriv = d1 if d1d2 is None else Dual(d1, d1d2, self.outer)
        self.variable = Dual(Dual(value, d2, self.outer), inner_deriv, self.inner)

    def parts(self, y):
        inner_value, inner_deriv = _split(y, self.inner)
        value, d2 = _split(inner_value, self.outer)
        if inner_deriv is None:
            d1, d1d2 = np.zeros(_shape(value)), None
        else:
            d1, d1d2 = _split(inner_deriv, self.outer)
        shape = _shape(value)
        d2 = np.zeros(shape) if d2 is None else _match(d2, shape)
        d1d2 = np.zeros(shape) if d1d2 is None else _match(d1d2, shape)
        return value, _match(d1, shape), d2, d1d2


def second_directional(f: Callable, x, v, w):
    """Directional derivative along w of the directional derivative along v."""
    seed = Dual2(x, v, w)
    return seed.parts(f(seed.variable))[3]


def value_and_grad(loss: Callable, params) -> Tuple[float, np.ndarray]:
    """Loss value and exact reverse-mode gradient with respect to a flat array."""
    tape = Tape()
    p = tape.variable(params)
    y = loss(p)
    if not isinstance(y, Var):
        return float(np.asarray(y)), np.zeros_like(p.value)
    (g,) = tape.gradient(y, [p])
    return float(y.value), g


def grad(loss: Callable, params) -> np.ndarray:
    return value_and_grad(loss, params)[1]
