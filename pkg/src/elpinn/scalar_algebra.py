"""Scalar automatic differentiation.

A reverse-mode gradient tape over scalars (:class:`Tape`, :class:`TapeVar`)
and a forward-mode time tangent (:class:`DualNode`) whose components may
themselves be tape variables.  The combination lets a loss contain
``d/dt`` of a network output while staying differentiable with respect to
the network parameters.

The free functions :func:`exp`, :func:`ln`, :func:`tanh`, :func:`cosh`,
:func:`sqrt` and :func:`pow_int` dispatch on the argument type, so problem
callbacks written with them evaluate on floats, numpy arrays, JAX arrays,
tape variables and dual nodes alike.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "DomainError",
    "Tape",
    "TapeVar",
    "DualNode",
    "var",
    "backward",
    "lift",
    "exp",
    "ln",
    "tanh",
    "cosh",
    "sqrt",
    "pow_int",
    "tree_sum",
    "value_of",
    "time_derivative",
]


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain on the tape."""


# op kinds; the replay table below must cover every kind recorded
LEAF, ADD, SUB, MUL, DIV, NEG, POW, EXP, LN, TANH, COSH, SQRT = range(12)
KIND_NAMES = ("leaf", "add", "sub", "mul", "div", "neg", "pow_int",
              "exp", "ln", "tanh", "cosh", "sqrt")

# test hook: scales the recorded tanh partial; 1.0 in normal operation
_TANH_PARTIAL_SCALE = 1.0


class Tape:
    """Append-only record of scalar operations.

    Every node stores its op kind, up to two parent indices, the local
    partial derivatives with respect to those parents, and its value.
    Parents always precede children, so a single reverse sweep suffices.
    """

    __slots__ = ("kinds", "parents", "partials", "values", "params")

    def __init__(self):
        self.kinds: list[int] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.values: list[float] = []
        # extra op data (constants folded into an op, integer exponents)
        self.params: list[float | None] = []

    def __len__(self):
        return len(self.values)

    def var(self, value: float) -> "TapeVar":
        return self._push(LEAF, float(value), (), ())

    def _push(self, kind, value, parents, partials, param=None) -> "TapeVar":
        idx = len(self.values)
        self.kinds.append(kind)
        self.parents.append(parents)
        self.partials.append(partials)
        self.values.append(value)
        self.params.append(param)
        return TapeVar(self, idx, value)

    def backward(self, root: "TapeVar") -> np.ndarray:
        """Adjoints of ``root`` with respect to every node, indexed by node."""
        if not isinstance(root, TapeVar) or root.tape is not self:
            raise ValueError("root does not belong to this tape")
        adj = np.zeros(len(self.values))
        adj[root.index] = 1.0
        parents, partials = self.parents, self.partials
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            for j, d in zip(parents[i], partials[i]):
                adj[j] += g * d
        return adj

    def gradient(self, root: "TapeVar", wrt: Iterable["TapeVar"]) -> np.ndarray:
        adj = self.backward(root)
        return np.array([adj[v.index] for v in wrt])

    def replay(self, leaf_values: dict[int, float] | None = None) -> list[float]:
        """Re-evaluate every node from the recorded ops.

        ``leaf_values`` overrides leaf values by node index; with no
        overrides the result equals the recorded values bit-for-bit.
        """
        leaf_values = leaf_values or {}
        out: list[float] = []
        for i, kind in enumerate(self.kinds):
            ps = [out[j] for j in self.parents[i]]
            c = self.params[i]
            if kind == LEAF:
                v = leaf_values.get(i, self.values[i])
            else:
                v = _REPLAY[kind](ps, c)
            out.append(v)
        return out


def _bin(ps, c, op):
    a = ps[0]
    b = ps[1] if len(ps) > 1 else c
    return op(a, b)


def _rsub(ps, c):
    # single-parent sub records either x - c (c stored) or c - x (-c stored path)
    return ps[0] - ps[1] if len(ps) > 1 else c[0] * ps[0] + c[1]


def _div(ps, c):
    if len(ps) > 1:
        return ps[0] / ps[1]
    num, den = c
    return (num / ps[0]) if num is not None else (ps[0] / den)


_REPLAY = {
    ADD: lambda ps, c: ps[0] + ps[1] if len(ps) > 1 else ps[0] + c,
    SUB: _rsub,
    MUL: lambda ps, c: ps[0] * ps[1] if len(ps) > 1 else ps[0] * c,
    DIV: _div,
    NEG: lambda ps, c: -ps[0],
    POW: lambda ps, c: ps[0] ** int(c),
    EXP: lambda ps, c: math.exp(ps[0]),
    LN: lambda ps, c: math.log(ps[0]),
    TANH: lambda ps, c: math.tanh(ps[0]),
    COSH: lambda ps, c: math.cosh(ps[0]),
    SQRT: lambda ps, c: math.sqrt(ps[0]),
}


Real = Union[int, float]


class TapeVar:
    """A scalar value living on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"TapeVar({self.value!r}, index={self.index})"

    def __float__(self):
        return float(self.value)

    def _check(self, other: "TapeVar"):
        if other.tape is not self.tape:
            raise ValueError("operands live on different tapes")

    def __add__(self, other):
        if isinstance(other, TapeVar):
            self._check(other)
            return self.tape._push(ADD, self.value + other.value,
                                   (self.index, other.index), (1.0, 1.0))
        if isinstance(other, DualNode):
            return NotImplemented
        c = float(other)
        return self.tape._push(ADD, self.value + c, (self.index,), (1.0,), c)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, TapeVar):
            self._check(other)
            return self.tape._push(SUB, self.value - other.value,
                                   (self.index, other.index), (1.0, -1.0))
        if isinstance(other, DualNode):
            return NotImplemented
        c = float(other)
        return self.tape._push(SUB, self.value - c, (self.index,), (1.0,), (1.0, -c))

    def __rsub__(self, other):
        c = float(other)
        return self.tape._push(SUB, c - self.value, (self.index,), (-1.0,), (-1.0, c))

    def __mul__(self, other):
        if isinstance(other, TapeVar):
            self._check(other)
            return self.tape._push(MUL, self.value * other.value,
                                   (self.index, other.index), (other.value, self.value))
        if isinstance(other, DualNode):
            return NotImplemented
        c = float(other)
        return self.tape._push(MUL, self.value * c, (self.index,), (c,), c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TapeVar):
            self._check(other)
            if other.value == 0.0:
                raise DomainError("division by zero on tape")
            q = self.value / other.value
            return self.tape._push(DIV, q, (self.index, other.index),
                                   (1.0 / other.value, -q / other.value))
        if isinstance(other, DualNode):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            raise DomainError("division by zero on tape")
        return self.tape._push(DIV, self.value / c, (self.index,), (1.0 / c,), (None, c))

    def __rtruediv__(self, other):
        c = float(other)
        if self.value == 0.0:
            raise DomainError("division by zero on tape")
        q = c / self.value
        return self.tape._push(DIV, q, (self.index,), (-q / self.value,), (c, None))

    def __neg__(self):
        return self.tape._push(NEG, -self.value, (self.index,), (-1.0,))

    def __pos__(self):
        return self

    def __pow__(self, n):
        return self.pow_int(n)

    def pow_int(self, n: int) -> "TapeVar":
        if int(n) != n:
            raise TypeError("pow_int requires an integer exponent")
        n = int(n)
        if n < 0 and self.value == 0.0:
            raise DomainError("negative power of zero")
        return self.tape._push(POW, self.value ** n, (self.index,),
                               (n * self.value ** (n - 1) if n != 0 else 0.0,), n)

    def exp(self):
        e = math.exp(self.value)
        return self.tape._push(EXP, e, (self.index,), (e,))

    def ln(self):
        if self.value <= 0.0:
            raise DomainError(f"ln of non-positive value {self.value}")
        return self.tape._push(LN, math.log(self.value), (self.index,), (1.0 / self.value,))

    def tanh(self):
        y = math.tanh(self.value)
        return self.tape._push(TANH, y, (self.index,),
                               ((1.0 - y * y) * _TANH_PARTIAL_SCALE,))

    def cosh(self):
        return self.tape._push(COSH, math.cosh(self.value), (self.index,),
                               (math.sinh(self.value),))

    def sqrt(self):
        if self.value <= 0.0:
            raise DomainError(f"sqrt of non-positive value {self.value} on tape")
        r = math.sqrt(self.value)
        return self.tape._push(SQRT, r, (self.index,), (0.5 / r,))


def var(tape: Tape, value: float) -> TapeVar:
    return tape.var(value)


def backward(tape: Tape, root: TapeVar) -> np.ndarray:
    return tape.backward(root)


class DualNode:
    """Value paired with its time derivative.

    ``primal`` and ``tangent`` may be floats, arrays or :class:`TapeVar`
    instances; arithmetic on them goes through the dispatching primitives,
    so a tangent built from tape variables stays differentiable with
    respect to whatever leaves it depends on.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=0.0):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"DualNode({self.primal!r}, {self.tangent!r})"

    @staticmethod
    def _parts(other):
        if isinstance(other, DualNode):
            return other.primal, other.tangent
        return other, 0.0

    def __add__(self, other):
        p, t = self._parts(other)
        return DualNode(self.primal + p, self.tangent + t)

    __radd__ = __add__

    def __sub__(self, other):
        p, t = self._parts(other)
        return DualNode(self.primal - p, self.tangent - t)

    def __rsub__(self, other):
        p, t = self._parts(other)
        return DualNode(p - self.primal, t - self.tangent)

    def __mul__(self, other):
        if not isinstance(other, DualNode):
            return DualNode(self.primal * other, self.tangent * other)
        return DualNode(self.primal * other.primal,
                        self.tangent * other.primal + self.primal * other.tangent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, DualNode):
            if _is_zero(other):
                raise DomainError("division by zero")
            return DualNode(self.primal / other, self.tangent / other)
        if _is_zero(other.primal):
            raise DomainError("division by zero")
        q = self.primal / other.primal
        return DualNode(q, (self.tangent - q * other.tangent) / other.primal)

    def __rtruediv__(self, other):
        if _is_zero(self.primal):
            raise DomainError("division by zero")
        q = other / self.primal
        return DualNode(q, -q * self.tangent / self.primal)

    def __neg__(self):
        return DualNode(-self.primal, -self.tangent)

    def __pos__(self):
        return self

    def __pow__(self, n):
        return self.pow_int(n)

    def pow_int(self, n: int):
        if int(n) != n:
            raise TypeError("pow_int requires an integer exponent")
        n = int(n)
        if n == 0:
            return DualNode(1.0, 0.0)
        return DualNode(pow_int(self.primal, n),
                        n * pow_int(self.primal, n - 1) * self.tangent)

    def exp(self):
        e = exp(self.primal)
        return DualNode(e, e * self.tangent)

    def ln(self):
        return DualNode(ln(self.primal), self.tangent / self.primal)

    def tanh(self):
        y = tanh(self.primal)
        return DualNode(y, (1.0 - y * y) * self.tangent)

    def cosh(self):
        # sinh(x) = (e^x - e^-x) / 2 keeps the primitive set closed
        e = exp(self.primal)
        return DualNode(cosh(self.primal), 0.5 * (e - 1.0 / e) * self.tangent)

    def sqrt(self):
        r = sqrt(self.primal)
        return DualNode(r, 0.5 * self.tangent / r)


def _is_zero(x) -> bool:
    if isinstance(x, TapeVar):
        return x.value == 0.0
    if isinstance(x, (int, float)):
        return x == 0.0
    return False


def lift(tape: Tape | None, value: float, tangent: float = 0.0) -> DualNode:
    """Dual node with a new tape leaf as primal (a plain float if no tape)."""
    if tape is None:
        return DualNode(float(value), float(tangent))
    return DualNode(tape.var(value), tangent)


def _backend(x):
    if isinstance(x, (np.ndarray, np.generic)):
        return np
    from ._jax import jnp

    return jnp


def _unary(name, mathfn):
    def fn(x):
        if isinstance(x, (TapeVar, DualNode)):
            return getattr(x, name)()
        if isinstance(x, (int, float)):
            return mathfn(x)
        return getattr(_backend(x), _NP_NAMES.get(name, name))(x)

    fn.__name__ = name
    fn.__doc__ = f"{name} on floats, arrays, TapeVar and DualNode."
    return fn


_NP_NAMES = {"ln": "log"}


def _ln_float(x):
    if x <= 0.0:
        raise DomainError(f"ln of non-positive value {x}")
    return math.log(x)


def _sqrt_float(x):
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x}")
    return math.sqrt(x)


exp = _unary("exp", math.exp)
ln = _unary("ln", _ln_float)
tanh = _unary("tanh", math.tanh)
cosh = _unary("cosh", math.cosh)
sqrt = _unary("sqrt", _sqrt_float)


def pow_int(x, n: int):
    if isinstance(x, (TapeVar, DualNode)):
        return x.pow_int(n)
    return x ** int(n)


def tree_sum(terms: Sequence):
    """Sum as a balanced binary tree (keeps tape fan-in at two)."""
    terms = list(terms)
    if not terms:
        return 0.0
    while len(terms) > 1:
        nxt = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def value_of(x):
    """Plain numeric value of a float, TapeVar or DualNode primal."""
    if isinstance(x, DualNode):
        x = x.primal
    if isinstance(x, TapeVar):
        return x.value
    return x


def time_derivative(fn, t: float):
    """Value and d/dt of a scalar closure written over the primitives."""
    out = fn(DualNode(float(t), 1.0))
    if isinstance(out, DualNode):
        return value_of(out.primal), value_of(out.tangent)
    return value_of(out), 0.0
