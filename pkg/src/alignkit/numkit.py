"""Scalar reverse-mode differentiation, parameter vectors and seeded randomness.

Every model in the package is written against the small set of generic
functions below (``exp``, ``log``, ``tanh``, ``dot``, ...).  Called with plain
floats they evaluate numerically; called with :class:`Var` handles they record
onto a :class:`Tape`.  Both paths perform the same float operations in the same
order, so a taped forward pass reproduces the float forward pass bit-for-bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a taped operation produces inf or nan."""


class Tape:
    """Flat record of a scalar computation in topological order."""

    __slots__ = ("ops", "parents", "partials", "values")

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.values: list[float] = []

    def __len__(self) -> int:
        return len(self.values)

    def push(self, op: str, value: float, parents: Sequence[int], partials: Sequence[float]) -> Var:
        if not math.isfinite(value):
            raise NonFiniteError(f"node {len(self.values)} ({op}) produced non-finite value {value!r}")
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.partials.append(tuple(partials))
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def variable(self, value: float) -> Var:
        return self.push("input", float(value), (), ())

    def backward(self, output: Var) -> list[float]:
        """Adjoints of ``output`` with respect to every node on the tape."""
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        adjoint = [0.0] * (output.index + 1)
        adjoint[output.index] = 1.0
        parents, partials = self.parents, self.partials
        for i in range(output.index, -1, -1):
            a = adjoint[i]
            if a == 0.0:
                continue
            for p, d in zip(parents[i], partials[i]):
                adjoint[p] += a * d
        return adjoint


class Var:
    """Handle to one node of a tape; supports arithmetic with Vars and floats."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __repr__(self) -> str:
        return f"Var({self.value!r}, node={self.index})"

    def __float__(self) -> float:
        return self.value

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.push("add", self.value + other.value, (self.index, other.index), (1.0, 1.0))
        return self.tape.push("add", self.value + other, (self.index,), (1.0,))

    def __radd__(self, other):
        return self.tape.push("add", other + self.value, (self.index,), (1.0,))

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.push("add", self.value - other.value, (self.index, other.index), (1.0, -1.0))
        return self.tape.push("add", self.value - other, (self.index,), (1.0,))

    def __rsub__(self, other):
        return self.tape.push("add", other - self.value, (self.index,), (-1.0,))

    def __neg__(self):
        return self.tape.push("mul", -self.value, (self.index,), (-1.0,))

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return self.tape.push("mul", a * b, (self.index, other.index), (b, a))
        return self.tape.push("mul", self.value * other, (self.index,), (float(other),))

    def __rmul__(self, other):
        return self.tape.push("mul", other * self.value, (self.index,), (float(other),))

    def __truediv__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return self.tape.push("div", a / b, (self.index, other.index), (1.0 / b, -a / (b * b)))
        return self.tape.push("div", self.value / other, (self.index,), (1.0 / other,))

    def __rtruediv__(self, other):
        b = self.value
        return self.tape.push("div", other / b, (self.index,), (-other / (b * b),))


def value_of(x) -> float:
    return x.value if isinstance(x, Var) else x


def exp(x):
    if isinstance(x, Var):
        e = math.exp(x.value)
        return x.tape.push("exp", e, (x.index,), (e,))
    return math.exp(x)


def log(x):
    if isinstance(x, Var):
        v = x.value
        if v <= 0.0:
            raise NonFiniteError(f"log of non-positive value {v!r} at node {x.index}")
        return x.tape.push("log", math.log(v), (x.index,), (1.0 / v,))
    return math.log(x)


def tanh(x):
    if isinstance(x, Var):
        t = math.tanh(x.value)
        return x.tape.push("tanh", t, (x.index,), (1.0 - t * t,))
    return math.tanh(x)


def minimum(a, b):
    """min(a, b); on an exact tie the left argument is the active branch."""
    if value_of(a) <= value_of(b):
        return _select(a, "min")
    return _select(b, "min")


def maximum(a, b):
    """max(a, b); on an exact tie the left argument is the active branch."""
    if value_of(a) >= value_of(b):
        return _select(a, "max")
    return _select(b, "max")


def _select(x, op: str):
    if isinstance(x, Var):
        return x.tape.push(op, x.value, (x.index,), (1.0,))
    return x


def clip(x, lo: float, hi: float):
    return minimum(maximum(x, lo), hi)


def vsum(xs: Iterable):
    """Sum as one n-ary node.  Accumulates left to right like ``sum``."""
    total = 0.0
    parents: list[int] = []
    tape = None
    for x in xs:
        if isinstance(x, Var):
            tape = x.tape
            total += x.value
            parents.append(x.index)
        else:
            total += x
    if tape is None:
        return total
    return tape.push("sum", total, parents, (1.0,) * len(parents))


def dot(a: Sequence, b: Sequence):
    """Inner product as one n-ary node."""
    if len(a) != len(b):
        raise ValueError(f"dot of length {len(a)} and {len(b)}")
    total = 0.0
    parents: list[int] = []
    partials: list[float] = []
    tape = None
    for x, y in zip(a, b):
        if isinstance(x, Var):
            tape = x.tape
            xv = x.value
            if isinstance(y, Var):
                yv = y.value
                parents.append(y.index)
                partials.append(xv)
            else:
                yv = y
            parents.append(x.index)
            partials.append(yv)
        elif isinstance(y, Var):
            tape = y.tape
            xv, yv = x, y.value
            parents.append(y.index)
            partials.append(xv)
        else:
            xv, yv = x, y
        total += xv * yv
    if tape is None:
        return total
    return tape.push("dot", total, parents, partials)


def softplus(x):
    """log(1 + e^x) built from primitives, stable for large |x|."""
    return maximum(x, 0.0) + log(1.0 + exp(-maximum(x, -x)))


def log_softmax(logits: Sequence) -> list:
    if not logits:
        raise ValueError("log_softmax of an empty vector")
    m = max(value_of(v) for v in logits)
    lse = log(vsum([exp(v - m) for v in logits])) + m
    return [v - lse for v in logits]


def softmax(logits: Sequence[float]) -> list[float]:
    """Max-shifted softmax over plain floats."""
    if len(logits) == 0:
        raise ValueError("softmax of an empty vector")
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    s = sum(exps)
    return [e / s for e in exps]


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParamVector:
    """Flat list of parameters with named, disjoint segments covering it."""

    def __init__(self, layout: Sequence[Segment], values: Sequence) -> None:
        self.layout = tuple(layout)
        self._index = {s.name: s for s in self.layout}
        expected = 0
        for seg in self.layout:
            if seg.offset != expected:
                raise ValueError(f"segment {seg.name!r} at offset {seg.offset}, expected {expected}")
            expected += seg.size
        if expected != len(values):
            raise ValueError(f"layout covers {expected} values but {len(values)} given")
        self.values = list(values)

    @classmethod
    def zeros(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> ParamVector:
        layout, offset = [], 0
        for name, shape in shapes:
            seg = Segment(name, offset, tuple(shape))
            layout.append(seg)
            offset += seg.size
        return cls(layout, [0.0] * offset)

    def __len__(self) -> int:
        return len(self.values)

    def spec(self, name: str) -> Segment:
        return self._index[name]

    def segment(self, name: str) -> list:
        seg = self._index[name]
        return self.values[seg.offset : seg.offset + seg.size]

    def rows(self, name: str) -> list[list]:
        seg = self._index[name]
        if len(seg.shape) != 2:
            raise ValueError(f"segment {name!r} is not a matrix")
        n, m = seg.shape
        v, o = self.values, seg.offset
        return [v[o + r * m : o + (r + 1) * m] for r in range(n)]

    def set_segment(self, name: str, data: Iterable[float]) -> None:
        seg = self._index[name]
        flat = [float(x) for x in np.asarray(list(data), dtype=float).ravel()]
        if len(flat) != seg.size:
            raise ValueError(f"segment {name!r} needs {seg.size} values, got {len(flat)}")
        self.values[seg.offset : seg.offset + seg.size] = flat

    def with_values(self, values: Sequence) -> ParamVector:
        return ParamVector(self.layout, values)

    def copy(self) -> ParamVector:
        return ParamVector(self.layout, list(self.values))

    def array(self, name: str | None = None) -> np.ndarray:
        if name is None:
            return np.array([value_of(v) for v in self.values], dtype=float)
        seg = self._index[name]
        return np.array([value_of(v) for v in self.segment(name)], dtype=float).reshape(seg.shape)

    def step(self, gradient: Sequence[float], learning_rate: float) -> ParamVector:
        """Plain gradient descent; returns a new vector and leaves this one intact."""
        return ParamVector(self.layout, [v - learning_rate * g for v, g in zip(self.values, gradient)])


LossBuilder = Callable[[ParamVector], object]


def grad(loss_builder: LossBuilder, at: ParamVector) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss with respect to every parameter."""
    tape = Tape()
    leaves = [tape.variable(v) for v in at.values]
    out = loss_builder(at.with_values(leaves))
    if not isinstance(out, Var):
        return np.zeros(len(at))
    adjoint = tape.backward(out)
    return np.array([adjoint[leaf.index] if leaf.index < len(adjoint) else 0.0 for leaf in leaves])


def value_and_grad(loss_builder: LossBuilder, at: ParamVector) -> tuple[float, np.ndarray]:
    tape = Tape()
    leaves = [tape.variable(v) for v in at.values]
    out = loss_builder(at.with_values(leaves))
    if not isinstance(out, Var):
        return float(out), np.zeros(len(at))
    adjoint = tape.backward(out)
    return out.value, np.array([adjoint[leaf.index] if leaf.index < len(adjoint) else 0.0 for leaf in leaves])


def finite_diff(loss_builder: LossBuilder, at: ParamVector, step: float = 1e-6) -> np.ndarray:
    """Central differences (L(θ+h·e_i) − L(θ−h·e_i)) / 2h, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = [float(v) for v in at.values]
    out = np.empty(len(base))
    for i in range(len(base)):
        plus, minus = list(base), list(base)
        plus[i] += step
        minus[i] -= step
        hi = float(loss_builder(at.with_values(plus)))
        lo = float(loss_builder(at.with_values(minus)))
        out[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(a: Sequence[float], b: Sequence[float], floor: float = 1e-12) -> float:
    """Max-norm relative discrepancy between two gradient vectors."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class Rng:
    """Seeded PCG64 stream; child streams are derived by key, never by draw order."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=_path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *keys) -> Rng:
        return Rng(self.seed, self._path + tuple(_key_int(k) for k in keys))

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> list[int]:
        return [int(i) for i in self._gen.permutation(n)]

    def categorical(self, probs: Sequence[float]) -> int:
        u = self.random()
        acc = 0.0
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        return len(probs) - 1
