"""Tensors and the recording tape.

Operations execute eagerly.  While a :class:`Tape` is active every primitive
that touches a ``requires_grad`` tensor appends a :class:`Record` holding the
operands, the saved forward values and two closures: ``vjp`` (cotangent of the
output -> cotangents of the operands) and ``jvp`` (tangents of the operands ->
tangent of the output).  Outside a tape nothing is recorded, which is the fast
path used for inference.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite value produced")


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor: arrays from primitives are already checked
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar, see ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    jvp: Callable[[Sequence[np.ndarray | None]], np.ndarray]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered list of operation records; use as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def gradient(self, output: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
        return backward(self, output, wrt)


def _stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_record:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        stack = _stack()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        stack = _stack()
        stack.extend(self._saved)


def emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp, jvp, **saved) -> Tensor:
    """Wrap a primitive result and record it if any operand needs gradients."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(kind)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.records.append(Record(kind, tuple(inputs), result, vjp, jvp, saved))
    return result


class Gradients(dict):
    """name -> gradient mapping; ``detached`` lists names that got no gradient path."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.detached: set[str] = set()


def _named(tape: Tape, wrt) -> dict[str, Tensor]:
    if wrt is None:
        found: dict[str, Tensor] = {}
        for rec in tape.records:
            for t in rec.inputs:
                if t.name is not None and t.requires_grad:
                    found.setdefault(t.name, t)
        return found
    if isinstance(wrt, Mapping):
        return dict(wrt)
    out = {}
    for i, t in enumerate(wrt):
        out[t.name if t.name is not None else str(i)] = t
    return out


def backward(tape: Tape, output: Tensor, wrt=None, seed: np.ndarray | None = None) -> Gradients:
    """Reverse sweep over ``tape`` from ``output``.

    Returns gradients for every requested leaf (default: all named leaves with
    ``requires_grad``).  Leaves that the output does not depend on receive a
    zero tensor and are listed in ``Gradients.detached``.
    """
    if seed is None:
        if output.size != 1:
            raise ShapeError("backward", output.shape, detail="output must be scalar")
        seed = np.ones_like(output.data)
    targets = _named(tape, wrt)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=DTYPE).reshape(output.shape)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = Gradients()
    for name, t in targets.items():
        g = grads.get(id(t))
        if g is None or not t.requires_grad:
            result.detached.add(name)
            g = np.zeros_like(t.data)
        result[name] = Tensor._wrap(g, False)
    return result


def jvp(tape: Tape, tangents: Mapping[int, np.ndarray] | Sequence[tuple[Tensor, np.ndarray]], output: Tensor) -> np.ndarray:
    """Forward tangent propagation over a finished tape.

    ``tangents`` pairs leaf tensors with tangent arrays.  Returns the tangent
    of ``output`` (zeros if it does not depend on the seeded leaves).
    """
    if isinstance(tangents, Mapping):
        tan = dict(tangents)
    else:
        tan = {id(t): np.asarray(v, dtype=DTYPE).reshape(t.shape) for t, v in tangents}
    for rec in tape.records:
        ins = [tan.get(id(t)) for t in rec.inputs]
        if all(v is None for v in ins):
            continue
        tan[id(rec.output)] = rec.jvp(ins)
    out = tan.get(id(output))
    return np.zeros_like(output.data) if out is None else out
