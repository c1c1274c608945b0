from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import ops
from .tensor import DTYPE, NonFiniteError, ShapeError, Tape, Tensor, backward

EPS_NORM = 1e-12


class DegenerateEmbedding(ValueError):
    pass


def evaluate(fn: Callable[..., Tensor], inputs: Mapping[str, object]) -> tuple[Tensor, Tape]:
    """Run ``fn(**inputs)`` on a fresh tape with every input as a named leaf."""
    leaves = {}
    for name, value in inputs.items():
        data = value.data if isinstance(value, Tensor) else value
        leaves[name] = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
    with Tape() as tape:
        out = fn(**leaves)
    return out, tape


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors (scalar result)."""
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = ops.l2norm(a)
    nb = ops.l2norm(b)
    if na.item() <= EPS_NORM or nb.item() <= EPS_NORM:
        raise DegenerateEmbedding("cosine_similarity: zero-norm argument")
    return ops.sum(ops.mul(a, b)) / (na * nb)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) tensors -> (N,)."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("row_cosine", a.shape, b.shape)
    na = ops.l2norm(a, axis=1)
    nb = ops.l2norm(b, axis=1)
    if np.any(na.data <= EPS_NORM) or np.any(nb.data <= EPS_NORM):
        raise DegenerateEmbedding("row_cosine: zero-norm row")
    return ops.sum(ops.mul(a, b), axis=1) / (na * nb)


def row_cosine_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        raise DegenerateEmbedding("row_cosine: zero-norm row")
    return (a * b).sum(axis=1) / (na * nb)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray

    def __getitem__(self, key):
        # dict-style access: report["pass"], report["max_rel_error"]
        return self.passed if key == "pass" else getattr(self, key)


def gradient_check(
    function: Callable[[Tensor], Tensor],
    point,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the reverse-mode gradient with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` restricts the comparison to a random subset of coordinates.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True, name="x")
    with Tape() as tape:
        out = function(leaf)
    if out.size != 1:
        raise ShapeError("gradient_check", out.shape, detail="function must be scalar-valued")
    if not np.isfinite(out.item()):
        raise NonFiniteError("gradient_check")
    analytic_full = backward(tape, out, {"x": leaf})["x"].data.ravel()

    n = x0.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    def f(arr):
        val = function(Tensor(arr.reshape(x0.shape))).item()
        if not np.isfinite(val):
            raise NonFiniteError("gradient_check")
        return val

    numeric = np.empty(coords.size)
    flat = x0.ravel()
    for i, c in enumerate(coords):
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += step
        xm[c] -= step
        numeric[i] = (f(xp) - f(xm)) / (2 * step)
    analytic = analytic_full[coords]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst <= tolerance, analytic, numeric, coords)
