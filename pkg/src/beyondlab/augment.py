"""Neighbor generation and the augmentation validity score.

Rotation (bilinear resampling) and colour jitter are linear in the pixel
values, so an augmentation is a matrix ``W`` applied to the image, followed by
clamping to [0, 1].  Both run through the autodiff engine.  Translation and
horizontal flip are plain array ops and carry no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ndt import Tape, Tensor, backward, jvp, ops

KINDS = ("rotation", "color-jitter", "translation", "horizontal-flip")
DIFFERENTIABLE = {"rotation": True, "color-jitter": True, "translation": False, "horizontal-flip": False}


class AugmentationError(ValueError):
    kind = "augmentation"


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentationError(f"unknown augmentation kind {self.kind!r}")
        for name, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise AugmentationError(f"{self.kind}.{name}: empty range ({lo}, {hi})")

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.ranges.items()))))

    @property
    def differentiable(self) -> bool:
        return DIFFERENTIABLE[self.kind]

    @classmethod
    def rotation(cls, degrees: float = 15.0) -> "AugmentationSpec":
        return cls("rotation", {"degrees": (-degrees, degrees)})

    @classmethod
    def color_jitter(cls, brightness=(0.8, 1.2), contrast=(0.8, 1.2)) -> "AugmentationSpec":
        return cls("color-jitter", {"brightness": tuple(brightness), "contrast": tuple(contrast)})

    @classmethod
    def translation(cls, pixels: int = 3) -> "AugmentationSpec":
        return cls("translation", {"dy": (-pixels, pixels), "dx": (-pixels, pixels)})

    @classmethod
    def horizontal_flip(cls, p: float = 0.5) -> "AugmentationSpec":
        return cls("horizontal-flip", {"p": (p, p)})

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls("rotation", {"degrees": (0.0, 0.0)})

    def sample(self, rng: np.random.Generator, n: int = 1) -> dict[str, np.ndarray]:
        if self.kind == "translation":
            return {k: rng.integers(int(lo), int(hi) + 1, size=n).astype(np.float64) for k, (lo, hi) in self.ranges.items()}
        if self.kind == "horizontal-flip":
            p = self.ranges["p"][0]
            return {"flip": (rng.random(n) < p).astype(np.float64)}
        return {k: rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, float(lo)) for k, (lo, hi) in self.ranges.items()}

    def check(self, params: dict[str, np.ndarray]) -> None:
        for name, (lo, hi) in self.ranges.items():
            if self.kind == "horizontal-flip":
                continue
            vals = np.asarray(params[name])
            if np.any(vals < lo - 1e-12) or np.any(vals > hi + 1e-12):
                raise AugmentationError(f"{self.kind}.{name}={vals} outside declared range [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(d["kind"], {k: tuple(v) for k, v in d["ranges"].items()})


Policy = Sequence[AugmentationSpec]
PolicyParams = list  # list of (spec, {name: array(n)})


def default_policy() -> list[AugmentationSpec]:
    return [AugmentationSpec.rotation(15.0), AugmentationSpec.color_jitter((0.8, 1.2), (0.8, 1.2))]


def ssl_policy() -> list[AugmentationSpec]:
    return [
        AugmentationSpec.rotation(15.0),
        AugmentationSpec.color_jitter((0.6, 1.4), (0.6, 1.4)),
        AugmentationSpec.translation(3),
        AugmentationSpec.horizontal_flip(0.5),
    ]


def sample_params(policy: Policy, n: int, rng: np.random.Generator) -> PolicyParams:
    return [(spec, spec.sample(rng, n)) for spec in policy]


def neighbor_params(policy: Policy, k: int, seed: int, start: int = 0) -> PolicyParams:
    """Parameters for neighbors ``start .. start+k-1`` of one input.

    Neighbor ``i`` draws from its own stream ``default_rng([seed, i])`` so any
    subset of neighbors can be regenerated independently of the others.
    """
    per = [[] for _ in policy]
    for i in range(start, start + k):
        rng = np.random.default_rng([seed, i])
        for j, spec in enumerate(policy):
            per[j].append(spec.sample(rng, 1))
    return [(spec, {key: np.concatenate([d[key] for d in draws]) for key in draws[0]}) for spec, draws in zip(policy, per)]


def concat_params(parts: Sequence[PolicyParams]) -> PolicyParams:
    out = []
    for j, (spec, _) in enumerate(parts[0]):
        keys = parts[0][j][1].keys()
        out.append((spec, {key: np.concatenate([p[j][1][key] for p in parts]) for key in keys}))
    return out


def rotation_maps(degrees: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear index/weight maps for counter-clockwise rotation about the centre.

    Sampling outside the image replicates the border.  Returns arrays of shape
    (N, h*w, 4).
    """
    theta = np.deg2rad(np.asarray(degrees, dtype=np.float64)).reshape(-1, 1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    x = (cc.ravel() - cx)[None]
    y_up = (cy - rr.ravel())[None]
    cos, sin = np.cos(theta), np.sin(theta)
    src_c = cx + x * cos + y_up * sin
    src_r = cy - (-x * sin + y_up * cos)
    # snap near-integer coordinates so 0/90/180 degrees are exact permutations
    src_c = np.where(np.abs(src_c - np.rint(src_c)) < 1e-9, np.rint(src_c), src_c)
    src_r = np.where(np.abs(src_r - np.rint(src_r)) < 1e-9, np.rint(src_r), src_r)
    src_c = np.clip(src_c, 0, w - 1)
    src_r = np.clip(src_r, 0, h - 1)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    index = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], axis=-1)
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    return index, weight


def _apply_spec(x: Tensor, spec: AugmentationSpec, params: dict[str, np.ndarray], clamp: bool = True) -> Tensor:
    n, c, h, w = x.shape
    if spec.kind == "rotation":
        deg = params["degrees"]
        if np.all(deg == 0):
            return x
        index, weight = rotation_maps(deg, h, w)
        return ops.resample(x, index, weight)
    if spec.kind == "color-jitter":
        out = ops.color_jitter(x, params["brightness"], params["contrast"])
        return ops.clamp(out, 0.0, 1.0) if clamp else out
    if spec.kind == "translation":
        dy = params["dy"].astype(np.int64)
        dx = params["dx"].astype(np.int64)
        rows = np.clip(np.arange(h)[None, :] - dy[:, None], 0, h - 1)
        cols = np.clip(np.arange(w)[None, :] - dx[:, None], 0, w - 1)
        data = x.data[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                      rows[:, None, :, None], cols[:, None, None, :]]
        return Tensor(data)
    flip = params["flip"].astype(bool)
    data = x.data.copy()
    data[flip] = data[flip][..., ::-1]
    return Tensor(data)


def apply_policy(x: Tensor, params: PolicyParams, clamp: bool = True) -> Tensor:
    """Apply sampled augmentations to a batch (N, C, H, W); differentiable kinds keep gradients."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    for spec, p in params:
        x = _apply_spec(x, spec, p, clamp)
    return x


def apply_linear(v: np.ndarray, params: PolicyParams) -> np.ndarray:
    """The linear map W (no clamping) applied to a perturbation batch."""
    return apply_policy(Tensor(v), params, clamp=False).data


def augment_one(x, spec: AugmentationSpec, rng: np.random.Generator | None = None, params: dict | None = None):
    """Augment a single image (C, H, W) or Tensor; returns the same kind."""
    is_tensor = isinstance(x, Tensor)
    arr = x.data if is_tensor else np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise AugmentationError("input pixels must lie in [0, 1]")
    if params is None:
        params = spec.sample(rng if rng is not None else np.random.default_rng(), 1)
    else:
        params = {k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    spec.check(params)
    src = x if is_tensor else Tensor(arr)
    out = _apply_spec(ops.reshape(src, (1,) + src.shape), spec, params)
    out = ops.reshape(out, src.shape)
    return out if is_tensor else out.data


@dataclass
class NeighborSet:
    source: np.ndarray
    images: np.ndarray  # (k, C, H, W)
    params: PolicyParams
    seed: int
    policy: tuple

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def k(self) -> int:
        return self.images.shape[0]

    def param_vectors(self) -> list[dict]:
        out = []
        for i in range(self.k):
            d = {}
            for spec, p in self.params:
                for key, vals in p.items():
                    d[f"{spec.kind}.{key}"] = float(vals[i])
            out.append(d)
        return out


def generate_neighbors(x, k: int = 50, policy: Policy | None = None, seed: int = 0) -> NeighborSet:
    """``k`` independent augmentations of one image under ``policy``."""
    if k < 1:
        raise AugmentationError("k must be >= 1")
    policy = list(default_policy() if policy is None else policy)
    if not policy:
        raise AugmentationError("empty augmentation policy")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    params = neighbor_params(policy, k, seed)
    imgs = apply_policy(Tensor(np.repeat(arr[None], k, axis=0)), params).data
    return NeighborSet(arr, imgs, params, seed, tuple(policy))


def neighbor_batch(xs: np.ndarray, k: int, policy: Policy, seeds: Sequence[int]) -> np.ndarray:
    """Neighbors of many inputs at once: (N, C, H, W) -> (N*k, C, H, W), sample-major."""
    policy = list(policy)
    if not policy:
        raise AugmentationError("empty augmentation policy")
    params = concat_params([neighbor_params(policy, k, int(s)) for s in seeds])
    return apply_policy(Tensor(np.repeat(xs, k, axis=0)), params).data


# -- validity score -------------------------------------------------------------

@dataclass
class ValidityReport:
    spectral_norm_estimate: float
    bound: float
    valid: bool | None
    per_sample: list[float]
    converged: list[bool]

    def __getitem__(self, key):
        return getattr(self, key)


def validity_bound(eps: float) -> float:
    """Largest admissible ||dC(Wx) W||_2 for budget ``eps``: sqrt(2) / (2 eps)."""
    return math.sqrt(2.0) / (2.0 * eps)


def jacobian_spectral_norm(fn: Callable[[Tensor], Tensor], x: np.ndarray, iters: int = 20,
                           rng: np.random.Generator | None = None, tol: float = 1e-2) -> tuple[float, bool]:
    """Power iteration on J^T J using a forward tangent sweep and a reverse sweep."""
    rng = rng if rng is not None else np.random.default_rng(0)
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True, name="x")
    with Tape() as tape:
        out = fn(leaf)
    v = rng.normal(size=leaf.shape)
    v /= np.linalg.norm(v)
    sigma, prev = 0.0, None
    change = 0.0
    for _ in range(iters):
        u = jvp(tape, [(leaf, v)], out)
        sigma = float(np.linalg.norm(u))
        if prev is not None:
            change = abs(sigma - prev) / max(prev, sigma) if max(prev, sigma) > 0 else 0.0
        prev = sigma
        w = backward(tape, out, {"x": leaf}, seed=u)["x"].data
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    return sigma, change <= tol


def augmentation_validity(spec: AugmentationSpec, classifier_fn: Callable[[Tensor], Tensor], samples: np.ndarray,
                          eps: float, iters: int = 20, seed: int = 0) -> ValidityReport:
    """Estimate ||dC(Wx) W||_2 over samples and compare to the budget bound."""
    if not spec.differentiable:
        raise AugmentationError(f"{spec.kind} is not differentiable")
    samples = np.asarray(samples, dtype=np.float64)
    rng = np.random.default_rng(seed)
    per, conv = [], []
    for x in samples:
        params = [(spec, spec.sample(rng, 1))]

        def composed(z, params=params):
            return classifier_fn(apply_policy(ops.reshape(z, (1,) + z.shape), params))

        s, ok = jacobian_spectral_norm(composed, x, iters, rng)
        per.append(s)
        conv.append(ok)
    est = float(np.mean(per))
    bound = validity_bound(eps)
    valid = None if not all(conv) else bool(est <= bound)
    return ValidityReport(est, bound, valid, per, conv)
