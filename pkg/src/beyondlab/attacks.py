"""L-infinity attacks: FGSM, PGD, the EOT adaptive attack and Orthogonal-PGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentationSpec, apply_policy, default_policy, sample_params
from .models import ModelBundle
from .ndt import Tape, Tensor, backward, ops, row_cosine

BUDGET_TOL = 1e-9


class AttackError(ValueError):
    kind = "attack"


class BudgetViolation(AssertionError):
    kind = "budget"


@dataclass(frozen=True)
class AttackBudget:
    eps: float
    steps: int = 10
    step_size: float | None = None
    norm: str = "linf"
    rand_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm != "linf":
            raise AttackError(f"only L-infinity budgets are supported, got {self.norm}")
        if self.eps < 0:
            raise AttackError("eps must be non-negative")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.step_size is not None and self.step_size > self.eps + 1e-15:
            raise AttackError("step_size must not exceed eps")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps if self.steps > 1 else self.eps


@dataclass(frozen=True)
class AdaptiveConfig:
    alpha: float = 1.0
    k_eot: int = 8
    budget: AttackBudget = field(default_factory=lambda: AttackBudget(8 / 255, 10))
    policy: tuple = field(default_factory=lambda: tuple(default_policy()))
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise AttackError("alpha must be >= 0")
        if self.k_eot < 1:
            raise AttackError("k_eot must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    null_gradient: np.ndarray
    info: dict = field(default_factory=dict)


def check_budget(x0: np.ndarray, x_adv: np.ndarray, eps: float) -> None:
    """Hard check of the L-inf ball and the pixel range."""
    dist = float(np.max(np.abs(x_adv - x0))) if x_adv.size else 0.0
    if dist > eps + BUDGET_TOL:
        raise BudgetViolation(f"L-inf distance {dist} exceeds eps {eps}")
    if x_adv.size and (x_adv.min() < 0.0 or x_adv.max() > 1.0):
        raise BudgetViolation("adversarial pixels outside [0, 1]")


def project(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def input_gradient(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    leaf = Tensor(x, requires_grad=True, name="x")
    with Tape() as tape:
        loss = loss_fn(leaf)
    return loss.item(), backward(tape, loss, {"x": leaf})["x"].data


def _ce_sum(net, y) -> Callable[[Tensor], Tensor]:
    return lambda x: ops.sum(ops.softmax_cross_entropy(net(x), y))


def _null(g: np.ndarray) -> np.ndarray:
    return ~np.any(g.reshape(g.shape[0], -1) != 0, axis=1)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return (arr[None], True) if arr.ndim == 3 else (arr, False)


def _finish(x_adv, x0, eps, single, null, info=None) -> AttackResult:
    check_budget(x0, x_adv, eps)
    if single:
        x_adv, null = x_adv[0], null[:1]
    return AttackResult(x_adv, null, info or {})


def fgsm(x, y, classifier, eps: float) -> AttackResult:
    """One signed-gradient ascent step on the classifier's cross-entropy."""
    x0, single = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, g = input_gradient(_ce_sum(classifier, y), x0)
    x_adv = np.clip(x0 + eps * np.sign(g), 0.0, 1.0)
    x_adv = project(x_adv, x0, eps)
    return _finish(x_adv, x0, eps, single, _null(g))


def pgd(x, y, classifier, budget: AttackBudget, target=None) -> AttackResult:
    """Projected signed-gradient attack; untargeted unless ``target`` is given."""
    x0, single = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    eps, step = budget.eps, budget.alpha
    rng = np.random.default_rng(budget.seed)
    xa = x0.copy()
    if budget.rand_init and eps > 0:
        xa = project(x0 + rng.uniform(-eps, eps, size=x0.shape), x0, eps)
    direction = 1.0
    labels = y
    if target is not None:
        labels = np.atleast_1d(np.asarray(target, dtype=np.int64))
        direction = -1.0
    null = np.zeros(len(x0), dtype=bool)
    for _ in range(budget.steps):
        _, g = input_gradient(_ce_sum(classifier, labels), xa)
        null |= _null(g)
        xa = project(xa + direction * step * np.sign(g), x0, eps)
    return _finish(xa, x0, eps, single, null & _null(g))


def least_likely_target(classifier, x) -> np.ndarray:
    """Targeted label: the lowest-scoring class under the clean prediction."""
    x0, _ = _as_batch(x)
    return np.argmin(classifier(Tensor(x0)).data, axis=1)


# -- adaptive objective ----------------------------------------------------------

def check_differentiable(policy: Sequence[AugmentationSpec]) -> None:
    bad = [s for s in policy if not s.differentiable]
    if bad:
        raise AttackError("non-differentiable augmentation in policy: " + ", ".join(s.kind for s in bad))


def adaptive_terms(x: Tensor, y_t: np.ndarray, bundle: ModelBundle, params, k_eot: int, with_rep: bool = True):
    """Per-sample classifier loss, Sim_l and Sim_r at ``x`` for fixed augmentation draws."""
    n = x.shape[0]
    enc, head = bundle.encoder, bundle.head
    lc = ops.softmax_cross_entropy(bundle.classifier(x), y_t)
    xa = apply_policy(ops.repeat_rows(x, k_eot), params)
    feats = enc.trunk(xa)
    yr = np.repeat(y_t, k_eot)
    sim_l = ops.mean(ops.reshape(ops.softmax_cross_entropy(head(feats), yr), (n, k_eot)), axis=1)
    sim_r = None
    if with_rep:
        z0 = enc.embed(x)
        cos = row_cosine(ops.repeat_rows(z0, k_eot), enc.projector(feats))
        sim_r = ops.mean(ops.reshape(cos, (n, k_eot)), axis=1)
    return lc, sim_l, sim_r


def adaptive_attack(x, y_t, bundle: ModelBundle, config: AdaptiveConfig) -> AttackResult:
    """Targeted PGD on L_C + Sim_l - alpha * Sim_r with fresh EOT draws each step."""
    policy = list(config.policy)
    check_differentiable(policy)
    x0, single = _as_batch(x)
    y_t = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    budget = config.budget
    eps, step = budget.eps, budget.alpha
    rng = np.random.default_rng(config.seed)
    xa = x0.copy()
    if budget.rand_init and eps > 0:
        xa = project(x0 + np.random.default_rng(budget.seed).uniform(-eps, eps, size=x0.shape), x0, eps)
    use_rep = config.alpha != 0
    null = np.zeros(len(x0), dtype=bool)
    for _ in range(budget.steps):
        params = sample_params(policy, len(x0) * config.k_eot, rng)
        leaf = Tensor(xa, requires_grad=True, name="x")
        with Tape() as tape:
            lc, sim_l, sim_r = adaptive_terms(leaf, y_t, bundle, params, config.k_eot, use_rep)
            obj = lc + sim_l
            if use_rep:
                obj = obj - sim_r * config.alpha
            total = ops.sum(obj)
        g = backward(tape, total, {"x": leaf})["x"].data
        null |= _null(g)
        xa = project(xa - step * np.sign(g), x0, eps)
    return _finish(xa, x0, eps, single, null & _null(g), {"alpha": config.alpha})


def conflict_rate(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Per-sample fraction of coordinates where both gradients are nonzero with opposite signs."""
    g1 = g1.reshape(g1.shape[0], -1)
    g2 = g2.reshape(g2.shape[0], -1)
    s1, s2 = np.sign(g1), np.sign(g2)
    return np.mean((s1 != 0) & (s2 != 0) & (s1 != s2), axis=1)


def gradient_conflict_rate(x, bundle: ModelBundle, config: AdaptiveConfig, step_size: float | None = None,
                           y_t=None, return_per_sample: bool = False):
    """Conflict between the label-consistency and representation-similarity gradients.

    The point is ``x + delta`` where ``delta`` comes from the adaptive attack at
    the configured budget, started at ``x`` itself.  A random start would put
    noise of the full budget into ``delta`` before any gradient step.  With a
    fixed ``step_size`` the attack runs at least ``ceil(eps / step_size)`` steps
    so that large budgets are actually used.
    """
    x0, _ = _as_batch(x)
    if y_t is None:
        y_t = least_likely_target(bundle.classifier, x0)
    y_t = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    if config.alpha == 0:
        raise AttackError("degenerate point: alpha = 0 removes the representation term")
    budget = replace(config.budget, rand_init=False)
    if step_size is not None and budget.eps > 0:
        step = min(step_size, budget.eps)
        budget = replace(budget, step_size=step, steps=max(budget.steps, math.ceil(budget.eps / step - 1e-9)))
    config = replace(config, budget=budget)
    xa = adaptive_attack(x0, y_t, bundle, config).x_adv
    rng = np.random.default_rng(config.seed + 7919)
    params = sample_params(list(config.policy), len(x0) * config.k_eot, rng)
    leaf = Tensor(xa, requires_grad=True, name="x")
    with Tape() as tape:
        _, sim_l, sim_r = adaptive_terms(leaf, y_t, bundle, params, config.k_eot)
        l_term = ops.sum(sim_l)
        r_term = ops.sum(sim_r) * (-config.alpha)
    g1 = backward(tape, l_term, {"x": leaf})["x"].data
    g2 = backward(tape, r_term, {"x": leaf})["x"].data
    if not np.any(g1) and not np.any(g2):
        raise AttackError("degenerate point: all-zero gradients")
    rates = conflict_rate(g1, g2)
    return rates if return_per_sample else float(rates.mean())


# -- Orthogonal-PGD ---------------------------------------------------------------

def orthogonal_direction(g: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Remove from each sample's ``g`` its projection onto ``d``."""
    gf = g.reshape(g.shape[0], -1)
    df = d.reshape(d.shape[0], -1)
    dd = (df * df).sum(axis=1)
    coef = np.where(dd > 0, (gf * df).sum(axis=1) / np.where(dd > 0, dd, 1.0), 0.0)
    return (gf - coef[:, None] * df).reshape(g.shape)


def detector_surrogate(x: Tensor, y_t: np.ndarray, bundle: ModelBundle, params, k_eot: int):
    """Differentiable detection loss (lower = looks clean) and the raw neighbor observations."""
    n = x.shape[0]
    enc, head = bundle.encoder, bundle.head
    xa = apply_policy(ops.repeat_rows(x, k_eot), params)
    feats = enc.trunk(xa)
    logits = head(feats)
    ce = ops.mean(ops.reshape(ops.softmax_cross_entropy(logits, np.repeat(y_t, k_eot)), (n, k_eot)), axis=1)
    cos = ops.reshape(row_cosine(ops.repeat_rows(enc.embed(x), k_eot), enc.projector(feats)), (n, k_eot))
    loss = ce - ops.mean(cos, axis=1)
    labels = np.argmax(logits.data, axis=1).reshape(n, k_eot)
    return loss, labels, cos.data


def orthogonal_pgd(x, y_t, bundle: ModelBundle, thresholds, budget: AttackBudget, strategy: str = "orthogonal",
                   k_eot: int = 8, policy=None, seed: int = 0) -> AttackResult:
    """Orthogonal-PGD against classifier + detector.

    While the classifier does not yet output ``y_t`` the step follows the
    classifier gradient (orthogonal: with its component along the detector
    gradient removed).  Once fooled, samples still flagged by the detector
    step along the detector gradient (orthogonal: minus its component along
    the classifier gradient).  ``selection`` skips the projections.
    """
    if strategy not in ("orthogonal", "selection"):
        raise AttackError(f"unknown strategy {strategy!r}")
    policy = list(default_policy() if policy is None else policy)
    check_differentiable(policy)
    x0, single = _as_batch(x)
    y_t = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    eps, step = budget.eps, budget.alpha
    rng = np.random.default_rng(seed)
    xa = x0.copy()
    if budget.rand_init and eps > 0:
        xa = project(x0 + np.random.default_rng(budget.seed).uniform(-eps, eps, size=x0.shape), x0, eps)
    null = np.zeros(len(x0), dtype=bool)
    lab_frac = thresholds.t_label / thresholds.k
    rep_frac = thresholds.t_rep / thresholds.k
    for _ in range(budget.steps):
        params = sample_params(policy, len(x0) * k_eot, rng)
        leaf = Tensor(xa, requires_grad=True, name="x")
        with Tape() as tape:
            logits = bundle.classifier(leaf)
            lc = ops.sum(ops.softmax_cross_entropy(logits, y_t))
            dl, labels, cos = detector_surrogate(leaf, y_t, bundle, params, k_eot)
            ld = ops.sum(dl)
        gc = backward(tape, lc, {"x": leaf})["x"].data
        gd = backward(tape, ld, {"x": leaf})["x"].data
        fooled = np.argmax(logits.data, axis=1) == y_t
        detected = ((labels == y_t[:, None]).mean(axis=1) < lab_frac) | ((cos >= thresholds.tau_cos).mean(axis=1) < rep_frac)
        if strategy == "orthogonal":
            dir_c = orthogonal_direction(gc, gd)
            dir_d = orthogonal_direction(gd, gc)
        else:
            dir_c, dir_d = gc, gd
        mask_c = (~fooled).reshape(-1, 1, 1, 1)
        mask_d = (fooled & detected).reshape(-1, 1, 1, 1)
        d = np.where(mask_c, dir_c, np.where(mask_d, dir_d, 0.0))
        null |= _null(gc) & _null(gd)
        xa = project(xa - step * np.sign(d), x0, eps)
    return _finish(xa, x0, eps, single, null, {"strategy": strategy})
