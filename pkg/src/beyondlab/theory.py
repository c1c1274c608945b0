"""Empirical checks of the feature-gap inequality and the perturbation-ordering assumption."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attacks as atk
from .augment import apply_linear, apply_policy, default_policy, sample_params
from .models import ModelBundle, predict_labels
from .ndt import Tape, Tensor, jvp


@dataclass
class GapReport:
    clean_gap: np.ndarray
    adv_gap: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        if np.any(self.clean_gap < 0) or np.any(self.adv_gap < 0):
            raise ValueError("gaps must be non-negative")

    @property
    def mean_clean(self) -> float:
        return float(self.clean_gap.mean()) if self.clean_gap.size else float("nan")

    @property
    def mean_adv(self) -> float:
        return float(self.adv_gap.mean()) if self.adv_gap.size else float("nan")

    @property
    def ratio(self) -> float:
        return self.mean_adv / self.mean_clean if self.mean_clean > 0 else float("inf")

    @property
    def dominance(self) -> float:
        return float(np.mean(self.adv_gap > self.clean_gap)) if self.adv_gap.size else float("nan")

    def summary(self) -> dict:
        return {"mean_clean_gap": self.mean_clean, "mean_adv_gap": self.mean_adv, "ratio": self.ratio,
                "dominance": self.dominance, "n": int(self.clean_gap.size), "skipped": self.skipped}

    def rows(self) -> list[tuple[int, float, float]]:
        return [(i, float(c), float(a)) for i, (c, a) in enumerate(zip(self.clean_gap, self.adv_gap))]


def ssl_classifier(bundle: ModelBundle) -> Callable[[Tensor], Tensor]:
    """g(f(.)) as a differentiable function."""
    return lambda x: bundle.head(bundle.encoder.trunk(x))


def make_attack(name: str, bundle: ModelBundle) -> Callable:
    """Attack callables ``(x, y, budget) -> x_adv``.

    ``pgd`` targets the classifier; ``pgd-ssl`` targets the SSL classification
    path g(f(.)), i.e. adversarial examples of the feature extractor itself.
    """
    if name == "pgd":
        return lambda x, y, b: atk.pgd(x, y, bundle.classifier, b).x_adv
    if name == "pgd-ssl":
        fn = ssl_classifier(bundle)
        return lambda x, y, b: atk.pgd(x, y, fn, b).x_adv
    raise ValueError(f"unknown attack {name!r}")


def _attacked_model(name: str, bundle: ModelBundle):
    return ssl_classifier(bundle) if name == "pgd-ssl" else bundle.classifier


def feature_gap_check(test_set, bundle: ModelBundle, policy=None, attack="pgd", budget: atk.AttackBudget | None = None,
                      seed: int = 0, batch: int = 64) -> GapReport:
    """gap(x) = ||f(x) - f(Wx)||^2 for clean and adversarial inputs under the same draw of W.

    Samples the attack fails on (label unchanged under the attacked model) are
    skipped and counted; with eps = 0 nothing is skipped.
    """
    x, y = test_set
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    policy = list(default_policy() if policy is None else policy)
    budget = budget if budget is not None else atk.AttackBudget(8 / 255, 10, seed=seed)
    run = make_attack(attack, bundle) if isinstance(attack, str) else attack
    trunk = bundle.encoder.trunk
    rng = np.random.default_rng(seed)
    clean_gaps, adv_gaps, skipped = [], [], 0
    for s in range(0, len(x), batch):
        xb, yb = x[s:s + batch], y[s:s + batch]
        xa = run(xb, yb, budget)
        atk.check_budget(xb, xa, budget.eps)
        if budget.eps > 0 and isinstance(attack, str):
            keep = predict_labels(_attacked_model(attack, bundle), xa) != yb
        else:
            keep = np.ones(len(xb), dtype=bool)
        skipped += int((~keep).sum())
        xb, xa = xb[keep], xa[keep]
        if len(xb) == 0:
            continue
        params = sample_params(policy, len(xb), rng)
        for arr, out in ((xb, clean_gaps), (xa, adv_gaps)):
            f0 = trunk(Tensor(arr)).data
            fw = trunk(apply_policy(Tensor(arr), params)).data
            out.append(np.sum((f0 - fw) ** 2, axis=1))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return GapReport(cat(clean_gaps), cat(adv_gaps), skipped)


def jvp_norms(fn: Callable[[Tensor], Tensor], x: np.ndarray, directions: list[np.ndarray]) -> np.ndarray:
    """Per-sample ||J_fn(x) v|| for each direction batch v; rows = directions."""
    leaf = Tensor(x, requires_grad=True, name="x")
    with Tape() as tape:
        out = fn(leaf)
    res = []
    for v in directions:
        t = jvp(tape, [(leaf, v)], out)
        res.append(np.linalg.norm(t.reshape(t.shape[0], -1), axis=1))
    return np.array(res)


def perturbation_ordering_check(test_set, bundle: ModelBundle, policy=None, budget: atk.AttackBudget | None = None,
                                seed: int = 0, benign: np.ndarray | None = None, batch: int = 64) -> dict:
    """Audit ||J delta|| > ||J W delta|| > ||J W delta_hat|| with J the trunk Jacobian at x.

    delta comes from PGD on the classifier; delta_hat is uniform noise in the same
    L-inf ball (or ``benign`` if supplied).  Samples with J delta = 0 are skipped.
    """
    x, y = test_set
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    policy = list(default_policy() if policy is None else policy)
    budget = budget if budget is not None else atk.AttackBudget(8 / 255, 10, seed=seed)
    rng = np.random.default_rng(seed)
    trunk = bundle.encoder.trunk
    norms = []
    for s in range(0, len(x), batch):
        xb, yb = x[s:s + batch], y[s:s + batch]
        delta = atk.pgd(xb, yb, bundle.classifier, budget).x_adv - xb
        if benign is None:
            dhat = rng.uniform(-budget.eps, budget.eps, size=xb.shape)
        else:
            dhat = np.asarray(benign, dtype=np.float64)[s:s + batch]
        params = sample_params(policy, len(xb), rng)
        norms.append(jvp_norms(trunk, xb, [delta, apply_linear(delta, params), apply_linear(dhat, params)]).T)
    n = np.concatenate(norms) if norms else np.zeros((0, 3))
    valid = n[:, 0] > 0
    skipped = int((~valid).sum())
    n = n[valid]
    first = n[:, 0] > n[:, 1]
    second = n[:, 1] > n[:, 2]
    return {
        "fraction_holding": float(np.mean(first & second)) if len(n) else float("nan"),
        "first_holds": float(np.mean(first)) if len(n) else float("nan"),
        "second_holds": float(np.mean(second)) if len(n) else float("nan"),
        "norms": n,
        "skipped": skipped,
    }
