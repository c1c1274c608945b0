"""ROC/AUC, TPR at a fixed FPR, robust accuracy, sweeps and cost accounting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import attacks as atk
from .augment import default_policy
from .detector import (
    DetectorThresholds,
    NeighborScores,
    ScoreNormalizer,
    calibrate_from_scores,
    input_seeds,
    score_inputs,
)
from .models import ModelBundle, predict_labels
from .ndt import Tensor


class EvaluationError(ValueError):
    kind = "evaluation"


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_adversarial: bool
    provenance: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise EvaluationError(f"non-finite score {self.score}")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def samples_from_scores(adv_scores, clean_scores, provenance: str = "") -> list[ScoredSample]:
    return ([ScoredSample(float(s), True, provenance) for s in adv_scores]
            + [ScoredSample(float(s), False, "clean") for s in clean_scores])


def _split(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    pos = np.array([s.score for s in samples if s.is_adversarial], dtype=np.float64)
    neg = np.array([s.score for s in samples if not s.is_adversarial], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("need at least one adversarial and one clean sample")
    return pos, neg


def mann_whitney(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(pos > neg) + P(tie)/2 from exact integer pair counts."""
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    lo = np.searchsorted(neg, pos, side="left").astype(np.int64)
    hi = np.searchsorted(neg, pos, side="right").astype(np.int64)
    twice = int(2 * lo.sum() + (hi - lo).sum())
    return twice / (2 * len(pos) * len(neg))


def roc_curve(pos: np.ndarray, neg: np.ndarray) -> RocCurve:
    """Points for "reject when score >= t" at every distinct score, plus both endpoints."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    ps, ns = np.sort(pos), np.sort(neg)
    tp = len(ps) - np.searchsorted(ps, thr, side="left")
    fp = len(ns) - np.searchsorted(ns, thr, side="left")
    fpr = np.concatenate([[0.0], fp / len(ns)])
    tpr = np.concatenate([[0.0], tp / len(ps)])
    thresholds = np.concatenate([[np.inf], thr])
    if fpr[-1] < 1.0 or tpr[-1] < 1.0:  # cannot happen, kept as a guard on endpoints
        fpr, tpr, thresholds = np.append(fpr, 1.0), np.append(tpr, 1.0), np.append(thresholds, -np.inf)
    return RocCurve(fpr, tpr, thresholds, mann_whitney(pos, neg))


def roc_auc(samples: Iterable[ScoredSample]) -> RocCurve:
    return roc_curve(*_split(samples))


def auc_of(adv_scores, clean_scores) -> float:
    if len(adv_scores) == 0 or len(clean_scores) == 0:
        raise EvaluationError("need at least one adversarial and one clean sample")
    return mann_whitney(np.asarray(adv_scores, dtype=np.float64), np.asarray(clean_scores, dtype=np.float64))


def tpr_at_fpr(samples, fpr_cap: float) -> float:
    """Best TPR over thresholds whose FPR stays within ``fpr_cap``."""
    curve = samples if isinstance(samples, RocCurve) else roc_auc(samples)
    ok = curve.fpr <= fpr_cap + 1e-12
    return float(curve.tpr[ok].max())


def robust_tally(rejected, predicted, true_labels) -> float:
    """Fraction of attacked samples that are rejected or still correctly classified."""
    rejected = np.asarray(rejected, dtype=bool)
    if rejected.size == 0:
        raise EvaluationError("robust accuracy of an empty set")
    return float(np.mean(rejected | (np.asarray(predicted) == np.asarray(true_labels))))


def robust_accuracy(attacked_x, true_labels, bundle: ModelBundle, thresholds: DetectorThresholds,
                    seeds=None, policy=None) -> float:
    attacked_x = np.asarray(attacked_x, dtype=np.float64)
    if len(attacked_x) == 0:
        raise EvaluationError("robust accuracy of an empty set")
    scores = score_inputs(bundle, attacked_x, thresholds.k, policy, seeds)
    return robust_tally(thresholds.reject(scores), scores.cls_labels, true_labels)


def calibrate_toy_eps(classifier, x, y, grid=(4 / 255, 8 / 255, 16 / 255, 32 / 255), min_success: float = 0.5,
                     steps: int = 10, seed: int = 0) -> tuple[float, dict]:
    """Smallest budget in ``grid`` at which untargeted PGD fools the classifier on
    at least ``min_success`` of the correctly classified inputs.

    Small synthetic-data models are far more robust than natural-image ones, so
    budgets are scaled to this point rather than copied from natural-image practice.
    """
    y = np.asarray(y, dtype=np.int64)
    ok = predict_labels(classifier, x) == y
    rates = {}
    for eps in sorted(grid):
        x_adv = atk.pgd(x[ok], y[ok], classifier, atk.AttackBudget(eps, steps, seed=seed)).x_adv
        rates[eps] = float(np.mean(predict_labels(classifier, x_adv) != y[ok]))
        if rates[eps] >= min_success:
            return eps, rates
    return max(grid), rates


# -- sweeps -----------------------------------------------------------------------

SWEEP_KINDS = ("neighbors", "alpha", "epsilon", "ablation")
ROW_FIELDS = ("kind", "value", "auc", "tpr_at_fpr_5", "robust_accuracy", "n_adv", "n_clean")


@dataclass
class SweepContext:
    """Everything a sweep needs; calibration and held-out clean scores use the largest k."""

    bundle: ModelBundle
    calib_scores: NeighborScores
    clean_scores: NeighborScores
    attack_x: np.ndarray
    attack_y: np.ndarray
    eps: float = 8 / 255
    steps: int = 10
    alpha: float = 1.0
    k_eot: int = 8
    target_fpr: float = 0.05
    attack: str = "pgd"
    seed: int = 0
    policy: tuple = field(default_factory=lambda: tuple(default_policy()))
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def k(self) -> int:
        return self.calib_scores.k

    def budget(self, eps: float) -> atk.AttackBudget:
        return atk.AttackBudget(eps, self.steps, seed=self.seed)

    def adversarial(self, kind: str, eps: float, alpha: float = 0.0) -> np.ndarray:
        key = (kind, round(eps, 12), alpha)
        if key not in self._cache:
            if kind == "pgd":
                x_adv = atk.pgd(self.attack_x, self.attack_y, self.bundle.classifier, self.budget(eps)).x_adv
            elif kind == "adaptive":
                y_t = atk.least_likely_target(self.bundle.classifier, self.attack_x)
                cfg = atk.AdaptiveConfig(alpha, self.k_eot, self.budget(eps), self.policy, self.seed)
                x_adv = atk.adaptive_attack(self.attack_x, y_t, self.bundle, cfg).x_adv
            else:
                raise EvaluationError(f"unknown attack {kind!r}")
            atk.check_budget(self.attack_x, x_adv, eps)
            seeds = input_seeds(self.seed, len(x_adv), offset=7_000_000)
            self._cache[key] = (x_adv, score_inputs(self.bundle, x_adv, self.k, self.policy, seeds))
        return self._cache[key]

    def success_mask(self, x_adv: np.ndarray) -> np.ndarray:
        if "clean_pred" not in self._cache:
            self._cache["clean_pred"] = predict_labels(self.bundle.classifier, self.attack_x)
        clean_ok = self._cache["clean_pred"] == self.attack_y
        return clean_ok & (predict_labels(self.bundle.classifier, x_adv) != self.attack_y)


def _row(kind, value, adv_stat, clean_stat, rejected, predicted, y) -> dict:
    if len(adv_stat):
        curve = roc_curve(adv_stat, clean_stat)
        auc, tpr = curve.auc, tpr_at_fpr(curve, 0.05)
    else:
        auc, tpr = None, None  # no successful adversarial example at this point
    return {"kind": kind, "value": value, "auc": auc, "tpr_at_fpr_5": tpr,
            "robust_accuracy": robust_tally(rejected, predicted, y), "n_adv": int(len(adv_stat)),
            "n_clean": int(len(clean_stat))}


def _evaluate(ctx: SweepContext, kind, value, attack: str, eps: float, alpha: float, k: int,
              statistic: str = "combined") -> dict:
    x_adv, adv_all = ctx.adversarial(attack, eps, alpha)
    calib, clean, adv_all = ctx.calib_scores.first(k), ctx.clean_scores.first(k), adv_all.first(k)
    th = calibrate_from_scores(calib, ctx.target_fpr, min_samples=1)
    norm = th.normalizer
    ok = ctx.success_mask(x_adv)
    adv = adv_all.take(ok)
    adv_stat = norm.statistics(adv)[statistic]
    clean_stat = norm.statistics(clean)[statistic]
    if statistic == "label":
        rejected = adv_all.ind_label() < th.t_label
    elif statistic == "rep":
        rejected = adv_all.ind_rep(th.tau_cos) < th.t_rep
    else:
        rejected = th.reject(adv_all)
    return _row(kind, value, adv_stat, clean_stat, rejected, adv_all.cls_labels, ctx.attack_y)


def run_sweep(kind: str, grid: Sequence, context: SweepContext) -> list[dict]:
    """One row per grid point: AUC, TPR@FPR5% and robust accuracy.

    neighbors: k values (thresholds recalibrated per k on the first-k neighbors);
    alpha / epsilon: adaptive attack at each value; ablation: statistic names
    among combined / label / rep, all against the configured attack.
    """
    if kind not in SWEEP_KINDS:
        raise EvaluationError(f"unknown sweep {kind!r}; choose from {', '.join(SWEEP_KINDS)}")
    grid = list(grid)
    if not grid:
        raise EvaluationError("empty grid")
    ctx = context
    rows = []
    for value in grid:
        if kind == "neighbors":
            k = int(value)
            if not 1 <= k <= ctx.k:
                raise EvaluationError(f"k={k} outside 1..{ctx.k}")
            rows.append(_evaluate(ctx, kind, k, ctx.attack, ctx.eps, ctx.alpha, k))
        elif kind == "alpha":
            rows.append(_evaluate(ctx, kind, float(value), "adaptive", ctx.eps, float(value), ctx.k))
        elif kind == "epsilon":
            rows.append(_evaluate(ctx, kind, float(value), "adaptive", float(value), ctx.alpha, ctx.k))
        else:
            if value not in ("combined", "label", "rep"):
                raise EvaluationError(f"unknown statistic {value!r}")
            rows.append(_evaluate(ctx, kind, value, ctx.attack, ctx.eps, ctx.alpha, ctx.k, statistic=value))
    return rows


# -- cost -----------------------------------------------------------------------

def _net_flops(net, input_shape) -> int:
    """Per-sample multiply-add flops: dense 2*in*out, conv 2*k*k*cin*cout*hout*wout."""
    c, h, w = input_shape if input_shape is not None else (None, None, None)
    total = 0
    for layer in net.layers:
        if layer["type"] == "conv":
            total += 2 * layer["k"] ** 2 * layer["in"] * layer["out"] * h * w
            c = layer["out"]
        elif layer["type"] == "pool":
            h, w = h // 2, w // 2
        elif layer["type"] == "dense":
            total += 2 * layer["in"] * layer["out"]
    return total


def detection_flops(bundle: ModelBundle, k: int) -> int:
    """One detection pass: c(x) once, f and h on x and its k neighbors, g on the neighbors."""
    enc = bundle.encoder
    shape = enc.trunk.input_shape
    f = _net_flops(enc.trunk, shape)
    h = _net_flops(enc.projector, None)
    g = _net_flops(bundle.head, None)
    c = _net_flops(bundle.classifier, bundle.classifier.input_shape)
    return c + (k + 1) * (f + h) + k * g


def cost_report(bundle: ModelBundle, sample_batch, k: int = 50, repeats: int = 5, policy=None) -> dict:
    params = bundle.num_params()
    flops = detection_flops(bundle, k)
    xs = np.asarray(sample_batch, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[None]
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        score_inputs(bundle, xs[:1], k, policy, [0])
        times.append(time.perf_counter() - t0)
    wall = float(np.median(times))
    return {"params": int(params), "flops": int(flops), "wall_time": wall, "overall": float(flops) * params * wall}
