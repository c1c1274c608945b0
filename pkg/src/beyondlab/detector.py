"""Label-consistency / representation-similarity detection over augmented neighbors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import AugmentationSpec, default_policy, neighbor_batch
from .models import ModelBundle
from .ndt import DegenerateEmbedding, Tensor, row_cosine_np

DEFAULT_K = 50


class DetectorError(ValueError):
    kind = "detector"


class CalibrationError(DetectorError):
    kind = "calibration"

    def __init__(self, msg, achieved_fpr=None):
        super().__init__(msg)
        self.achieved_fpr = achieved_fpr


@dataclass
class NeighborScores:
    """Raw per-neighbor observations for a batch of inputs."""

    cls_labels: np.ndarray        # (N,)  classifier label of each input
    neighbor_labels: np.ndarray   # (N, k) SSL-head labels of the neighbors
    cosines: np.ndarray           # (N, k) cos(r(x), r(x_i))

    @property
    def k(self) -> int:
        return self.neighbor_labels.shape[1]

    def __len__(self) -> int:
        return self.cls_labels.shape[0]

    def label_matches(self) -> np.ndarray:
        return self.neighbor_labels == self.cls_labels[:, None]

    def ind_label(self) -> np.ndarray:
        return self.label_matches().sum(axis=1)

    def ind_rep(self, tau_cos: float) -> np.ndarray:
        return (self.cosines >= tau_cos).sum(axis=1)

    def label_stat(self) -> np.ndarray:
        return self.ind_label() / self.k

    def rep_stat(self) -> np.ndarray:
        return self.cosines.mean(axis=1)

    def take(self, idx) -> "NeighborScores":
        return NeighborScores(self.cls_labels[idx], self.neighbor_labels[idx], self.cosines[idx])

    def first(self, k: int) -> "NeighborScores":
        """Scores restricted to the first ``k`` neighbors (neighbor streams are per-index)."""
        return NeighborScores(self.cls_labels, self.neighbor_labels[:, :k], self.cosines[:, :k])


def input_seeds(base_seed: int, n: int, offset: int = 0) -> np.ndarray:
    return np.array([base_seed * 1_000_003 + offset + i for i in range(n)], dtype=np.int64)


def score_inputs(bundle: ModelBundle, xs: np.ndarray, k: int = DEFAULT_K,
                 policy: Sequence[AugmentationSpec] | None = None, seeds=None, chunk: int = 8) -> NeighborScores:
    """Classify each input, build its ``k`` neighbors and record SSL labels and cosines."""
    policy = list(default_policy() if policy is None else policy)
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[None]
    seeds = input_seeds(0, len(xs)) if seeds is None else np.asarray(seeds)
    if len(seeds) != len(xs):
        raise DetectorError("one neighbor seed per input required")
    enc, head = bundle.encoder, bundle.head
    cls, nlab, cos = [], [], []
    for s in range(0, len(xs), chunk):
        xb = xs[s:s + chunk]
        cls.append(np.argmax(bundle.classifier(Tensor(xb)).data, axis=1))
        nb = neighbor_batch(xb, k, policy, seeds[s:s + chunk])
        feats = enc.trunk(Tensor(nb))
        nlab.append(np.argmax(head(feats).data, axis=1).reshape(len(xb), k))
        zn = enc.projector(feats).data
        z0 = enc.embed(Tensor(xb)).data
        cos.append(row_cosine_np(np.repeat(z0, k, axis=0), zn).reshape(len(xb), k))
    return NeighborScores(np.concatenate(cls), np.concatenate(nlab), np.concatenate(cos))


@dataclass
class ScoreNormalizer:
    """Empirical CDFs of the clean label/representation statistics.

    Mid-rank ECDF: ``F(s) = (#{c < s} + #{c <= s}) / (2 n)``.
    """

    label_ref: np.ndarray
    rep_ref: np.ndarray

    @staticmethod
    def _ecdf(ref: np.ndarray, s: np.ndarray) -> np.ndarray:
        lo = np.searchsorted(ref, s, side="left")
        hi = np.searchsorted(ref, s, side="right")
        return (lo + hi) / (2.0 * len(ref))

    @classmethod
    def fit(cls, scores: NeighborScores) -> "ScoreNormalizer":
        return cls(np.sort(scores.label_stat()), np.sort(scores.rep_stat()))

    def statistics(self, scores: NeighborScores) -> dict[str, np.ndarray]:
        """Adversarial scores (higher = more suspicious) per mechanism and combined."""
        ls, rs = scores.label_stat(), scores.rep_stat()
        fl = self._ecdf(self.label_ref, ls)
        fr = self._ecdf(self.rep_ref, rs)
        return {"label": 1.0 - ls, "rep": 1.0 - rs, "combined": 1.0 - np.minimum(fl, fr)}


@dataclass
class DetectorThresholds:
    tau_cos: float
    t_label: int
    t_rep: int
    target_fpr: float
    k: int
    calibration_fpr: float = 0.0
    label_fpr: float = 0.0
    rep_fpr: float = 0.0
    normalizer: ScoreNormalizer | None = field(default=None, repr=False)

    def __post_init__(self):
        if not -1.0 <= self.tau_cos <= 1.0:
            raise DetectorError(f"tau_cos {self.tau_cos} outside [-1, 1]")
        if not (0 <= self.t_label <= self.k and 0 <= self.t_rep <= self.k):
            raise DetectorError("count thresholds must lie in [0, k]")

    def reject(self, scores: NeighborScores) -> np.ndarray:
        if scores.k != self.k:
            raise DetectorError(f"neighbor count {scores.k} does not match calibrated k={self.k}")
        return (scores.ind_label() < self.t_label) | (scores.ind_rep(self.tau_cos) < self.t_rep)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("tau_cos", "t_label", "t_rep", "target_fpr", "k",
                                           "calibration_fpr", "label_fpr", "rep_fpr")}
        if self.normalizer is not None:
            d["normalizer"] = {"label_ref": self.normalizer.label_ref.tolist(), "rep_ref": self.normalizer.rep_ref.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorThresholds":
        norm = d.get("normalizer")
        return cls(float(d["tau_cos"]), int(d["t_label"]), int(d["t_rep"]), float(d["target_fpr"]), int(d["k"]),
                   float(d.get("calibration_fpr", 0.0)), float(d.get("label_fpr", 0.0)), float(d.get("rep_fpr", 0.0)),
                   ScoreNormalizer(np.asarray(norm["label_ref"]), np.asarray(norm["rep_ref"])) if norm else None)


def _largest_threshold(counts: np.ndarray, k: int, budget: float) -> tuple[int, float]:
    """Largest integer T in [0, k] whose rejection rate mean(counts < T) stays within budget."""
    best, rate = 0, 0.0
    for t in range(k + 1):
        r = float(np.mean(counts < t))
        if r <= budget + 1e-12:
            best, rate = t, r
    return best, rate


def calibrate_from_scores(scores: NeighborScores, target_fpr: float = 0.05, min_samples: int = 200) -> DetectorThresholds:
    """Clean-only threshold selection; half of the FPR budget goes to each mechanism."""
    if len(scores) < min_samples:
        raise CalibrationError(f"calibration needs >= {min_samples} clean samples, got {len(scores)}")
    k = scores.k
    norm = ScoreNormalizer.fit(scores)
    if target_fpr <= 0:
        return DetectorThresholds(-1.0, 0, 0, target_fpr, k, 0.0, 0.0, 0.0, norm)
    tau = float(np.percentile(scores.cosines, 5.0))
    tau = min(max(tau, -1.0), 1.0)
    t_label, fl = _largest_threshold(scores.ind_label(), k, target_fpr / 2)
    t_rep, fr = _largest_threshold(scores.ind_rep(tau), k, target_fpr / 2)
    th = DetectorThresholds(tau, t_label, t_rep, target_fpr, k, 0.0, fl, fr, norm)
    joint = float(np.mean(th.reject(scores)))
    if joint > target_fpr + 1e-12:
        raise CalibrationError(f"target FPR {target_fpr} unreachable; achieved {joint:.4f}", joint)
    th.calibration_fpr = joint
    return th


def calibrate_thresholds(clean_set: np.ndarray, bundle: ModelBundle, k: int = DEFAULT_K, target_fpr: float = 0.05,
                         policy=None, seeds=None, min_samples: int = 200) -> DetectorThresholds:
    scores = score_inputs(bundle, clean_set, k, policy, seeds)
    return calibrate_from_scores(scores, target_fpr, min_samples)


@dataclass
class DetectionRecord:
    ind_label: int
    ind_rep: int
    verdict: str
    label_matches: list[bool]
    cosines: list[float]

    @property
    def rejected(self) -> bool:
        return self.verdict == "reject"

    def to_dict(self) -> dict:
        return {"ind_label": self.ind_label, "ind_rep": self.ind_rep, "verdict": self.verdict,
                "label_matches": self.label_matches, "cosines": self.cosines}


def records_from_scores(scores: NeighborScores, thresholds: DetectorThresholds) -> list[DetectionRecord]:
    rejected = thresholds.reject(scores)
    il, ir = scores.ind_label(), scores.ind_rep(thresholds.tau_cos)
    matches = scores.label_matches()
    return [
        DetectionRecord(int(il[i]), int(ir[i]), "reject" if rejected[i] else "accept",
                        matches[i].tolist(), scores.cosines[i].tolist())
        for i in range(len(scores))
    ]


def label_consistency_count(x, neighbors, bundle: ModelBundle) -> int:
    """Neighbors whose SSL-head label equals the classifier's label of ``x``."""
    cls = int(np.argmax(bundle.classifier(Tensor(np.asarray(x)[None])).data, axis=1)[0])
    labels = np.argmax(bundle.head(bundle.encoder.trunk(Tensor(neighbors.images))).data, axis=1)
    return int(np.sum(labels == cls))


def representation_similarity_count(x, neighbors, bundle: ModelBundle, tau_cos: float) -> int:
    """Neighbors whose embedding has cosine similarity >= ``tau_cos`` with that of ``x``."""
    z0 = bundle.encoder.embed(Tensor(np.asarray(x)[None])).data
    zn = bundle.encoder.embed(Tensor(neighbors.images)).data
    cos = row_cosine_np(np.repeat(z0, len(zn), axis=0), zn)
    return int(np.sum(cos >= tau_cos))


def detect(x, bundle: ModelBundle, thresholds: DetectorThresholds, seed: int = 0, policy=None,
           k: int | None = None) -> DetectionRecord:
    """Accept/reject one input; rejects when either count falls below its threshold."""
    k = thresholds.k if k is None else k
    if k != thresholds.k:
        raise DetectorError(f"neighbor count {k} does not match calibrated k={thresholds.k}")
    scores = score_inputs(bundle, np.asarray(x)[None], k, policy, [seed])
    return records_from_scores(scores, thresholds)[0]


def detect_batch(xs, bundle: ModelBundle, thresholds: DetectorThresholds, seeds=None, policy=None) -> list[DetectionRecord]:
    scores = score_inputs(bundle, xs, thresholds.k, policy, seeds)
    return records_from_scores(scores, thresholds)
