"""Calibration, selective prediction, OOD detection and uncertainty decomposition.

Conventions: 15 equal-width confidence bins, half-open [lo, hi) with the last
bin closed; probabilities floored at 1e-12 inside logs; AUROC ties count 1/2;
entropies in nats; coverage grid 0.00, 0.01, ..., 1.00.
"""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import entr
from scipy.stats import rankdata

N_BINS = 15
NLL_FLOOR = 1e-12
PROB_SUM_TOL = 1e-9
COVERAGE_GRID = tuple(np.round(np.linspace(0.0, 1.0, 101), 2))
OOD_SCORES = ("entropy", "mutual_information")
SELECTIVE_SCORES = ("entropy", "max_prob")
BIN_COLUMNS = ["bin_low", "bin_high", "mean_conf", "mean_acc", "count"]


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    probs: np.ndarray
    label: int
    per_sample_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probs must be a normalised probability vector, got {probs}")
        if not 0 <= int(self.label) < probs.size:
            raise ValueError(f"Label {self.label} out of range for {probs.size} classes")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "label", int(self.label))
        if self.per_sample_probs is not None:
            table = np.asarray(self.per_sample_probs, dtype=np.float64)
            if table.ndim != 2 or table.shape[1] != probs.size:
                raise ValueError(f"per_sample_probs must be S x {probs.size}, got {table.shape}")
            object.__setattr__(self, "per_sample_probs", table)


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    brier: float
    nll: float
    bins: tuple

    def to_dict(self):
        return {"ece": self.ece, "brier": self.brier, "nll": self.nll,
                "bins": [dict(zip(BIN_COLUMNS, b)) for b in self.bins]}


@dataclass(frozen=True)
class UncertaintyDecomposition:
    total: float
    aleatoric: float
    epistemic: float


def records_from_arrays(probs, labels, per_sample_probs=None):
    """PredictionRecords from an (n, C) predictive, labels and an optional (S, n, C) table."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError(f"{probs.shape[0]} predictions but {labels.shape[0]} labels")
    tables = [None] * len(labels) if per_sample_probs is None else np.swapaxes(per_sample_probs, 0, 1)
    return [PredictionRecord(p, y, t) for p, y, t in zip(probs, labels, tables)]


def _stack(records):
    probs = np.array([r.probs for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=int)
    return probs, labels


def entropy(probs):
    """Shannon entropy in nats along the last axis."""
    return np.sum(entr(np.asarray(probs, dtype=np.float64)), axis=-1)


def correctness(records):
    probs, labels = _stack(records)
    return np.argmax(probs, axis=1) == labels


def brier(records):
    probs, labels = _stack(records)
    if not len(labels):
        return 0.0
    onehot = np.eye(probs.shape[1])[labels]
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def nll(records):
    probs, labels = _stack(records)
    if not len(labels):
        return 0.0
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, NLL_FLOOR))))


def reliability_bins(confidence, correct, n_bins=N_BINS):
    """(low, high, mean_conf, mean_acc, count) per bin; empty bins carry None means."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    index = np.clip(np.searchsorted(edges, confidence, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = index == b
        count = int(np.sum(mask))
        if count:
            bins.append((float(edges[b]), float(edges[b + 1]),
                         float(np.mean(confidence[mask])), float(np.mean(correct[mask])), count))
        else:
            bins.append((float(edges[b]), float(edges[b + 1]), None, None, 0))
    return tuple(bins)


def ece(records, n_bins=N_BINS):
    """Expected calibration error with equal-width bins, plus Brier and NLL of the same records."""
    if not records:
        raise ValueError("ECE needs at least one record")
    probs, labels = _stack(records)
    confidence = np.max(probs, axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    bins = reliability_bins(confidence, correct, n_bins)
    n = len(labels)
    gap = sum(count / n * abs(acc - conf) for _, _, conf, acc, count in bins if count)
    return CalibrationReport(ece=float(gap), brier=brier(records), nll=nll(records), bins=bins)


def _rank_auroc(scores, positive):
    """Mann-Whitney AUROC: P(score of a positive > score of a negative), ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(np.sum(positive))
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUROC is undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    return float((np.sum(ranks[positive]) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def selective_auroc(uncertainty, correct):
    """How well the uncertainty ranks incorrect predictions above correct ones."""
    return _rank_auroc(uncertainty, ~np.asarray(correct, dtype=bool))


def ood_auroc(entropy_id, entropy_ood):
    entropy_id = np.asarray(entropy_id, dtype=np.float64)
    entropy_ood = np.asarray(entropy_ood, dtype=np.float64)
    if entropy_id.size == 0 or entropy_ood.size == 0:
        raise ValueError("OOD AUROC needs in-distribution and OOD scores")
    scores = np.concatenate([entropy_id, entropy_ood])
    return _rank_auroc(scores, np.arange(scores.size) >= entropy_id.size)


def accuracy_coverage(uncertainty, correct, grid=COVERAGE_GRID):
    """Accuracy over the most certain ceil(c * n) examples (at least one) for each coverage c."""
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = uncertainty.size
    if n == 0:
        return []
    hits = np.cumsum(correct[np.argsort(uncertainty, kind="stable")])
    curve = []
    for c in grid:
        keep = max(1, int(math.ceil(c * n - 1e-9)))
        curve.append((float(c), float(hits[keep - 1] / keep)))
    return curve


def accuracy_at_coverage(curve, coverage):
    for c, accuracy in curve:
        if abs(c - coverage) < 1e-9:
            return accuracy
    raise ValueError(f"Coverage {coverage} is not on the curve grid")


def decompose_batch(per_sample_probs):
    """Per-example (total, aleatoric, epistemic) from an (S, n, C) table."""
    table = np.asarray(per_sample_probs, dtype=np.float64)
    if table.ndim != 3 or table.shape[0] < 1:
        raise ValueError(f"Expected an (S, n, C) table, got shape {table.shape}")
    total = entropy(np.mean(table, axis=0))
    aleatoric = np.mean(entropy(table), axis=0)
    return total, aleatoric, total - aleatoric


def decompose_uncertainty(per_sample_probs):
    table = np.asarray(per_sample_probs, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError(f"Expected an S x C table, got shape {table.shape}")
    total, aleatoric, epistemic = decompose_batch(table[:, None, :])
    return UncertaintyDecomposition(float(total[0]), float(aleatoric[0]), float(epistemic[0]))


def epistemic_fraction(total, epistemic):
    mean_total = float(np.mean(total))
    return float(np.mean(epistemic)) / mean_total if mean_total > 0 else 0.0


def uncertainty_scores(probs, per_sample_probs=None, score="entropy"):
    """Per-example uncertainty: predictive entropy, 1 - max probability, or mutual information."""
    if score == "entropy":
        return entropy(probs)
    if score == "max_prob":
        return 1.0 - np.max(probs, axis=1)
    if score == "mutual_information":
        if per_sample_probs is None:
            raise ValueError("Mutual information needs per-sample probabilities")
        return decompose_batch(per_sample_probs)[2]
    raise ValueError(f"Unknown uncertainty score '{score}'")


def reliability_bins_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BIN_COLUMNS)
        for row in report.bins:
            writer.writerow(["" if v is None else v for v in row])


def split_metrics(probs, labels, per_sample_probs=None, n_bins=N_BINS, selective_score="entropy", tag="eval"):
    """All calibration and selective-prediction metrics of one split, as a flat dict."""
    records = records_from_arrays(probs, labels)
    report = ece(records, n_bins)
    correct = correctness(records)
    uncertainty = uncertainty_scores(probs, per_sample_probs, selective_score)
    try:
        sel_auroc = selective_auroc(uncertainty, correct)
    except ValueError as e:
        logging.warning(f"[{tag}] Selective AUROC undefined: {e}")
        sel_auroc = None
    curve = accuracy_coverage(uncertainty, correct)
    metrics = {
        "accuracy": float(np.mean(correct)),
        "ece": report.ece,
        "brier": report.brier,
        "nll": report.nll,
        "selective_auroc": sel_auroc,
        "acc_at_80": accuracy_at_coverage(curve, 0.8),
        "acc_at_50": accuracy_at_coverage(curve, 0.5),
        "mean_entropy": float(np.mean(entropy(probs))),
    }
    if per_sample_probs is not None:
        total, aleatoric, epistemic = decompose_batch(per_sample_probs)
        metrics.update({
            "total_uncertainty": float(np.mean(total)),
            "aleatoric": float(np.mean(aleatoric)),
            "epistemic": float(np.mean(epistemic)),
            "epistemic_fraction": epistemic_fraction(total, epistemic),
        })
    return metrics, report, curve
