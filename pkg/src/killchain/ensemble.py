"""Weighted soft voting and the evaluation metrics behind the weights.

Fused probability for class c is the weight-sum of each scorer's probability
for c; weights are normalized to the simplex and set proportional to each
scorer's validation macro-F1, per phase.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError
from .phases import Phase
from .scorers import ProbabilityMatrix

logger = logging.getLogger(__name__)


@dataclass
class EvaluationReport:
    """Accuracy plus macro precision/recall/F1 with per-label confusion counts.

    Per-label 0/0 ratios are defined as 0; macro metrics are unweighted means
    over the full label set.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: dict[str, dict[str, int]]  # label -> {tp, fp, fn, support}
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1_score": self.f1,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvaluationReport":
        return cls(
            accuracy=float(obj["accuracy"]),
            precision=float(obj["precision"]),
            recall=float(obj["recall"]),
            f1=float(obj["f1_score"]),
            confusion={k: dict(v) for k, v in obj["confusion"].items()},
            n_samples=int(obj["n_samples"]),
        )


@dataclass
class EnsembleWeights:
    """Per-phase scorer weights on the simplex, with their F1 provenance."""

    phase: Phase
    weights: dict[str, float]
    provenance: dict[str, float]

    def __post_init__(self) -> None:
        if not self.weights:
            raise ContractError("ensemble weights cannot be empty")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"weights sum to {total!r}, not 1")
        if any(w < 0 for w in self.weights.values()):
            raise ContractError("weights must be non-negative")

    def to_json(self) -> str:
        return json.dumps(
            {
                "phase": self.phase.label,
                "weights": {k: self.weights[k] for k in sorted(self.weights)},
                "f1_provenance": {k: self.provenance[k] for k in sorted(self.provenance)},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "EnsembleWeights":
        obj = json.loads(text)
        return cls(
            phase=Phase.from_label(obj["phase"]),
            weights={k: float(v) for k, v in obj["weights"].items()},
            provenance={k: float(v) for k, v in obj["f1_provenance"].items()},
        )


@dataclass
class VoteResult:
    matrix: ProbabilityMatrix
    predictions: list[str]


def evaluate(
    predictions: Sequence[str], truth: Sequence[str], label_set: Sequence[str]
) -> EvaluationReport:
    """Confusion-count metrics over the full label set."""
    if not predictions or len(predictions) != len(truth):
        raise ContractError(
            f"need equal non-empty prediction/truth lists, got "
            f"{len(predictions)}/{len(truth)}"
        )
    labels = list(label_set)
    known = set(labels)
    stray = sorted({x for x in list(predictions) + list(truth) if x not in known})
    if stray:
        raise ContractError(f"labels outside label_set: {stray}")

    confusion = {}
    for label in labels:
        tp = sum(1 for p, t in zip(predictions, truth) if p == label and t == label)
        fp = sum(1 for p, t in zip(predictions, truth) if p == label and t != label)
        fn = sum(1 for p, t in zip(predictions, truth) if p != label and t == label)
        confusion[label] = {"tp": tp, "fp": fp, "fn": fn, "support": tp + fn}

    def safe(num, den):
        return num / den if den else 0.0

    precisions, recalls, f1s = [], [], []
    for label in labels:
        c = confusion[label]
        p = safe(c["tp"], c["tp"] + c["fp"])
        r = safe(c["tp"], c["tp"] + c["fn"])
        precisions.append(p)
        recalls.append(r)
        f1s.append(safe(2 * p * r, p + r))

    n = len(truth)
    return EvaluationReport(
        accuracy=sum(1 for p, t in zip(predictions, truth) if p == t) / n,
        precision=sum(precisions) / len(labels),
        recall=sum(recalls) / len(labels),
        f1=sum(f1s) / len(labels),
        confusion=confusion,
        n_samples=n,
    )


def fit_weights(
    phase: Phase, validation_reports: Mapping[str, EvaluationReport]
) -> EnsembleWeights:
    """Weights proportional to validation macro-F1; uniform if all are zero."""
    if not validation_reports:
        raise ContractError("need at least one scorer report")
    f1s = {name: report.f1 for name, report in validation_reports.items()}
    total = sum(f1s.values())
    if total == 0.0:
        logger.warning(
            "phase %s: every scorer has zero validation F1, using uniform weights",
            phase.label,
        )
        weights = {name: 1.0 / len(f1s) for name in f1s}
    else:
        weights = {name: f1 / total for name, f1 in f1s.items()}
    return EnsembleWeights(phase=phase, weights=weights, provenance=f1s)


def soft_vote(
    matrices: Mapping[str, ProbabilityMatrix], weights: EnsembleWeights
) -> VoteResult:
    """Fuse aligned scorer matrices by weighted average and take the argmax,
    breaking exact ties toward the lexicographically smallest label."""
    names = sorted(matrices)
    if set(names) != set(weights.weights):
        raise ContractError(
            f"weights cover {sorted(weights.weights)}, matrices cover {names}"
        )
    reference = matrices[names[0]]
    for name in names[1:]:
        other = matrices[name]
        if other.sample_ids != reference.sample_ids:
            for i, (a, b) in enumerate(zip(reference.sample_ids, other.sample_ids)):
                if a != b:
                    raise ContractError(
                        f"scorer {name!r} sample_ids[{i}] = {b!r} != {a!r}"
                    )
            raise ContractError(f"scorer {name!r} covers a different sample set")
        if other.labels != reference.labels:
            raise ContractError(
                f"scorer {name!r} labels {other.labels} != {reference.labels}"
            )

    fused = np.zeros_like(np.asarray(reference.rows, dtype=float))
    for name in names:
        fused += weights.weights[name] * np.asarray(matrices[name].rows, dtype=float)
    result = ProbabilityMatrix(
        sample_ids=list(reference.sample_ids),
        labels=list(reference.labels),
        rows=fused,
    ).validate()
    return VoteResult(matrix=result, predictions=result.argmax_labels())
