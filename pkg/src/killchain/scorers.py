"""Uniform scorer surface: everything that feeds the ensemble emits a
ProbabilityMatrix.

Native scorers are the GBDT and a softmax-regression stand-in (so weighted
voting is exercisable with two scorers and zero external files); external
scorers contribute precomputed matrices loaded from JSON Lines.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np

from .corpus import PhaseDataset
from .errors import ContractError, CoverageError, DivergenceError, ParseError
from .gbdt import class_weights, _softmax
from .phases import Phase

logger = logging.getLogger(__name__)

ScorerKind = Literal["native-gbdt", "native-softmax", "external"]

_ROW_SUM_TOLERANCE = 1e-6
_SOFTMAX_FORMAT = "killchain-softmax-v1"


@dataclass
class ProbabilityMatrix:
    """Sample x label grid of class probabilities.

    The interchange currency between scorers and the ensemble; every instance
    is revalidated at the module boundary rather than trusted.
    """

    sample_ids: list[str]
    labels: list[str]
    rows: np.ndarray

    def validate(self) -> "ProbabilityMatrix":
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape != (len(self.sample_ids), len(self.labels)):
            raise ContractError(
                f"matrix shape {rows.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.labels)} labels"
            )
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ContractError("duplicate sample ids in matrix")
        if len(set(self.labels)) != len(self.labels):
            raise ContractError("duplicate labels in matrix")
        if rows.size:
            if not np.all(np.isfinite(rows)):
                raise ContractError("non-finite probability in matrix")
            if rows.min() < -1e-12 or rows.max() > 1.0 + 1e-12:
                raise ContractError("probability outside [0, 1]")
            sums = rows.sum(axis=1)
            bad = np.where(np.abs(sums - 1.0) > _ROW_SUM_TOLERANCE)[0]
            if bad.size:
                raise ContractError(
                    f"row for sample {self.sample_ids[bad[0]]!r} sums to "
                    f"{sums[bad[0]]!r}, not 1"
                )
        self.rows = rows
        return self

    def argmax_labels(self) -> list[str]:
        """Per-row argmax label; exact ties go to the lexicographically
        smallest label."""
        out = []
        for row in self.rows:
            top = row.max()
            out.append(min(label for label, p in zip(self.labels, row) if p == top))
        return out

    def row_for(self, sample_id: str) -> np.ndarray:
        try:
            return self.rows[self.sample_ids.index(sample_id)]
        except ValueError:
            raise ContractError(f"matrix has no row for sample {sample_id!r}") from None


@dataclass
class ScorerHandle:
    name: str
    kind: ScorerKind
    phase: Phase


@dataclass
class SoftmaxRegressionModel:
    """Multinomial logistic regression trained by full-batch gradient descent."""

    weights: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    classes: list[str]
    losses: list[float] = field(default_factory=list)

    def predict_proba_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weights.shape[1]:
            raise ContractError(
                f"embedding dimension {X.shape[1]} != model dimension "
                f"{self.weights.shape[1]}"
            )
        return _softmax(X @ self.weights.T + self.bias)

    def predict_proba(self, embedding: np.ndarray) -> np.ndarray:
        return self.predict_proba_batch(np.atleast_2d(embedding))[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": _SOFTMAX_FORMAT,
                "classes": self.classes,
                "weights": [[float(v) for v in row] for row in self.weights],
                "bias": [float(v) for v in self.bias],
                "losses": [float(v) for v in self.losses],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SoftmaxRegressionModel":
        obj = json.loads(text)
        if obj.get("format") != _SOFTMAX_FORMAT:
            raise ParseError(f"unsupported model format {obj.get('format')!r}")
        return cls(
            weights=np.asarray(obj["weights"], dtype=float),
            bias=np.asarray(obj["bias"], dtype=float),
            classes=list(obj["classes"]),
            losses=[float(v) for v in obj["losses"]],
        )


def softmax_loss_and_grads(
    X: np.ndarray,
    y_onehot: np.ndarray,
    sample_weights: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted cross-entropy plus (l2/2)*||W||^2 (bias unregularized), with
    its exact analytic gradients."""
    probs = _softmax(X @ weights.T + bias)
    total_weight = float(sample_weights.sum())
    p_true = np.maximum((probs * y_onehot).sum(axis=1), 1e-15)
    loss = float(np.sum(sample_weights * -np.log(p_true)) / total_weight)
    loss += 0.5 * l2 * float(np.sum(weights * weights))
    delta = (probs - y_onehot) * sample_weights[:, None] / total_weight
    grad_w = delta.T @ X + l2 * weights
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


def train_softmax_regression(
    train_set: PhaseDataset,
    train_vectors: np.ndarray,
    epochs: int = 300,
    learning_rate: float = 0.5,
    l2: float = 1e-4,
    seed: int = 0,
) -> SoftmaxRegressionModel:
    """Deterministic full-batch gradient descent on class-weighted log loss."""
    classes = train_set.label_set
    if len(classes) < 2:
        raise ContractError(
            f"phase {train_set.phase.label} has {len(classes)} label(s); need >= 2"
        )
    X = np.asarray(train_vectors, dtype=float)
    if X.ndim != 2 or len(X) != len(train_set.samples):
        raise ContractError("train_vectors must be (n_samples, dim)")
    n, d = X.shape
    k = len(classes)
    index = {label: i for i, label in enumerate(classes)}
    y_onehot = np.zeros((n, k))
    y_onehot[np.arange(n), [index[s.label] for s in train_set.samples]] = 1.0
    cw = class_weights([s.label for s in train_set.samples])
    sample_weights = np.array([cw[s.label] for s in train_set.samples])

    rng = np.random.default_rng(seed)
    weights = rng.normal(scale=0.01, size=(k, d))
    bias = np.zeros(k)

    losses = []
    for _ in range(epochs):
        loss, grad_w, grad_b = softmax_loss_and_grads(
            X, y_onehot, sample_weights, weights, bias, l2
        )
        if not np.isfinite(loss):
            raise DivergenceError(
                f"softmax training diverged (loss={loss}); try a smaller learning_rate"
            )
        losses.append(loss)
        weights = weights - learning_rate * grad_w
        bias = bias - learning_rate * grad_b
    final_loss, _, _ = softmax_loss_and_grads(
        X, y_onehot, sample_weights, weights, bias, l2
    )
    if not np.isfinite(final_loss):
        raise DivergenceError("softmax training diverged; try a smaller learning_rate")
    losses.append(final_loss)
    return SoftmaxRegressionModel(
        weights=weights, bias=bias, classes=list(classes), losses=losses
    )


def score(
    handle: ScorerHandle,
    model,
    sample_ids: Sequence[str],
    vectors: np.ndarray | None,
) -> ProbabilityMatrix:
    """Score samples (one row each, input order) with a trained native model,
    or pass an external matrix through reordered to ``sample_ids``."""
    ids = list(sample_ids)
    if handle.kind == "external":
        if not isinstance(model, ProbabilityMatrix):
            raise ContractError("external scorer needs a loaded ProbabilityMatrix")
        return reorder_matrix(model, expected_sample_ids=ids).validate()
    rows = model.predict_proba_batch(np.asarray(vectors, dtype=float))
    return ProbabilityMatrix(
        sample_ids=ids, labels=list(model.classes), rows=rows
    ).validate()


def score_texts(
    handle: ScorerHandle,
    model,
    id_text_pairs: Sequence[tuple[str, str]],
    embedder,
) -> ProbabilityMatrix:
    """Like :func:`score` but embeds texts, naming the failing sample."""
    vectors = []
    for sample_id, text in id_text_pairs:
        try:
            vectors.append(embedder.vector_for(key=sample_id, text=text))
        except Exception as exc:
            raise ContractError(f"cannot embed sample {sample_id!r}: {exc}") from exc
    ids = [sample_id for sample_id, _ in id_text_pairs]
    return score(handle, model, ids, np.asarray(vectors))


def reorder_matrix(
    matrix: ProbabilityMatrix,
    expected_labels: Sequence[str] | None = None,
    expected_sample_ids: Sequence[str] | None = None,
) -> ProbabilityMatrix:
    """Reorder rows/columns to the expected orders, enforcing exact coverage."""
    rows = np.asarray(matrix.rows, dtype=float)
    labels = list(matrix.labels)
    ids = list(matrix.sample_ids)
    if expected_labels is not None:
        expected_labels = list(expected_labels)
        if set(expected_labels) != set(labels):
            missing = sorted(set(expected_labels) - set(labels))
            unknown = sorted(set(labels) - set(expected_labels))
            raise ParseError(
                f"label set mismatch: missing {missing}, unknown {unknown}"
            )
        order = [labels.index(label) for label in expected_labels]
        rows = rows[:, order]
        labels = expected_labels
    if expected_sample_ids is not None:
        expected_sample_ids = list(expected_sample_ids)
        missing = [s for s in expected_sample_ids if s not in set(ids)]
        if missing:
            raise CoverageError(f"matrix is missing samples: {missing}")
        extra = sorted(set(ids) - set(expected_sample_ids))
        if extra:
            raise CoverageError(f"matrix covers unexpected samples: {extra}")
        order = [ids.index(s) for s in expected_sample_ids]
        rows = rows[order]
        ids = expected_sample_ids
    return ProbabilityMatrix(sample_ids=ids, labels=labels, rows=rows)


def load_probability_matrix(
    path: Union[str, Path],
    expected_labels: Sequence[str],
    expected_sample_ids: Sequence[str],
) -> ProbabilityMatrix:
    """Load a matrix file and canonicalize it to the expected orders.

    Format: line 1 is the header {"labels": [...], "phase": ...}; every other
    line is {"sample_id": ..., "probs": {label: p, ...}}. Row sums beyond
    1e-6 of 1, unknown labels, and coverage gaps are all rejected; nothing is
    renormalized.
    """
    path = Path(path)
    header: dict | None = None
    ids: list[str] = []
    rows: list[list[float]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path.name}: line {lineno}: malformed JSON ({exc.msg})")
            if header is None:
                if not isinstance(obj, dict) or "labels" not in obj:
                    raise ParseError(
                        f"{path.name}: line 1 must be the labels header"
                    )
                header = obj
                header_labels = list(obj["labels"])
                if len(set(header_labels)) != len(header_labels):
                    raise ParseError(f"{path.name}: duplicate label in header")
                unknown = sorted(set(header_labels) - set(expected_labels))
                if unknown:
                    raise ParseError(f"{path.name}: unknown labels {unknown}")
                missing = sorted(set(expected_labels) - set(header_labels))
                if missing:
                    raise ParseError(f"{path.name}: header missing labels {missing}")
                continue
            sample_id = obj.get("sample_id")
            probs = obj.get("probs")
            if not isinstance(sample_id, str) or not isinstance(probs, dict):
                raise ParseError(
                    f"{path.name}: line {lineno}: need 'sample_id' and 'probs'"
                )
            if sample_id in set(ids):
                raise ParseError(f"{path.name}: duplicate sample {sample_id!r}")
            if set(probs) != set(header_labels):
                raise ParseError(
                    f"{path.name}: line {lineno}: probs keys do not match the header"
                )
            values = [float(probs[label]) for label in header_labels]
            total = sum(values)
            if abs(total - 1.0) > _ROW_SUM_TOLERANCE:
                raise ParseError(
                    f"{path.name}: line {lineno}: row sums to {total!r}, not 1"
                )
            ids.append(sample_id)
            rows.append(values)
    if header is None:
        raise ParseError(f"{path.name}: empty matrix file")
    matrix = ProbabilityMatrix(
        sample_ids=ids, labels=header_labels, rows=np.asarray(rows, dtype=float)
    )
    return reorder_matrix(
        matrix,
        expected_labels=expected_labels,
        expected_sample_ids=expected_sample_ids,
    ).validate()


def write_probability_matrix(
    path: Union[str, Path], matrix: ProbabilityMatrix, phase: Phase
) -> None:
    matrix.validate()
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write(json.dumps({"labels": matrix.labels, "phase": phase.label}) + "\n")
        for sample_id, row in zip(matrix.sample_ids, matrix.rows):
            probs = {label: float(p) for label, p in zip(matrix.labels, row)}
            handle.write(json.dumps({"sample_id": sample_id, "probs": probs}) + "\n")
