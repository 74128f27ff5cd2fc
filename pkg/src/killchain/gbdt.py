"""Native multiclass gradient-boosted decision trees over embeddings.

Histogram-based boosting: features are quantile-binned once, each round fits
one leaf-wise tree per label on softmax gradient/hessian statistics, and
early stopping tracks validation log loss. Deliberately small: exactly what
the per-phase classifiers need, nothing more.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError

if TYPE_CHECKING:  # pragma: no cover
    from .corpus import PhaseDataset

logger = logging.getLogger(__name__)

_PROB_FLOOR = 1e-15
_FORMAT_TAG = "killchain-gbdt-v1"


@dataclass
class GbdtConfig:
    """Training hyperparameters. The documented sweep grid is num_leaves
    31..100, learning_rate {0.01, 0.05, 0.1, 0.2}, max_depth 5..25 and
    n_estimators 100..400; values outside the grid are legal."""

    num_leaves: int = 31
    learning_rate: float = 0.05
    max_depth: int = 8
    n_estimators: int = 200
    l2_reg: float = 1e-8
    early_stopping_rounds: int = 20
    max_bins: int = 64
    class_weighting: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_leaves < 2:
            raise ConfigError(f"num_leaves must be >= 2, got {self.num_leaves}")
        if self.max_depth < 0:
            raise ConfigError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.n_estimators < 1:
            raise ConfigError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if self.l2_reg < 0:
            raise ConfigError(f"l2_reg must be >= 0, got {self.l2_reg}")
        if self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be >= 1")
        if self.max_bins < 2:
            raise ConfigError(f"max_bins must be >= 2, got {self.max_bins}")
        if not 0.0 <= self.learning_rate:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class DecisionTree:
    """Binary tree over binned features, stored as parallel node arrays.

    Internal nodes route ``bin <= threshold_bin`` left; leaves carry the
    boosting output value and have feature -1.
    """

    feature: list[int]
    threshold_bin: list[int]
    left: list[int]
    right: list[int]
    value: list[float]

    def apply(self, binned: np.ndarray) -> np.ndarray:
        """Leaf values for a (n, d) matrix of binned features."""
        out = np.zeros(len(binned))
        stack = [(0, np.arange(len(binned)))]
        while stack:
            node, idx = stack.pop()
            if idx.size == 0:
                continue
            f = self.feature[node]
            if f < 0:
                out[idx] = self.value[node]
                continue
            goes_left = binned[idx, f] <= self.threshold_bin[node]
            stack.append((self.left[node], idx[goes_left]))
            stack.append((self.right[node], idx[~goes_left]))
        return out

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)


@dataclass
class TrainReport:
    """Per-round loss traces; index 0 is the prior-only model."""

    train_loss: list[float]
    validation_loss: list[float]
    stopping_reason: str
    class_weights: dict[str, float]


@dataclass
class GbdtModel:
    classes: list[str]
    bin_edges: list[np.ndarray]
    base_scores: np.ndarray
    trees: list[list[DecisionTree]]  # trees[round][class]
    best_round: int
    config: GbdtConfig

    @property
    def dim(self) -> int:
        return len(self.bin_edges)

    def bin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ContractError(
                f"embedding dimension {X.shape[1]} != training dimension {self.dim}"
            )
        binned = np.empty(X.shape, dtype=np.int32)
        for j, edges in enumerate(self.bin_edges):
            binned[:, j] = np.searchsorted(edges, X[:, j], side="left")
        return binned

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        binned = self.bin(X)
        scores = np.tile(self.base_scores, (len(binned), 1))
        for round_trees in self.trees[: self.best_round]:
            for k, tree in enumerate(round_trees):
                scores[:, k] += tree.apply(binned)
        return scores

    def predict_proba_batch(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.decision_scores(X))

    def predict_proba(self, embedding: np.ndarray) -> np.ndarray:
        return self.predict_proba_batch(np.atleast_2d(embedding))[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": _FORMAT_TAG,
                "config": asdict(self.config),
                "classes": self.classes,
                "bin_edges": [[float(e) for e in edges] for edges in self.bin_edges],
                "base_scores": [float(s) for s in self.base_scores],
                "best_round": self.best_round,
                "trees": [
                    [
                        {
                            "feature": tree.feature,
                            "threshold_bin": tree.threshold_bin,
                            "left": tree.left,
                            "right": tree.right,
                            "value": tree.value,
                        }
                        for tree in round_trees
                    ]
                    for round_trees in self.trees
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        obj = json.loads(text)
        if obj.get("format") != _FORMAT_TAG:
            raise ParseError(f"unsupported model format {obj.get('format')!r}")
        return cls(
            classes=list(obj["classes"]),
            bin_edges=[np.asarray(e, dtype=float) for e in obj["bin_edges"]],
            base_scores=np.asarray(obj["base_scores"], dtype=float),
            trees=[
                [
                    DecisionTree(
                        feature=list(t["feature"]),
                        threshold_bin=list(t["threshold_bin"]),
                        left=list(t["left"]),
                        right=list(t["right"]),
                        value=[float(v) for v in t["value"]],
                    )
                    for t in round_trees
                ]
                for round_trees in obj["trees"]
            ],
            best_round=int(obj["best_round"]),
            config=GbdtConfig(**obj["config"]),
        )


def class_weights(labels: Sequence[str]) -> dict[str, float]:
    """Balanced weights n / (K * count); mean sample weight is exactly 1."""
    if not labels:
        raise ContractError("cannot weight an empty label list")
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    n, k = len(labels), len(counts)
    return {label: n / (k * count) for label, count in counts.items()}


def multiclass_log_loss(
    probabilities, labels: Sequence[str], weights: Sequence[float] | None = None
) -> float:
    """Negative (weighted) mean log of the true-label probability.

    ``probabilities`` is anything with ``labels`` and ``rows`` attributes
    (a ProbabilityMatrix); rows must sum to 1 within 1e-6 and are floored at
    1e-15 before the log.
    """
    rows = np.asarray(probabilities.rows, dtype=float)
    column_order = list(probabilities.labels)
    if len(labels) != len(rows):
        raise ContractError(f"{len(labels)} labels for {len(rows)} probability rows")
    sums = rows.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise ContractError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    index = {label: i for i, label in enumerate(column_order)}
    try:
        true_cols = [index[label] for label in labels]
    except KeyError as exc:
        raise ContractError(f"label {exc.args[0]!r} absent from matrix columns") from None
    p_true = np.maximum(rows[np.arange(len(rows)), true_cols], _PROB_FLOOR)
    log_losses = -np.log(p_true)
    if weights is None:
        return float(np.mean(log_losses))
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * log_losses) / np.sum(w))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _bin_edges_for_feature(values: np.ndarray, max_bins: int) -> np.ndarray:
    unique = np.unique(values)
    if unique.size <= 1:
        return np.empty(0)
    if unique.size <= max_bins:
        return (unique[:-1] + unique[1:]) / 2.0
    quantiles = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
    return np.unique(np.quantile(values, quantiles))


def _grow_tree(
    binned: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    config: GbdtConfig,
    n_bins: int,
) -> DecisionTree:
    """Leaf-wise growth by maximal split gain, bounded by num_leaves and
    max_depth; non-positive-gain splits and empty children are rejected."""
    n, d = binned.shape
    lam = config.l2_reg
    offsets = (np.arange(d) * n_bins).astype(np.int64)

    nodes: list[dict] = []

    def new_node(idx: np.ndarray, depth: int) -> int:
        nodes.append(
            {
                "idx": idx,
                "depth": depth,
                "G": float(grad[idx].sum()),
                "H": float(hess[idx].sum()),
                "feature": -1,
                "threshold_bin": -1,
                "left": -1,
                "right": -1,
            }
        )
        return len(nodes) - 1

    def best_split(node_id: int):
        node = nodes[node_id]
        idx = node["idx"]
        if idx.size < 2 or node["depth"] >= config.max_depth or n_bins < 2:
            return None
        flat = (binned[idx].astype(np.int64) + offsets).ravel()
        g_hist = np.bincount(flat, weights=np.repeat(grad[idx], d), minlength=d * n_bins)
        h_hist = np.bincount(flat, weights=np.repeat(hess[idx], d), minlength=d * n_bins)
        c_hist = np.bincount(flat, minlength=d * n_bins)
        g_hist = g_hist.reshape(d, n_bins)
        h_hist = h_hist.reshape(d, n_bins)
        c_hist = c_hist.reshape(d, n_bins)

        gl = np.cumsum(g_hist, axis=1)[:, :-1]
        hl = np.cumsum(h_hist, axis=1)[:, :-1]
        cl = np.cumsum(c_hist, axis=1)[:, :-1]
        gr = node["G"] - gl
        hr = node["H"] - hl
        cr = idx.size - cl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (
                gl * gl / (hl + lam)
                + gr * gr / (hr + lam)
                - node["G"] * node["G"] / (node["H"] + lam)
            )
        gain[(cl < 1) | (cr < 1)] = -np.inf
        gain[~np.isfinite(gain)] = -np.inf
        best_flat = int(np.argmax(gain))
        best_gain = float(gain.ravel()[best_flat])
        if best_gain <= 0.0:
            return None
        return best_gain, best_flat // (n_bins - 1), best_flat % (n_bins - 1)

    root = new_node(np.arange(n), 0)
    heap: list[tuple[float, int, int, tuple[int, int]]] = []
    counter = 0
    candidate = best_split(root)
    if candidate is not None:
        gain, f, b = candidate
        heapq.heappush(heap, (-gain, counter, root, (f, b)))
        counter += 1

    n_leaves = 1
    while heap and n_leaves < config.num_leaves:
        _, _, node_id, (f, b) = heapq.heappop(heap)
        node = nodes[node_id]
        idx = node["idx"]
        goes_left = binned[idx, f] <= b
        left_id = new_node(idx[goes_left], node["depth"] + 1)
        right_id = new_node(idx[~goes_left], node["depth"] + 1)
        node.update(feature=f, threshold_bin=b, left=left_id, right=right_id, idx=None)
        n_leaves += 1
        for child in (left_id, right_id):
            candidate = best_split(child)
            if candidate is not None:
                gain, cf, cb = candidate
                heapq.heappush(heap, (-gain, counter, child, (cf, cb)))
                counter += 1

    lr = config.learning_rate
    return DecisionTree(
        feature=[n["feature"] for n in nodes],
        threshold_bin=[n["threshold_bin"] for n in nodes],
        left=[n["left"] for n in nodes],
        right=[n["right"] for n in nodes],
        value=[
            0.0 if n["feature"] >= 0 else lr * (-n["G"]) / (n["H"] + lam) for n in nodes
        ],
    )


def _scores_log_loss(
    scores: np.ndarray, y_idx: np.ndarray, sample_weights: np.ndarray | None
) -> float:
    probs = _softmax(scores)
    p_true = np.maximum(probs[np.arange(len(y_idx)), y_idx], _PROB_FLOOR)
    losses = -np.log(p_true)
    if sample_weights is None:
        return float(losses.mean())
    return float(np.sum(sample_weights * losses) / np.sum(sample_weights))


def train(
    train_set: "PhaseDataset",
    train_vectors: np.ndarray,
    config: GbdtConfig,
    validation_set: "PhaseDataset | None" = None,
    validation_vectors: np.ndarray | None = None,
) -> tuple[GbdtModel, TrainReport]:
    """Boost until n_estimators rounds or validation loss stalls for
    early_stopping_rounds; fully deterministic for fixed inputs and config."""
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
    class_index = {label: i for i, label in enumerate(classes)}
    y_idx = np.array([class_index[s.label] for s in train_set.samples])
    y_onehot = np.zeros((n, k))
    y_onehot[np.arange(n), y_idx] = 1.0

    if config.class_weighting:
        cw = class_weights([s.label for s in train_set.samples])
    else:
        cw = {label: 1.0 for label in classes}
    w = np.array([cw[s.label] for s in train_set.samples])

    # Unweighted class priors; weighting acts through the gradient statistics.
    priors = np.bincount(y_idx, minlength=k) / n
    base_scores = np.log(priors)

    edges = [_bin_edges_for_feature(X[:, j], config.max_bins) for j in range(d)]
    n_bins = max(len(e) for e in edges) + 1
    binned = np.empty((n, d), dtype=np.int32)
    for j in range(d):
        binned[:, j] = np.searchsorted(edges[j], X[:, j], side="left")

    has_validation = validation_set is not None and len(validation_set.samples) > 0
    if has_validation:
        Xv = np.asarray(validation_vectors, dtype=float)
        if Xv.ndim != 2 or len(Xv) != len(validation_set.samples):
            raise ContractError("validation_vectors must be (n_samples, dim)")
        if Xv.shape[1] != d:
            raise ContractError(
                f"validation dimension {Xv.shape[1]} != training dimension {d}"
            )
        unknown = [s.label for s in validation_set.samples if s.label not in class_index]
        if unknown:
            raise ContractError(f"validation labels {sorted(set(unknown))} unseen in training")
        yv_idx = np.array([class_index[s.label] for s in validation_set.samples])
        binned_val = np.empty(Xv.shape, dtype=np.int32)
        for j in range(d):
            binned_val[:, j] = np.searchsorted(edges[j], Xv[:, j], side="left")
        scores_val = np.tile(base_scores, (len(Xv), 1))
    else:
        logger.warning(
            "phase %s: empty validation set, early stopping disabled",
            train_set.phase.label,
        )

    scores = np.tile(base_scores, (n, 1))
    train_losses = [_scores_log_loss(scores, y_idx, w)]
    val_losses: list[float] = []
    if has_validation:
        val_losses.append(_scores_log_loss(scores_val, yv_idx, None))

    trees: list[list[DecisionTree]] = []
    best_round = 0
    best_val = val_losses[0] if has_validation else np.inf
    stopping_reason = "completed_all_rounds" if has_validation else "no_validation"

    for round_number in range(1, config.n_estimators + 1):
        probs = _softmax(scores)
        round_trees: list[DecisionTree] = []
        for class_k in range(k):
            grad = w * (probs[:, class_k] - y_onehot[:, class_k])
            hess = w * probs[:, class_k] * (1.0 - probs[:, class_k])
            tree = _grow_tree(binned, grad, hess, config, n_bins)
            scores[:, class_k] += tree.apply(binned)
            if has_validation:
                scores_val[:, class_k] += tree.apply(binned_val)
            round_trees.append(tree)
        trees.append(round_trees)
        train_losses.append(_scores_log_loss(scores, y_idx, w))
        if has_validation:
            val_loss = _scores_log_loss(scores_val, yv_idx, None)
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_round = round_number
            elif round_number - best_round >= config.early_stopping_rounds:
                stopping_reason = "early_stopping"
                break

    if not has_validation:
        best_round = len(trees)

    model = GbdtModel(
        classes=list(classes),
        bin_edges=edges,
        base_scores=base_scores,
        trees=trees,
        best_round=best_round,
        config=config,
    )
    report = TrainReport(
        train_loss=train_losses,
        validation_loss=val_losses,
        stopping_reason=stopping_reason,
        class_weights=cw,
    )
    return model, report


def predict_proba(model: GbdtModel, embedding: np.ndarray) -> np.ndarray:
    """Probability vector over model.classes for one embedding."""
    return model.predict_proba(embedding)
