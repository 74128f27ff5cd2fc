"""Export a probability matrix for a dataset file.

Writes the engine's matrix JSONL format: line 1 is the label header (the
training label set, sorted), then one softmax-normalized row per evaluation
sample. Three classifier modes cover the roles external scorers play:

  trained    a small torch text classifier fitted on the training file
  untrained  the same network at random initialization (near-uniform rows)
  onehot     an oracle that puts probability 1 on the true label
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .data import DatasetRow, read_dataset, require_unique_ids, write_lines_atomic

FEATURE_DIM = 256


def featurize(texts: list[str], max_tokens: int) -> np.ndarray:
    """Hashed bag-of-words features for the torch classifier."""
    out = np.zeros((len(texts), FEATURE_DIM), dtype=np.float32)
    for row, text in enumerate(texts):
        for token in text.split()[:max_tokens]:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            out[row, int.from_bytes(digest[:8], "big") % FEATURE_DIM] += 1.0
        norm = np.linalg.norm(out[row])
        if norm > 0:
            out[row] /= norm
    return out


def _build_network(n_labels: int, seed: int, device: str):
    import torch

    torch.manual_seed(seed)
    model = torch.nn.Sequential(
        torch.nn.Linear(FEATURE_DIM, 64),
        torch.nn.ReLU(),
        torch.nn.Linear(64, n_labels),
    )
    return model.to(device)


def classifier_probabilities(
    train_rows: list[DatasetRow],
    eval_rows: list[DatasetRow],
    labels: list[str],
    mode: str,
    epochs: int,
    batch_size: int,
    max_seq_length: int,
    seed: int,
    device: str,
) -> np.ndarray:
    if mode == "onehot":
        index = {label: i for i, label in enumerate(labels)}
        rows = np.zeros((len(eval_rows), len(labels)))
        for i, row in enumerate(eval_rows):
            rows[i, index[row.label]] = 1.0
        return rows

    import torch

    network = _build_network(len(labels), seed, device)
    eval_features = torch.from_numpy(featurize([r.text for r in eval_rows], max_seq_length))

    if mode == "trained":
        index = {label: i for i, label in enumerate(labels)}
        X = torch.from_numpy(featurize([r.text for r in train_rows], max_seq_length))
        y = torch.tensor([index[r.label] for r in train_rows])
        optimizer = torch.optim.Adam(network.parameters(), lr=1e-2)
        loss_fn = torch.nn.CrossEntropyLoss()
        generator = torch.Generator().manual_seed(seed)
        network.train()
        for _ in range(epochs):
            order = torch.randperm(len(X), generator=generator)
            for start in range(0, len(X), batch_size):
                batch = order[start : start + batch_size]
                optimizer.zero_grad()
                loss = loss_fn(network(X[batch]), y[batch])
                loss.backward()
                optimizer.step()

    network.eval()
    with torch.no_grad():
        probs = torch.softmax(network(eval_features.to(device)), dim=1)
    return probs.cpu().double().numpy()


def export_probability_matrix(
    train_path: str | Path,
    input_path: str | Path,
    output_path: str | Path,
    phase: str,
    mode: str = "trained",
    epochs: int = 40,
    batch_size: int = 16,
    max_seq_length: int = 128,
    seed: int = 0,
    device: str = "cpu",
) -> int:
    train_rows = read_dataset(train_path)
    eval_rows = read_dataset(input_path)
    require_unique_ids(eval_rows, input_path)

    labels = sorted({row.label for row in train_rows})
    eval_labels = {row.label for row in eval_rows}
    if not eval_labels <= set(labels):
        difference = sorted(eval_labels.symmetric_difference(labels))
        raise SystemExit(
            f"classifier labels do not cover the evaluation set; "
            f"symmetric difference: {difference}"
        )

    rows = classifier_probabilities(
        train_rows, eval_rows, labels, mode, epochs, batch_size,
        max_seq_length, seed, device,
    )
    # renormalize in float64 so the engine's strict row-sum check passes
    # without any renormalization on its side
    rows = rows / rows.sum(axis=1, keepdims=True)

    lines = [json.dumps({"labels": labels, "phase": phase})]
    for sample, row in zip(eval_rows, rows):
        probs = {label: float(p) for label, p in zip(labels, row)}
        lines.append(json.dumps({"sample_id": sample.technique_id, "probs": probs}))
    write_lines_atomic(output_path, lines)
    print(
        f"wrote {len(eval_rows)} rows x {len(labels)} labels ({mode}) to {output_path}",
        file=sys.stderr,
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--train", required=True, help="training dataset JSONL")
    parser.add_argument("--input", required=True, help="dataset JSONL to score")
    parser.add_argument("--output", required=True, help="matrix file to write")
    parser.add_argument("--phase", required=True, help="phase name for the header")
    parser.add_argument("--mode", choices=("trained", "untrained", "onehot"),
                        default="trained")
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--max-seq-length", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    return export_probability_matrix(
        args.train,
        args.input,
        args.output,
        args.phase,
        mode=args.mode,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_seq_length=args.max_seq_length,
        seed=args.seed,
        device=args.device,
    )


if __name__ == "__main__":
    raise SystemExit(main())
