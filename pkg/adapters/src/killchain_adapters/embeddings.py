"""Export an embedding table for a dataset file.

Writes the engine's JSON Lines table format: an optional provenance header
followed by one {"key", "vector"} line per sample, keyed by sample id. The
encoder is either a sentence-transformers model id (loaded locally) or the
built-in deterministic "hash:<dim>" encoder, which needs no model files and
exists for tests and air-gapped runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .data import read_dataset, require_unique_ids, write_lines_atomic


def hash_encode(texts: list[str], dim: int, max_tokens: int) -> np.ndarray:
    """L2-normalized hashed bag-of-words; deterministic and model-free."""
    out = np.zeros((len(texts), dim))
    for row, text in enumerate(texts):
        for token in text.split()[:max_tokens]:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            index = int.from_bytes(digest[:8], "big") % dim
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            out[row, index] += sign
        norm = np.linalg.norm(out[row])
        if norm > 0:
            out[row] /= norm
    return out


def encode(
    texts: list[str], model: str, batch_size: int, max_seq_length: int, device: str
) -> np.ndarray:
    if model.startswith("hash:"):
        try:
            dim = int(model.split(":", 1)[1])
        except ValueError:
            raise SystemExit(f"bad hash encoder spec {model!r}; use hash:<dim>")
        if dim < 1:
            raise SystemExit(f"hash encoder dimension must be >= 1, got {dim}")
        return hash_encode(texts, dim, max_tokens=max_seq_length)
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError:
        raise SystemExit(
            f"sentence-transformers is not installed; cannot load {model!r} "
            "(use the hash:<dim> encoder for a model-free export)"
        )
    try:
        encoder = SentenceTransformer(model, device=device)
    except Exception as exc:
        raise SystemExit(f"failed to load encoder {model!r}: {exc}")
    encoder.max_seq_length = max_seq_length
    vectors = encoder.encode(
        texts, batch_size=batch_size, convert_to_numpy=True, show_progress_bar=False
    )
    return np.asarray(vectors, dtype=float)


def export_embeddings(
    input_path: str | Path,
    output_path: str | Path,
    model: str,
    batch_size: int = 32,
    max_seq_length: int = 128,
    device: str = "cpu",
    anchors_path: str | Path | None = None,
) -> int:
    rows = read_dataset(input_path)
    require_unique_ids(rows, input_path)
    keys = [row.technique_id for row in rows]
    texts = [row.text for row in rows]

    if anchors_path is not None:
        anchors = json.loads(Path(anchors_path).read_text(encoding="utf-8"))
        for name in sorted(anchors):
            keys.append(f"anchor:{name}")
            texts.append(str(anchors[name]))

    vectors = encode(texts, model, batch_size, max_seq_length, device)
    if vectors.ndim != 2 or len(vectors) != len(keys):
        raise SystemExit(f"encoder returned shape {vectors.shape} for {len(keys)} texts")
    if not np.all(np.isfinite(vectors)):
        raise SystemExit("encoder produced non-finite values")

    lines = [json.dumps({"source": model})]
    for key, vector in zip(keys, vectors):
        lines.append(json.dumps({"key": key, "vector": [float(x) for x in vector]}))
    write_lines_atomic(output_path, lines)
    print(
        f"wrote {len(keys)} vectors (dim {vectors.shape[1]}) to {output_path}",
        file=sys.stderr,
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--input", required=True, help="engine dataset JSONL")
    parser.add_argument("--output", required=True, help="embedding table to write")
    parser.add_argument(
        "--model",
        required=True,
        help="sentence-transformers model id, or hash:<dim> for the built-in encoder",
    )
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--max-seq-length", type=int, default=128)
    parser.add_argument("--device", default="cpu")
    parser.add_argument(
        "--anchors", help="optional anchors JSON; adds anchor:<Phase> entries"
    )
    args = parser.parse_args(argv)
    return export_embeddings(
        args.input,
        args.output,
        args.model,
        batch_size=args.batch_size,
        max_seq_length=args.max_seq_length,
        device=args.device,
        anchors_path=args.anchors,
    )


if __name__ == "__main__":
    raise SystemExit(main())
