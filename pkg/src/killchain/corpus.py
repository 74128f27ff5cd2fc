"""Technique ingestion and phase-specific dataset construction.

Ingests STIX-2.1-style bundles of attack-pattern objects, normalizes their
descriptions, assigns each technique the kill chain phase whose anchor
paragraph it is most similar to, and produces seeded stratified splits plus
optional minority-class augmentation of the training split.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .embedding import EmbeddingProvider, TfidfModel, cosine_similarity
from .errors import (
    ConfigError,
    ContractError,
    DegenerateVectorError,
    EmptyTextError,
    ParseError,
)
from .phases import PHASES, Phase

logger = logging.getLogger(__name__)

TECHNIQUE_ID_PATTERN = re.compile(r"T\d{4}(\.\d{3})?$")

_NON_ALNUM = re.compile(r"[^a-z0-9\s]")


@dataclass
class Technique:
    """One attack-pattern from a bundle, with its normalized description."""

    technique_id: str
    name: str
    description: str
    combined_description: str


@dataclass
class LabeledSample:
    """A phase-assigned training unit: text plus its technique label."""

    technique_id: str
    text: str
    label: str
    phase: Phase


@dataclass
class PhaseDataset:
    """All samples of one phase; label_set is the sorted distinct labels."""

    phase: Phase
    samples: list[LabeledSample]
    label_set: list[str] = field(init=False)

    def __post_init__(self) -> None:
        for sample in self.samples:
            if sample.phase != self.phase:
                raise ContractError(
                    f"sample {sample.technique_id} has phase {sample.phase.label}, "
                    f"dataset is {self.phase.label}"
                )
        self.label_set = sorted({s.label for s in self.samples})

    def __len__(self) -> int:
        return len(self.samples)

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sample in self.samples:
            counts[sample.label] = counts.get(sample.label, 0) + 1
        return counts


@dataclass
class CorpusSplit:
    """Seeded train/validation/test partition of one phase dataset."""

    train: PhaseDataset
    validation: PhaseDataset
    test: PhaseDataset
    ratios: tuple[float, float, float]
    seed: int


@dataclass
class AugmentConfig:
    """Knobs for the natively computable augmentation transforms."""

    tfidf_drop_fraction: float = 0.1
    reorder_probability: float = 0.1
    duplication_factor: int = 1
    minority_threshold: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tfidf_drop_fraction < 1.0:
            raise ConfigError(
                f"tfidf_drop_fraction must be in [0, 1), got {self.tfidf_drop_fraction}"
            )
        if not 0.0 <= self.reorder_probability <= 1.0:
            raise ConfigError(
                f"reorder_probability must be in [0, 1], got {self.reorder_probability}"
            )
        if self.duplication_factor < 0:
            raise ConfigError("duplication_factor must be >= 0")


def preprocess(raw: str) -> str:
    """Lowercase, strip everything outside [a-z0-9] to spaces, collapse runs.

    Digits are kept on purpose: identifiers like "c2" and CVE numbers carry
    signal. Idempotent.
    """
    cleaned = " ".join(_NON_ALNUM.sub(" ", raw.lower()).split())
    if not cleaned:
        raise EmptyTextError(f"text {raw[:40]!r} is empty after preprocessing")
    return cleaned


def parse_attack_bundle(
    document: Union[bytes, str], warnings: list[str] | None = None
) -> list[Technique]:
    """Extract live attack-pattern techniques from a STIX-style JSON bundle.

    Revoked/deprecated objects are dropped silently; patterns missing the
    mitre-attack external reference (or an ATT&CK-shaped id, or usable text)
    are skipped and reported through ``warnings`` and the module logger.
    """
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"bundle is not valid UTF-8 at byte {exc.start}") from None
    try:
        root = json.loads(document)
    except json.JSONDecodeError as exc:
        offset = len(document[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON at byte {offset}: {exc.msg}") from None
    if not isinstance(root, dict) or not isinstance(root.get("objects"), list):
        raise ParseError("bundle must be a JSON object with an 'objects' array")

    sink = warnings if warnings is not None else []
    techniques: list[Technique] = []
    seen_ids: set[str] = set()
    for obj in root["objects"]:
        if not isinstance(obj, dict) or obj.get("type") != "attack-pattern":
            continue
        if obj.get("revoked") or obj.get("x_mitre_deprecated"):
            continue
        technique_id = _mitre_external_id(obj)
        name = str(obj.get("name", "")).strip()
        if technique_id is None or not TECHNIQUE_ID_PATTERN.match(technique_id):
            sink.append(
                f"skipped attack-pattern {name or obj.get('id', '?')!r}: "
                "no mitre-attack technique id"
            )
            continue
        if technique_id in seen_ids:
            raise ParseError(f"duplicate technique id {technique_id} in bundle")
        description = str(obj.get("description", ""))
        try:
            combined = preprocess(f"{name} {description}")
        except EmptyTextError:
            sink.append(f"skipped {technique_id}: empty description after preprocessing")
            continue
        seen_ids.add(technique_id)
        techniques.append(
            Technique(
                technique_id=technique_id,
                name=name,
                description=description,
                combined_description=combined,
            )
        )
    if sink and warnings is None:
        logger.warning("bundle parse skipped %d records: %s", len(sink), "; ".join(sink))
    return techniques


def _mitre_external_id(obj: Mapping) -> str | None:
    for ref in obj.get("external_references", []) or []:
        if isinstance(ref, Mapping) and ref.get("source_name") == "mitre-attack":
            external_id = ref.get("external_id")
            return str(external_id) if external_id else None
    return None


def load_anchors(path: Union[str, Path]) -> dict[Phase, str]:
    """Load the per-phase anchor paragraphs: {"Reconnaissance": "...", ...}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"anchor file {path}: malformed JSON ({exc.msg})") from None
    return normalize_anchors(raw)


def normalize_anchors(raw: Mapping) -> dict[Phase, str]:
    anchors: dict[Phase, str] = {}
    for key, value in raw.items():
        phase = key if isinstance(key, Phase) else Phase.from_label(str(key))
        if not isinstance(value, str) or not value.strip():
            raise ConfigError(f"anchor for {phase.label} must be a non-empty string")
        anchors[phase] = value
    missing = [p.label for p in PHASES if p not in anchors]
    if missing:
        raise ConfigError(f"anchor file is missing phases: {missing}")
    return anchors


def anchor_vectors(
    embedder: EmbeddingProvider, anchors: Mapping[Phase, str]
) -> dict[Phase, np.ndarray]:
    """Embed the anchor paragraphs (preprocessed) for similarity routing.

    Table providers resolve anchors under "anchor:<PhaseName>" keys, falling
    back to the content hash of the preprocessed paragraph.
    """
    anchors = normalize_anchors(anchors)
    vectors: dict[Phase, np.ndarray] = {}
    for phase in PHASES:
        text = preprocess(anchors[phase])
        vec = embedder.vector_for(key=f"anchor:{phase.label}", text=text)
        if float(np.linalg.norm(vec)) == 0.0:
            raise DegenerateVectorError(f"anchor for {phase.label} has a zero-norm embedding")
        vectors[phase] = vec
    return vectors


def phase_similarities(
    vector: np.ndarray, anchor_vecs: Mapping[Phase, np.ndarray]
) -> np.ndarray:
    """Cosine similarity of one vector against all seven anchors, in order."""
    return np.array([cosine_similarity(vector, anchor_vecs[p]) for p in PHASES])


def assign_phases(
    techniques: Sequence[Technique],
    embedder: EmbeddingProvider,
    anchors: Mapping[Phase, str],
) -> list[LabeledSample]:
    """Label each technique with the phase of its most-similar anchor.

    Deterministic: exact similarity ties go to the earlier phase, a
    defender-conservative bias.
    """
    anchor_vecs = anchor_vectors(embedder, anchors)
    samples: list[LabeledSample] = []
    for technique in techniques:
        vec = embedder.vector_for(
            key=technique.technique_id, text=technique.combined_description
        )
        if float(np.linalg.norm(vec)) == 0.0:
            raise DegenerateVectorError(
                f"technique {technique.technique_id} has a zero-norm embedding"
            )
        sims = phase_similarities(vec, anchor_vecs)
        phase = PHASES[int(np.argmax(sims))]
        samples.append(
            LabeledSample(
                technique_id=technique.technique_id,
                text=technique.combined_description,
                label=technique.name,
                phase=phase,
            )
        )
    return samples


def split_phase_datasets(samples: Iterable[LabeledSample]) -> dict[Phase, PhaseDataset]:
    """Partition samples by phase, preserving order; all 7 phases present."""
    buckets: dict[Phase, list[LabeledSample]] = {p: [] for p in PHASES}
    for sample in samples:
        buckets[sample.phase].append(sample)
    return {p: PhaseDataset(phase=p, samples=buckets[p]) for p in PHASES}


def _allocate(count: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Per-label allocation: round-half-even on train/test shares, train
    clamped to >= 1, validation takes the remainder."""
    train_n = max(1, round(ratios[0] * count))
    test_n = round(ratios[2] * count)
    if train_n + test_n > count:
        test_n = count - train_n
    return train_n, count - train_n - test_n, test_n


def stratified_split(
    dataset: PhaseDataset,
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> CorpusSplit:
    """Seed-deterministic per-label split; singleton labels go to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if not dataset.samples:
        raise ContractError(f"cannot split empty dataset for phase {dataset.phase.label}")

    by_label: dict[str, list[int]] = {}
    for index, sample in enumerate(dataset.samples):
        by_label.setdefault(sample.label, []).append(index)

    picked: dict[str, set[int]] = {"train": set(), "validation": set(), "test": set()}
    for label in sorted(by_label):
        indices = list(by_label[label])
        rng = random.Random(f"{seed}:{label}")
        rng.shuffle(indices)
        train_n, _, test_n = _allocate(len(indices), ratios)
        picked["train"].update(indices[:train_n])
        picked["test"].update(indices[train_n : train_n + test_n])
        picked["validation"].update(indices[train_n + test_n :])

    def take(which: str) -> PhaseDataset:
        rows = [dataset.samples[i] for i in sorted(picked[which])]
        return PhaseDataset(phase=dataset.phase, samples=rows)

    return CorpusSplit(
        train=take("train"),
        validation=take("validation"),
        test=take("test"),
        ratios=ratios,
        seed=seed,
    )


def augment(dataset: PhaseDataset, tfidf: TfidfModel, config: AugmentConfig) -> PhaseDataset:
    """Emit deterministic variants for minority labels of a training split.

    Each variant drops the floor(drop_fraction * n) lowest-tf-idf token
    occurrences, then sweeps adjacent pairs swapping each with
    reorder_probability. Originals are always kept; variants follow them
    ordered by (sample position, variant index).
    """
    counts = dataset.label_counts()
    out = list(dataset.samples)
    discarded = 0
    for position, sample in enumerate(dataset.samples):
        if counts[sample.label] >= config.minority_threshold:
            continue
        for variant in range(config.duplication_factor):
            rng = random.Random(f"{config.seed}:{position}:{variant}")
            tokens = _drop_low_tfidf(sample.text.split(), tfidf, config.tfidf_drop_fraction)
            for i in range(len(tokens) - 1):
                if rng.random() < config.reorder_probability:
                    tokens[i], tokens[i + 1] = tokens[i + 1], tokens[i]
            if not tokens:
                discarded += 1
                continue
            out.append(
                LabeledSample(
                    technique_id=sample.technique_id,
                    text=" ".join(tokens),
                    label=sample.label,
                    phase=sample.phase,
                )
            )
    if discarded:
        logger.warning("augment discarded %d empty variants", discarded)
    return PhaseDataset(phase=dataset.phase, samples=out)


def _drop_low_tfidf(tokens: list[str], tfidf: TfidfModel, fraction: float) -> list[str]:
    k = math.floor(fraction * len(tokens))
    if k <= 0:
        return list(tokens)
    doc_counts = {token: tokens.count(token) for token in set(tokens)}
    ranked = sorted(
        range(len(tokens)),
        key=lambda i: (tfidf.token_weight(tokens[i], doc_counts[tokens[i]]), i),
    )
    dropped = set(ranked[:k])
    return [token for i, token in enumerate(tokens) if i not in dropped]


def write_dataset(path: Union[str, Path], samples: Iterable[LabeledSample]) -> None:
    """Dataset JSONL: {"technique_id", "label", "phase", "text"} per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            handle.write(
                json.dumps(
                    {
                        "technique_id": sample.technique_id,
                        "label": sample.label,
                        "phase": sample.phase.label,
                        "text": sample.text,
                    }
                )
                + "\n"
            )


def read_dataset(path: Union[str, Path]) -> list[LabeledSample]:
    samples: list[LabeledSample] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                samples.append(
                    LabeledSample(
                        technique_id=str(obj["technique_id"]),
                        text=str(obj["text"]),
                        label=str(obj["label"]),
                        phase=Phase.from_label(obj["phase"]),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return samples
