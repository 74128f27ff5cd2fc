"""Free-text adversarial narratives to kill chain graphs.

Sentences are segmented (periods inside versions and identifiers do not
split), routed to phases by anchor similarity with near-tie duplication, and
each routed phase's ensemble contributes its top candidate techniques to the
semantic graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .chain_graph import ChainGraph, build_semantic_graph, import_graph_json
from .corpus import anchor_vectors, phase_similarities, preprocess
from .ensemble import EnsembleWeights, soft_vote
from .errors import ContractError, EmptyTextError, KillchainError
from .phases import PHASES, Phase
from .scorers import ScorerHandle, score

# A sentence belongs to both of its top-2 phases when their similarities are
# this close.
NEAR_TIE_GAP = 0.02

_TERMINATORS = ".!?;"


@dataclass
class NarrativeSegment:
    """One routed sentence: preprocessed text, its phase, and the anchor
    similarity that put it there. ``index`` is the source sentence position;
    near-tied sentences appear once per phase."""

    text: str
    phase: Phase
    similarity: float
    index: int


@dataclass
class PredictedTechnique:
    label: str
    description: str
    probability: float
    segment_index: int
    scorer_probs: dict[str, float]


@dataclass
class PhaseBundle:
    """Everything needed to predict techniques for one phase."""

    phase: Phase
    scorers: list[tuple[ScorerHandle, object]]
    weights: EnsembleWeights
    label_descriptions: dict[str, str]


@dataclass
class ChainRun:
    """A full narrative run with enough recorded state to replay it."""

    narrative: str
    segments: list[NarrativeSegment]
    predictions: dict[Phase, list[PredictedTechnique]]
    graph: ChainGraph
    config: dict

    def to_json(self) -> str:
        from .chain_graph import export_json

        document = {
            "narrative": self.narrative,
            "segments": [
                {
                    "index": s.index,
                    "text": s.text,
                    "phase": s.phase.label,
                    "similarity": s.similarity,
                }
                for s in self.segments
            ],
            "predictions": {
                phase.label: [
                    {
                        "label": p.label,
                        "description": p.description,
                        "probability": p.probability,
                        "segment_index": p.segment_index,
                        "scorer_probs": p.scorer_probs,
                    }
                    for p in self.predictions[phase]
                ]
                for phase in sorted(self.predictions, key=int)
            },
            "graph": json.loads(export_json(self.graph)),
            "config": self.config,
        }
        return json.dumps(document, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChainRun":
        obj = json.loads(text)
        return cls(
            narrative=obj["narrative"],
            segments=[
                NarrativeSegment(
                    text=s["text"],
                    phase=Phase.from_label(s["phase"]),
                    similarity=float(s["similarity"]),
                    index=int(s["index"]),
                )
                for s in obj["segments"]
            ],
            predictions={
                Phase.from_label(name): [
                    PredictedTechnique(
                        label=p["label"],
                        description=p["description"],
                        probability=float(p["probability"]),
                        segment_index=int(p["segment_index"]),
                        scorer_probs={k: float(v) for k, v in p["scorer_probs"].items()},
                    )
                    for p in rows
                ]
                for name, rows in obj["predictions"].items()
            },
            graph=import_graph_json(json.dumps(obj["graph"])),
            config=obj["config"],
        )


def segment(text: str) -> list[str]:
    """Split on sentence terminators, preprocess, and drop empties.

    A period flanked by digits (versions, CVE-style identifiers, dotted IPs)
    does not end a sentence.
    """
    if not text or not text.strip():
        raise ContractError("narrative text is empty")
    raw_segments: list[str] = []
    buffer: list[str] = []
    for i, char in enumerate(text):
        buffer.append(char)
        if char in _TERMINATORS:
            if (
                char == "."
                and 0 < i < len(text) - 1
                and text[i - 1].isdigit()
                and text[i + 1].isdigit()
            ):
                continue
            raw_segments.append("".join(buffer))
            buffer = []
    if buffer:
        raw_segments.append("".join(buffer))

    segments = []
    for raw in raw_segments:
        try:
            segments.append(preprocess(raw))
        except EmptyTextError:
            continue
    if not segments:
        raise ContractError("narrative yielded zero non-empty segments")
    return segments


def assign_segment_phases(
    segments: Sequence[str],
    embedder,
    anchors: Mapping[Phase, str],
) -> list[NarrativeSegment]:
    """Route each segment to its most-similar anchor's phase; when the top
    two similarities differ by less than NEAR_TIE_GAP the segment goes to
    both phases (earlier phase first on exact ties)."""
    anchor_vecs = anchor_vectors(embedder, anchors)
    routed: list[NarrativeSegment] = []
    for index, text in enumerate(segments):
        vec = embedder.vector_for(text=text)
        if float(np.linalg.norm(vec)) == 0.0:
            raise ContractError(f"segment {index} has a zero-norm embedding: {text!r}")
        sims = phase_similarities(vec, anchor_vecs)
        order = sorted(range(7), key=lambda i: (-sims[i], i))
        top = order[0]
        routed.append(
            NarrativeSegment(
                text=text, phase=PHASES[top], similarity=float(sims[top]), index=index
            )
        )
        runner_up = order[1]
        if sims[top] - sims[runner_up] < NEAR_TIE_GAP:
            routed.append(
                NarrativeSegment(
                    text=text,
                    phase=PHASES[runner_up],
                    similarity=float(sims[runner_up]),
                    index=index,
                )
            )
    return routed


def run_narrative(
    text: str,
    bundles: Mapping[Phase, PhaseBundle],
    embedder,
    anchors: Mapping[Phase, str],
    tau: float,
    k_pred: int = 3,
) -> ChainRun:
    """Segment, route, predict top-k techniques per routed phase, and build
    the cross-phase graph. Deterministic for fixed models and inputs."""
    if k_pred < 1:
        raise ContractError(f"k_pred must be >= 1, got {k_pred}")
    segments = assign_segment_phases(segment(text), embedder, anchors)

    by_phase: dict[Phase, list[NarrativeSegment]] = {}
    for seg in segments:
        by_phase.setdefault(seg.phase, []).append(seg)

    predictions: dict[Phase, list[PredictedTechnique]] = {}
    for phase in sorted(by_phase, key=int):
        bundle = bundles.get(phase)
        if bundle is None:
            raise ContractError(
                f"narrative routed a segment to {phase.label} but no scorer "
                "bundle exists for that phase"
            )
        phase_segments = by_phase[phase]
        sample_ids = [f"segment-{seg.index}" for seg in phase_segments]
        vectors = []
        for seg in phase_segments:
            try:
                vectors.append(embedder.vector_for(text=seg.text))
            except KillchainError as exc:
                raise ContractError(
                    f"{phase.label}: cannot embed segment {seg.index}: {exc}"
                ) from exc
        vectors = np.asarray(vectors)

        matrices = {
            handle.name: score(handle, model, sample_ids, vectors)
            for handle, model in bundle.scorers
        }
        vote = soft_vote(matrices, bundle.weights)

        best: dict[str, PredictedTechnique] = {}
        for row_index, seg in enumerate(phase_segments):
            row = vote.matrix.rows[row_index]
            ranked = sorted(
                zip(vote.matrix.labels, row), key=lambda lp: (-lp[1], lp[0])
            )
            for label, prob in ranked[:k_pred]:
                description = bundle.label_descriptions.get(label)
                if description is None:
                    raise ContractError(
                        f"{phase.label}: no stored description for predicted "
                        f"label {label!r}"
                    )
                candidate = PredictedTechnique(
                    label=label,
                    description=description,
                    probability=float(prob),
                    segment_index=seg.index,
                    scorer_probs={
                        name: float(
                            matrices[name].rows[row_index][
                                matrices[name].labels.index(label)
                            ]
                        )
                        for name in sorted(matrices)
                    },
                )
                held = best.get(label)
                if held is None or candidate.probability > held.probability:
                    best[label] = candidate
        predictions[phase] = sorted(
            best.values(), key=lambda p: (-p.probability, p.label)
        )

    per_phase_nodes = {
        phase: [(p.label, p.description) for p in rows]
        for phase, rows in predictions.items()
    }
    graph = build_semantic_graph(per_phase_nodes, embedder, tau)

    return ChainRun(
        narrative=text,
        segments=segments,
        predictions=predictions,
        graph=graph,
        config={"tau": tau, "k_pred": k_pred},
    )
