"""Directed semantic graph linking predicted techniques across adjacent
phases, plus ranked maximal-path extraction and DOT/JSON export.

An edge exists from a phase-t node to a phase-(t+1) node exactly when the
cosine similarity of their description embeddings is >= tau. Paths are ranked
by the sum of log-similarities over their edges, which decomposes over the
DAG and makes exact k-best dynamic programming possible.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import cosine_similarity
from .errors import ConfigError, ContractError, DegenerateVectorError
from .phases import PHASES, Phase


@dataclass(eq=False)
class ChainNode:
    phase: Phase
    label: str
    description: str
    embedding: np.ndarray

    @property
    def key(self) -> tuple[int, str]:
        return (int(self.phase), self.label)

    def __repr__(self) -> str:  # pragma: no cover
        return f"ChainNode({self.phase.label}, {self.label!r})"


@dataclass(eq=False)
class ChainEdge:
    source: ChainNode
    target: ChainNode
    similarity: float


@dataclass(eq=False)
class ChainGraph:
    nodes: list[ChainNode]
    edges: list[ChainEdge]
    tau: float
    _out: dict[tuple[int, str], list[ChainEdge]] = field(init=False, repr=False)
    _in_degree: dict[tuple[int, str], int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._out = {node.key: [] for node in self.nodes}
        self._in_degree = {node.key: 0 for node in self.nodes}
        for edge in self.edges:
            if edge.target.phase != edge.source.phase + 1:
                raise ContractError(
                    f"edge {edge.source.label} -> {edge.target.label} skips phases"
                )
            self._out[edge.source.key].append(edge)
            self._in_degree[edge.target.key] += 1

    def layer(self, phase: Phase) -> list[ChainNode]:
        return [node for node in self.nodes if node.phase == phase]

    def out_edges(self, node: ChainNode) -> list[ChainEdge]:
        return self._out[node.key]

    def in_degree(self, node: ChainNode) -> int:
        return self._in_degree[node.key]

    def edge_set(self) -> set[tuple[tuple[int, str], tuple[int, str]]]:
        return {(e.source.key, e.target.key) for e in self.edges}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChainGraph):
            return NotImplemented
        if self.tau != other.tau or len(self.nodes) != len(other.nodes):
            return False
        mine = {n.key: n for n in self.nodes}
        theirs = {n.key: n for n in other.nodes}
        if mine.keys() != theirs.keys():
            return False
        for key, node in mine.items():
            twin = theirs[key]
            if node.description != twin.description:
                return False
            if not np.array_equal(node.embedding, twin.embedding):
                return False
        my_edges = {(e.source.key, e.target.key): e.similarity for e in self.edges}
        their_edges = {(e.source.key, e.target.key): e.similarity for e in other.edges}
        return my_edges == their_edges


@dataclass
class AttackPath:
    """A maximal phase-ordered walk; score is the sum of ln(similarity)."""

    nodes: list[ChainNode]
    score: float

    @property
    def start_phase(self) -> Phase:
        return self.nodes[0].phase

    @property
    def end_phase(self) -> Phase:
        return self.nodes[-1].phase

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(node.label for node in self.nodes)


def build_semantic_graph(
    per_phase_predictions: Mapping[Phase, Sequence[tuple[str, str]]],
    embedder,
    tau: float,
) -> ChainGraph:
    """Embed every predicted (label, description) and connect adjacent-phase
    pairs whose cosine similarity reaches tau (inclusive)."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")

    layers: dict[Phase, list[ChainNode]] = {p: [] for p in PHASES}
    for phase in sorted(per_phase_predictions, key=int):
        seen: set[str] = set()
        for label, description in per_phase_predictions[phase]:
            if label in seen:
                raise ContractError(
                    f"duplicate prediction {label!r} in phase {phase.label}"
                )
            seen.add(label)
            try:
                vec = embedder.vector_for(key=label, text=description)
            except DegenerateVectorError:
                raise
            except Exception as exc:
                raise DegenerateVectorError(
                    f"cannot embed node {label!r} in {phase.label}: {exc}"
                ) from exc
            if float(np.linalg.norm(vec)) == 0.0:
                raise DegenerateVectorError(
                    f"node {label!r} in {phase.label} has a zero-norm embedding"
                )
            layers[phase].append(
                ChainNode(phase=phase, label=label, description=description, embedding=vec)
            )

    nodes: list[ChainNode] = []
    for phase in PHASES:
        nodes.extend(sorted(layers[phase], key=lambda n: n.label))

    edges: list[ChainEdge] = []
    for phase in PHASES[:-1]:
        next_phase = Phase(phase + 1)
        for source in sorted(layers[phase], key=lambda n: n.label):
            for target in sorted(layers[next_phase], key=lambda n: n.label):
                similarity = cosine_similarity(source.embedding, target.embedding)
                if similarity >= tau:
                    edges.append(
                        ChainEdge(source=source, target=target, similarity=similarity)
                    )
    return ChainGraph(nodes=nodes, edges=edges, tau=tau)


def extract_paths(graph: ChainGraph, k: int) -> list[AttackPath]:
    """Top-k maximal paths by descending log-similarity score.

    A maximal path runs from an in-degree-0 node to an out-degree-0 node
    (isolated nodes count as single-node paths with score 0). Exact k-best
    per node is computed layer by layer from the last phase backwards; ties
    rank by the lexicographic label sequence.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not graph.nodes:
        return []

    # suffixes[key] = k best (score, labels, nodes) paths starting at key
    suffixes: dict[tuple[int, str], list[tuple[float, tuple[str, ...], tuple[ChainNode, ...]]]] = {}
    for phase in reversed(PHASES):
        for node in graph.layer(phase):
            out = graph.out_edges(node)
            if not out:
                suffixes[node.key] = [(0.0, (node.label,), (node,))]
                continue
            merged = []
            for edge in out:
                step = math.log(edge.similarity)
                for score, labels, path_nodes in suffixes[edge.target.key]:
                    merged.append(
                        (step + score, (node.label,) + labels, (node,) + path_nodes)
                    )
            merged.sort(key=lambda t: (-t[0], t[1]))
            suffixes[node.key] = merged[:k]

    results = []
    for node in graph.nodes:
        if graph.in_degree(node) == 0:
            results.extend(suffixes[node.key])
    results.sort(key=lambda t: (-t[0], t[1]))
    return [AttackPath(nodes=list(nodes), score=score) for score, _, nodes in results[:k]]


_DOT_UNSAFE = re.compile(r"[^A-Za-z0-9_]")


def _dot_id(node: ChainNode, position: int) -> str:
    return f"p{int(node.phase)}_{position}_{_DOT_UNSAFE.sub('_', node.label.lower())}"


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: ChainGraph, highlighted_path: AttackPath | None = None) -> str:
    """Graphviz digraph with one cluster per phase in kill chain order.

    Edge labels carry similarities rounded to 3 decimals; edges on the
    highlighted path get a distinct color and pen width. Byte-deterministic.
    """
    ids: dict[tuple[int, str], str] = {}
    for phase in PHASES:
        for position, node in enumerate(graph.layer(phase)):
            ids[node.key] = _dot_id(node, position)

    highlight: set[tuple[tuple[int, str], tuple[int, str]]] = set()
    if highlighted_path is not None:
        for a, b in zip(highlighted_path.nodes, highlighted_path.nodes[1:]):
            highlight.add((a.key, b.key))

    lines = ["digraph killchain {", "  rankdir=LR;", "  node [shape=box];"]
    for phase in PHASES:
        lines.append(f"  subgraph cluster_{int(phase)} {{")
        lines.append(f"    label={_dot_quote(phase.label)};")
        for node in graph.layer(phase):
            lines.append(f"    {ids[node.key]} [label={_dot_quote(node.label)}];")
        lines.append("  }")
    for edge in graph.edges:
        attrs = [f'label="{edge.similarity:.3f}"']
        if (edge.source.key, edge.target.key) in highlight:
            attrs.append('color="crimson"')
            attrs.append('penwidth="2.0"')
        lines.append(
            f"  {ids[edge.source.key]} -> {ids[edge.target.key]} [{', '.join(attrs)}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(graph: ChainGraph, paths: Sequence[AttackPath] = ()) -> str:
    """JSON document {nodes, edges, tau, paths}; floats serialize at full
    precision so similarities and embeddings round-trip bit-exact."""
    document = {
        "tau": graph.tau,
        "nodes": [
            {
                "phase": node.phase.label,
                "label": node.label,
                "description": node.description,
                "embedding": [float(x) for x in node.embedding],
            }
            for node in graph.nodes
        ],
        "edges": [
            {
                "source": {"phase": e.source.phase.label, "label": e.source.label},
                "target": {"phase": e.target.phase.label, "label": e.target.label},
                "similarity": e.similarity,
            }
            for e in graph.edges
        ],
        "paths": [
            {
                "score": path.score,
                "start_phase": path.start_phase.label,
                "end_phase": path.end_phase.label,
                "nodes": [
                    {"phase": n.phase.label, "label": n.label} for n in path.nodes
                ],
            }
            for path in paths
        ],
    }
    return json.dumps(document, indent=2) + "\n"


def import_graph_json(text: str) -> ChainGraph:
    obj = json.loads(text)
    nodes = [
        ChainNode(
            phase=Phase.from_label(n["phase"]),
            label=n["label"],
            description=n["description"],
            embedding=np.asarray(n["embedding"], dtype=float),
        )
        for n in obj["nodes"]
    ]
    by_key = {node.key: node for node in nodes}
    edges = [
        ChainEdge(
            source=by_key[(int(Phase.from_label(e["source"]["phase"])), e["source"]["label"])],
            target=by_key[(int(Phase.from_label(e["target"]["phase"])), e["target"]["label"])],
            similarity=float(e["similarity"]),
        )
        for e in obj["edges"]
    ]
    return ChainGraph(nodes=nodes, edges=edges, tau=float(obj["tau"]))
