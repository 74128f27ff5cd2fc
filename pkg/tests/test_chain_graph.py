import json
import math

import numpy as np
import pytest

from killchain.chain_graph import (
    ChainEdge,
    ChainGraph,
    ChainNode,
    build_semantic_graph,
    export_dot,
    export_json,
    extract_paths,
    import_graph_json,
)
from killchain.embedding import EmbeddingTable
from killchain.errors import ConfigError, ContractError, DegenerateVectorError
from killchain.phases import PHASES, Phase


def label_table(vectors):
    """Embedding provider keyed directly by node label."""
    dim = len(next(iter(vectors.values())))
    return EmbeddingTable(
        dim=dim, entries={k: np.asarray(v, dtype=float) for k, v in vectors.items()}
    )


def predictions_from(vectors_by_phase):
    """{phase: {label: vec}} -> (per_phase_predictions, embedder)."""
    per_phase = {
        phase: [(label, f"description of {label}") for label in sorted(labels)]
        for phase, labels in vectors_by_phase.items()
    }
    flat = {}
    for labels in vectors_by_phase.values():
        flat.update(labels)
    return per_phase, label_table(flat)


def brute_force_edges(vectors_by_phase, tau):
    """Independent O(n^2) oracle over all adjacent-phase pairs."""
    edges = set()
    for phase, labels in vectors_by_phase.items():
        next_phase = Phase(phase + 1) if phase < 7 else None
        if next_phase is None or next_phase not in vectors_by_phase:
            continue
        for a, va in labels.items():
            for b, vb in vectors_by_phase[next_phase].items():
                sim = float(
                    np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb))
                )
                if min(1.0, max(-1.0, sim)) >= tau:
                    edges.add(((int(phase), a), (int(next_phase), b)))
    return edges


def enumerate_maximal_paths(graph):
    """Exhaustive DFS oracle: all source-to-sink paths with ln-sum scores."""
    paths = []

    def walk(node, acc_nodes, acc_score):
        out = graph.out_edges(node)
        if not out:
            paths.append((acc_score, tuple(n.label for n in acc_nodes), list(acc_nodes)))
            return
        for edge in out:
            walk(edge.target, acc_nodes + [edge.target], acc_score + math.log(edge.similarity))

    for node in graph.nodes:
        if graph.in_degree(node) == 0:
            walk(node, [node], 0.0)
    paths.sort(key=lambda t: (-t[0], t[1]))
    return paths


def clustered_fixture(rng, phases, nodes_per_phase, dim=4, spread=0.35):
    base = rng.normal(size=dim)
    base /= np.linalg.norm(base)
    vectors_by_phase = {}
    for phase in phases:
        labels = {}
        for i in range(nodes_per_phase):
            vec = base + spread * rng.normal(size=dim)
            labels[f"{phase.label.lower()}-{i}"] = vec / np.linalg.norm(vec)
        vectors_by_phase[phase] = labels
    return vectors_by_phase


class TestBuild:
    def test_identical_embeddings_one_edge(self):
        per_phase, table = predictions_from(
            {
                Phase.RECONNAISSANCE: {"scan": np.array([1.0, 2.0])},
                Phase.WEAPONIZATION: {"forge": np.array([1.0, 2.0])},
            }
        )
        graph = build_semantic_graph(per_phase, table, tau=0.9)
        assert len(graph.edges) == 1
        assert graph.edges[0].similarity == 1.0

    def test_tau_one_boundary_excludes_lower_sims(self):
        per_phase, table = predictions_from(
            {
                Phase.RECONNAISSANCE: {"scan": np.array([1.0, 0.0])},
                Phase.WEAPONIZATION: {"forge": np.array([1.0, 0.2])},
            }
        )
        graph = build_semantic_graph(per_phase, table, tau=1.0)
        assert graph.edges == []

    def test_non_adjacent_phases_never_connect(self):
        per_phase, table = predictions_from(
            {
                Phase.RECONNAISSANCE: {"scan": np.array([1.0, 0.0])},
                Phase.EXPLOITATION: {"pop": np.array([1.0, 0.0])},
            }
        )
        graph = build_semantic_graph(per_phase, table, tau=0.5)
        assert graph.edges == []
        assert len(graph.nodes) == 2

    def test_seven_phase_fixture_matches_oracle(self):
        rng = np.random.default_rng(21)
        vectors_by_phase = clustered_fixture(rng, PHASES, nodes_per_phase=3)
        per_phase, table = predictions_from(vectors_by_phase)
        graph = build_semantic_graph(per_phase, table, tau=0.8)
        assert graph.edge_set() == brute_force_edges(vectors_by_phase, 0.8)

    def test_random_fixtures_oracle_and_monotonicity(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            n_phases = int(rng.integers(2, 8))
            phases = PHASES[:n_phases]
            vectors_by_phase = clustered_fixture(
                rng, phases, nodes_per_phase=int(rng.integers(1, 5))
            )
            per_phase, table = predictions_from(vectors_by_phase)
            edge_sets = {}
            for tau in (0.7, 0.8, 0.9):
                graph = build_semantic_graph(per_phase, table, tau=tau)
                assert graph.edge_set() == brute_force_edges(vectors_by_phase, tau)
                edge_sets[tau] = graph.edge_set()
            assert edge_sets[0.9] <= edge_sets[0.8] <= edge_sets[0.7]

    def test_scale_invariance(self):
        # power-of-two scale: exact in IEEE arithmetic, so similarities must
        # be bit-identical; arbitrary scales still may not flip edge decisions
        rng = np.random.default_rng(5)
        vectors_by_phase = clustered_fixture(rng, PHASES[:3], nodes_per_phase=2)
        per_phase, table = predictions_from(vectors_by_phase)
        base_graph = build_semantic_graph(per_phase, table, tau=0.75)
        for alpha, exact in ((8.0, True), (11.0, False)):
            scaled = {
                phase: {label: alpha * vec for label, vec in labels.items()}
                for phase, labels in vectors_by_phase.items()
            }
            per_phase_s, table_s = predictions_from(scaled)
            scaled_graph = build_semantic_graph(per_phase_s, table_s, tau=0.75)
            assert scaled_graph.edge_set() == base_graph.edge_set()
            mine = {(e.source.key, e.target.key): e.similarity for e in base_graph.edges}
            theirs = {
                (e.source.key, e.target.key): e.similarity for e in scaled_graph.edges
            }
            if exact:
                assert mine == theirs
            else:
                assert mine == pytest.approx(theirs, abs=1e-12)

    def test_tau_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            build_semantic_graph({}, label_table({"x": np.ones(2)}), tau=0.0)
        with pytest.raises(ConfigError):
            build_semantic_graph({}, label_table({"x": np.ones(2)}), tau=1.5)

    def test_duplicate_label_in_phase_rejected(self):
        table = label_table({"scan": np.ones(2)})
        per_phase = {Phase.RECONNAISSANCE: [("scan", "d"), ("scan", "d2")]}
        with pytest.raises(ContractError, match="duplicate"):
            build_semantic_graph(per_phase, table, tau=0.8)

    def test_zero_norm_embedding_rejected(self):
        table = label_table({"scan": np.zeros(2)})
        per_phase = {Phase.RECONNAISSANCE: [("scan", "d")]}
        with pytest.raises(DegenerateVectorError, match="scan"):
            build_semantic_graph(per_phase, table, tau=0.8)


def hand_graph(structure, tau=0.5):
    """structure: {(phase_int, label): [((phase_int, label), sim), ...]}"""
    keys = set(structure)
    for targets in structure.values():
        keys.update(key for key, _ in targets)
    nodes = {
        key: ChainNode(
            phase=Phase(key[0]),
            label=key[1],
            description=f"d {key[1]}",
            embedding=np.ones(2),
        )
        for key in keys
    }
    edges = [
        ChainEdge(source=nodes[src], target=nodes[dst], similarity=sim)
        for src, targets in structure.items()
        for dst, sim in targets
    ]
    ordered = sorted(nodes.values(), key=lambda n: n.key)
    return ChainGraph(nodes=ordered, edges=edges, tau=tau)


class TestExtractPaths:
    def test_single_full_chain(self):
        structure = {
            (i, f"n{i}"): [((i + 1, f"n{i+1}"), 0.8 + 0.01 * i)] for i in range(1, 7)
        }
        graph = hand_graph(structure)
        paths = extract_paths(graph, k=5)
        assert len(paths) == 1
        assert [n.label for n in paths[0].nodes] == [f"n{i}" for i in range(1, 8)]
        expected = sum(math.log(0.8 + 0.01 * i) for i in range(1, 7))
        assert paths[0].score == pytest.approx(expected, abs=1e-12)
        assert paths[0].start_phase == Phase.RECONNAISSANCE
        assert paths[0].end_phase == Phase.ACTIONS_ON_OBJECTIVES

    def test_diamond_ranking_matches_enumeration(self):
        structure = {
            (1, "src"): [((2, "mid-a"), 0.9), ((2, "mid-b"), 0.85)],
            (2, "mid-a"): [((3, "sink"), 0.8)],
            (2, "mid-b"): [((3, "sink"), 0.85)],
        }
        graph = hand_graph(structure)
        paths = extract_paths(graph, k=2)
        # ln(.85) + ln(.85) = ln(.7225) > ln(.9) + ln(.8) = ln(.72)
        assert [n.label for n in paths[0].nodes] == ["src", "mid-b", "sink"]
        assert [n.label for n in paths[1].nodes] == ["src", "mid-a", "sink"]
        oracle = enumerate_maximal_paths(graph)
        assert [p.score for p in paths] == pytest.approx([o[0] for o in oracle])

    def test_k_larger_than_path_count_returns_all(self):
        structure = {(1, "a"): [((2, "b"), 0.9), ((2, "c"), 0.8)]}
        graph = hand_graph(structure)
        assert len(extract_paths(graph, k=50)) == 2

    def test_empty_graph_gives_empty_list(self):
        graph = ChainGraph(nodes=[], edges=[], tau=0.8)
        assert extract_paths(graph, k=3) == []

    def test_isolated_node_is_single_node_path(self):
        graph = hand_graph({})
        node = ChainNode(Phase.DELIVERY, "solo", "d", np.ones(2))
        graph = ChainGraph(nodes=[node], edges=[], tau=0.8)
        [path] = extract_paths(graph, k=3)
        assert path.labels == ("solo",)
        assert path.score == 0.0
        assert path.start_phase == path.end_phase == Phase.DELIVERY

    def test_disconnected_layers_give_segment_paths(self):
        # Recon->Weap chain, empty Delivery, Exploit->Install chain
        structure = {
            (1, "a"): [((2, "b"), 0.9)],
            (4, "c"): [((5, "d"), 0.8)],
        }
        graph = hand_graph(structure)
        paths = extract_paths(graph, k=10)
        assert {(p.start_phase, p.end_phase) for p in paths} == {
            (Phase.RECONNAISSANCE, Phase.WEAPONIZATION),
            (Phase.EXPLOITATION, Phase.INSTALLATION),
        }

    def test_matches_exhaustive_enumeration_on_random_fixtures(self):
        rng = np.random.default_rng(2024)
        compared = 0
        for _ in range(40):
            phases = PHASES[: int(rng.integers(2, 8))]
            vectors_by_phase = clustered_fixture(
                rng, phases, nodes_per_phase=int(rng.integers(1, 4)),
                spread=float(rng.uniform(0.1, 0.5)),
            )
            per_phase, table = predictions_from(vectors_by_phase)
            graph = build_semantic_graph(per_phase, table, tau=0.7)
            oracle = enumerate_maximal_paths(graph)
            if len(oracle) > 200:
                continue
            compared += 1
            paths = extract_paths(graph, k=max(1, len(oracle)))
            assert len(paths) == len(oracle)
            for mine, (score, labels, _) in zip(paths, oracle):
                assert mine.labels == labels
                assert mine.score == pytest.approx(score, abs=1e-9)
            # top-k prefix property
            top3 = extract_paths(graph, k=3)
            assert [p.labels for p in top3] == [p.labels for p in paths[:3]]
        assert compared >= 10

    def test_invalid_k_rejected(self):
        with pytest.raises(ConfigError):
            extract_paths(ChainGraph(nodes=[], edges=[], tau=0.5), k=0)


class TestExportDot:
    def test_empty_graph_has_seven_clusters(self):
        dot = export_dot(ChainGraph(nodes=[], edges=[], tau=0.8))
        assert dot.startswith("digraph killchain {")
        for phase in PHASES:
            assert f"cluster_{int(phase)}" in dot
            assert f'label="{phase.label}"' in dot
        assert "->" not in dot

    def test_single_edge_label_formatting(self):
        per_phase, table = predictions_from(
            {
                Phase.RECONNAISSANCE: {"scan": np.array([2.0, 1.0])},
                Phase.WEAPONIZATION: {"forge": np.array([2.0, 1.0])},
            }
        )
        graph = build_semantic_graph(per_phase, table, tau=0.9)
        dot = export_dot(graph)
        assert dot.count("->") == 1
        assert 'label="1.000"' in dot

    def test_highlighted_path_marked(self):
        structure = {(1, "a"): [((2, "b"), 0.9)]}
        graph = hand_graph(structure)
        [path] = extract_paths(graph, k=1)
        dot = export_dot(graph, highlighted_path=path)
        assert 'color="crimson"' in dot and 'penwidth="2.0"' in dot

    def test_byte_deterministic(self):
        rng = np.random.default_rng(77)
        vectors_by_phase = clustered_fixture(rng, PHASES, nodes_per_phase=3)
        per_phase, table = predictions_from(vectors_by_phase)
        first = export_dot(build_semantic_graph(per_phase, table, tau=0.75))
        second = export_dot(build_semantic_graph(per_phase, table, tau=0.75))
        assert first == second


class TestExportJson:
    def test_round_trip_equality(self):
        rng = np.random.default_rng(13)
        vectors_by_phase = clustered_fixture(rng, PHASES[:4], nodes_per_phase=2)
        per_phase, table = predictions_from(vectors_by_phase)
        graph = build_semantic_graph(per_phase, table, tau=0.7)
        clone = import_graph_json(export_json(graph))
        assert clone == graph

    def test_similarities_survive_bit_exact(self):
        rng = np.random.default_rng(14)
        vectors_by_phase = clustered_fixture(rng, PHASES[:3], nodes_per_phase=3)
        per_phase, table = predictions_from(vectors_by_phase)
        graph = build_semantic_graph(per_phase, table, tau=0.7)
        clone = import_graph_json(export_json(graph))
        mine = {(e.source.key, e.target.key): e.similarity for e in graph.edges}
        theirs = {(e.source.key, e.target.key): e.similarity for e in clone.edges}
        assert mine == theirs  # exact float equality

    def test_paths_serialized_with_phase_extents(self):
        structure = {(2, "x"): [((3, "y"), 0.9)]}
        graph = hand_graph(structure)
        paths = extract_paths(graph, k=1)
        doc = json.loads(export_json(graph, paths))
        assert doc["paths"][0]["start_phase"] == "Weaponization"
        assert doc["paths"][0]["end_phase"] == "Delivery"
        assert doc["tau"] == 0.5

    def test_stable_output(self):
        structure = {(1, "a"): [((2, "b"), 0.8125)]}
        graph = hand_graph(structure)
        assert export_json(graph) == export_json(graph)
