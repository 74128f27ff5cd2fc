import numpy as np
import pytest

from killchain.chain_graph import build_semantic_graph
from killchain.corpus import LabeledSample, PhaseDataset
from killchain.embedding import EmbeddingTable, fit_tfidf
from killchain.ensemble import EnsembleWeights
from killchain.errors import ContractError
from killchain.narrative import (
    ChainRun,
    PhaseBundle,
    assign_segment_phases,
    run_narrative,
    segment,
)
from killchain.phases import PHASES, Phase
from killchain.scorers import ScorerHandle, train_softmax_regression

DEMO_NARRATIVE = (
    "The adversary performed reconnaissance via subdomain enumeration and DNS "
    "zone transfers, uncovering a vulnerable webmail server. They delivered a "
    "phishing email to finance staff, containing a Word document weaponized "
    "with a VBA macro exploiting CVE-2017-0199. Upon opening, the macro "
    "executed PowerShell silently, installing a remote access trojan (RAT) "
    "that connected to a C2 server hosted on a compromised cloud instance. "
    "With access established, the attacker escalated privileges, moved "
    "laterally using stolen SMB credentials, and exfiltrated sensitive "
    "financial data over encrypted SFTP."
)


class TestSegment:
    def test_two_sentences(self):
        assert segment("A ran X. B ran Y.") == ["a ran x", "b ran y"]

    def test_identifier_period_does_not_split(self):
        segments = segment("exploiting CVE-2017-0199. Upon opening")
        assert segments == ["exploiting cve 2017 0199", "upon opening"]

    def test_version_and_ip_periods_do_not_split(self):
        assert segment("Upgraded to 3.1.4 on host 10.0.0.15; then rebooted") == [
            "upgraded to 3 1 4 on host 10 0 0 15",
            "then rebooted",
        ]

    def test_demo_narrative_has_four_sentences(self):
        segments = segment(DEMO_NARRATIVE)
        assert len(segments) == 4
        assert segments[0].startswith("the adversary performed reconnaissance")
        assert "cve 2017 0199" in segments[1]

    def test_bang_question_semicolon_split(self):
        assert segment("Alert! Was it real? maybe; unclear") == [
            "alert", "was it real", "maybe", "unclear",
        ]

    def test_empty_text_rejected(self):
        with pytest.raises(ContractError):
            segment("   ")
        with pytest.raises(ContractError):
            segment("!!! ...")


def anchor_texts():
    return {p: f"anchor {p.label.lower()}" for p in PHASES}


def routing_table(anchor_vecs, segment_vecs):
    entries = {f"anchor:{p.label}": np.asarray(v, float) for p, v in anchor_vecs.items()}
    entries.update({k: np.asarray(v, float) for k, v in segment_vecs.items()})
    dim = len(next(iter(entries.values())))
    return EmbeddingTable(dim=dim, entries=entries)


class TestAssignSegmentPhases:
    def test_segment_equal_to_anchor(self):
        from killchain.embedding import content_key

        anchor_vecs = {p: np.eye(7)[p - 1] for p in PHASES}
        text = "anchor delivery"  # equals preprocessed anchor for Delivery
        table = routing_table(anchor_vecs, {content_key(text): np.eye(7)[2]})
        [seg] = assign_segment_phases([text], table, anchor_texts())
        assert seg.phase == Phase.DELIVERY
        assert seg.similarity == 1.0

    def test_near_tie_duplicates_into_both(self):
        from killchain.embedding import content_key

        # crafted vector: cos to anchor 1 = 1.0, cos to anchor 2 = 0.99,
        # far below for the rest -> gap 0.01 < 0.02 duplicates
        a1 = np.array([1.0, 0.0])
        angle = np.arccos(0.99)
        a2 = np.array([np.cos(angle), np.sin(angle)])
        anchor_vecs = {Phase.RECONNAISSANCE: a1, Phase.WEAPONIZATION: a2}
        for p in PHASES[2:]:
            anchor_vecs[p] = np.array([-1.0, 0.0])
        table = routing_table(anchor_vecs, {content_key("probe text"): a1})
        routed = assign_segment_phases(["probe text"], table, anchor_texts())
        assert [s.phase for s in routed] == [Phase.RECONNAISSANCE, Phase.WEAPONIZATION]
        assert routed[0].index == routed[1].index == 0

    def test_distinct_segments_match_brute_force(self):
        from killchain.embedding import content_key

        rng = np.random.default_rng(8)
        anchor_vecs = {p: rng.normal(size=5) for p in PHASES}
        texts = [f"segment number {i}" for i in range(4)]
        segment_vecs = {content_key(t): rng.normal(size=5) for t in texts}
        table = routing_table(anchor_vecs, segment_vecs)
        routed = assign_segment_phases(texts, table, anchor_texts())

        def brute(vec):
            sims = {}
            for p in PHASES:
                a = anchor_vecs[p]
                sims[p] = float(vec @ a / (np.linalg.norm(vec) * np.linalg.norm(a)))
            return sims

        by_index = {}
        for seg in routed:
            by_index.setdefault(seg.index, []).append(seg)
        for i, text in enumerate(texts):
            sims = brute(segment_vecs[content_key(text)])
            ranked = sorted(PHASES, key=lambda p: (-sims[p], p))
            expected = [ranked[0]]
            if sims[ranked[0]] - sims[ranked[1]] < 0.02:
                expected.append(ranked[1])
            assert [s.phase for s in by_index[i]] == expected


def tiny_world():
    """A fully native two-phase world for end-to-end narrative tests."""
    recon_rows = [
        LabeledSample(f"T10{i}", f"scan probe sweep port {i}", "Scanning", Phase.RECONNAISSANCE)
        for i in range(4)
    ] + [
        LabeledSample(f"T11{i}", f"harvest email list names {i}", "Harvesting", Phase.RECONNAISSANCE)
        for i in range(4)
    ]
    weap_rows = [
        LabeledSample(f"T20{i}", f"macro payload builder kit {i}", "MacroKit", Phase.WEAPONIZATION)
        for i in range(4)
    ] + [
        LabeledSample(f"T21{i}", f"implant toolchain forge code {i}", "ImplantForge", Phase.WEAPONIZATION)
        for i in range(4)
    ]
    datasets = {
        Phase.RECONNAISSANCE: PhaseDataset(Phase.RECONNAISSANCE, recon_rows),
        Phase.WEAPONIZATION: PhaseDataset(Phase.WEAPONIZATION, weap_rows),
    }
    corpus_texts = [s.text for rows in datasets.values() for s in rows.samples]
    anchors = {p: f"unused filler {p.label.lower()}" for p in PHASES}
    anchors[Phase.RECONNAISSANCE] = "scan probe sweep harvest reconnaissance"
    anchors[Phase.WEAPONIZATION] = "macro payload implant forge weaponization"
    tfidf = fit_tfidf(
        corpus_texts + [a for a in anchors.values()], dim=64
    )
    bundles = {}
    for phase, dataset in datasets.items():
        vectors = np.array([tfidf.embed(s.text) for s in dataset.samples])
        model = train_softmax_regression(dataset, vectors, epochs=150, learning_rate=0.5)
        handle = ScorerHandle("softmax", "native-softmax", phase)
        weights = EnsembleWeights(phase, {"softmax": 1.0}, {"softmax": 1.0})
        label_descriptions = {}
        for s in dataset.samples:
            label_descriptions.setdefault(s.label, []).append(s.text)
        bundles[phase] = PhaseBundle(
            phase=phase,
            scorers=[(handle, model)],
            weights=weights,
            label_descriptions={k: " ".join(v) for k, v in label_descriptions.items()},
        )
    return bundles, tfidf, anchors


class TestRunNarrative:
    def test_single_phase_graph_has_no_edges(self):
        bundles, tfidf, anchors = tiny_world()
        run = run_narrative(
            "scan the probe sweep now.", bundles, tfidf, anchors, tau=0.8, k_pred=2
        )
        assert set(run.predictions) == {Phase.RECONNAISSANCE}
        assert run.graph.edges == []
        assert all(n.phase == Phase.RECONNAISSANCE for n in run.graph.nodes)

    def test_two_phase_narrative_builds_layered_graph(self):
        bundles, tfidf, anchors = tiny_world()
        text = "scan the probe sweep now. forge the macro payload implant."
        run = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        assert set(run.predictions) == {Phase.RECONNAISSANCE, Phase.WEAPONIZATION}
        assert run.graph.edges  # low tau joins the layers
        for edge in run.graph.edges:
            assert edge.source.phase == Phase.RECONNAISSANCE
            assert edge.target.phase == Phase.WEAPONIZATION

    def test_missing_bundle_names_phase(self):
        bundles, tfidf, anchors = tiny_world()
        del bundles[Phase.WEAPONIZATION]
        with pytest.raises(ContractError, match="Weaponization"):
            run_narrative(
                "forge the macro payload implant.", bundles, tfidf, anchors, tau=0.5
            )

    def test_replay_equality(self):
        bundles, tfidf, anchors = tiny_world()
        text = "scan the probe sweep now. forge the macro payload implant."
        run = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        rebuilt = build_semantic_graph(
            {
                phase: [(p.label, p.description) for p in rows]
                for phase, rows in run.predictions.items()
            },
            tfidf,
            run.config["tau"],
        )
        assert rebuilt == run.graph

    def test_provenance_recorded_for_every_node(self):
        bundles, tfidf, anchors = tiny_world()
        text = "scan the probe sweep now. forge the macro payload implant."
        run = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        segment_indices = {s.index for s in run.segments}
        predicted = {
            (phase, p.label) for phase, rows in run.predictions.items() for p in rows
        }
        for node in run.graph.nodes:
            assert (node.phase, node.label) in predicted
        for phase, rows in run.predictions.items():
            for p in rows:
                assert p.segment_index in segment_indices
                assert p.scorer_probs  # per-scorer contribution recorded

    def test_chain_run_json_round_trip(self):
        bundles, tfidf, anchors = tiny_world()
        text = "scan the probe sweep now. forge the macro payload implant."
        run = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        clone = ChainRun.from_json(run.to_json())
        assert clone.narrative == run.narrative
        assert clone.segments == run.segments
        assert clone.graph == run.graph
        assert clone.config == run.config
        assert clone.to_json() == run.to_json()

    def test_determinism(self):
        bundles, tfidf, anchors = tiny_world()
        text = "scan the probe sweep now. forge the macro payload implant."
        first = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        second = run_narrative(text, bundles, tfidf, anchors, tau=0.01, k_pred=2)
        assert first.to_json() == second.to_json()
