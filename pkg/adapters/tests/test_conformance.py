"""Format conformance against the engine's strict loaders.

These tests deliberately import the engine package: the adapters' contract
is that every file they emit passes the engine's validation untouched.
"""

import json
import math

import numpy as np
import pytest

from killchain.cli import main as engine_cli
from killchain.embedding import cosine_similarity, load_embedding_table
from killchain.scorers import load_probability_matrix

from killchain_adapters.embeddings import export_embeddings
from killchain_adapters.matrices import export_probability_matrix


def write_dataset(path, rows):
    with open(path, "w") as handle:
        for technique_id, label, phase, text in rows:
            handle.write(
                json.dumps(
                    {
                        "technique_id": technique_id,
                        "label": label,
                        "phase": phase,
                        "text": text,
                    }
                )
                + "\n"
            )


@pytest.fixture()
def small_dataset(tmp_path):
    path = tmp_path / "dataset.jsonl"
    write_dataset(
        path,
        [
            ("T0001", "Phishing", "Delivery", "a phishing email with a macro attachment"),
            ("T0002", "Phishing", "Delivery", "the phishing email carries a macro attachment"),
            ("T0003", "Drive-by Compromise", "Delivery", "watering hole website serves the exploit"),
        ],
    )
    return path


class TestEmbeddingExport:
    def test_table_passes_engine_loader(self, small_dataset, tmp_path):
        out = tmp_path / "table.jsonl"
        assert export_embeddings(small_dataset, out, model="hash:64") == 0
        table = load_embedding_table(out)
        assert table.dim == 64
        assert set(table.entries) == {"T0001", "T0002", "T0003"}
        assert table.source == "hash:64"

    def test_duplicate_ids_fail_before_writing(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        write_dataset(
            path,
            [
                ("T0001", "A", "Delivery", "text one"),
                ("T0001", "A", "Delivery", "text two"),
            ],
        )
        out = tmp_path / "table.jsonl"
        with pytest.raises(SystemExit, match="T0001"):
            export_embeddings(path, out, model="hash:32")
        assert not out.exists()

    def test_paraphrases_more_similar_than_unrelated(self, small_dataset, tmp_path):
        out = tmp_path / "table.jsonl"
        export_embeddings(small_dataset, out, model="hash:128")
        table = load_embedding_table(out)
        paraphrase = cosine_similarity(table.embed("T0001"), table.embed("T0002"))
        unrelated = cosine_similarity(table.embed("T0001"), table.embed("T0003"))
        assert paraphrase > unrelated

    def test_anchor_entries_added_under_anchor_keys(self, small_dataset, tmp_path):
        anchors = tmp_path / "anchors.json"
        anchors.write_text(json.dumps({"Delivery": "delivering the weapon"}))
        out = tmp_path / "table.jsonl"
        export_embeddings(small_dataset, out, model="hash:64", anchors_path=anchors)
        table = load_embedding_table(out)
        assert "anchor:Delivery" in table.entries

    def test_deterministic_output(self, small_dataset, tmp_path):
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        export_embeddings(small_dataset, first, model="hash:64")
        export_embeddings(small_dataset, second, model="hash:64")
        assert first.read_bytes() == second.read_bytes()

    def test_unknown_encoder_spec_rejected(self, small_dataset, tmp_path):
        with pytest.raises(SystemExit):
            export_embeddings(small_dataset, tmp_path / "t.jsonl", model="hash:zero")


class TestMatrixExport:
    def train_eval(self, tmp_path):
        train = tmp_path / "train.jsonl"
        write_dataset(
            train,
            [
                ("T0101", "Phishing", "Delivery", "phishing email lure attachment macro"),
                ("T0102", "Phishing", "Delivery", "spearphishing email delivered attachment"),
                ("T0103", "Phishing", "Delivery", "phishing message email lure inbox"),
                ("T0104", "Drive-by Compromise", "Delivery", "watering hole website browser exploit"),
                ("T0105", "Drive-by Compromise", "Delivery", "drive by compromised website browser"),
                ("T0106", "Drive-by Compromise", "Delivery", "malvertising website landing page browser"),
            ],
        )
        evaluation = tmp_path / "eval.jsonl"
        write_dataset(
            evaluation,
            [
                ("T0201", "Phishing", "Delivery", "a phishing email with an attachment"),
                ("T0202", "Drive-by Compromise", "Delivery", "compromised website serving a browser exploit"),
            ],
        )
        return train, evaluation

    def test_onehot_oracle_matrix(self, tmp_path):
        train, evaluation = self.train_eval(tmp_path)
        out = tmp_path / "matrix.jsonl"
        assert export_probability_matrix(
            train, evaluation, out, phase="Delivery", mode="onehot"
        ) == 0
        matrix = load_probability_matrix(
            out, ["Drive-by Compromise", "Phishing"], ["T0201", "T0202"]
        )
        assert matrix.argmax_labels() == ["Phishing", "Drive-by Compromise"]

    def test_untrained_head_rows_pass_validation(self, tmp_path):
        train, evaluation = self.train_eval(tmp_path)
        out = tmp_path / "matrix.jsonl"
        export_probability_matrix(
            train, evaluation, out, phase="Delivery", mode="untrained", seed=3
        )
        matrix = load_probability_matrix(
            out, ["Drive-by Compromise", "Phishing"], ["T0201", "T0202"]
        )
        assert np.allclose(matrix.rows.sum(axis=1), 1.0, atol=1e-9)
        assert matrix.rows.max() < 0.95  # near-uniform, not collapsed

    def test_trained_matrix_learns_the_split(self, tmp_path):
        train, evaluation = self.train_eval(tmp_path)
        out = tmp_path / "matrix.jsonl"
        export_probability_matrix(
            train, evaluation, out, phase="Delivery", mode="trained",
            epochs=60, seed=0,
        )
        matrix = load_probability_matrix(
            out, ["Drive-by Compromise", "Phishing"], ["T0201", "T0202"]
        )
        assert matrix.argmax_labels() == ["Phishing", "Drive-by Compromise"]

    def test_header_equals_training_label_set_exactly(self, tmp_path):
        train, evaluation = self.train_eval(tmp_path)
        out = tmp_path / "matrix.jsonl"
        export_probability_matrix(
            train, evaluation, out, phase="Delivery", mode="onehot"
        )
        header = json.loads(out.read_text().splitlines()[0])
        assert header["labels"] == ["Drive-by Compromise", "Phishing"]  # sorted
        assert header["phase"] == "Delivery"

    def test_label_mismatch_reports_symmetric_difference(self, tmp_path):
        train, _ = self.train_eval(tmp_path)
        evaluation = tmp_path / "other.jsonl"
        write_dataset(
            evaluation, [("T0301", "Novel Label", "Delivery", "something else entirely")]
        )
        with pytest.raises(SystemExit, match="Novel Label"):
            export_probability_matrix(
                train, evaluation, tmp_path / "m.jsonl", phase="Delivery", mode="onehot"
            )


class TestEngineIntegration:
    """Adapter matrices flowing through the engine's ensemble evaluation."""

    def test_external_scorer_joins_the_ensemble(self, tmp_path):
        work = tmp_path / "work"
        for command in ("ingest", "split", "augment", "train"):
            assert engine_cli(["--work", str(work), command]) == 0

        external_dir = tmp_path / "external"
        external_dir.mkdir()
        for split in ("validation", "test"):
            assert export_probability_matrix(
                work / "splits/Delivery/train.jsonl",
                work / f"splits/Delivery/{split}.jsonl",
                external_dir / f"Delivery.{split}.jsonl",
                phase="Delivery",
                mode="trained",
                epochs=60,
                seed=1,
            ) == 0

        from killchain.phases import Phase
        from killchain.pipeline import demo_config, stage_evaluate

        cfg = demo_config(work_dir=str(work))
        from dataclasses import replace

        cfg = replace(cfg, external_scorers={"neural": str(external_dir)})
        stage_evaluate(cfg, phase=Phase.DELIVERY)

        report = json.loads((work / "eval/Delivery/report.json").read_text())
        assert set(report["weights"]) == {"gbdt", "softmax", "neural"}
        assert abs(sum(report["weights"].values()) - 1.0) < 1e-9
        assert "neural" in report["scorers"]
        with_external = report["ensemble"]["f1_score"]

        cfg_without = demo_config(work_dir=str(work))
        stage_evaluate(cfg_without, phase=Phase.DELIVERY)
        without_external = json.loads(
            (work / "eval/Delivery/report.json").read_text()
        )["ensemble"]["f1_score"]
        # recorded, not asserted: desk-scale uplift is not guaranteed
        print(
            f"\nensemble macro-F1 with external scorer {with_external:.4f} "
            f"vs without {without_external:.4f}"
        )
        assert math.isfinite(with_external) and math.isfinite(without_external)
