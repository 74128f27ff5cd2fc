"""File-based pipeline stages with hash-chained run manifests.

Each stage reads its inputs from the work directory, writes byte-deterministic
artifacts (temp file + atomic rename), and records a manifest of input/output
digests. A stage refuses to run when its declared inputs are missing or no
longer match the digests recorded by the stage that produced them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import __version__
from .chain_graph import build_semantic_graph, export_dot, export_json, extract_paths
from .corpus import (
    AugmentConfig,
    PhaseDataset,
    assign_phases,
    augment,
    load_anchors,
    normalize_anchors,
    parse_attack_bundle,
    preprocess,
    read_dataset,
    split_phase_datasets,
    stratified_split,
    write_dataset,
)
from .embedding import TfidfModel, fit_tfidf, load_embedding_table
from .ensemble import EnsembleWeights, evaluate, fit_weights, soft_vote
from .errors import ConfigError, ContractError, KillchainError, StaleArtifactError
from .gbdt import GbdtConfig, GbdtModel
from .gbdt import train as train_gbdt
from .narrative import ChainRun, PhaseBundle, run_narrative
from .phases import PHASES, Phase
from .scorers import (
    ProbabilityMatrix,
    ScorerHandle,
    SoftmaxRegressionModel,
    load_probability_matrix,
    score,
    train_softmax_regression,
    write_probability_matrix,
)

logger = logging.getLogger(__name__)

SWEEP_NUM_LEAVES = (31, 63, 100)
NATIVE_SCORERS = ("gbdt", "softmax")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SplitSettings:
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 7


@dataclass
class EmbeddingSettings:
    dim: int = 1024


@dataclass
class SoftmaxSettings:
    epochs: int = 300
    learning_rate: float = 0.5
    l2: float = 1e-4
    seed: int = 7


@dataclass
class PipelineConfig:
    """Validated configuration for every pipeline command."""

    bundle: str | None = None  # None -> packaged demo bundle
    anchors: str | None = None
    embedding_table: str | None = None
    work_dir: str = "work"
    split: SplitSettings = field(default_factory=SplitSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    softmax: SoftmaxSettings = field(default_factory=SoftmaxSettings)
    scorers: tuple[str, ...] = ("gbdt", "softmax")
    external_scorers: dict[str, str] = field(default_factory=dict)
    tau: float = 0.8
    k_pred: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.k_pred < 1:
            raise ConfigError(f"k_pred must be >= 1, got {self.k_pred}")
        if abs(sum(self.split.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split.ratios}")
        if not self.scorers:
            raise ConfigError("need at least one scorer")
        unknown = [s for s in self.scorers if s not in NATIVE_SCORERS]
        if unknown:
            raise ConfigError(
                f"unknown native scorers {unknown}; choose from {list(NATIVE_SCORERS)}"
            )
        overlap = set(self.scorers) & set(self.external_scorers)
        if overlap:
            raise ConfigError(f"scorer names used twice: {sorted(overlap)}")

    def digest(self) -> str:
        # work_dir is where artifacts live, not what they are
        doc = config_to_dict(self)
        doc["paths"].pop("work_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _from_mapping(cls, obj: Mapping, context: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    return cls(**obj)


def config_from_dict(raw: Mapping) -> PipelineConfig:
    allowed = {
        "paths", "split", "embedding", "augment", "gbdt", "softmax",
        "ensemble", "tau", "k_pred",
    }
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    paths = dict(raw.get("paths", {}))
    path_keys = {"bundle", "anchors", "embedding_table", "work_dir"}
    bad = sorted(set(paths) - path_keys)
    if bad:
        raise ConfigError(f"config.paths: unknown keys {bad}")
    split_raw = dict(raw.get("split", {}))
    if "ratios" in split_raw:
        split_raw["ratios"] = tuple(split_raw["ratios"])
    ensemble_raw = dict(raw.get("ensemble", {}))
    bad = sorted(set(ensemble_raw) - {"scorers", "external"})
    if bad:
        raise ConfigError(f"config.ensemble: unknown keys {bad}")
    try:
        return PipelineConfig(
            bundle=paths.get("bundle"),
            anchors=paths.get("anchors"),
            embedding_table=paths.get("embedding_table"),
            work_dir=paths.get("work_dir", "work"),
            split=_from_mapping(SplitSettings, split_raw, "config.split"),
            embedding=_from_mapping(
                EmbeddingSettings, raw.get("embedding", {}), "config.embedding"
            ),
            augment=_from_mapping(AugmentConfig, raw.get("augment", {}), "config.augment"),
            gbdt=_from_mapping(GbdtConfig, raw.get("gbdt", {}), "config.gbdt"),
            softmax=_from_mapping(SoftmaxSettings, raw.get("softmax", {}), "config.softmax"),
            scorers=tuple(ensemble_raw.get("scorers", NATIVE_SCORERS)),
            external_scorers=dict(ensemble_raw.get("external", {})),
            tau=float(raw.get("tau", 0.8)),
            k_pred=int(raw.get("k_pred", 3)),
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "paths": {
            "bundle": cfg.bundle,
            "anchors": cfg.anchors,
            "embedding_table": cfg.embedding_table,
            "work_dir": cfg.work_dir,
        },
        "split": {"ratios": list(cfg.split.ratios), "seed": cfg.split.seed},
        "embedding": asdict(cfg.embedding),
        "augment": asdict(cfg.augment),
        "gbdt": asdict(cfg.gbdt),
        "softmax": asdict(cfg.softmax),
        "ensemble": {
            "scorers": list(cfg.scorers),
            "external": dict(cfg.external_scorers),
        },
        "tau": cfg.tau,
        "k_pred": cfg.k_pred,
    }


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: malformed JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    return config_from_dict(raw)


def demo_config(work_dir: str = "work") -> PipelineConfig:
    """The packaged configuration: bundled corpus and anchors, native TF-IDF
    embedder, and a tau calibrated for hashed TF-IDF similarities."""
    raw = json.loads(_packaged_text("demo_config.json"))
    raw.setdefault("paths", {})["work_dir"] = work_dir
    return config_from_dict(raw)


def _packaged_text(name: str) -> str:
    return (resources.files("killchain") / "data" / name).read_text(encoding="utf-8")


def bundle_bytes(cfg: PipelineConfig) -> bytes:
    if cfg.bundle is not None:
        return Path(cfg.bundle).read_bytes()
    return _packaged_text("bundle.json").encode("utf-8")


def anchors_mapping(cfg: PipelineConfig) -> dict[Phase, str]:
    if cfg.anchors is not None:
        return load_anchors(cfg.anchors)
    return normalize_anchors(json.loads(_packaged_text("anchors.json")))


# ---------------------------------------------------------------------------
# manifests and artifact hygiene


def _digest_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _digest_file(path: Path) -> str:
    return _digest_bytes(path.read_bytes())


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    engine_version: str
    config_digest: str
    created_at: str
    inputs: dict[str, str]
    outputs: dict[str, str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


class Workspace:
    """Work-directory paths plus the manifest chain."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.work_dir)

    def path(self, relative: str) -> Path:
        return self.root / relative

    def manifest_path(self, command: str) -> Path:
        return self.root / "manifests" / f"{command}.json"

    def recorded_outputs(self) -> dict[str, str]:
        """relpath -> digest recorded by the manifest that produced it."""
        recorded: dict[str, str] = {}
        manifest_dir = self.root / "manifests"
        if not manifest_dir.is_dir():
            return recorded
        for path in sorted(manifest_dir.glob("*.json")):
            obj = json.loads(path.read_text(encoding="utf-8"))
            recorded.update(obj.get("outputs", {}))
        return recorded

    def require(self, relpaths: list[str], command: str) -> dict[str, str]:
        """Check inputs exist and hash-match the manifest chain."""
        recorded = self.recorded_outputs()
        missing, stale, digests = [], [], {}
        for rel in relpaths:
            path = self.path(rel)
            if not path.is_file():
                missing.append(rel)
                continue
            actual = _digest_file(path)
            digests[rel] = actual
            expected = recorded.get(rel)
            if expected is None:
                stale.append(f"{rel}: not recorded by any manifest")
            elif expected != actual:
                stale.append(f"{rel}: expected {expected[:18]}.., found {actual[:18]}..")
        if missing:
            raise StaleArtifactError(
                f"{command}: missing artifacts {missing}; run the earlier stages first"
            )
        if stale:
            raise StaleArtifactError(
                f"{command}: stale artifacts:\n  " + "\n  ".join(stale)
            )
        return digests

    def write_manifest(
        self, command: str, inputs: dict[str, str], written: dict[str, str]
    ) -> None:
        manifest = RunManifest(
            command=command,
            engine_version=__version__,
            config_digest=self.cfg.digest(),
            created_at=datetime.now(timezone.utc).isoformat(),
            inputs=inputs,
            outputs=written,
        )
        _write_text(self.manifest_path(command), manifest.to_json())

    def emit(self, relative: str, text: str, written: dict[str, str]) -> None:
        path = self.path(relative)
        _write_text(path, text)
        written[relative] = _digest_file(path)


def _load_tfidf(ws: Workspace) -> TfidfModel:
    path = ws.path("corpus/tfidf.json")
    if not path.is_file():
        raise StaleArtifactError("corpus/tfidf.json is missing; run ingest first")
    return TfidfModel.from_json(path.read_text(encoding="utf-8"))


def embedder_for(cfg: PipelineConfig, ws: Workspace):
    if cfg.embedding_table is not None:
        return load_embedding_table(cfg.embedding_table)
    return _load_tfidf(ws)


def _phase_dir(base: str, phase: Phase) -> str:
    return f"{base}/{phase.label}"


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: PipelineConfig) -> dict[str, str]:
    """Parse the bundle, fit the native embedder, assign phases."""
    ws = Workspace(cfg)
    raw = bundle_bytes(cfg)
    anchors = anchors_mapping(cfg)
    warnings: list[str] = []
    techniques = parse_attack_bundle(raw, warnings=warnings)
    if not techniques:
        raise ContractError("bundle contains no usable attack-pattern objects")

    corpus_texts = [t.combined_description for t in techniques] + [
        preprocess(text) for _, text in sorted(anchors.items())
    ]
    tfidf = fit_tfidf(corpus_texts, dim=cfg.embedding.dim)

    written: dict[str, str] = {}
    ws.emit("corpus/tfidf.json", tfidf.to_json() + "\n", written)
    embedder = load_embedding_table(cfg.embedding_table) if cfg.embedding_table else tfidf
    samples = assign_phases(techniques, embedder, anchors)

    lines = []
    for s in samples:
        lines.append(
            json.dumps(
                {
                    "technique_id": s.technique_id,
                    "label": s.label,
                    "phase": s.phase.label,
                    "text": s.text,
                }
            )
        )
    ws.emit("corpus/samples.jsonl", "\n".join(lines) + "\n", written)

    label_descriptions: dict[str, dict[str, str]] = {}
    for s in samples:
        label_descriptions.setdefault(s.phase.label, {}).setdefault(s.label, s.text)
    ws.emit(
        "corpus/labels.json",
        json.dumps(label_descriptions, indent=2, sort_keys=True) + "\n",
        written,
    )

    counts: dict[str, int] = {p.label: 0 for p in PHASES}
    for s in samples:
        counts[s.phase.label] += 1
    ws.emit(
        "corpus/ingest_report.json",
        json.dumps(
            {
                "techniques": len(techniques),
                "skipped": warnings,
                "per_phase_counts": counts,
                "embedder": "table" if cfg.embedding_table else "tfidf",
                "tfidf_dim": cfg.embedding.dim,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        written,
    )

    inputs = {
        "bundle": _digest_bytes(raw),
        "anchors": _digest_bytes(
            json.dumps({p.label: anchors[p] for p in PHASES}, sort_keys=True).encode()
        ),
    }
    ws.write_manifest("ingest", inputs, written)
    logger.info("ingest: %d techniques, %d skipped", len(techniques), len(warnings))
    return written


def _read_phase_dataset(ws: Workspace, relative: str, phase: Phase) -> PhaseDataset:
    path = ws.path(relative)
    samples = read_dataset(path) if path.is_file() else []
    return PhaseDataset(phase=phase, samples=samples)


def stage_split(cfg: PipelineConfig) -> dict[str, str]:
    ws = Workspace(cfg)
    inputs = ws.require(["corpus/samples.jsonl"], "split")
    samples = read_dataset(ws.path("corpus/samples.jsonl"))
    datasets = split_phase_datasets(samples)

    written: dict[str, str] = {}
    report: dict[str, dict] = {}
    for phase in PHASES:
        dataset = datasets[phase]
        base = _phase_dir("splits", phase)
        if not dataset.samples:
            for name in ("train", "validation", "test"):
                ws.emit(f"{base}/{name}.jsonl", "", written)
            report[phase.label] = {"empty": True}
            continue
        split = stratified_split(dataset, ratios=cfg.split.ratios, seed=cfg.split.seed)
        for name, part in (
            ("train", split.train),
            ("validation", split.validation),
            ("test", split.test),
        ):
            path = ws.path(f"{base}/{name}.jsonl")
            write_dataset(path, part.samples)
            written[f"{base}/{name}.jsonl"] = _digest_file(path)
        singletons = [
            label for label, count in dataset.label_counts().items() if count == 1
        ]
        report[phase.label] = {
            "total": len(dataset),
            "labels": dataset.label_counts(),
            "train": split.train.label_counts(),
            "validation": split.validation.label_counts(),
            "test": split.test.label_counts(),
            "singleton_labels_forced_to_train": sorted(singletons),
        }
    ws.emit(
        "splits/report.json",
        json.dumps(
            {"seed": cfg.split.seed, "ratios": list(cfg.split.ratios), "phases": report},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        written,
    )
    ws.write_manifest("split", inputs, written)
    return written


def stage_augment(cfg: PipelineConfig) -> dict[str, str]:
    ws = Workspace(cfg)
    needed = ["corpus/tfidf.json"] + [
        f"{_phase_dir('splits', p)}/train.jsonl" for p in PHASES
    ]
    inputs = ws.require(needed, "augment")
    tfidf = _load_tfidf(ws)

    written: dict[str, str] = {}
    report: dict[str, dict] = {}
    for phase in PHASES:
        base = _phase_dir("splits", phase)
        dataset = _read_phase_dataset(ws, f"{base}/train.jsonl", phase)
        out_rel = f"{_phase_dir('augmented', phase)}/train.jsonl"
        if not dataset.samples:
            ws.emit(out_rel, "", written)
            report[phase.label] = {"empty": True}
            continue
        augmented = augment(dataset, tfidf, cfg.augment)
        path = ws.path(out_rel)
        write_dataset(path, augmented.samples)
        written[out_rel] = _digest_file(path)
        report[phase.label] = {
            "original": len(dataset),
            "augmented": len(augmented),
            "variants": len(augmented) - len(dataset),
        }
    ws.emit(
        "augmented/report.json",
        json.dumps({"config": asdict(cfg.augment), "phases": report}, indent=2, sort_keys=True)
        + "\n",
        written,
    )
    ws.write_manifest("augment", inputs, written)
    return written


def _embed_dataset(embedder, dataset: PhaseDataset) -> np.ndarray:
    vectors = []
    for s in dataset.samples:
        try:
            vectors.append(embedder.vector_for(key=s.technique_id, text=s.text))
        except KillchainError as exc:
            raise ContractError(f"cannot embed sample {s.technique_id!r}: {exc}") from exc
    return np.asarray(vectors)


def _trainable_phases(ws: Workspace, only: Phase | None) -> list[Phase]:
    phases = [only] if only is not None else list(PHASES)
    out = []
    for phase in phases:
        rel = f"{_phase_dir('augmented', phase)}/train.jsonl"
        dataset = _read_phase_dataset(ws, rel, phase)
        if len(dataset.label_set) >= 2:
            out.append(phase)
        else:
            logger.warning(
                "phase %s: %d label(s) in training split, skipping",
                phase.label,
                len(dataset.label_set),
            )
    return out


def stage_train(
    cfg: PipelineConfig, phase: Phase | None = None, sweep: bool = False
) -> dict[str, str]:
    ws = Workspace(cfg)
    needed = ["corpus/tfidf.json"]
    for p in [phase] if phase else PHASES:
        needed.append(f"{_phase_dir('augmented', p)}/train.jsonl")
        needed.append(f"{_phase_dir('splits', p)}/validation.jsonl")
    inputs = ws.require(needed, "train")
    embedder = embedder_for(cfg, ws)

    written: dict[str, str] = {}
    for p in _trainable_phases(ws, phase):
        train_set = _read_phase_dataset(ws, f"{_phase_dir('augmented', p)}/train.jsonl", p)
        val_set = _read_phase_dataset(ws, f"{_phase_dir('splits', p)}/validation.jsonl", p)
        X = _embed_dataset(embedder, train_set)
        Xv = _embed_dataset(embedder, val_set) if val_set.samples else None
        base = _phase_dir("models", p)

        if "gbdt" in cfg.scorers:
            if sweep:
                summary = []
                for leaves in SWEEP_NUM_LEAVES:
                    variant = GbdtConfig(**{**asdict(cfg.gbdt), "num_leaves": leaves})
                    model, report = train_gbdt(train_set, X, variant, val_set, Xv)
                    rel = f"{base}/sweep/gbdt_leaves_{leaves}.json"
                    ws.emit(rel, model.to_json() + "\n", written)
                    selection_loss = (
                        report.validation_loss[model.best_round]
                        if report.validation_loss
                        else report.train_loss[-1]
                    )
                    summary.append(
                        {
                            "num_leaves": leaves,
                            "best_round": model.best_round,
                            "selection_loss": selection_loss,
                            "model": rel,
                        }
                    )
                best = min(summary, key=lambda row: (row["selection_loss"], row["num_leaves"]))
                ws.emit(
                    f"{base}/sweep/summary.json",
                    json.dumps(
                        {"grid": summary, "selected": best}, indent=2, sort_keys=True
                    )
                    + "\n",
                    written,
                )
                chosen = GbdtConfig(**{**asdict(cfg.gbdt), "num_leaves": best["num_leaves"]})
                model, report = train_gbdt(train_set, X, chosen, val_set, Xv)
            else:
                model, report = train_gbdt(train_set, X, cfg.gbdt, val_set, Xv)
            ws.emit(f"{base}/gbdt.json", model.to_json() + "\n", written)
            ws.emit(
                f"{base}/gbdt_report.json",
                json.dumps(
                    {
                        "train_loss": report.train_loss,
                        "validation_loss": report.validation_loss,
                        "stopping_reason": report.stopping_reason,
                        "class_weights": report.class_weights,
                        "best_round": model.best_round,
                    },
                    indent=2,
                    sort_keys=True,
                )
                + "\n",
                written,
            )
        if "softmax" in cfg.scorers:
            sm = train_softmax_regression(
                train_set,
                X,
                epochs=cfg.softmax.epochs,
                learning_rate=cfg.softmax.learning_rate,
                l2=cfg.softmax.l2,
                seed=cfg.softmax.seed,
            )
            ws.emit(f"{base}/softmax.json", sm.to_json() + "\n", written)
    ws.write_manifest("train", inputs, written)
    return written


def _load_models(cfg: PipelineConfig, ws: Workspace, phase: Phase):
    base = _phase_dir("models", phase)
    loaded: list[tuple[ScorerHandle, object]] = []
    for name in cfg.scorers:
        rel = f"{base}/{name}.json"
        path = ws.path(rel)
        if not path.is_file():
            continue
        text = path.read_text(encoding="utf-8")
        if name == "gbdt":
            loaded.append(
                (ScorerHandle("gbdt", "native-gbdt", phase), GbdtModel.from_json(text))
            )
        else:
            loaded.append(
                (
                    ScorerHandle("softmax", "native-softmax", phase),
                    SoftmaxRegressionModel.from_json(text),
                )
            )
    return loaded


def stage_evaluate(cfg: PipelineConfig, phase: Phase | None = None) -> dict[str, str]:
    ws = Workspace(cfg)
    phases = [phase] if phase else [p for p in PHASES if ws.path(
        f"{_phase_dir('models', p)}").is_dir()]
    if not phases or not any(
        ws.path(f"{_phase_dir('models', p)}/{name}.json").is_file()
        for p in phases
        for name in cfg.scorers
    ):
        raise StaleArtifactError("evaluate: no trained models found; run train first")
    needed = ["corpus/tfidf.json"]
    for p in phases:
        for name in cfg.scorers:
            rel = f"{_phase_dir('models', p)}/{name}.json"
            if ws.path(rel).is_file():
                needed.append(rel)
        needed.append(f"{_phase_dir('splits', p)}/validation.jsonl")
        needed.append(f"{_phase_dir('splits', p)}/test.jsonl")
    inputs = ws.require(needed, "evaluate")
    embedder = embedder_for(cfg, ws)

    written: dict[str, str] = {}
    summary: dict[str, dict] = {}
    for p in phases:
        scorer_models = _load_models(cfg, ws, p)
        if not scorer_models:
            continue
        label_set = scorer_models[0][1].classes
        val_set = _read_phase_dataset(ws, f"{_phase_dir('splits', p)}/validation.jsonl", p)
        test_set = _read_phase_dataset(ws, f"{_phase_dir('splits', p)}/test.jsonl", p)
        base = _phase_dir("eval", p)

        matrices: dict[str, dict[str, ProbabilityMatrix]] = {"validation": {}, "test": {}}
        for split_name, dataset in (("validation", val_set), ("test", test_set)):
            if not dataset.samples:
                continue
            ids = [s.technique_id for s in dataset.samples]
            X = _embed_dataset(embedder, dataset)
            for handle, model in scorer_models:
                matrix = score(handle, model, ids, X)
                rel = f"{base}/matrices/{handle.name}_{split_name}.jsonl"
                path = ws.path(rel)
                path.parent.mkdir(parents=True, exist_ok=True)
                write_probability_matrix(path, matrix, p)
                written[rel] = _digest_file(path)
                matrices[split_name][handle.name] = matrix
            for name, directory in cfg.external_scorers.items():
                ext = Path(directory) / f"{p.label}.{split_name}.jsonl"
                matrices[split_name][name] = load_probability_matrix(
                    ext, label_set, ids
                )

        if val_set.samples:
            val_truth = [s.label for s in val_set.samples]
            val_reports = {
                name: evaluate(matrix.argmax_labels(), val_truth, label_set)
                for name, matrix in matrices["validation"].items()
            }
            weights = fit_weights(p, val_reports)
        else:
            logger.warning(
                "phase %s: empty validation split, using uniform ensemble weights",
                p.label,
            )
            names = [h.name for h, _ in scorer_models] + list(cfg.external_scorers)
            weights = EnsembleWeights(
                phase=p,
                weights={n: 1.0 / len(names) for n in names},
                provenance={n: 0.0 for n in names},
            )
        ws.emit(f"{base}/weights.json", weights.to_json() + "\n", written)

        phase_report: dict = {
            "phase": p.label,
            "label_set": list(label_set),
            "weights": weights.weights,
            "f1_provenance": weights.provenance,
            "scorers": {},
            "ensemble": None,
            "best_scorer": None,
            "delta_vs_best": None,
        }
        if test_set.samples:
            test_truth = [s.label for s in test_set.samples]
            test_reports = {
                name: evaluate(matrix.argmax_labels(), test_truth, label_set)
                for name, matrix in matrices["test"].items()
            }
            vote = soft_vote(matrices["test"], weights)
            ensemble_report = evaluate(vote.predictions, test_truth, label_set)
            best_name = max(
                sorted(test_reports), key=lambda name: test_reports[name].f1
            )
            best = test_reports[best_name]
            phase_report["scorers"] = {
                name: report.to_dict() for name, report in test_reports.items()
            }
            phase_report["ensemble"] = ensemble_report.to_dict()
            phase_report["best_scorer"] = best_name
            phase_report["delta_vs_best"] = {
                "accuracy": ensemble_report.accuracy - best.accuracy,
                "precision": ensemble_report.precision - best.precision,
                "recall": ensemble_report.recall - best.recall,
                "f1_score": ensemble_report.f1 - best.f1,
            }
        ws.emit(
            f"{base}/report.json",
            json.dumps(phase_report, indent=2, sort_keys=True) + "\n",
            written,
        )
        summary[p.label] = phase_report

    ws.emit(
        "eval/summary.json",
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
        written,
    )
    ws.write_manifest("evaluate", inputs, written)
    return written


def stage_predict(
    cfg: PipelineConfig,
    phase: Phase,
    input_path: str | Path,
    scorer: str,
    output_path: str | Path | None = None,
) -> Path:
    """Probability matrix for arbitrary texts: {"id", "text"} JSON lines."""
    ws = Workspace(cfg)
    needed = ["corpus/tfidf.json"] + [
        f"{_phase_dir('models', phase)}/{name}.json"
        for name in (cfg.scorers if scorer == "ensemble" else [scorer])
    ]
    if scorer == "ensemble":
        needed.append(f"{_phase_dir('eval', phase)}/weights.json")
    ws.require(needed, "predict")
    embedder = embedder_for(cfg, ws)
    pairs: list[tuple[str, str]] = []
    with Path(input_path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pairs.append((str(obj["id"]), preprocess(str(obj["text"]))))
    ids = [i for i, _ in pairs]
    X = np.asarray([embedder.vector_for(text=t) for _, t in pairs])

    scorer_models = _load_models(cfg, ws, phase)
    by_name = {handle.name: (handle, model) for handle, model in scorer_models}
    if scorer == "ensemble":
        matrices = {
            name: score(handle, model, ids, X) for name, (handle, model) in by_name.items()
        }
        weights = EnsembleWeights.from_json(
            ws.path(f"{_phase_dir('eval', phase)}/weights.json").read_text(encoding="utf-8")
        )
        matrix = soft_vote(matrices, weights).matrix
    else:
        if scorer not in by_name:
            raise ConfigError(f"no trained scorer {scorer!r} for phase {phase.label}")
        handle, model = by_name[scorer]
        matrix = score(handle, model, ids, X)
    out = Path(output_path) if output_path else ws.path(
        f"predictions/{phase.label}.{scorer}.jsonl"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_probability_matrix(out, matrix, phase)
    inputs = {"texts": _digest_file(Path(input_path))}
    try:
        rel = out.resolve().relative_to(ws.root.resolve()).as_posix()
        outputs = {rel: _digest_file(out)}
    except ValueError:
        # custom output outside the work dir: record it, but verify skips it
        outputs = {f"external:{out}": _digest_file(out)}
    ws.write_manifest("predict", inputs, outputs)
    return out


def stage_chain(
    cfg: PipelineConfig, predictions_path: str | Path
) -> dict[str, str]:
    """Graph from a predictions file: {"phases": {phase: [{label, description}]}}."""
    ws = Workspace(cfg)
    inputs = ws.require(["corpus/tfidf.json"], "chain")
    embedder = embedder_for(cfg, ws)
    raw = json.loads(Path(predictions_path).read_text(encoding="utf-8"))
    per_phase = {
        Phase.from_label(name): [(row["label"], row["description"]) for row in rows]
        for name, rows in raw["phases"].items()
    }
    graph = build_semantic_graph(per_phase, embedder, cfg.tau)
    paths = extract_paths(graph, k=cfg.k_pred * 4)
    written: dict[str, str] = {}
    ws.emit("chains/graph.json", export_json(graph, paths), written)
    ws.emit(
        "chains/graph.dot", export_dot(graph, paths[0] if paths else None), written
    )
    inputs["predictions"] = _digest_file(Path(predictions_path))
    ws.write_manifest("chain", inputs, written)
    return written


STAGE_SEQUENCE: tuple[tuple[str, Callable[[PipelineConfig], dict]], ...] = (
    ("ingest", stage_ingest),
    ("split", stage_split),
    ("augment", stage_augment),
    ("train", stage_train),
    ("evaluate", stage_evaluate),
)


def _stage_outputs_fresh(ws: Workspace, command: str) -> bool:
    manifest_path = ws.manifest_path(command)
    if not manifest_path.is_file():
        return False
    obj = json.loads(manifest_path.read_text(encoding="utf-8"))
    if obj.get("config_digest") != ws.cfg.digest():
        return False
    for rel, digest in obj.get("outputs", {}).items():
        path = ws.path(rel)
        if not path.is_file() or _digest_file(path) != digest:
            return False
    return True


def ensure_stages(cfg: PipelineConfig) -> None:
    """Run any stage whose outputs are missing or stale (monolith mode)."""
    ws = Workspace(cfg)
    for command, fn in STAGE_SEQUENCE:
        if _stage_outputs_fresh(ws, command):
            logger.info("%s: artifacts fresh, reusing", command)
            continue
        logger.info("%s: running", command)
        fn(cfg)


def stage_narrative(cfg: PipelineConfig, text: str) -> tuple[ChainRun, dict[str, str]]:
    ws = Workspace(cfg)
    ensure_stages(cfg)

    anchors = anchors_mapping(cfg)
    embedder = embedder_for(cfg, ws)
    labels_doc = json.loads(ws.path("corpus/labels.json").read_text(encoding="utf-8"))

    bundles: dict[Phase, PhaseBundle] = {}
    model_digests: dict[str, str] = {}
    for p in PHASES:
        scorer_models = _load_models(cfg, ws, p)
        if not scorer_models:
            continue
        weights_rel = f"{_phase_dir('eval', p)}/weights.json"
        weights = EnsembleWeights.from_json(
            ws.path(weights_rel).read_text(encoding="utf-8")
        )
        bundles[p] = PhaseBundle(
            phase=p,
            scorers=scorer_models,
            weights=weights,
            label_descriptions=dict(labels_doc.get(p.label, {})),
        )
        for name in cfg.scorers:
            rel = f"{_phase_dir('models', p)}/{name}.json"
            if ws.path(rel).is_file():
                model_digests[rel] = _digest_file(ws.path(rel))

    run = run_narrative(
        text, bundles, embedder, anchors, tau=cfg.tau, k_pred=cfg.k_pred
    )
    run.config["models"] = model_digests
    run.config["engine_version"] = __version__
    run.config["config_digest"] = cfg.digest()

    paths = extract_paths(run.graph, k=max(cfg.k_pred * 4, 8))
    written: dict[str, str] = {}
    ws.emit("chains/run.json", run.to_json(), written)
    ws.emit("chains/graph.json", export_json(run.graph, paths), written)
    ws.emit(
        "chains/graph.dot", export_dot(run.graph, paths[0] if paths else None), written
    )
    ws.emit("chains/paths.txt", format_paths_table(paths), written)
    inputs = dict(model_digests)
    ws.write_manifest("narrative", inputs, written)
    return run, written


def format_paths_table(paths) -> str:
    if not paths:
        return "no paths\n"
    lines = [f"{'rank':>4}  {'score':>10}  {'span':<42} path"]
    for rank, path in enumerate(paths, start=1):
        span = f"{path.start_phase.label} -> {path.end_phase.label}"
        chain = " -> ".join(node.label for node in path.nodes)
        lines.append(f"{rank:>4}  {path.score:>10.4f}  {span:<42} {chain}")
    return "\n".join(lines) + "\n"


def stage_verify(cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    """Re-hash every manifest output; return (drifted, orphaned)."""
    ws = Workspace(cfg)
    recorded = ws.recorded_outputs()
    drifted = []
    for rel, digest in sorted(recorded.items()):
        if rel.startswith("external:"):
            continue
        path = ws.path(rel)
        if not path.is_file():
            drifted.append(f"{rel}: missing")
        elif _digest_file(path) != digest:
            drifted.append(f"{rel}: drifted")
    known = set(recorded)
    orphaned = []
    if ws.root.is_dir():
        for path in sorted(ws.root.rglob("*")):
            if not path.is_file():
                continue
            rel = path.relative_to(ws.root).as_posix()
            if rel.startswith("manifests/"):
                continue
            if rel not in known:
                orphaned.append(rel)
    return drifted, orphaned
