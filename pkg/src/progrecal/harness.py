"""Experiment runner: stages, artifacts, paired baselines and ablations.

Stage artifacts are content addressed. Each upstream stage (data, snapshot
encoder, temporal encoder) lives under ``<out>/stages/<kind>-<key>`` where the
key hashes only the configuration that stage depends on, so ablation variants
that differ downstream share their upstream work. Finetuning and evaluation
outputs live under ``<out>/runs/<run_id>`` with ``run_id = hash(config)``
(the seed is part of the config).

Result files contain no timestamps; wall-clock times go to a separate
``timing.json`` so that ``results.json`` is byte-identical across reruns.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .checkpoint import load_checkpoint, load_matrix, save_checkpoint, save_matrix
from .errors import ConfigurationError, MissingArtifactError, ProgrecalError
from .losses import ALIGNMENT_LOSSES
from .metrics import EvalReport, evaluate_binary, evaluate_ordinal
from .recal import RecalConfig, RecalModel, finetune, matched_pair_distances, predict, recalibrated
from .snapshot import SnapshotConfig, SnapshotEncoder, embed_images, snapshot_pretrain
from .synthdata import Datasets, SynthConfig, grid_split, load_datasets, make_datasets, save_datasets, tile_layout
from .temporal import ATTENTION_MODES, TemporalClassifier, TemporalConfig, temporal_pretrain

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATION_AXES = {
    "loss": tuple(ALIGNMENT_LOSSES),
    "attention": ATTENTION_MODES,
    "temporal": ("on", "off"),
}


# -- configuration -----------------------------------------------------------------
@dataclass
class DataSection:
    n_patients: int = 200
    fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.3, 0.2)
    grid: int | None = None  # tiles per frame; None -> 6 (chest) or 4 (knee)
    synth: dict = field(default_factory=dict)


@dataclass
class SnapshotSection:
    model: dict = field(default_factory=dict)
    epochs: int = 3
    lr: float = 5e-4
    batch_size: int = 72
    lam_rec: float = 1.0
    lam_con: float = 1.0
    tau: float = 0.5


@dataclass
class TemporalSection:
    model: dict = field(default_factory=dict)
    epochs: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8


@dataclass
class RecalSection:
    lam: float = 0.5
    hidden: int = 128
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 16
    bank_batch: int = 32
    weight_decay: float = 0.0


@dataclass
class AblationSection:
    loss: str = "mmd"
    attention: str = "hierarchical"
    temporal: str = "on"


_SECTIONS = {
    "data": DataSection,
    "snapshot": SnapshotSection,
    "temporal": TemporalSection,
    "recal": RecalSection,
    "ablation": AblationSection,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = dict(values)
    if "fractions" in kwargs:
        kwargs["fractions"] = tuple(kwargs["fractions"])
    return cls(**kwargs)


@dataclass
class ExperimentConfig:
    task: str = "chest"
    seed: int = 0
    folds: int = 1
    data: DataSection = field(default_factory=DataSection)
    snapshot: SnapshotSection = field(default_factory=SnapshotSection)
    temporal: TemporalSection = field(default_factory=TemporalSection)
    recal: RecalSection = field(default_factory=RecalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    schema_version: int = SCHEMA_VERSION

    # -- serialisation
    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s) {unknown}; allowed: {sorted(known)}")
        kwargs = {k: _build(_SECTIONS[k], d[k], k) for k in _SECTIONS if k in d}
        for k in ("task", "seed", "folds"):
            if k in d:
                kwargs[k] = d[k]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        return cls.from_yaml(path.read_text())

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"recal.lam": 0})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigurationError(f"unknown config path {path!r}")
            node[leaf] = _plain(value)
        return ExperimentConfig.from_dict(d)

    # -- validation and derived component configs
    def validate(self) -> None:
        if self.task not in ("chest", "knee"):
            raise ConfigurationError(f"task must be chest or knee, got {self.task!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if not isinstance(self.folds, int) or self.folds < 1:
            raise ConfigurationError(f"folds must be a positive integer, got {self.folds!r}")
        for axis, allowed in ABLATION_AXES.items():
            value = getattr(self.ablation, axis)
            if value not in allowed:
                raise ConfigurationError(f"ablation.{axis} must be one of {list(allowed)}, got {value!r}")
        if self.recal.lam < 0:
            raise ConfigurationError(f"recal.lam must be nonnegative, got {self.recal.lam}")
        if len(self.data.fractions) != 4:
            raise ConfigurationError("data.fractions needs four entries (temporal, pretrain, finetune, test)")
        try:
            self.synth_config().validate()
            self.snapshot_config().validate()
            self.temporal_config().validate()
            tile_layout(self.grid)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid model or data settings: {exc}") from exc
        snap_dim, temp_dim = self.snapshot_config().embed_dim, self.temporal_config().feature_dim
        if snap_dim != temp_dim:
            raise ConfigurationError(f"snapshot embed_dim {snap_dim} must equal temporal feature_dim {temp_dim}")

    @property
    def grid(self) -> int:
        if self.data.grid is not None:
            return int(self.data.grid)
        return 6 if self.task == "chest" else 4

    def synth_config(self) -> SynthConfig:
        base = SynthConfig.chest() if self.task == "chest" else SynthConfig.knee()
        return SynthConfig.from_dict({**base.to_dict(), **self.data.synth})

    def snapshot_config(self) -> SnapshotConfig:
        s = self.synth_config()
        return SnapshotConfig.from_dict({"image_shape": [s.H, s.W], **self.snapshot.model})

    def temporal_config(self) -> TemporalConfig:
        s = self.synth_config()
        rows, cols = tile_layout(self.grid)
        base = {"tile_shape": [s.H // rows, s.W // cols], "attention": self.ablation.attention}
        return TemporalConfig.from_dict({**base, **self.temporal.model})

    def recal_config(self, lam: float | None = None, loss: str | None = None) -> RecalConfig:
        r = self.recal
        return RecalConfig(
            task=self.task,
            lam=r.lam if lam is None else lam,
            loss=self.ablation.loss if loss is None else loss,
            hidden=r.hidden,
            epochs=r.epochs,
            lr=r.lr,
            batch_size=r.batch_size,
            bank_batch=r.bank_batch,
            weight_decay=r.weight_decay,
        )

    @property
    def uses_temporal(self) -> bool:
        return self.ablation.temporal == "on"


def config_schema() -> dict[str, Any]:
    """JSON Schema describing the config file (YAML or JSON)."""

    def props(cls) -> dict:
        out = {}
        for f in fields(cls):
            default = _plain(f.default) if f.default is not f.default_factory else None
            typ = {int: "integer", float: "number", str: "string"}.get(type(default), None)
            entry: dict[str, Any] = {}
            if f.name in ("model", "synth"):
                entry = {"type": "object"}
            elif f.name == "fractions":
                entry = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
            elif f.name == "grid":
                entry = {"type": ["integer", "null"]}
            elif typ:
                entry = {"type": typ}
            if f.name in ABLATION_AXES and cls is AblationSection:
                entry["enum"] = list(ABLATION_AXES[f.name])
            out[f.name] = entry
        return {"type": "object", "additionalProperties": False, "properties": out}

    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "progrecal experiment config",
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "task": {"enum": ["chest", "knee"]},
            "seed": {"type": "integer", "minimum": 0},
            "folds": {"type": "integer", "minimum": 1},
            **{name: props(cls) for name, cls in _SECTIONS.items()},
        },
    }


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_id(config: ExperimentConfig) -> str:
    return _digest(config.to_dict())


def stage_keys(config: ExperimentConfig) -> dict[str, str]:
    d = config.to_dict()
    data = _digest({"task": d["task"], "seed": d["seed"], "data": d["data"], "grid": config.grid})
    return {
        "data": data,
        "snapshot": _digest({"data": data, "snapshot": d["snapshot"]}),
        "temporal": _digest({"data": data, "temporal": d["temporal"], "attention": d["ablation"]["attention"]}),
    }


# -- stage layout ------------------------------------------------------------------
class Layout:
    """Paths of every artifact for one config under an output root."""

    def __init__(self, out, config: ExperimentConfig):
        self.root = Path(out)
        keys = stage_keys(config)
        self.data = self.root / "stages" / f"data-{keys['data']}"
        self.snapshot = self.root / "stages" / f"snapshot-{keys['snapshot']}"
        self.temporal = self.root / "stages" / f"temporal-{keys['temporal']}"
        self.run = self.root / "runs" / run_id(config)

    def require(self, path: Path, stage: str, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{what} not found at {path}; run the `{stage}` stage first with the same config")
        return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_time(layout_dir: Path, stage: str, seconds: float) -> None:
    path = layout_dir / "timing.json"
    timing = json.loads(path.read_text()) if path.exists() else {}
    timing[stage] = seconds
    _write_json(path, timing)


# -- stages --------------------------------------------------------------------------
def simulate(config: ExperimentConfig, out) -> Path:
    layout = Layout(out, config)
    if (layout.data / "manifest.json").exists():
        return layout.data
    t0 = time.perf_counter()
    ds = make_datasets(config.data.n_patients, config.data.fractions, config.seed, config.synth_config(), config.task)
    save_datasets(ds, layout.data)
    _record_time(layout.data, "simulate", time.perf_counter() - t0)
    return layout.data


def _load_data(layout: Layout, splits) -> Datasets:
    layout.require(layout.data / "manifest.json", "simulate", "synthetic dataset")
    return load_datasets(layout.data, splits=splits)


def pretrain_snapshot(config: ExperimentConfig, out) -> Path:
    layout = Layout(out, config)
    ckpt = layout.snapshot / "encoder"
    if ckpt.with_suffix(".npz").exists():
        return layout.snapshot
    ds = _load_data(layout, splits=("snapshot_pretrain",))
    t0 = time.perf_counter()
    s = config.snapshot
    images = np.stack([x.image for x in ds.snapshot_pretrain])
    result = snapshot_pretrain(
        images,
        config.snapshot_config(),
        epochs=s.epochs,
        lr=s.lr,
        batch_size=s.batch_size,
        lam_rec=s.lam_rec,
        lam_con=s.lam_con,
        tau=s.tau,
        seed=config.seed,
    )
    save_checkpoint(ckpt, result.model.state_dict(), config.snapshot_config().to_dict(), "snapshot_encoder")
    _write_json(layout.snapshot / "history.json", result.history)
    _record_time(layout.snapshot, "pretrain-snapshot", time.perf_counter() - t0)
    return layout.snapshot


def _sequences(config: ExperimentConfig, ds: Datasets):
    return [seq for traj in ds.temporal_train for seq in grid_split(traj, config.grid)]


def pretrain_temporal(config: ExperimentConfig, out) -> Path:
    layout = Layout(out, config)
    ckpt = layout.temporal / "encoder"
    if ckpt.with_suffix(".npz").exists():
        return layout.temporal
    ds = _load_data(layout, splits=())
    t0 = time.perf_counter()
    t = config.temporal
    seqs = _sequences(config, ds)
    result = temporal_pretrain(
        seqs,
        config.temporal_config(),
        epochs=t.epochs,
        lr=t.lr,
        momentum=t.momentum,
        batch_size=t.batch_size,
        seed=config.seed,
    )
    save_checkpoint(ckpt, result.model.state_dict(), config.temporal_config().to_dict(), "temporal_encoder")
    patients = [s.patient_id for s in seqs]
    save_matrix(layout.temporal / "bank", result.bank, result.bank_ids, {"patient_ids": patients, "labels": [s.label for s in seqs]})
    _write_json(layout.temporal / "history.json", result.history)
    _record_time(layout.temporal, "pretrain-temporal", time.perf_counter() - t0)
    return layout.temporal


def load_snapshot_encoder(layout: Layout) -> SnapshotEncoder:
    path = layout.require(layout.snapshot / "encoder.npz", "pretrain-snapshot", "snapshot encoder checkpoint")
    state, cfg = load_checkpoint(path, kind="snapshot_encoder")
    model = SnapshotEncoder(SnapshotConfig.from_dict(cfg), seed=0)
    model.load_state_dict(state)
    return model


def load_temporal_encoder(layout: Layout) -> TemporalClassifier:
    path = layout.require(layout.temporal / "encoder.npz", "pretrain-temporal", "temporal encoder checkpoint")
    state, cfg = load_checkpoint(path, kind="temporal_encoder")
    model = TemporalClassifier(TemporalConfig.from_dict(cfg), seed=0)
    model.load_state_dict(state)
    return model


def load_bank(layout: Layout) -> tuple[np.ndarray, dict]:
    layout.require(layout.temporal / "bank.npy", "pretrain-temporal", "temporal representation bank")
    return load_matrix(layout.temporal / "bank")


def _folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, 5]).permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


def _embed(encoder: SnapshotEncoder, samples) -> np.ndarray:
    return embed_images(encoder, np.stack([s.image for s in samples]))


def _finetune_sets(config: ExperimentConfig, layout: Layout, encoder: SnapshotEncoder):
    """Training/held-out index sets per fold over the labelled snapshot pool.

    With one fold the finetune split trains and the test split is held out
    (and is not read here). With K folds, finetune and test splits are pooled
    and partitioned into K patient-disjoint folds.
    """
    if config.folds == 1:
        ds = _load_data(layout, splits=("snapshot_finetune",))
        X = _embed(encoder, ds.snapshot_finetune)
        y = np.array([s.label for s in ds.snapshot_finetune])
        return X, y, [(np.arange(len(y)), None)]
    ds = _load_data(layout, splits=("snapshot_finetune", "snapshot_test"))
    pool = ds.snapshot_finetune + ds.snapshot_test
    X = _embed(encoder, pool)
    y = np.array([s.label for s in pool])
    parts = _folds(len(pool), config.folds, config.seed)
    return X, y, [(np.setdiff1d(np.arange(len(y)), held), held) for held in parts]


def _bank_for(config: ExperimentConfig, layout: Layout):
    if not config.uses_temporal:
        return None, None
    return load_bank(layout)


def finetune_stage(config: ExperimentConfig, out, losses=None) -> Path:
    """Train the recalibration model and the paired λ=0 baseline.

    ``losses`` lists extra alignment losses to train with the same seed and
    data (used by the loss ablation); the configured loss is always trained.
    """
    layout = Layout(out, config)
    encoder = load_snapshot_encoder(layout)
    bank, bank_meta = _bank_for(config, layout)
    t0 = time.perf_counter()
    X, y, folds = _finetune_sets(config, layout, encoder)
    lam = config.recal.lam if config.uses_temporal else 0.0
    variants = {"recal": config.recal_config(lam=lam), "baseline": config.recal_config(lam=0.0)}
    for extra in losses or ():
        if extra != config.ablation.loss:
            variants[f"recal_{extra}"] = config.recal_config(lam=lam, loss=extra)
    histories = {}
    for k, (train_idx, _) in enumerate(folds):
        for name, rcfg in variants.items():
            res = finetune(X[train_idx], y[train_idx], bank if rcfg.lam > 0 else None, rcfg, seed=config.seed)
            tag = f"{name}_fold{k}"
            save_checkpoint(layout.run / "models" / tag, res.model.state_dict(), asdict(rcfg), "recal_model")
            (layout.run / "history").mkdir(parents=True, exist_ok=True)
            (layout.run / "history" / f"{tag}.csv").write_text(res.state.to_csv())
            histories[tag] = res.state.history
    _write_json(layout.run / "finetune.json", {"variants": sorted(variants), "folds": len(folds), "histories": histories})
    if config.folds == 1:
        save_matrix(layout.run / "embeddings" / "snapshot_finetune", X, [str(i) for i in range(len(X))], {"labels": y.tolist()})
    _write_json(layout.run / "config.json", config.to_dict())
    _record_time(layout.run, "finetune", time.perf_counter() - t0)
    return layout.run


def _load_recal(layout: Layout, tag: str) -> RecalModel:
    path = layout.require(layout.run / "models" / f"{tag}.npz", "finetune", f"recalibration model {tag}")
    state, cfg = load_checkpoint(path, kind="recal_model")
    rcfg = RecalConfig(**cfg)
    model = RecalModel(state["fc1.weight"].shape[0], rcfg.hidden, rcfg.output_dim, seed=None)
    model.load_state_dict(state)
    return model


def _report(model: RecalModel, X: np.ndarray, y: np.ndarray, config: ExperimentConfig, name: str) -> EvalReport:
    out = predict(model, X, config.task)
    echo = {"variant": name, "task": config.task}
    if config.task == "chest":
        return evaluate_binary(out["probs"][:, 1], y, config=echo)
    return evaluate_ordinal(out["pred"], y, out["probs"], n_classes=5, config=echo)


def _mean_metrics(reports: list[EvalReport]) -> dict[str, float | None]:
    keys = sorted(reports[0].metrics)
    out = {}
    for k in keys:
        vals = [r.metrics[k] for r in reports]
        out[k] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out


def _matched_pairs(config: ExperimentConfig, layout: Layout, encoder, model: RecalModel) -> dict[str, float] | None:
    """Distances between first-scan snapshots and temporal representations of the same patients."""
    if not config.uses_temporal:
        return None
    bank, meta = load_bank(layout)
    ds = _load_data(layout, splits=())
    pids = np.array(meta["patient_ids"])
    temporal = np.stack([bank[pids == t.patient_id].mean(axis=0) for t in ds.temporal_train])
    first = embed_images(encoder, np.stack([t.images[0] for t in ds.temporal_train]))
    labels = [t.outcome for t in ds.temporal_train]
    return matched_pair_distances(recalibrated(model, first), recalibrated(model, temporal), labels, labels)


def evaluate_stage(config: ExperimentConfig, out, untrained: bool = False) -> dict[str, Any]:
    """Score every trained variant on the held-out data and write ``results.json``.

    ``untrained`` evaluates a freshly initialised snapshot encoder with a
    zero-initialised recalibration head and needs only the `simulate` stage.
    """
    layout = Layout(out, config)
    t0 = time.perf_counter()
    if untrained:
        encoder = SnapshotEncoder(config.snapshot_config(), seed=config.seed)
        ds = _load_data(layout, splits=("snapshot_test",))
        X = _embed(encoder, ds.snapshot_test)
        y = np.array([s.label for s in ds.snapshot_test])
        model = RecalModel(X.shape[1], config.recal.hidden, config.recal_config().output_dim, seed=None)
        report = _report(model, X, y, config, "untrained")
        results = {"run_id": run_id(config), "untrained": True, "reports": {"untrained": report.to_dict()}}
        _write_json(layout.run / "results_untrained.json", results)
        return results

    layout.require(layout.run / "finetune.json", "finetune", "finetuned models")
    info = json.loads((layout.run / "finetune.json").read_text())
    encoder = load_snapshot_encoder(layout)
    if config.folds == 1:
        ds = _load_data(layout, splits=("snapshot_test",))
        X_test = _embed(encoder, ds.snapshot_test)
        y_test = np.array([s.label for s in ds.snapshot_test])
        held_sets = [(X_test, y_test)]
    else:
        X, y, folds = _finetune_sets(config, layout, encoder)
        held_sets = [(X[held], y[held]) for _, held in folds]

    reports: dict[str, Any] = {}
    summary_metrics: dict[str, dict] = {}
    for name in info["variants"]:
        per_fold = [_report(_load_recal(layout, f"{name}_fold{k}"), Xh, yh, config, name) for k, (Xh, yh) in enumerate(held_sets)]
        reports[name] = [r.to_dict() for r in per_fold]
        summary_metrics[name] = _mean_metrics(per_fold)

    key = "auc" if config.task == "chest" else "ova_auc"
    summary: dict[str, Any] = {"metric": key}
    for name, m in summary_metrics.items():
        summary[f"{name}_{key}"] = m[key]
    rec, base = summary_metrics["recal"][key], summary_metrics["baseline"][key]
    summary["delta"] = None if rec is None or base is None else rec - base
    if config.task == "knee":
        for name, m in summary_metrics.items():
            for k in ("micro_f1", "balanced_accuracy", "kappa", "ovo_auc_1_2", "ovo_auc_2_3"):
                summary[f"{name}_{k}"] = m[k]

    results = {
        "run_id": run_id(config),
        "stage_keys": stage_keys(config),
        "config": config.to_dict(),
        "summary": summary,
        "metrics": summary_metrics,
        "reports": reports,
        "histories": info["histories"],
        "matched_pairs": _matched_pairs(config, layout, encoder, _load_recal(layout, "recal_fold0")),
    }
    if config.folds == 1:
        save_matrix(layout.run / "embeddings" / "snapshot_test", X_test, [str(i) for i in range(len(X_test))], {"labels": y_test.tolist()})
        recal_model = _load_recal(layout, "recal_fold0")
        save_matrix(
            layout.run / "embeddings" / "recalibrated_test",
            recalibrated(recal_model, X_test),
            [str(i) for i in range(len(X_test))],
            {"labels": y_test.tolist()},
        )
    _write_json(layout.run / "results.json", results)
    _record_time(layout.run, "evaluate", time.perf_counter() - t0)
    return results


STAGES = ("simulate", "pretrain-snapshot", "pretrain-temporal", "finetune", "evaluate")


def run_full_pipeline(config: ExperimentConfig, out, losses=None) -> dict[str, Any]:
    """Run every stage; the λ=0 baseline is always trained alongside."""
    config.validate()
    steps = [
        ("simulate", lambda: simulate(config, out)),
        ("pretrain-snapshot", lambda: pretrain_snapshot(config, out)),
        ("pretrain-temporal", lambda: pretrain_temporal(config, out) if config.uses_temporal else None),
        ("finetune", lambda: finetune_stage(config, out, losses)),
        ("evaluate", lambda: evaluate_stage(config, out)),
    ]
    result = None
    for name, step in steps:
        log.info("stage %s", name)
        try:
            result = step()
        except ProgrecalError as exc:
            raise type(exc)(f"stage {name} failed: {exc}") from exc
    return result


def ablate(config: ExperimentConfig, axis: str, out) -> dict[str, Any]:
    """Run every value of one ablation axis with shared seeds.

    Returns the per-variant summaries and a plain-text comparison table.
    """
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"ablation axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    key = "auc" if config.task == "chest" else "ova_auc"
    rows = {}
    if axis == "loss":
        # one finetune run trains all four losses on identical data and seeds
        res = run_full_pipeline(config.replace(**{"ablation.loss": "mmd"}), out, losses=ABLATION_AXES["loss"])
        for loss in ABLATION_AXES["loss"]:
            name = "recal" if loss == "mmd" else f"recal_{loss}"
            rows[loss] = res["metrics"][name][key]
        baseline = res["metrics"]["baseline"][key]
    else:
        baseline = None
        for value in ABLATION_AXES[axis]:
            res = run_full_pipeline(config.replace(**{f"ablation.{axis}": value}), out)
            rows[value] = res["metrics"]["recal"][key]
            baseline = res["metrics"]["baseline"][key]
    table = format_table(axis, key, rows, baseline)
    summary = {"axis": axis, "metric": key, "results": rows, "baseline": baseline, "table": table}
    _write_json(Path(out) / "ablations" / f"{axis}-{run_id(config)}.json", summary)
    return summary


def format_table(axis: str, metric: str, rows: dict[str, float | None], baseline: float | None) -> str:
    width = max(len(axis), *(len(k) for k in rows), len("baseline (lam=0)"))
    lines = [f"{axis:<{width}}  {metric}", "-" * (width + 2 + max(len(metric), 6))]
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    for name, value in rows.items():
        lines.append(f"{name:<{width}}  {fmt(value)}")
    if baseline is not None:
        lines.append(f"{'baseline (lam=0)':<{width}}  {fmt(baseline)}")
    return "\n".join(lines)


def default_config(task: str = "chest", **changes) -> ExperimentConfig:
    cfg = ExperimentConfig(task=task)
    return cfg.replace(**changes) if changes else copy.deepcopy(cfg)
