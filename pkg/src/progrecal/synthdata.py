"""Synthetic longitudinal imaging cohort with known severity dynamics.

Each patient has a monotone latent severity path in [0, 1]. Frames show a
centred Gaussian lesion whose radius and intensity grow with severity, plus
pixel noise. The patient outcome is ``max(severity) >= threshold`` and the
per-frame ordinal grade is ``min(floor(5 * severity), 4)``.

Final severity is uniform on [0, 1], so the design outcome prevalence is
``1 - threshold``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MissingArtifactError, ParameterError

N_GRADES = 5
DATASET_FORMAT_VERSION = 1
SPLIT_NAMES = ("temporal_train", "snapshot_pretrain", "snapshot_finetune", "snapshot_test")


@dataclass(frozen=True)
class SynthConfig:
    H: int = 48
    W: int = 48
    T_range: tuple[int, int] = (4, 16)
    noise_level: float = 0.05
    threshold: float = 0.5
    background: float = 0.15
    # share of a patient's total progression already present at the first scan
    onset_fraction: tuple[float, float] = (0.0, 0.4)

    def validate(self) -> None:
        if self.H < 16 or self.W < 16:
            raise ParameterError(f"image size must be at least 16x16, got {self.H}x{self.W}")
        if not 0.0 <= self.noise_level < 0.5:
            raise ParameterError(f"noise_level must be in [0, 0.5), got {self.noise_level}")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ParameterError(f"invalid T_range {self.T_range}")
        if not 0.0 < self.threshold <= 1.0:
            raise ParameterError(f"threshold must be in (0, 1], got {self.threshold}")

    @classmethod
    def chest(cls, **overrides) -> "SynthConfig":
        return cls(**overrides)

    @classmethod
    def knee(cls, **overrides) -> "SynthConfig":
        return cls(**{"H": 32, "W": 32, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T_range"] = list(self.T_range)
        d["onset_fraction"] = list(self.onset_fraction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("T_range", "onset_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @property
    def design_prevalence(self) -> float:
        return 1.0 - self.threshold


@dataclass
class PatientTrajectory:
    patient_id: str
    severity: np.ndarray  # (T,)
    images: np.ndarray  # (T, H, W)
    outcome: int
    grades: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return len(self.severity)


@dataclass
class SnapshotSample:
    image: np.ndarray
    label: int
    patient_id: str
    timepoint: int
    outcome: int = 0
    grade: int = 0


@dataclass
class TemporalSequence:
    """One aligned tile sequence cut from a patient trajectory."""

    sequence_id: str
    patient_id: str
    images: np.ndarray  # (T, h, w)
    label: int
    grid_index: int = 0


@dataclass
class Datasets:
    temporal_train: list[PatientTrajectory]
    snapshot_pretrain: list[SnapshotSample]
    snapshot_finetune: list[SnapshotSample]
    snapshot_test: list[SnapshotSample]
    task: str = "chest"
    config: SynthConfig = field(default_factory=SynthConfig)

    def patient_ids(self, split: str) -> set[str]:
        return {item.patient_id for item in getattr(self, split)}


def grade_of(severity) -> np.ndarray:
    return np.minimum(np.floor(N_GRADES * np.asarray(severity)), N_GRADES - 1).astype(np.int64)


def patient_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Child seed for one patient; serial and parallel generation agree."""
    return np.random.SeedSequence([int(master_seed), int(index)])


def sample_severity(rng: np.random.Generator, T: int, config: SynthConfig) -> np.ndarray:
    final = rng.uniform(0.0, 1.0)
    onset = final * rng.uniform(*config.onset_fraction)
    steps = rng.dirichlet(np.ones(T - 1)) if T > 1 else np.zeros(0)
    path = onset + (final - onset) * np.concatenate([[0.0], np.cumsum(steps)])
    return np.clip(np.maximum.accumulate(path), 0.0, 1.0)


def render_frame(severity: float, config: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Background plus a centred Gaussian bump scaled by ``severity``, plus noise."""
    H, W = config.H, config.W
    yy, xx = np.mgrid[0:H, 0:W]
    r2 = (yy - (H - 1) / 2.0) ** 2 + (xx - (W - 1) / 2.0) ** 2
    sigma = (0.05 + 0.25 * severity) * min(H, W)
    amp = 0.8 * severity
    img = config.background + amp * np.exp(-r2 / (2.0 * sigma**2))
    if config.noise_level > 0 and rng is not None:
        img = img + rng.normal(0.0, config.noise_level, size=(H, W))
    return np.clip(img, 0.0, 1.0)


def generate_trajectory(
    seed,
    config: SynthConfig | None = None,
    severity=None,
    patient_id: str | None = None,
) -> PatientTrajectory:
    """One synthetic patient. ``severity`` overrides the sampled latent path."""
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    if severity is None:
        T = int(rng.integers(config.T_range[0], config.T_range[1] + 1))
        severity = sample_severity(rng, T, config)
    else:
        severity = np.asarray(severity, dtype=np.float64)
        if severity.ndim != 1 or np.any(np.diff(severity) < 0) or severity.min() < 0 or severity.max() > 1:
            raise ParameterError("severity override must be a nondecreasing path in [0, 1]")
    images = np.stack([render_frame(s, config, rng) for s in severity])
    outcome = int(severity.max() >= config.threshold)
    pid = patient_id if patient_id is not None else "p" + hashlib.sha1(repr(seed).encode()).hexdigest()[:8]
    return PatientTrajectory(pid, severity, images, outcome, grade_of(severity))


def split_sizes(n_patients: int, fractions) -> list[int]:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (4,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be 4 nonnegative values summing to 1, got {fractions.tolist()}")
    raw = fractions * n_patients
    sizes = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in order[: n_patients - sizes.sum()]:
        sizes[i] += 1
    if np.any(sizes[fractions > 0] == 0):
        raise ConfigurationError(f"{n_patients} patients cannot fill every split with fractions {fractions.tolist()}")
    return sizes.tolist()


def snapshot_timepoint(rng: np.random.Generator, T: int) -> int:
    """An intermediate scan: never the first or the last when T >= 3."""
    return int(rng.integers(1, T - 1)) if T >= 3 else 0


def make_datasets(
    n_patients: int,
    fractions=(0.25, 0.5, 0.15, 0.1),
    seed: int = 0,
    config: SynthConfig | None = None,
    task: str = "chest",
) -> Datasets:
    """Generate a cohort and assign each patient to exactly one split.

    The temporal split keeps full trajectories. Snapshot pretraining uses every
    frame of its patients as an unlabeled single image; finetune and test
    splits keep one intermediate frame per patient, labelled with the
    patient outcome (chest) or that frame's grade (knee).
    """
    if task not in ("chest", "knee"):
        raise ConfigurationError(f"unknown task {task!r}")
    config = config or (SynthConfig.chest() if task == "chest" else SynthConfig.knee())
    config.validate()
    sizes = split_sizes(n_patients, fractions)
    order = np.random.default_rng([int(seed), 7919]).permutation(n_patients)
    patients = [
        generate_trajectory(patient_seed(seed, i), config, patient_id=f"s{seed}-p{i:05d}") for i in range(n_patients)
    ]
    groups, start = [], 0
    for size in sizes:
        groups.append([patients[i] for i in sorted(order[start : start + size])])
        start += size

    def snap(traj: PatientTrajectory, t: int) -> SnapshotSample:
        label = traj.outcome if task == "chest" else int(traj.grades[t])
        return SnapshotSample(traj.images[t], label, traj.patient_id, t, traj.outcome, int(traj.grades[t]))

    pretrain = [snap(p, t) for p in groups[1] for t in range(p.T)]
    picks = []
    for g in groups[2:]:
        picks.append([snap(p, snapshot_timepoint(np.random.default_rng(patient_seed(seed, 10**6 + _index(p))), p.T)) for p in g])
    return Datasets(groups[0], pretrain, picks[0], picks[1], task, config)


def _index(traj: PatientTrajectory) -> int:
    return int(traj.patient_id.rsplit("p", 1)[1])


def tile_layout(G: int) -> tuple[int, int]:
    """Rows x cols for ``G`` tiles, as square as possible with rows <= cols."""
    if G < 1:
        raise ParameterError(f"grid count must be positive, got {G}")
    rows = max(r for r in range(1, int(np.sqrt(G)) + 1) if G % r == 0)
    return rows, G // rows


def grid_split(traj: PatientTrajectory, G: int, label: int | None = None) -> list[TemporalSequence]:
    """Cut every frame into ``G`` equal tiles and return one sequence per tile.

    Tile ``i`` covers the same pixels at every timepoint. All tiles inherit
    the patient-level ``label`` (outcome by default).
    """
    rows, cols = tile_layout(G)
    _, H, W = traj.images.shape
    if H % rows or W % cols:
        raise ParameterError(f"{H}x{W} frames cannot be tiled into {rows}x{cols} equal tiles")
    h, w = H // rows, W // cols
    label = traj.outcome if label is None else label
    out = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            tiles = traj.images[:, r * h : (r + 1) * h, c * w : (c + 1) * w].copy()
            out.append(TemporalSequence(f"{traj.patient_id}-g{i}", traj.patient_id, tiles, int(label), i))
    return out


def reassemble(tiles: list[TemporalSequence], G: int) -> np.ndarray:
    rows, cols = tile_layout(G)
    ordered = sorted(tiles, key=lambda s: s.grid_index)
    return np.concatenate(
        [np.concatenate([ordered[r * cols + c].images for c in range(cols)], axis=2) for r in range(rows)], axis=1
    )


# -- persistence ------------------------------------------------------------------
def save_datasets(ds: Datasets, directory) -> Path:
    """``manifest.json`` plus one ``.npy`` image stack per patient."""
    directory = Path(directory)
    (directory / "patients").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "task": ds.task,
        "config": ds.config.to_dict(),
        "temporal_train": [],
        "snapshot_pretrain": [],
        "snapshot_finetune": [],
        "snapshot_test": [],
    }
    for traj in ds.temporal_train:
        np.save(directory / "patients" / f"{traj.patient_id}.npy", traj.images)
        manifest["temporal_train"].append(
            {
                "patient_id": traj.patient_id,
                "file": f"patients/{traj.patient_id}.npy",
                "severity": traj.severity.tolist(),
                "grades": traj.grades.tolist(),
                "outcome": traj.outcome,
            }
        )
    for split in SPLIT_NAMES[1:]:
        samples = getattr(ds, split)
        if not samples:
            continue
        stack = np.stack([s.image for s in samples])
        fname = f"{split}.npy"
        np.save(directory / fname, stack)
        manifest[split] = {
            "file": fname,
            "items": [
                {"patient_id": s.patient_id, "timepoint": s.timepoint, "label": s.label, "outcome": s.outcome, "grade": s.grade}
                for s in samples
            ],
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_datasets(directory, splits=None) -> Datasets:
    """Load a saved dataset; ``splits`` limits which snapshot splits are read."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the `simulate` stage first")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported dataset format_version {manifest.get('format_version')}")
    temporal = [
        PatientTrajectory(
            e["patient_id"],
            np.asarray(e["severity"], dtype=np.float64),
            np.load(directory / e["file"]),
            int(e["outcome"]),
            np.asarray(e["grades"], dtype=np.int64),
        )
        for e in manifest["temporal_train"]
    ]
    loaded = {}
    for split in SPLIT_NAMES[1:]:
        entry = manifest[split]
        if not entry or (splits is not None and split not in splits):
            loaded[split] = []
            continue
        stack = np.load(directory / entry["file"])
        loaded[split] = [
            SnapshotSample(stack[i], it["label"], it["patient_id"], it["timepoint"], it["outcome"], it["grade"])
            for i, it in enumerate(entry["items"])
        ]
    return Datasets(temporal, task=manifest["task"], config=SynthConfig.from_dict(manifest["config"]), **loaded)
