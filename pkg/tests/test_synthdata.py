import json

import numpy as np
import pytest

from progrecal.errors import ConfigurationError, ParameterError
from progrecal.synthdata import (
    SynthConfig,
    generate_trajectory,
    grade_of,
    grid_split,
    load_datasets,
    make_datasets,
    reassemble,
    save_datasets,
    split_sizes,
)


def test_zero_severity_is_pure_background():
    cfg = SynthConfig(noise_level=0.0)
    traj = generate_trajectory(0, cfg, severity=np.zeros(6))
    np.testing.assert_array_equal(traj.images, np.full((6, 48, 48), cfg.background))
    assert traj.outcome == 0
    assert np.all(traj.grades == 0)


def test_lesion_area_grows_with_linear_severity():
    cfg = SynthConfig(noise_level=0.0)
    traj = generate_trajectory(0, cfg, severity=np.linspace(0.0, 1.0, 5))
    area = [(img > cfg.background + 0.02).sum() for img in traj.images]
    assert all(b > a for a, b in zip(area, area[1:])), area


def test_same_seed_same_trajectory():
    a, b = generate_trajectory(7), generate_trajectory(7)
    assert a.patient_id == b.patient_id
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.severity, b.severity)


def test_trajectory_invariants():
    cfg = SynthConfig()
    for seed in range(40):
        t = generate_trajectory(seed, cfg)
        assert 4 <= t.T <= 16
        assert np.all(np.diff(t.severity) >= 0)
        assert t.images.min() >= 0.0 and t.images.max() <= 1.0
        assert t.outcome == int(t.severity.max() >= cfg.threshold)
        np.testing.assert_array_equal(t.grades, np.minimum(np.floor(5 * t.severity), 4))


def test_grade_clamp():
    np.testing.assert_array_equal(grade_of([0.0, 0.19, 0.2, 0.99, 1.0]), [0, 0, 1, 4, 4])


def test_grade_histogram_covers_all_grades():
    grades = np.concatenate([generate_trajectory(s).grades for s in range(150)])
    assert set(np.unique(grades)) == {0, 1, 2, 3, 4}


@pytest.mark.parametrize("kw", [dict(H=8), dict(noise_level=0.6), dict(T_range=(0, 3)), dict(threshold=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ParameterError):
        generate_trajectory(0, SynthConfig(**kw))


def test_split_sizes_example():
    assert split_sizes(200, (0.25, 0.5, 0.15, 0.1)) == [50, 100, 30, 20]


def test_split_sizes_errors():
    with pytest.raises(ConfigurationError):
        split_sizes(3, (0.25, 0.25, 0.25, 0.25))
    with pytest.raises(ConfigurationError):
        split_sizes(100, (0.5, 0.5, 0.5, 0.1))


def test_make_datasets_disjoint_and_sized():
    ds = make_datasets(200, (0.25, 0.5, 0.15, 0.1), seed=3)
    assert len(ds.temporal_train) == 50
    assert len(ds.patient_ids("snapshot_pretrain")) == 100
    assert len(ds.snapshot_finetune) == 30 and len(ds.snapshot_test) == 20
    ids = [ds.patient_ids(s) for s in ("temporal_train", "snapshot_pretrain", "snapshot_finetune", "snapshot_test")]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not ids[i] & ids[j]


def test_snapshot_labels_match_generating_trajectory():
    ds = make_datasets(60, (0.25, 0.25, 0.25, 0.25), seed=1)
    for s in ds.snapshot_finetune + ds.snapshot_test:
        idx = int(s.patient_id.rsplit("p", 1)[1])
        traj = generate_trajectory(np.random.SeedSequence([1, idx]), ds.config, patient_id=s.patient_id)
        np.testing.assert_array_equal(traj.images[s.timepoint], s.image)
        assert s.label == traj.outcome
        assert 0 < s.timepoint < traj.T - 1


def test_knee_labels_are_grades():
    ds = make_datasets(40, (0.25, 0.25, 0.25, 0.25), seed=2, task="knee")
    assert all(s.label == s.grade for s in ds.snapshot_finetune)
    assert ds.snapshot_finetune[0].image.shape == (32, 32)


def test_test_prevalence_near_design():
    cfg = SynthConfig()
    prevalences = []
    for seed in range(5):
        ds = make_datasets(500, (0.25, 0.25, 0.3, 0.2), seed=seed)
        prevalences.append(np.mean([s.label for s in ds.snapshot_test]))
    assert abs(np.mean(prevalences) - cfg.design_prevalence) <= 0.10


def test_grid_one_is_identity():
    traj = generate_trajectory(0)
    (only,) = grid_split(traj, 1)
    np.testing.assert_array_equal(only.images, traj.images)


def test_grid_six_retiles_losslessly():
    traj = generate_trajectory(1)
    tiles = grid_split(traj, 6)
    assert len(tiles) == 6
    assert all(t.images.shape[1:] == (24, 16) for t in tiles)
    np.testing.assert_array_equal(reassemble(tiles, 6), traj.images)


def test_grid_four_on_knee():
    traj = generate_trajectory(2, SynthConfig.knee())
    tiles = grid_split(traj, 4)
    assert len(tiles) == 4
    np.testing.assert_array_equal(reassemble(tiles, 4), traj.images)


def test_grid_not_divisible():
    traj = generate_trajectory(0, SynthConfig(H=49, W=48))
    with pytest.raises(ParameterError):
        grid_split(traj, 4)


def test_save_load_roundtrip(tmp_path):
    ds = make_datasets(24, (0.25, 0.25, 0.25, 0.25), seed=4)
    save_datasets(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    back = load_datasets(tmp_path)
    for a, b in zip(ds.temporal_train, back.temporal_train):
        np.testing.assert_array_equal(a.images, b.images)
        assert a.patient_id == b.patient_id
    for a, b in zip(ds.snapshot_test, back.snapshot_test):
        np.testing.assert_array_equal(a.image, b.image)
        assert (a.label, a.timepoint) == (b.label, b.timepoint)


def test_load_subset_skips_test_split(tmp_path):
    save_datasets(make_datasets(24, (0.25, 0.25, 0.25, 0.25), seed=4), tmp_path)
    part = load_datasets(tmp_path, splits=("snapshot_finetune",))
    assert part.snapshot_test == [] and part.snapshot_pretrain == []
    assert len(part.snapshot_finetune) == 6
