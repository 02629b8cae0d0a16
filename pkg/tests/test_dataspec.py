"""Corpus generation, task splitting, replay, and the on-disk formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crlbench import dataspec
from crlbench.dataspec import (
    Dataset,
    ReplayBuffer,
    SpectrogramClip,
    effective_train_clips,
    generate_synthetic,
    load_dataset,
    materialize_task,
    read_feature_file,
    replay_extend,
    save_dataset,
    slep_subset,
    split_tasks,
    write_feature_file,
)
from crlbench.errors import ConfigurationError, IngestionError, UsageError


def small_dataset(num_classes: int = 4, seed: int = 7) -> Dataset:
    return generate_synthetic(
        num_classes=num_classes,
        clips_per_class_train=6,
        clips_per_class_test=3,
        freq_bins=16,
        time_frames=32,
        noise_sigma=0.5,
        seed=seed,
    )


def test_generate_is_deterministic() -> None:
    a = small_dataset()
    b = small_dataset()
    assert a.name == b.name
    assert len(a.clips) == len(b.clips)
    for ca, cb in zip(a.clips, b.clips):
        assert ca.clip_id == cb.clip_id
        assert ca.label == cb.label
        np.testing.assert_array_equal(ca.features, cb.features)


def test_generate_shapes_and_counts() -> None:
    ds = small_dataset()
    assert ds.feature_shape == (16, 32)
    assert len(ds.split_clips("train")) == 4 * 6
    assert len(ds.split_clips("test")) == 4 * 3
    assert all(c.features.dtype == np.float32 for c in ds.clips)


def test_generate_rejects_bad_params() -> None:
    with pytest.raises(ConfigurationError):
        generate_synthetic(1, 5, 2, 16, 32, 1.0, 0)
    with pytest.raises(ConfigurationError):
        generate_synthetic(4, 5, 2, 8, 32, 1.0, 0)
    with pytest.raises(ConfigurationError):
        generate_synthetic(4, 5, 2, 16, 16, 1.0, 0)
    with pytest.raises(ConfigurationError):
        generate_synthetic(4, 5, 2, 16, 32, -0.5, 0)


def test_classes_are_probe_separable() -> None:
    # Oracle: class templates must be recoverable from simple pooled
    # statistics by an independent linear model; guards corpus drift.
    sklearn = pytest.importorskip("sklearn.linear_model")
    ds = generate_synthetic(
        num_classes=10,
        clips_per_class_train=36,
        clips_per_class_test=12,
        freq_bins=32,
        time_frames=64,
        noise_sigma=2.0,
        seed=1,
    )

    def stats(clips):
        x = np.stack([np.concatenate([c.features.mean(1), c.features.std(1)]) for c in clips])
        y = np.array([c.label for c in clips])
        return x, y

    x_tr, y_tr = stats(ds.split_clips("train"))
    x_te, y_te = stats(ds.split_clips("test"))
    model = sklearn.LogisticRegression(max_iter=2000).fit(x_tr, y_tr)
    assert model.score(x_te, y_te) >= 0.95


@settings(max_examples=30, deadline=None)
@given(
    num_classes=st.integers(min_value=2, max_value=12),
    num_tasks=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_split_tasks_partitions_classes(num_classes, num_tasks, seed) -> None:
    if num_tasks > num_classes:
        return
    ds = Dataset.__new__(Dataset)  # split_tasks only reads num_classes
    object.__setattr__(ds, "num_classes", num_classes)
    object.__setattr__(ds, "name", "stub")
    seq = split_tasks(ds, num_tasks, seed)
    all_classes = [c for task in seq.tasks for c in task]
    assert sorted(all_classes) == list(range(num_classes))
    assert len(all_classes) == len(set(all_classes))
    sizes = [len(task) for task in seq.tasks]
    assert max(sizes) - min(sizes) <= 1


def test_split_tasks_rejects_more_tasks_than_classes() -> None:
    ds = small_dataset()
    with pytest.raises(ConfigurationError):
        split_tasks(ds, 5, 0)


def test_materialize_task_filters_by_class() -> None:
    ds = small_dataset()
    seq = split_tasks(ds, 2, seed=1)
    td = materialize_task(ds, seq, 1)
    want = set(seq.tasks[0])
    assert {c.label for c in td.train} == want
    assert {c.label for c in td.test} == want
    with pytest.raises(UsageError):
        materialize_task(ds, seq, 0)
    with pytest.raises(UsageError):
        materialize_task(ds, seq, 3)


def test_slep_subset_clamps_to_identity() -> None:
    ds = small_dataset()
    seq = split_tasks(ds, 2, seed=1)
    td = materialize_task(ds, seq, 1)
    subset = slep_subset(td.train, per_task_budget=10_000, seed=5)
    assert subset == td.train


def test_slep_subset_is_deterministic_and_balanced() -> None:
    ds = small_dataset()
    seq = split_tasks(ds, 2, seed=1)
    td = materialize_task(ds, seq, 1)  # 2 classes x 6 clips
    a = slep_subset(td.train, per_task_budget=4, seed=5)
    b = slep_subset(td.train, per_task_budget=4, seed=5)
    assert [c.clip_id for c in a] == [c.clip_id for c in b]
    labels = [c.label for c in a]
    assert len(a) == 4
    assert sorted(labels.count(l) for l in set(labels)) == [2, 2]


def test_slep_subset_rejects_bad_inputs() -> None:
    ds = small_dataset()
    seq = split_tasks(ds, 2, seed=1)
    td = materialize_task(ds, seq, 1)
    with pytest.raises(ConfigurationError):
        slep_subset(td.train, per_task_budget=0, seed=5)
    with pytest.raises(UsageError):
        slep_subset([], per_task_budget=4, seed=5)
    with pytest.raises(UsageError):
        slep_subset(td.test, per_task_budget=4, seed=5)


def test_replay_extend_modes() -> None:
    ds = small_dataset()
    clips = ds.split_clips("train")[:5]
    none_buf = ReplayBuffer(mode="none")
    assert replay_extend(none_buf, clips).stored == ()
    full_buf = ReplayBuffer(mode="full")
    grown = replay_extend(full_buf, clips)
    assert len(grown.stored) == 5
    assert full_buf.stored == ()  # original untouched
    grown2 = replay_extend(grown, clips[:2])
    assert len(grown2.stored) == 7


def test_effective_train_clips_unions_buffer() -> None:
    ds = small_dataset()
    seq = split_tasks(ds, 2, seed=1)
    t1 = materialize_task(ds, seq, 1)
    t2 = materialize_task(ds, seq, 2)
    buf = replay_extend(ReplayBuffer(mode="full"), t1.train)
    merged = effective_train_clips(t2, buf)
    assert len(merged) == len(t1.train) + len(t2.train)


def test_feature_file_round_trip(tmp_path) -> None:
    arr = np.random.default_rng(0).standard_normal((9, 17)).astype(np.float32)
    path = tmp_path / "clip.bin"
    write_feature_file(path, arr)
    back = read_feature_file(path)
    np.testing.assert_array_equal(arr, back)


def test_feature_file_rejects_bad_magic(tmp_path) -> None:
    path = tmp_path / "clip.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(IngestionError):
        read_feature_file(path)


def test_feature_file_rejects_truncation(tmp_path) -> None:
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "clip.bin"
    write_feature_file(path, arr)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(IngestionError):
        read_feature_file(path)


def test_dataset_round_trip(tmp_path) -> None:
    ds = small_dataset()
    manifest = save_dataset(ds, tmp_path / "corpus")
    back = load_dataset(manifest)
    assert back.num_classes == ds.num_classes
    assert len(back.clips) == len(ds.clips)
    by_id = {c.clip_id: c for c in back.clips}
    for clip in ds.clips:
        twin = by_id[clip.clip_id]
        assert twin.label == clip.label
        assert twin.split == clip.split
        np.testing.assert_array_equal(twin.features, clip.features)


def test_save_is_byte_identical(tmp_path) -> None:
    ds = small_dataset()
    m1 = save_dataset(ds, tmp_path / "a")
    m2 = save_dataset(ds, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    f1 = sorted((tmp_path / "a" / "features").iterdir())
    f2 = sorted((tmp_path / "b" / "features").iterdir())
    for p1, p2 in zip(f1, f2):
        assert p1.read_bytes() == p2.read_bytes()


def test_load_names_bad_row(tmp_path) -> None:
    ds = small_dataset()
    manifest = save_dataset(ds, tmp_path / "corpus")
    lines = manifest.read_text().splitlines()
    lines[2] = lines[2].replace(",train,", ",weird,")
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError) as err:
        load_dataset(manifest)
    assert "row 3" in str(err.value)


def test_load_rejects_shape_mismatch(tmp_path) -> None:
    ds = small_dataset()
    manifest = save_dataset(ds, tmp_path / "corpus")
    victim = next((tmp_path / "corpus" / "features").iterdir())
    write_feature_file(victim, np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(IngestionError):
        load_dataset(manifest)


def test_clip_validation() -> None:
    good = np.zeros((4, 8), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        SpectrogramClip(clip_id="x", features=good, label=0, split="dev")
    with pytest.raises(ConfigurationError):
        SpectrogramClip(clip_id="x", features=good[0], label=0, split="train")
    bad = good.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ConfigurationError):
        SpectrogramClip(clip_id="x", features=bad, label=0, split="train")
