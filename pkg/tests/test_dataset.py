import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveicl.dataset import (DatasetError, EegTrial, EveryNthAll, EveryNthOfClass, SubjectPool,
                             SynthSpec, downsample_trials, historical_pool, load_manifest,
                             read_trial_file, save_dataset, synthesize_dataset,
                             window_recording, write_trial_file)


def _trial(subject="s0", index=0, label=0, c=2, t=10, rate=10.0):
    samples = np.arange(c * t, dtype=np.float32).reshape(c, t)
    return EegTrial(subject_id=subject, trial_index=index, samples=samples,
                    sampling_rate=rate, channel_names=[f"CH{i}" for i in range(c)],
                    label=label)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def test_window_exact_single_window():
    rec = np.random.default_rng(0).normal(size=(3, 1000)).astype(np.float32)
    trials = window_recording(rec, 250.0, 4.0, subject_id="s0",
                              channel_names=["A", "B", "C"])
    assert len(trials) == 1
    assert trials[0].num_samples == 1000


def test_window_discards_trailing_remainder():
    rec = np.zeros((2, 2500), dtype=np.float32)
    trials = window_recording(rec, 250.0, 4.0, subject_id="s0", channel_names=["A", "B"])
    assert len(trials) == 2
    assert all(t.num_samples == 1000 for t in trials)


def test_window_subwindow_recording_is_empty():
    rec = np.zeros((2, 999), dtype=np.float32)
    assert window_recording(rec, 250.0, 4.0, subject_id="s0", channel_names=["A", "B"]) == []


def test_window_indices_chronological():
    rec = np.zeros((1, 50), dtype=np.float32)
    trials = window_recording(rec, 10.0, 1.0, subject_id="s0", channel_names=["A"],
                              labels=[0, 1, 0, 1, 0])
    assert [t.trial_index for t in trials] == [0, 1, 2, 3, 4]
    assert [t.label for t in trials] == [0, 1, 0, 1, 0]


@settings(max_examples=40, deadline=None)
@given(channels=st.integers(1, 4), n=st.integers(1, 400), window=st.integers(1, 60),
       seed=st.integers(0, 2**31))
def test_window_partition_property(channels, n, window, seed):
    # concatenating the windows reproduces the recording prefix exactly
    rec = np.random.default_rng(seed).normal(size=(channels, n)).astype(np.float32)
    trials = window_recording(rec, 1.0, float(window), subject_id="s",
                              channel_names=[f"C{i}" for i in range(channels)])
    assert len(trials) == n // window
    if trials:
        joined = np.concatenate([t.samples for t in trials], axis=1)
        assert np.array_equal(joined, rec[:, :len(trials) * window])


# ---------------------------------------------------------------------------
# downsampling
# ---------------------------------------------------------------------------


def _pool_with_labels(labels):
    trials = [_trial(index=i, label=lb) for i, lb in enumerate(labels)]
    return SubjectPool(subject_id="s0", trials=trials)


def test_downsample_every_nth_of_class_keeps_all_other_classes():
    labels = [0] * 25 + [1] * 5
    pool = _pool_with_labels(labels)
    out = downsample_trials(pool, EveryNthOfClass(10, frozenset({0})))
    kept0 = [t for t in out.trials if t.label == 0]
    kept1 = [t for t in out.trials if t.label == 1]
    assert len(kept0) == 3  # class-stream positions 0, 10, 20
    assert [t.trial_index for t in kept0] == [0, 10, 20]
    assert len(kept1) == 5


def test_downsample_every_nth_all():
    pool = _pool_with_labels([0] * 52)
    out = downsample_trials(pool, EveryNthAll(10))
    assert len(out.trials) == 6
    assert [t.trial_index for t in out.trials] == [0, 10, 20, 30, 40, 50]


def test_downsample_none_is_identity():
    pool = _pool_with_labels([0, 1, 0])
    assert downsample_trials(pool, None) is pool


def test_downsample_rejects_zero_step():
    with pytest.raises(DatasetError):
        EveryNthAll(0)
    with pytest.raises(DatasetError):
        EveryNthOfClass(0, frozenset({0}))


@settings(max_examples=30, deadline=None)
@given(count=st.integers(1, 80), n=st.integers(1, 12))
def test_downsample_retained_positions_mod_n(count, n):
    pool = _pool_with_labels([0] * count)
    out = downsample_trials(pool, EveryNthAll(n))
    positions = {t.trial_index for t in out.trials}
    assert positions == {i for i in range(count) if i % n == 0}
    # applying twice steps by n^2 over the original stream
    twice = downsample_trials(out, EveryNthAll(n))
    assert {t.trial_index for t in twice.trials} == {i for i in range(count) if i % (n * n) == 0}


# ---------------------------------------------------------------------------
# historical pool
# ---------------------------------------------------------------------------


def test_historical_pool_strict_filter():
    labels = {0: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 0}
    pool = SubjectPool("s0", [_trial(index=i, label=lb) for i, lb in labels.items()])
    got = historical_pool(pool, 4)
    assert [t.trial_index for t in got] == [0, 1, 2]


def test_historical_pool_first_trial_is_empty():
    pool = _pool_with_labels([0, 0, 0])
    assert historical_pool(pool, 0) == []


def test_historical_pool_all_task_labels_before_test():
    pool = _pool_with_labels([1, 1, 0])
    assert historical_pool(pool, 2) == []


def test_historical_pool_requires_member_trial():
    pool = _pool_with_labels([0, 0])
    with pytest.raises(DatasetError):
        historical_pool(pool, 99)


@settings(max_examples=40, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=1, max_size=40),
       test_pos=st.integers(0, 39))
def test_historical_pool_property(labels, test_pos):
    test_pos = test_pos % len(labels)
    pool = _pool_with_labels(labels)
    got = historical_pool(pool, test_pos)
    for t in got:
        assert t.label == 0
        assert t.trial_index < test_pos


# ---------------------------------------------------------------------------
# trial files and manifests
# ---------------------------------------------------------------------------


def test_trial_file_roundtrip(tmp_path):
    trial = _trial(c=3, t=17, label=1, rate=256.0)
    path = tmp_path / "t.eegt"
    write_trial_file(path, trial)
    samples, rate, label = read_trial_file(path)
    assert np.array_equal(samples, trial.samples)
    assert rate == 256.0
    assert label == 1


def test_trial_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.eegt"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(DatasetError, match="magic"):
        read_trial_file(path)


def test_manifest_roundtrip_equal(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    loaded = load_manifest(path)
    assert loaded == small_manifest
    # and a second serialize -> load is still equal
    path2 = save_dataset(loaded, tmp_path / "ds2")
    assert load_manifest(path2) == small_manifest


def test_manifest_missing_file(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    doc = json.loads(path.read_text())
    doc["subjects"][0]["trials"][0]["file"] = "nowhere.eegt"
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="missing trial file"):
        load_manifest(path)


def test_manifest_rejects_single_subject(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    doc = json.loads(path.read_text())
    doc["subjects"] = doc["subjects"][:1]
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="at least 2 subjects"):
        load_manifest(path)


def test_manifest_rejects_k_below_two(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    doc = json.loads(path.read_text())
    doc["num_classes"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="num_classes"):
        load_manifest(path)


def test_manifest_rejects_duplicate_trial_index(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    doc = json.loads(path.read_text())
    trials = doc["subjects"][0]["trials"]
    trials[1]["trial_index"] = trials[0]["trial_index"]
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="duplicate trial_index"):
        load_manifest(path)


def test_manifest_rejects_channel_count_mismatch(tmp_path, small_manifest):
    path = save_dataset(small_manifest, tmp_path / "ds")
    doc = json.loads(path.read_text())
    doc["channel_names"] = doc["channel_names"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="channel"):
        load_manifest(path)


def _shared_file_manifest(tmp_path, *, subjects, total, seizure, channels, rate, duration):
    """Build a manifest with Table-scale trial counts referencing two shared
    trial files, so header-validated loading stays cheap."""
    t = int(duration * rate)
    names = [f"C{i:02d}" for i in range(channels)]
    base = tmp_path / "ds"
    base.mkdir()
    for label in (0, 1):
        trial = EegTrial(subject_id="shared", trial_index=label,
                         samples=np.zeros((channels, t), dtype=np.float32),
                         sampling_rate=rate, channel_names=names, label=label)
        write_trial_file(base / f"shared_{label}.eegt", trial)
    per_subject = total // subjects
    extra = total - per_subject * subjects
    seizure_left = seizure
    subject_docs = []
    for s in range(subjects):
        count = per_subject + (1 if s < extra else 0)
        n_seiz = min(seizure_left, max(1, seizure // subjects + 1)) if seizure_left else 0
        n_seiz = min(n_seiz, count)
        seizure_left -= n_seiz
        trials = []
        for i in range(count):
            label = 1 if i < n_seiz else 0
            trials.append({"file": f"shared_{label}.eegt", "trial_index": i, "label": label})
        subject_docs.append({"subject_id": f"p{s:02d}", "trials": trials})
    assert seizure_left == 0
    doc = {
        "dataset_name": "tabletest",
        "num_classes": 2,
        "trial_duration_s": duration,
        "sampling_rate": rate,
        "channel_names": names,
        "subjects": subject_docs,
    }
    path = base / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_manifest_chsz_scale(tmp_path):
    # 27 subjects, 18 bipolar channels, 4 s at 250 Hz; 21,237 trials, 716 seizure
    path = _shared_file_manifest(tmp_path, subjects=27, total=21237, seizure=716,
                                 channels=18, rate=250.0, duration=4.0)
    manifest = load_manifest(path)
    assert len(manifest.subjects) == 27
    assert manifest.total_trials == 21237
    assert sum(p.class_counts.get(1, 0) for p in manifest.subjects) == 716
    assert manifest.sampling_rate == 250.0


def test_manifest_nicu_scale(tmp_path):
    # 39 subjects, 52,534 trials of which 11,912 seizure, 256 Hz
    path = _shared_file_manifest(tmp_path, subjects=39, total=52534, seizure=11912,
                                 channels=18, rate=256.0, duration=4.0)
    manifest = load_manifest(path)
    assert len(manifest.subjects) == 39
    assert manifest.total_trials == 52534
    assert sum(p.class_counts.get(1, 0) for p in manifest.subjects) == 11912


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def test_synth_deterministic_trees(tmp_path):
    spec = SynthSpec(subjects=2, trials_per_class=3, channels=2,
                     sampling_rate=50.0, trial_duration_s=1.0)
    a = save_dataset(synthesize_dataset(spec, 7), tmp_path / "a").parent
    b = save_dataset(synthesize_dataset(spec, 7), tmp_path / "b").parent
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_synth_counts_and_classes():
    spec = SynthSpec(subjects=4, trials_per_class=20, channels=2,
                     sampling_rate=50.0, trial_duration_s=1.0)
    manifest = synthesize_dataset(spec, 1)
    assert manifest.total_trials == 160
    assert manifest.num_classes == 2
    for pool in manifest.subjects:
        assert pool.class_counts == {0: 20, 1: 20}


def test_synth_rejects_zero_trials():
    with pytest.raises(DatasetError):
        synthesize_dataset(SynthSpec(trials_per_class=0), 1)


def test_synth_class_amplitudes_separable():
    # oracle: mean absolute amplitude separates the classes for >= 95% of
    # (class-1, class-0) pairs
    spec = SynthSpec(subjects=3, trials_per_class=10, channels=3,
                     sampling_rate=100.0, trial_duration_s=2.0)
    manifest = synthesize_dataset(spec, 5)
    amp0 = [np.abs(t.samples).mean() for t in manifest.iter_trials() if t.label == 0]
    amp1 = [np.abs(t.samples).mean() for t in manifest.iter_trials() if t.label == 1]
    wins = sum(1 for a1 in amp1 for a0 in amp0 if a1 > a0)
    assert wins / (len(amp0) * len(amp1)) >= 0.95


def test_synth_warmup_prefix_is_nontask():
    spec = SynthSpec(subjects=2, trials_per_class=5, warmup_nontask=3,
                     channels=2, sampling_rate=50.0, trial_duration_s=1.0)
    manifest = synthesize_dataset(spec, 2)
    for pool in manifest.subjects:
        assert [t.label for t in pool.trials[:3]] == [0, 0, 0]
