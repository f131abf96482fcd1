"""Trial datasets: binary trial files, manifests, windowing, downsampling.

A dataset on disk is a JSON manifest plus one binary file per trial
(``.eegt``: fixed header + row-major little-endian float32 samples).
Multiple manifest entries may reference the same file; the loader caches by
path so shared files are read once. Loaded datasets are immutable (sample
arrays are marked read-only) and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TRIAL_MAGIC = b"EEGT"
TRIAL_VERSION = 1
_HEADER = struct.Struct("<4sHIIdH")  # magic, version, C, T, rate, label


class DatasetError(ValueError):
    """Raised for malformed manifests, trial files, or invariant violations."""


@dataclass(eq=False)
class EegTrial:
    """One windowed multichannel sample matrix with its metadata."""

    subject_id: str
    trial_index: int
    samples: np.ndarray  # (C, T) float32, microvolts
    sampling_rate: float
    channel_names: tuple[str, ...]
    label: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.channel_names = tuple(self.channel_names)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise DatasetError(f"samples must be a (C, T) matrix with C,T >= 1, got {self.samples.shape}")
        if len(self.channel_names) != self.samples.shape[0]:
            raise DatasetError(
                f"channel_names length {len(self.channel_names)} != channel count {self.samples.shape[0]}")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DatasetError("channel_names must be unique")
        if self.trial_index < 0:
            raise DatasetError("trial_index must be non-negative")
        if self.label < 0:
            raise DatasetError("label must be non-negative")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EegTrial):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and self.trial_index == other.trial_index
                and self.sampling_rate == other.sampling_rate
                and self.channel_names == other.channel_names
                and self.label == other.label
                and np.array_equal(self.samples, other.samples))


@dataclass(eq=True)
class SubjectPool:
    """All trials of one subject, in chronological (trial_index) order."""

    subject_id: str
    trials: list[EegTrial] = field(default_factory=list)

    def __post_init__(self):
        self.trials = sorted(self.trials, key=lambda t: t.trial_index)
        indices = [t.trial_index for t in self.trials]
        if len(set(indices)) != len(indices):
            raise DatasetError(f"duplicate trial_index in subject {self.subject_id!r}")
        for t in self.trials:
            if t.subject_id != self.subject_id:
                raise DatasetError(f"trial subject {t.subject_id!r} does not match pool {self.subject_id!r}")

    @property
    def class_counts(self) -> dict[int, int]:
        return dict(Counter(t.label for t in self.trials))

    def trial(self, trial_index: int) -> EegTrial:
        for t in self.trials:
            if t.trial_index == trial_index:
                return t
        raise DatasetError(f"subject {self.subject_id!r} has no trial with index {trial_index}")


@dataclass(eq=True)
class DatasetManifest:
    dataset_name: str
    num_classes: int
    trial_duration_s: float
    sampling_rate: float
    channel_names: tuple[str, ...]
    subjects: list[SubjectPool]

    def __post_init__(self):
        self.channel_names = tuple(self.channel_names)
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.subjects) < 2:
            raise DatasetError(f"need at least 2 subjects (one test, >=1 auxiliary), got {len(self.subjects)}")
        ids = [p.subject_id for p in self.subjects]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate subject_id in manifest")
        expected_t = self.trial_duration_s * self.sampling_rate
        for pool in self.subjects:
            for t in pool.trials:
                if t.label >= self.num_classes:
                    raise DatasetError(
                        f"label {t.label} out of range for K={self.num_classes} "
                        f"(subject {pool.subject_id!r}, trial {t.trial_index})")
                if abs(t.num_samples - expected_t) > 1:
                    raise DatasetError(
                        f"trial length {t.num_samples} != duration*rate = {expected_t:g} "
                        f"(subject {pool.subject_id!r}, trial {t.trial_index})")
                if len(t.channel_names) != len(self.channel_names):
                    raise DatasetError(
                        f"channel-count mismatch: trial has {len(t.channel_names)}, "
                        f"manifest declares {len(self.channel_names)}")

    def subject(self, subject_id: str) -> SubjectPool:
        for pool in self.subjects:
            if pool.subject_id == subject_id:
                return pool
        raise DatasetError(f"unknown subject {subject_id!r}")

    def auxiliary_subjects(self, test_subject_id: str) -> list[SubjectPool]:
        self.subject(test_subject_id)
        return [p for p in self.subjects if p.subject_id != test_subject_id]

    def iter_trials(self):
        for pool in self.subjects:
            yield from pool.trials

    @property
    def total_trials(self) -> int:
        return sum(len(p.trials) for p in self.subjects)


# ---------------------------------------------------------------------------
# trial binary format
# ---------------------------------------------------------------------------


def write_trial_file(path: Path, trial: EegTrial) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, trial.num_channels,
                          trial.num_samples, trial.sampling_rate, trial.label)
    payload = np.ascontiguousarray(trial.samples, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def read_trial_file(path: Path) -> tuple[np.ndarray, float, int]:
    """Read a trial file; returns (samples, sampling_rate, label)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing trial file: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetError(f"truncated trial file: {path}")
    magic, version, c, t, rate, label = _HEADER.unpack_from(blob)
    if magic != TRIAL_MAGIC:
        raise DatasetError(f"bad magic in trial file: {path}")
    if version != TRIAL_VERSION:
        raise DatasetError(f"unsupported trial file version {version}: {path}")
    expected = _HEADER.size + 4 * c * t
    if len(blob) != expected:
        raise DatasetError(f"trial file size {len(blob)} != expected {expected}: {path}")
    samples = np.frombuffer(blob, dtype="<f4", count=c * t, offset=_HEADER.size).reshape(c, t)
    samples = samples.astype(np.float32, copy=True)
    samples.setflags(write=False)
    return samples, rate, label


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------


def load_manifest(path: Path) -> DatasetManifest:
    """Load and fully validate a dataset manifest and its trial files."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("dataset_name", "num_classes", "trial_duration_s", "sampling_rate",
                "channel_names", "subjects"):
        if key not in doc:
            raise DatasetError(f"manifest missing field {key!r}")
    base = path.parent
    channel_names = tuple(str(c) for c in doc["channel_names"])
    cache: dict[str, tuple[np.ndarray, float, int]] = {}  # keyed by manifest-relative path
    pools = []
    for subj in doc["subjects"]:
        trials = []
        for entry in subj["trials"]:
            rel = entry["file"]
            if rel not in cache:
                cache[rel] = read_trial_file(base / rel)
            samples, rate, file_label = cache[rel]
            if entry["label"] != file_label:
                raise DatasetError(
                    f"label mismatch for {entry['file']}: manifest says {entry['label']}, "
                    f"file header says {file_label}")
            if rate != doc["sampling_rate"]:
                raise DatasetError(
                    f"sampling-rate mismatch for {entry['file']}: manifest {doc['sampling_rate']}, "
                    f"file {rate}")
            trials.append(EegTrial(
                subject_id=subj["subject_id"],
                trial_index=int(entry["trial_index"]),
                samples=samples,
                sampling_rate=rate,
                channel_names=channel_names,
                label=int(entry["label"]),
            ))
        pools.append(SubjectPool(subject_id=subj["subject_id"], trials=trials))
    return DatasetManifest(
        dataset_name=doc["dataset_name"],
        num_classes=int(doc["num_classes"]),
        trial_duration_s=float(doc["trial_duration_s"]),
        sampling_rate=float(doc["sampling_rate"]),
        channel_names=channel_names,
        subjects=pools,
    )


def save_dataset(manifest: DatasetManifest, out_dir: Path) -> Path:
    """Write trial files and the manifest under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects_doc = []
    for pool in manifest.subjects:
        entries = []
        for trial in pool.trials:
            rel = f"{pool.subject_id}/trial_{trial.trial_index:05d}.eegt"
            write_trial_file(out_dir / rel, trial)
            entries.append({"file": rel, "trial_index": trial.trial_index, "label": trial.label})
        subjects_doc.append({"subject_id": pool.subject_id, "trials": entries})
    doc = {
        "dataset_name": manifest.dataset_name,
        "num_classes": manifest.num_classes,
        "trial_duration_s": manifest.trial_duration_s,
        "sampling_rate": manifest.sampling_rate,
        "channel_names": list(manifest.channel_names),
        "subjects": subjects_doc,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# windowing / downsampling / pools
# ---------------------------------------------------------------------------


def window_recording(recording: np.ndarray, sampling_rate: float, duration_s: float, *,
                     subject_id: str, channel_names: Sequence[str],
                     labels: int | Sequence[int] = 0,
                     start_index: int = 0) -> list[EegTrial]:
    """Split a continuous (C, N) recording into consecutive non-overlapping trials.

    The trailing remainder shorter than one window is discarded. ``labels``
    is either one label for every window or a per-window sequence.
    """
    recording = np.asarray(recording, dtype=np.float32)
    window = int(round(duration_s * sampling_rate))
    if window < 1:
        raise DatasetError(f"window of {duration_s}s at {sampling_rate}Hz is shorter than one sample")
    if recording.ndim != 2:
        raise DatasetError(f"recording must be (C, N), got shape {recording.shape}")
    num = recording.shape[1] // window
    if not isinstance(labels, int):
        labels = list(labels)
        if len(labels) != num:
            raise DatasetError(f"got {len(labels)} labels for {num} windows")
    trials = []
    for i in range(num):
        label = labels if isinstance(labels, int) else labels[i]
        trials.append(EegTrial(
            subject_id=subject_id,
            trial_index=start_index + i,
            samples=recording[:, i * window:(i + 1) * window],
            sampling_rate=sampling_rate,
            channel_names=tuple(channel_names),
            label=label,
        ))
    return trials


@dataclass(frozen=True)
class EveryNthOfClass:
    """Keep every n-th trial of each targeted class (chronological within the
    class stream); other classes are retained in full."""
    n: int
    classes: frozenset[int]

    def __post_init__(self):
        if self.n == 0:
            raise DatasetError("downsampling step n must be >= 1")
        object.__setattr__(self, "classes", frozenset(self.classes))


@dataclass(frozen=True)
class EveryNthAll:
    """Keep every n-th trial of the combined chronological stream."""
    n: int

    def __post_init__(self):
        if self.n == 0:
            raise DatasetError("downsampling step n must be >= 1")


DownsamplePolicy = EveryNthOfClass | EveryNthAll | None


def downsample_trials(pool: SubjectPool, policy: DownsamplePolicy) -> SubjectPool:
    """Apply a retention policy; trial_index values are preserved (not renumbered)."""
    if policy is None:
        return pool
    if isinstance(policy, EveryNthAll):
        kept = [t for pos, t in enumerate(pool.trials) if pos % policy.n == 0]
    elif isinstance(policy, EveryNthOfClass):
        positions: dict[int, int] = {}
        kept = []
        for t in pool.trials:
            if t.label in policy.classes:
                pos = positions.get(t.label, 0)
                positions[t.label] = pos + 1
                if pos % policy.n == 0:
                    kept.append(t)
            else:
                kept.append(t)
    else:
        raise DatasetError(f"unknown downsample policy: {policy!r}")
    return SubjectPool(subject_id=pool.subject_id, trials=kept)


def historical_pool(pool: SubjectPool, test_trial_index: int) -> list[EegTrial]:
    """Non-task (label 0) trials of this subject recorded strictly before the query."""
    pool.trial(test_trial_index)
    return [t for t in pool.trials if t.label == 0 and t.trial_index < test_trial_index]


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale synthetic dataset: class 0 is low-amplitude noise, classes
    k >= 1 superimpose a high-amplitude rhythmic component so the classes are
    visually separable in waveform plots."""

    subjects: int = 4
    trials_per_class: int = 20
    channels: int = 4
    sampling_rate: float = 250.0
    trial_duration_s: float = 4.0
    num_classes: int = 2
    noise_amp: float = 1.0
    rhythm_amp: float = 8.0
    rhythm_hz: float = 3.0
    warmup_nontask: int = 2
    dataset_name: str = "synthetic"


def _synth_label_sequence(spec: SynthSpec) -> list[int]:
    remaining = {k: spec.trials_per_class for k in range(spec.num_classes)}
    warmup = min(spec.warmup_nontask, spec.trials_per_class)
    labels = [0] * warmup
    remaining[0] -= warmup
    order = list(range(1, spec.num_classes)) + [0]
    while any(remaining.values()):
        for k in order:
            if remaining[k] > 0:
                labels.append(k)
                remaining[k] -= 1
    return labels


def synthesize_dataset(spec: SynthSpec, seed: int) -> DatasetManifest:
    """Deterministic synthetic manifest; byte-identical for a fixed seed."""
    if spec.trials_per_class < 1:
        raise DatasetError("trials_per_class must be >= 1")
    if spec.num_classes < 2:
        raise DatasetError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    t_count = int(round(spec.trial_duration_s * spec.sampling_rate))
    time = np.arange(t_count) / spec.sampling_rate
    channel_names = tuple(f"CH{c:02d}" for c in range(spec.channels))
    labels = _synth_label_sequence(spec)
    pools = []
    for s in range(spec.subjects):
        subject_id = f"subj{s:02d}"
        trials = []
        for idx, label in enumerate(labels):
            samples = rng.normal(0.0, spec.noise_amp, size=(spec.channels, t_count))
            if label > 0:
                freq = spec.rhythm_hz * label
                phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.channels)
                samples += spec.rhythm_amp * np.sin(
                    2.0 * np.pi * freq * time[None, :] + phases[:, None])
            trials.append(EegTrial(
                subject_id=subject_id,
                trial_index=idx,
                samples=samples.astype(np.float32),
                sampling_rate=spec.sampling_rate,
                channel_names=channel_names,
                label=label,
            ))
        pools.append(SubjectPool(subject_id=subject_id, trials=trials))
    return DatasetManifest(
        dataset_name=spec.dataset_name,
        num_classes=spec.num_classes,
        trial_duration_s=spec.trial_duration_s,
        sampling_rate=spec.sampling_rate,
        channel_names=channel_names,
        subjects=pools,
    )
