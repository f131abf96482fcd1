"""Support-set construction for few-shot prompting.

For each test query the support set holds M examples per class. Non-task
(class 0) anchors come from the test subject's own historical pool (label-0
trials strictly before the query); task-class examples come from auxiliary
subjects only, via per-subject medoids. Four strategies of increasing
refinement are implemented:

* random: every example drawn uniformly from auxiliary subjects.
* resting-state-anchor: class-0 drawn uniformly from the test subject's
  history; task classes uniformly from auxiliary trials.
* representativeness: class-0 anchors are the M trials closest (cosine) to
  the history centroid; task examples drawn uniformly from the auxiliary
  per-subject medoid pool.
* representativeness-similarity: class-0 as above; task examples are the M
  medoids nearest the query embedding.

Determinism: scored selections sort ascending with pool-position tie-break;
random draws use one generator derived from (rng_seed, test subject, test
trial index), consumed in class order (0, 1, ..., K-1). Canonical pool
order is manifest subject order, then trial_index ascending.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from ._kernels import cosine_distances_to
from .dataset import DatasetManifest, EegTrial, historical_pool
from .embeddings import EmbeddingLookup, centroid, medoid
from .render import WaveformImage


class SelectionError(ValueError):
    """Base class for support-set construction failures."""


class InsufficientPool(SelectionError):
    """A candidate pool holds fewer entries than the selection needs."""

    def __init__(self, pool_name: str, needed: int, available: int):
        self.pool_name = pool_name
        self.needed = needed
        self.available = available
        super().__init__(
            f"pool {pool_name!r} has {available} candidates, need {needed} "
            f"(short by {needed - available})")


class EmptyHistoricalPool(SelectionError):
    """The strategy requires test-subject anchors but no label-0 trial
    precedes the query."""

    def __init__(self, subject_id: str, test_trial_index: int):
        self.subject_id = subject_id
        self.test_trial_index = test_trial_index
        super().__init__(
            f"subject {subject_id!r} has no non-task trial before index {test_trial_index}")


class Strategy(str, enum.Enum):
    RANDOM = "random"
    RESTING_STATE_ANCHOR = "resting-state-anchor"
    REPRESENTATIVENESS = "representativeness"
    REPRESENTATIVENESS_SIMILARITY = "representativeness-similarity"


#: strategies whose class-0 anchors come from the test subject's history
ANCHORED_STRATEGIES = frozenset({
    Strategy.RESTING_STATE_ANCHOR,
    Strategy.REPRESENTATIVENESS,
    Strategy.REPRESENTATIVENESS_SIMILARITY,
})

#: strategies that restrict task examples to the per-subject medoid pool
MEDOID_STRATEGIES = frozenset({
    Strategy.REPRESENTATIVENESS,
    Strategy.REPRESENTATIVENESS_SIMILARITY,
})


@dataclass(frozen=True)
class SelectionConfig:
    shots: int = 2          # M examples per class
    strategy: Strategy = Strategy.REPRESENTATIVENESS_SIMILARITY
    rng_seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise SelectionError(f"shots must be >= 1, got {self.shots}")
        object.__setattr__(self, "strategy", Strategy(self.strategy))


class PoolEntry(NamedTuple):
    subject_id: str
    trial_index: int
    label: int
    vector: np.ndarray


@dataclass(frozen=True)
class SupportEntry:
    subject_id: str
    trial_index: int
    label: int
    score: float | None      # m_rep or m_sim; None for unscored draws
    image: WaveformImage | None = None

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "trial_index": self.trial_index,
            "label": self.label,
            "score": self.score,
        }


@dataclass(frozen=True)
class SupportSet:
    entries: tuple[SupportEntry, ...]
    config: SelectionConfig
    test_subject: str
    test_trial_index: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        self.validate()

    def validate(self) -> None:
        """Enforce the leakage invariants; raises SelectionError on violation."""
        per_class: dict[int, int] = {}
        for e in self.entries:
            per_class[e.label] = per_class.get(e.label, 0) + 1
            if e.subject_id == self.test_subject and e.label != 0:
                raise SelectionError(
                    f"support entry leaks task trial {e.trial_index} of test subject "
                    f"{self.test_subject!r}")
            if e.subject_id == self.test_subject and e.trial_index >= self.test_trial_index:
                raise SelectionError(
                    f"support anchor {e.trial_index} does not precede test trial "
                    f"{self.test_trial_index} of {self.test_subject!r}")
        for k in range(self.num_classes):
            if per_class.get(k, 0) != self.config.shots:
                raise SelectionError(
                    f"class {k} has {per_class.get(k, 0)} entries, expected {self.config.shots}")
        if len(self.entries) != self.config.shots * self.num_classes:
            raise SelectionError("unexpected extra entries in support set")

    def with_images(self, resolve: Callable[[str, int], WaveformImage]) -> "SupportSet":
        entries = tuple(replace(e, image=resolve(e.subject_id, e.trial_index))
                        for e in self.entries)
        return replace(self, entries=entries)

    def to_dict(self) -> dict:
        return {
            "test_subject": self.test_subject,
            "test_trial_index": self.test_trial_index,
            "num_classes": self.num_classes,
            "shots": self.config.shots,
            "strategy": self.config.strategy.value,
            "rng_seed": self.config.rng_seed,
            "entries": [e.to_dict() for e in self.entries],
        }


def derive_rng(seed: int, subject_id: str, trial_index: int) -> np.random.Generator:
    """Per-query generator: stable across runs and across evaluation order."""
    material = f"{seed}|{subject_id}|{trial_index}".encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _scored_pick(pool: list[PoolEntry], scores: np.ndarray, m: int) -> list[SupportEntry]:
    order = np.argsort(scores, kind="stable")[:m]
    return [SupportEntry(subject_id=pool[i].subject_id, trial_index=pool[i].trial_index,
                         label=pool[i].label, score=float(scores[i])) for i in order]


def _random_pick(pool: list[PoolEntry], m: int, rng: np.random.Generator) -> list[SupportEntry]:
    chosen = rng.choice(len(pool), size=m, replace=False)
    return [SupportEntry(subject_id=pool[i].subject_id, trial_index=pool[i].trial_index,
                         label=pool[i].label, score=None) for i in chosen]


def select_nontask_anchors(pool: list[PoolEntry], m: int, strategy: Strategy,
                           rng: np.random.Generator) -> list[SupportEntry]:
    """Pick M class-0 entries. For scored strategies the pool is the test
    subject's history and anchors minimize distance to its centroid; for
    random strategies the caller passes the applicable pool and draws are
    uniform without replacement."""
    if len(pool) < m:
        raise InsufficientPool("non-task anchors", m, len(pool))
    if strategy in MEDOID_STRATEGIES:
        mat = np.stack([e.vector for e in pool])
        center = centroid(mat)
        scores = cosine_distances_to(mat, center.vector)
        return _scored_pick(pool, scores, m)
    return _random_pick(pool, m, rng)


def auxiliary_medoids(pools: dict[str, list[PoolEntry]], label: int) -> list[PoolEntry]:
    """One medoid per auxiliary subject holding class-``label`` trials.

    ``pools`` maps subject_id (in manifest order; dicts preserve insertion
    order) to that subject's class-``label`` entries in trial_index order.
    Subjects with no such trials are skipped.
    """
    out = []
    for subject_id, entries in pools.items():
        if not entries:
            continue
        idx = medoid(np.stack([e.vector for e in entries]))
        out.append(entries[idx])
    if not out:
        raise InsufficientPool(f"auxiliary medoids for class {label}", 1, 0)
    return out


def select_task_examples(test_vector: np.ndarray, medoid_pool: list[PoolEntry] | None,
                         class_pool: list[PoolEntry], m: int, strategy: Strategy,
                         rng: np.random.Generator) -> list[SupportEntry]:
    """Pick M task-class entries according to the strategy (see module doc)."""
    if strategy is Strategy.REPRESENTATIVENESS_SIMILARITY:
        if medoid_pool is None or len(medoid_pool) < m:
            raise InsufficientPool("task medoids", m, 0 if medoid_pool is None else len(medoid_pool))
        mat = np.stack([e.vector for e in medoid_pool])
        scores = cosine_distances_to(mat, np.asarray(test_vector, dtype=np.float32))
        return _scored_pick(medoid_pool, scores, m)
    if strategy is Strategy.REPRESENTATIVENESS:
        if medoid_pool is None or len(medoid_pool) < m:
            raise InsufficientPool("task medoids", m, 0 if medoid_pool is None else len(medoid_pool))
        return _random_pick(medoid_pool, m, rng)
    if len(class_pool) < m:
        raise InsufficientPool("auxiliary task trials", m, len(class_pool))
    return _random_pick(class_pool, m, rng)


def _entries_for(trials: list[EegTrial], lookup: EmbeddingLookup) -> list[PoolEntry]:
    return [PoolEntry(t.subject_id, t.trial_index, t.label,
                      lookup.vector_for(t.subject_id, t.trial_index))
            for t in trials]


def build_support_set(manifest: DatasetManifest, test_subject: str, test_trial_index: int,
                      lookup: EmbeddingLookup, config: SelectionConfig) -> SupportSet:
    """Assemble the full support set for one query.

    Entries are ordered class 0 first, then 1..K-1; within a class, ascending
    score for scored strategies, draw order otherwise. All leakage invariants
    are enforced on the result.
    """
    test_pool = manifest.subject(test_subject)
    test_pool.trial(test_trial_index)
    aux = manifest.auxiliary_subjects(test_subject)
    rng = derive_rng(config.rng_seed, test_subject, test_trial_index)
    test_vector = lookup.vector_for(test_subject, test_trial_index)

    if config.strategy in ANCHORED_STRATEGIES:
        history = historical_pool(test_pool, test_trial_index)
        if not history:
            raise EmptyHistoricalPool(test_subject, test_trial_index)
        anchor_pool = _entries_for(history, lookup)
    else:
        anchor_pool = _entries_for(
            [t for pool in aux for t in pool.trials if t.label == 0], lookup)
    entries = list(select_nontask_anchors(anchor_pool, config.shots, config.strategy, rng))

    for label in range(1, manifest.num_classes):
        class_pool = _entries_for(
            [t for pool in aux for t in pool.trials if t.label == label], lookup)
        medoid_pool = None
        if config.strategy in MEDOID_STRATEGIES:
            per_subject = {
                pool.subject_id: _entries_for(
                    [t for t in pool.trials if t.label == label], lookup)
                for pool in aux
            }
            medoid_pool = auxiliary_medoids(per_subject, label)
        entries.extend(select_task_examples(
            test_vector, medoid_pool, class_pool, config.shots, config.strategy, rng))

    return SupportSet(
        entries=tuple(entries),
        config=config,
        test_subject=test_subject,
        test_trial_index=test_trial_index,
        num_classes=manifest.num_classes,
    )
