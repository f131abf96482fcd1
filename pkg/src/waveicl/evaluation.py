"""Leave-one-subject-out evaluation with balanced classification accuracy.

Each subject is held out in turn: every retained trial of that subject is
rendered, embedded, support-selected (auxiliary pool = all other subjects),
prompted, classified, and parsed. Per-subject BCA is the unweighted mean of
per-class recalls; the aggregate is the unweighted mean over subjects.

The same downsampled pool feeds both queries and retrieval pools, so there
is a single canonical view of each subject's data. Support sets are
validated at construction and re-audited post hoc over the emitted report;
an audit violation is a hard failure, not a warning.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (DatasetManifest, DownsamplePolicy, EveryNthAll, EveryNthOfClass,
                      downsample_trials, load_manifest)
from .embeddings import (EmbeddingStore, FileProvider, HttpProvider, MissingEmbeddingError,
                         PixelStatsProvider, StoreLookup, embed_image)
from .gateway import BackendConfig, BackendKind, GatewayError, ResponseCache, VlmGateway
from .prompts import ParseFailure, PromptConfig, PromptError, Tier, build_prompt
from .render import RenderCache, RenderConfig, rasterize
from .selection import (EmptyHistoricalPool, SelectionConfig, SelectionError, Strategy,
                        build_support_set)


class EvaluationError(ValueError):
    """Raised for undefined metrics or invalid evaluation configuration."""


class ParseFailurePolicy(str, enum.Enum):
    # fold the miss into the confusion matrix as an incorrect prediction
    COUNT_AS_WRONG = "count-as-wrong"
    # drop the trial from the confusion matrix (failures stay itemized)
    EXCLUDE = "exclude"


def bca(confusion) -> float:
    """Balanced classification accuracy: mean per-class recall, in percent.

    ``confusion[i][j]`` counts trials of true class i predicted as j. Every
    class must have at least one true instance.
    """
    mat = np.asarray(confusion, dtype=np.int64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 2:
        raise EvaluationError(f"confusion matrix must be KxK with K >= 2, got {mat.shape}")
    row_sums = mat.sum(axis=1)
    if np.any(row_sums == 0):
        absent = [int(k) for k in np.flatnonzero(row_sums == 0)]
        raise EvaluationError(f"class(es) {absent} absent from ground truth")
    recalls = np.diag(mat) / row_sums
    return float(np.mean(recalls) * 100.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "file"          # file | http | pixelstats
    store_dir: str = ""         # embedding store (always used for persistence)
    endpoint: str = ""          # http provider

    def build(self, store: EmbeddingStore):
        if self.kind == "file":
            return FileProvider(store)
        if self.kind == "http":
            return HttpProvider(self.endpoint)
        if self.kind == "pixelstats":
            return PixelStatsProvider()
        raise EvaluationError(f"unknown provider kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "store_dir": self.store_dir, "endpoint": self.endpoint}


def downsample_to_dict(policy: DownsamplePolicy) -> dict | None:
    if policy is None:
        return None
    if isinstance(policy, EveryNthAll):
        return {"kind": "every-nth-all", "n": policy.n}
    return {"kind": "every-nth-of-class", "n": policy.n, "classes": sorted(policy.classes)}


def downsample_from_dict(doc: dict | None) -> DownsamplePolicy:
    if doc is None:
        return None
    if doc["kind"] == "every-nth-all":
        return EveryNthAll(n=doc["n"])
    if doc["kind"] == "every-nth-of-class":
        return EveryNthOfClass(n=doc["n"], classes=frozenset(doc["classes"]))
    raise EvaluationError(f"unknown downsample policy {doc!r}")


@dataclass(frozen=True)
class EvalConfig:
    manifest_path: str
    render: RenderConfig = field(default_factory=RenderConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    prompt: PromptConfig = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    downsample: DownsamplePolicy = None
    parse_failure_policy: ParseFailurePolicy = ParseFailurePolicy.COUNT_AS_WRONG
    subjects: tuple[str, ...] | None = None
    min_test_index: int = 0
    fallback_random: bool = False
    jobs: int = 1
    cache_dir: str = ""
    render_cache_dir: str = ""
    no_cache: bool = False

    def __post_init__(self):
        if self.prompt is None:
            object.__setattr__(self, "prompt", PromptConfig.default())
        object.__setattr__(self, "parse_failure_policy",
                           ParseFailurePolicy(self.parse_failure_policy))
        if self.jobs < 1:
            raise EvaluationError("jobs must be >= 1")

    def snapshot(self) -> dict:
        return {
            "manifest_path": str(self.manifest_path),
            "render": self.render.to_dict(),
            "render_config_digest": self.render.digest(),
            "selection": {
                "shots": self.selection.shots,
                "strategy": self.selection.strategy.value,
                "rng_seed": self.selection.rng_seed,
            },
            "prompt": self.prompt.to_dict(),
            "backend": self.backend.to_dict(),
            "provider": self.provider.to_dict(),
            "downsample": downsample_to_dict(self.downsample),
            "parse_failure_policy": self.parse_failure_policy.value,
            "subjects": list(self.subjects) if self.subjects else None,
            "min_test_index": self.min_test_index,
            "fallback_random": self.fallback_random,
            "no_cache": self.no_cache,
        }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass(eq=True)
class PredictionRow:
    trial_index: int
    true_label: int
    predicted: int | None          # None when parse failed, skipped, or errored
    parse_failure: bool = False
    from_cache: bool = False
    fallback: bool = False
    skipped: bool = False
    error: str = ""
    support: list[dict] = field(default_factory=list)
    prompt_digest: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictionRow":
        return cls(**doc)


@dataclass(eq=True)
class SubjectResult:
    subject_id: str
    confusion: list[list[int]]
    bca: float | None
    bca_note: str = ""
    predictions: list[PredictionRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "confusion": self.confusion,
            "bca": self.bca,
            "bca_note": self.bca_note,
            "predictions": [p.to_dict() for p in self.predictions],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SubjectResult":
        return cls(
            subject_id=doc["subject_id"],
            confusion=[list(r) for r in doc["confusion"]],
            bca=doc["bca"],
            bca_note=doc["bca_note"],
            predictions=[PredictionRow.from_dict(p) for p in doc["predictions"]],
        )


@dataclass(eq=True)
class EvalReport:
    config: dict
    subjects: list[SubjectResult]
    mean_bca: float | None
    counts: dict
    external_baselines: dict = field(default_factory=dict)  # merge point for
    # externally computed reference models; this pipeline never fills it
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "subjects": [s.to_dict() for s in self.subjects],
            "mean_bca": self.mean_bca,
            "counts": self.counts,
            "external_baselines": self.external_baselines,
            "audit": self.audit(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            config=doc["config"],
            subjects=[SubjectResult.from_dict(s) for s in doc["subjects"]],
            mean_bca=doc["mean_bca"],
            counts=doc["counts"],
            external_baselines=doc.get("external_baselines", {}),
            schema_version=doc.get("schema_version", 1),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def audit(self) -> dict:
        """Post-hoc leakage scan over every emitted support entry."""
        violations = []
        for result in self.subjects:
            for row in result.predictions:
                for entry in row.support:
                    if entry["subject_id"] == result.subject_id and entry["label"] != 0:
                        violations.append(
                            f"{result.subject_id}/{row.trial_index}: task-class entry "
                            f"{entry['trial_index']} leaked from test subject")
                    if (entry["subject_id"] == result.subject_id
                            and entry["trial_index"] >= row.trial_index):
                        violations.append(
                            f"{result.subject_id}/{row.trial_index}: anchor "
                            f"{entry['trial_index']} does not precede the query")
        return {"leakage_violations": len(violations), "violations": violations,
                "ok": not violations}

    def trial_rows(self) -> list[dict]:
        """Flat one-row-per-prediction table for spreadsheet import."""
        rows = []
        for result in self.subjects:
            for row in result.predictions:
                rows.append({
                    "subject_id": result.subject_id,
                    "trial_index": row.trial_index,
                    "true_label": row.true_label,
                    "predicted": "" if row.predicted is None else row.predicted,
                    "parse_failure": int(row.parse_failure),
                    "from_cache": int(row.from_cache),
                    "fallback": int(row.fallback),
                    "skipped": int(row.skipped),
                    "error": row.error,
                    "prompt_digest": row.prompt_digest,
                    "support": ";".join(
                        f"{e['subject_id']}/{e['trial_index']}/{e['label']}"
                        for e in row.support),
                })
        return rows

    def write_csv(self, path: Path) -> None:
        import csv

        rows = self.trial_rows()
        fields = ["subject_id", "trial_index", "true_label", "predicted", "parse_failure",
                  "from_cache", "fallback", "skipped", "error", "prompt_digest", "support"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# pipeline helpers
# ---------------------------------------------------------------------------


class TrialRenderer:
    """Renders trials of one manifest at one config, memoized (optionally
    disk-backed). Thread-safe."""

    def __init__(self, manifest: DatasetManifest, config: RenderConfig,
                 cache_dir: str = ""):
        self.manifest = manifest
        self.config = config
        self.cache = RenderCache(Path(cache_dir)) if cache_dir else None
        self._memo = {}
        self._lock = threading.Lock()

    def image(self, subject_id: str, trial_index: int):
        key = (subject_id, trial_index)
        with self._lock:
            if key in self._memo:
                return self._memo[key]
        trial = self.manifest.subject(subject_id).trial(trial_index)
        if self.cache is not None:
            image = self.cache.render(trial, self.config)
        else:
            image = rasterize(trial, self.config)
        with self._lock:
            self._memo[key] = image
        return image


def _apply_downsample(manifest: DatasetManifest, policy: DownsamplePolicy) -> DatasetManifest:
    if policy is None:
        return manifest
    return DatasetManifest(
        dataset_name=manifest.dataset_name,
        num_classes=manifest.num_classes,
        trial_duration_s=manifest.trial_duration_s,
        sampling_rate=manifest.sampling_rate,
        channel_names=manifest.channel_names,
        subjects=[downsample_trials(p, policy) for p in manifest.subjects],
    )


def prepare_artifacts(manifest: DatasetManifest, renderer: TrialRenderer,
                      provider, store: EmbeddingStore, config_digest: str,
                      need_embeddings: bool) -> None:
    """Render (and if needed, embed) every retained trial ahead of the LOSO
    loop, so the per-query path is pure lookups."""
    missing = []
    for trial in manifest.iter_trials():
        image = renderer.image(trial.subject_id, trial.trial_index)
        if not need_embeddings:
            continue
        try:
            embed_image(image.png_bytes, provider, store,
                        trial_ref=(trial.subject_id, trial.trial_index, config_digest))
        except MissingEmbeddingError as exc:
            missing.extend(exc.missing)
    if missing:
        raise MissingEmbeddingError(missing)


# ---------------------------------------------------------------------------
# LOSO driver
# ---------------------------------------------------------------------------


def run_loso(config: EvalConfig, *, manifest: DatasetManifest | None = None,
             gateway: VlmGateway | None = None, store: EmbeddingStore | None = None,
             renderer: TrialRenderer | None = None) -> EvalReport:
    """Evaluate every subject as the held-out test subject; see module doc."""
    if manifest is None:
        manifest = load_manifest(Path(config.manifest_path))
    working = _apply_downsample(manifest, config.downsample)
    subject_ids = [p.subject_id for p in working.subjects]
    if config.subjects:
        unknown = set(config.subjects) - set(subject_ids)
        if unknown:
            raise EvaluationError(f"unknown subject(s) in filter: {sorted(unknown)}")
        subject_ids = [s for s in subject_ids if s in set(config.subjects)]
    if not subject_ids:
        raise EvaluationError("subject filter excluded every subject")

    if config.backend.kind is BackendKind.REMOTE_CHAT:
        config.backend.api_key()  # fail before any work, not mid-report

    if store is None:
        if not config.provider.store_dir:
            raise EvaluationError("provider.store_dir is required")
        store = EmbeddingStore(Path(config.provider.store_dir))
    if renderer is None:
        renderer = TrialRenderer(working, config.render, config.render_cache_dir)
    config_digest = config.render.digest()

    need_embeddings = (config.prompt.tier is Tier.REASONING_EXAMPLES
                       or config.backend.kind is BackendKind.MOCK_NEAREST_SUPPORT)
    provider = None
    if need_embeddings:
        provider = config.provider.build(store)
        prepare_artifacts(working, renderer, provider, store, config_digest, True)
    else:
        prepare_artifacts(working, renderer, None, store, config_digest, False)
    lookup = StoreLookup(store, config_digest)

    if gateway is None:
        cache = ResponseCache(Path(config.cache_dir)) if config.cache_dir else None
        gateway = VlmGateway(config.backend, cache, store=store)
    remote_calls_before = gateway.remote_calls

    results = []
    counts = {"evaluated": 0, "parse_failures": 0, "fallbacks": 0, "skipped": 0,
              "errors": 0, "cache_hits": 0, "remote_calls": 0}

    for test_subject in subject_ids:
        pool = working.subject(test_subject)
        queries = [t for t in pool.trials if t.trial_index >= config.min_test_index]

        def evaluate_one(trial) -> PredictionRow:
            row = PredictionRow(trial_index=trial.trial_index, true_label=trial.label,
                                predicted=None)
            try:
                image = renderer.image(trial.subject_id, trial.trial_index)
                support = None
                if config.prompt.tier is Tier.REASONING_EXAMPLES:
                    try:
                        support = build_support_set(
                            working, test_subject, trial.trial_index, lookup, config.selection)
                    except EmptyHistoricalPool:
                        if not config.fallback_random:
                            row.skipped = True
                            row.error = "empty historical pool"
                            return row
                        fallback_cfg = dataclasses.replace(
                            config.selection, strategy=Strategy.RANDOM)
                        support = build_support_set(
                            working, test_subject, trial.trial_index, lookup, fallback_cfg)
                        row.fallback = True
                    support = support.with_images(renderer.image)
                    row.support = [e.to_dict() for e in support.entries]
                bundle = build_prompt(config.prompt, support, image)
                row.prompt_digest = bundle.digest
                response = gateway.classify(bundle, no_cache=config.no_cache)
                row.from_cache = response.from_cache
                if isinstance(response.label, ParseFailure):
                    row.parse_failure = True
                else:
                    row.predicted = response.label
            except (SelectionError, MissingEmbeddingError, PromptError, GatewayError) as exc:
                row.error = f"{type(exc).__name__}: {exc}"
            return row

        if config.jobs > 1:
            with ThreadPoolExecutor(max_workers=config.jobs) as pool_exec:
                rows = list(pool_exec.map(evaluate_one, queries))
        else:
            rows = [evaluate_one(t) for t in queries]
        rows.sort(key=lambda r: r.trial_index)

        k = working.num_classes
        confusion = [[0] * k for _ in range(k)]
        for row in rows:
            if row.skipped or row.error:
                counts["skipped" if row.skipped else "errors"] += 1
                continue
            counts["evaluated"] += 1
            if row.fallback:
                counts["fallbacks"] += 1
            if row.from_cache:
                counts["cache_hits"] += 1
            if row.parse_failure:
                counts["parse_failures"] += 1
                if config.parse_failure_policy is ParseFailurePolicy.COUNT_AS_WRONG:
                    # fold as an incorrect prediction; BCA only reads row-wise
                    # recall so the chosen wrong column does not matter
                    confusion[row.true_label][(row.true_label + 1) % k] += 1
                continue
            confusion[row.true_label][row.predicted] += 1

        try:
            subject_bca = bca(confusion)
            note = ""
        except EvaluationError as exc:
            subject_bca = None
            note = str(exc)
        results.append(SubjectResult(
            subject_id=test_subject,
            confusion=confusion,
            bca=subject_bca,
            bca_note=note,
            predictions=rows,
        ))

    counts["remote_calls"] = gateway.remote_calls - remote_calls_before
    defined = [r.bca for r in results if r.bca is not None]
    mean_bca = float(np.mean(defined)) if defined else None
    report = EvalReport(
        config=config.snapshot(),
        subjects=results,
        mean_bca=mean_bca,
        counts=counts,
    )
    return report


def run_ablation(config: EvalConfig, strategies: list[Strategy], tiers: list[Tier], *,
                 manifest: DatasetManifest | None = None,
                 gateway: VlmGateway | None = None,
                 store: EmbeddingStore | None = None) -> dict[tuple[str, str], EvalReport]:
    """Cartesian sweep over strategies and tiers with shared caches."""
    if not strategies or not tiers:
        raise EvaluationError("ablation axes must be non-empty")
    if manifest is None:
        manifest = load_manifest(Path(config.manifest_path))
    if gateway is None and config.backend.kind is BackendKind.REMOTE_CHAT:
        cache = ResponseCache(Path(config.cache_dir)) if config.cache_dir else None
        gateway = VlmGateway(config.backend, cache)
    reports = {}
    for strategy in strategies:
        for tier in tiers:
            run_cfg = dataclasses.replace(
                config,
                selection=dataclasses.replace(config.selection, strategy=Strategy(strategy)),
                prompt=dataclasses.replace(config.prompt, tier=Tier(tier)),
            )
            reports[(Strategy(strategy).value, Tier(tier).value)] = run_loso(
                run_cfg, manifest=manifest, gateway=gateway, store=store)
    return reports


def ablation_table(reports: dict[tuple[str, str], EvalReport]) -> list[dict]:
    rows = []
    for (strategy, tier), report in sorted(reports.items()):
        rows.append({
            "strategy": strategy,
            "tier": tier,
            "mean_bca": report.mean_bca,
            "evaluated": report.counts["evaluated"],
            "parse_failures": report.counts["parse_failures"],
            "skipped": report.counts["skipped"],
            "remote_calls": report.counts["remote_calls"],
        })
    return rows
