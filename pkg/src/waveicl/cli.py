"""Command-line entry point.

Every option resolves through three layers: config file < environment
(``WAVEICL_<OPTION>``) < explicit flag, and the winning source is logged per
key. Each run prints the digest of its fully resolved configuration so
experiment provenance is one line of output.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import _kernels
from .dataset import (DatasetError, EveryNthAll, EveryNthOfClass, SynthSpec, load_manifest,
                      save_dataset, synthesize_dataset)
from .embeddings import (EmbeddingError, EmbeddingStore, MissingEmbeddingError, StoreLookup)
from .evaluation import (EvalConfig, EvaluationError, ParseFailurePolicy, ProviderConfig,
                         ablation_table, run_ablation, run_loso)
from .gateway import BackendConfig, GatewayError, ResponseCache, VlmGateway
from .prompts import PromptBundle, PromptConfig, PromptError, Tier
from .render import RenderConfig, RenderError, rasterize
from .selection import SelectionConfig, SelectionError, Strategy, build_support_set

log = logging.getLogger("waveicl")

_ERRORS = (DatasetError, RenderError, EmbeddingError, SelectionError, PromptError,
           GatewayError, EvaluationError, OSError, ValueError)


@dataclass(frozen=True)
class Opt:
    name: str                 # flag, e.g. "--trials-per-class"
    type: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    is_flag: bool = False     # boolean with --x / --no-x forms

    @property
    def dest(self) -> str:
        return self.name.lstrip("-").replace("-", "_")


def _add_opts(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        if opt.is_flag:
            parser.add_argument(opt.name, action=argparse.BooleanOptionalAction,
                                default=None, help=opt.help)
        else:
            parser.add_argument(opt.name, type=opt.type, default=None,
                                choices=opt.choices, help=f"{opt.help} (default: {opt.default})")


def _parse_env(opt: Opt, raw: str):
    if opt.is_flag:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return opt.type(raw)


def _resolve_opts(args: argparse.Namespace, opts: list[Opt], file_cfg: dict,
                  command: str) -> dict:
    """Apply the file < env < flag layering and log the winning source."""
    section = file_cfg.get(command, {})
    resolved = {}
    for opt in opts:
        env_key = f"WAVEICL_{opt.dest.upper()}"
        flag_value = getattr(args, opt.dest)
        if flag_value is not None:
            value, source = flag_value, "flag"
        elif env_key in os.environ:
            value, source = _parse_env(opt, os.environ[env_key]), f"env:{env_key}"
        elif opt.dest in section:
            value, source = section[opt.dest], "file"
        elif opt.dest in file_cfg and not isinstance(file_cfg.get(opt.dest), dict):
            value, source = file_cfg[opt.dest], "file"
        else:
            value, source = opt.default, "default"
        resolved[opt.dest] = value
        log.debug("config: %s.%s = %r (%s)", command, opt.dest, value, source)
        if source != "default":
            log.info("config: %s.%s = %r (%s)", command, opt.dest, value, source)
    return resolved


def _config_digest(command: str, resolved: dict) -> str:
    blob = json.dumps({"command": command, "options": resolved},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _load_render_config(path: str | None) -> RenderConfig:
    if not path:
        return RenderConfig()
    return RenderConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_backend(path: str | None, store_dir: str) -> BackendConfig:
    if not path:
        return BackendConfig(embedding_store=store_dir)
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc.setdefault("embedding_store", store_dir)
    return BackendConfig.from_dict(doc)


def _parse_downsample(text: str | None):
    if not text or text == "none":
        return None
    kind, _, rest = text.partition(":")
    if kind == "all":
        return EveryNthAll(n=int(rest))
    if kind == "class":
        n, _, classes = rest.partition(":")
        targets = frozenset(int(c) for c in classes.split(",")) if classes else frozenset({0})
        return EveryNthOfClass(n=int(n), classes=targets)
    raise EvaluationError(
        f"bad --downsample {text!r}; expected none | all:N | class:N:c1,c2")


def _parse_strategies(text: str) -> list[Strategy]:
    return [Strategy(s.strip()) for s in text.split(",") if s.strip()]


def _parse_tiers(text: str) -> list[Tier]:
    return [Tier(t.strip()) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# subcommand option tables
# ---------------------------------------------------------------------------

STRATEGY_NAMES = tuple(s.value for s in Strategy)
TIER_NAMES = tuple(t.value for t in Tier)

GLOBAL_OPTS = [
    Opt("--jobs", int, 1, "parallel workers for per-trial evaluation"),
    Opt("--log-level", str, "warning", "logging level",
        choices=("debug", "info", "warning", "error")),
    Opt("--no-cache", default=False, help="force fresh backend responses (audited)",
        is_flag=True),
]

SYNTH_OPTS = [
    Opt("--seed", int, 7, "RNG seed"),
    Opt("--subjects", int, 4, "number of synthetic subjects"),
    Opt("--trials-per-class", int, 20, "trials per class per subject"),
    Opt("--channels", int, 4, "channel count"),
    Opt("--rate", float, 250.0, "sampling rate in Hz"),
    Opt("--duration", float, 4.0, "trial duration in seconds"),
    Opt("--classes", int, 2, "number of classes"),
    Opt("--warmup", int, 2, "leading non-task trials per subject"),
    Opt("--out", str, "dataset", "output directory"),
]

RENDER_OPTS = [
    Opt("--manifest", str, "dataset/manifest.json", "dataset manifest path"),
    Opt("--subject", str, None, "subject id"),
    Opt("--trial", int, None, "trial index"),
    Opt("--render-config", str, "", "render config JSON path (defaults when empty)"),
    Opt("--out", str, "renders", "output directory"),
]

EMBED_OPTS = [
    Opt("--manifest", str, "dataset/manifest.json", "dataset manifest path"),
    Opt("--provider", str, "pixelstats", "embedding provider",
        choices=("file", "http", "pixelstats")),
    Opt("--store", str, "embeddings", "embedding store directory"),
    Opt("--endpoint", str, "", "embed-service base URL (http provider)"),
    Opt("--render-config", str, "", "render config JSON path"),
    Opt("--render-cache", str, "", "render cache directory"),
]

SELECT_OPTS = [
    Opt("--manifest", str, "dataset/manifest.json", "dataset manifest path"),
    Opt("--test-subject", str, None, "held-out subject id"),
    Opt("--test-trial", int, None, "query trial index"),
    Opt("--strategy", str, Strategy.REPRESENTATIVENESS_SIMILARITY.value,
        "selection strategy", choices=STRATEGY_NAMES),
    Opt("--shots", int, 2, "examples per class (M)"),
    Opt("--seed", int, 0, "selection RNG seed"),
    Opt("--store", str, "embeddings", "embedding store directory"),
    Opt("--render-config", str, "", "render config JSON path"),
    Opt("--out", str, "support.json", "output descriptor path"),
]

QUERY_OPTS = [
    Opt("--bundle", str, None, "serialized prompt bundle JSON path"),
    Opt("--backend", str, "", "backend config JSON path (default: mock)"),
    Opt("--store", str, "embeddings", "embedding store (mock backend)"),
    Opt("--cache-dir", str, "", "response cache directory"),
]

EVALUATE_OPTS = [
    Opt("--manifest", str, "dataset/manifest.json", "dataset manifest path"),
    Opt("--strategy", str, Strategy.REPRESENTATIVENESS_SIMILARITY.value,
        "selection strategy", choices=STRATEGY_NAMES),
    Opt("--tier", str, Tier.REASONING_EXAMPLES.value, "prompt tier", choices=TIER_NAMES),
    Opt("--shots", int, 2, "examples per class (M)"),
    Opt("--seed", int, 0, "selection RNG seed"),
    Opt("--provider", str, "pixelstats", "embedding provider",
        choices=("file", "http", "pixelstats")),
    Opt("--store", str, "embeddings", "embedding store directory"),
    Opt("--endpoint", str, "", "embed-service base URL (http provider)"),
    Opt("--backend", str, "", "backend config JSON path (default: mock)"),
    Opt("--render-config", str, "", "render config JSON path"),
    Opt("--render-cache", str, "", "render cache directory"),
    Opt("--cache-dir", str, "", "response cache directory"),
    Opt("--downsample", str, "none", "none | all:N | class:N:c1,c2"),
    Opt("--subjects", str, "", "comma-separated held-out subject filter"),
    Opt("--min-test-index", int, 0, "skip queries before this trial index"),
    Opt("--fallback-random", default=False,
        help="fall back to random selection when the historical pool is empty",
        is_flag=True),
    Opt("--parse-failure-policy", str, ParseFailurePolicy.COUNT_AS_WRONG.value,
        "how parse failures score", choices=tuple(p.value for p in ParseFailurePolicy)),
    Opt("--out-dir", str, "eval-out", "report output directory"),
]

ABLATE_OPTS = EVALUATE_OPTS + [
    Opt("--strategies", str, ",".join(STRATEGY_NAMES), "comma-separated strategies"),
    Opt("--tiers", str, ",".join(TIER_NAMES), "comma-separated tiers"),
]

EXPORT_OPTS = [
    Opt("--store", str, "embeddings", "embedding store directory"),
    Opt("--manifest", str, "", "optional manifest to attach labels"),
    Opt("--out", str, "embeddings.csv", "output CSV path"),
]


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_synth(cfg: dict) -> int:
    spec = SynthSpec(
        subjects=cfg["subjects"],
        trials_per_class=cfg["trials_per_class"],
        channels=cfg["channels"],
        sampling_rate=cfg["rate"],
        trial_duration_s=cfg["duration"],
        num_classes=cfg["classes"],
        warmup_nontask=cfg["warmup"],
    )
    manifest = synthesize_dataset(spec, seed=cfg["seed"])
    path = save_dataset(manifest, Path(cfg["out"]))
    print(f"wrote {manifest.total_trials} trials to {path}")
    return 0


def _cmd_render(cfg: dict) -> int:
    if cfg["subject"] is None or cfg["trial"] is None:
        raise RenderError("--subject and --trial are required")
    manifest = load_manifest(Path(cfg["manifest"]))
    trial = manifest.subject(cfg["subject"]).trial(cfg["trial"])
    render_config = _load_render_config(cfg["render_config"])
    image = rasterize(trial, render_config)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{trial.subject_id}_{trial.trial_index:05d}_{image.config_digest[:12]}.png"
    out.write_bytes(image.png_bytes)
    print(f"wrote {out} ({image.width_px}x{image.height_px})")
    return 0


def _cmd_embed(cfg: dict, jobs: int) -> int:
    from .evaluation import TrialRenderer, prepare_artifacts

    manifest = load_manifest(Path(cfg["manifest"]))
    render_config = _load_render_config(cfg["render_config"])
    store = EmbeddingStore(Path(cfg["store"]))
    provider = ProviderConfig(kind=cfg["provider"], store_dir=cfg["store"],
                              endpoint=cfg["endpoint"]).build(store)
    renderer = TrialRenderer(manifest, render_config, cfg["render_cache"])
    prepare_artifacts(manifest, renderer, provider, store, render_config.digest(), True)
    print(f"embedded {manifest.total_trials} trials into {store.root} "
          f"(provider={provider.provider_id}, model={provider.model_id}, D={provider.dimension})")
    return 0


def _cmd_select(cfg: dict) -> int:
    if cfg["test_subject"] is None or cfg["test_trial"] is None:
        raise SelectionError("--test-subject and --test-trial are required")
    manifest = load_manifest(Path(cfg["manifest"]))
    render_config = _load_render_config(cfg["render_config"])
    store = EmbeddingStore(Path(cfg["store"]))
    lookup = StoreLookup(store, render_config.digest())
    selection = SelectionConfig(shots=cfg["shots"], strategy=Strategy(cfg["strategy"]),
                                rng_seed=cfg["seed"])
    support = build_support_set(manifest, cfg["test_subject"], cfg["test_trial"],
                                lookup, selection)
    out = Path(cfg["out"])
    out.write_text(json.dumps(support.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(support.entries)} entries)")
    return 0


def _cmd_query(cfg: dict, no_cache: bool) -> int:
    if cfg["bundle"] is None:
        raise GatewayError("--bundle is required")
    bundle = PromptBundle.from_dict(
        json.loads(Path(cfg["bundle"]).read_text(encoding="utf-8")))
    backend = _load_backend(cfg["backend"], cfg["store"])
    cache = ResponseCache(Path(cfg["cache_dir"])) if cfg["cache_dir"] else None
    gateway = VlmGateway(backend, cache)
    response = gateway.classify(bundle, no_cache=no_cache)
    print(json.dumps({
        "prompt_digest": response.prompt_digest,
        "backend": response.backend_id,
        "from_cache": response.from_cache,
        "label": None if not response.parsed else response.label,
        "raw_text": response.raw_text,
    }, indent=2))
    return 0


def _build_eval_config(cfg: dict, jobs: int, no_cache: bool) -> EvalConfig:
    render_config = _load_render_config(cfg["render_config"])
    backend = _load_backend(cfg["backend"], cfg["store"])
    subjects = tuple(s.strip() for s in cfg["subjects"].split(",") if s.strip()) or None
    return EvalConfig(
        manifest_path=cfg["manifest"],
        render=render_config,
        selection=SelectionConfig(shots=cfg["shots"], strategy=Strategy(cfg["strategy"]),
                                  rng_seed=cfg["seed"]),
        prompt=PromptConfig.default(tier=Tier(cfg["tier"])),
        backend=backend,
        provider=ProviderConfig(kind=cfg["provider"], store_dir=cfg["store"],
                                endpoint=cfg["endpoint"]),
        downsample=_parse_downsample(cfg["downsample"]),
        parse_failure_policy=ParseFailurePolicy(cfg["parse_failure_policy"]),
        subjects=subjects,
        min_test_index=cfg["min_test_index"],
        fallback_random=cfg["fallback_random"],
        jobs=jobs,
        cache_dir=cfg["cache_dir"],
        render_cache_dir=cfg["render_cache"],
        no_cache=no_cache,
    )


def _cmd_evaluate(cfg: dict, jobs: int, no_cache: bool) -> int:
    config = _build_eval_config(cfg, jobs, no_cache)
    report = run_loso(config)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(out_dir / "trials.csv")
    audit = report.audit()
    mean = "n/a" if report.mean_bca is None else f"{report.mean_bca:.2f}"
    print(f"mean BCA: {mean}  (evaluated={report.counts['evaluated']}, "
          f"skipped={report.counts['skipped']}, failures={report.counts['parse_failures']})")
    print(f"report: {out_dir / 'report.json'}")
    if not audit["ok"]:
        print(f"AUDIT FAILED: {audit['leakage_violations']} leakage violation(s)",
              file=sys.stderr)
        return 1
    return 0


def _cmd_ablate(cfg: dict, jobs: int, no_cache: bool) -> int:
    config = _build_eval_config(cfg, jobs, no_cache)
    strategies = _parse_strategies(cfg["strategies"])
    tiers = _parse_tiers(cfg["tiers"])
    reports = run_ablation(config, strategies, tiers)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    failed = False
    for (strategy, tier), report in reports.items():
        stem = f"{strategy}_{tier}"
        (out_dir / f"report_{stem}.json").write_text(report.to_json(), encoding="utf-8")
        if not report.audit()["ok"]:
            failed = True
    import csv

    rows = ablation_table(reports)
    with (out_dir / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        mean = "n/a" if row["mean_bca"] is None else f"{row['mean_bca']:.2f}"
        print(f"{row['strategy']:32s} {row['tier']:20s} BCA={mean}")
    print(f"comparison: {out_dir / 'comparison.csv'}")
    return 1 if failed else 0


def _cmd_export_embeddings(cfg: dict) -> int:
    import csv

    store = EmbeddingStore(Path(cfg["store"]))
    labels = {}
    if cfg["manifest"]:
        manifest = load_manifest(Path(cfg["manifest"]))
        labels = {(t.subject_id, t.trial_index): t.label for t in manifest.iter_trials()}
    rows = list(store.iter_index())
    if not rows:
        raise EmbeddingError(f"store at {store.root} has an empty index; nothing to export")
    first = store.get(rows[0][3])
    dim = first.size
    out = Path(cfg["out"])
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "trial_index", "config_digest", "image_digest",
                         "label"] + [f"v{i}" for i in range(dim)])
        for subject_id, trial_index, config_digest, image_digest in rows:
            vector = store.get(image_digest)
            label = labels.get((subject_id, trial_index), "")
            writer.writerow([subject_id, trial_index, config_digest, image_digest, label]
                            + [repr(float(v)) for v in vector])
    print(f"wrote {len(rows)} vectors (D={dim}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waveicl",
        description="Waveform-image EEG classification with retrieval-augmented "
                    "in-context VLM prompting.")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file (lowest-priority layer)")
    _add_opts(parser, GLOBAL_OPTS)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts, help_text in [
        ("synth", SYNTH_OPTS, "generate a deterministic synthetic dataset"),
        ("render", RENDER_OPTS, "render one trial to PNG"),
        ("embed", EMBED_OPTS, "render and embed every trial into a store"),
        ("select", SELECT_OPTS, "build a support set for one query"),
        ("query", QUERY_OPTS, "classify a serialized prompt bundle"),
        ("evaluate", EVALUATE_OPTS, "run leave-one-subject-out evaluation"),
        ("ablate", ABLATE_OPTS, "sweep strategies x tiers with shared caches"),
        ("export-embeddings", EXPORT_OPTS, "dump the embedding store to CSV"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_opts(p, opts)
    return parser


_COMMAND_OPTS = {
    "synth": SYNTH_OPTS,
    "render": RENDER_OPTS,
    "embed": EMBED_OPTS,
    "select": SELECT_OPTS,
    "query": QUERY_OPTS,
    "evaluate": EVALUATE_OPTS,
    "ablate": ABLATE_OPTS,
    "export-embeddings": EXPORT_OPTS,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read --config {args.config}: {exc}", file=sys.stderr)
            return 1

    global_cfg = _resolve_opts(args, GLOBAL_OPTS, file_cfg, "global")
    logging.basicConfig(level=getattr(logging, global_cfg["log_level"].upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve_opts(args, _COMMAND_OPTS[args.command], file_cfg, args.command)
    digest = _config_digest(args.command, {**global_cfg, **cfg})
    print(f"resolved config digest: {digest[:16]}", file=sys.stderr)
    log.info("kernel backend: %s", _kernels.backend_name())

    try:
        if args.command == "synth":
            return _cmd_synth(cfg)
        if args.command == "render":
            return _cmd_render(cfg)
        if args.command == "embed":
            return _cmd_embed(cfg, global_cfg["jobs"])
        if args.command == "select":
            return _cmd_select(cfg)
        if args.command == "query":
            return _cmd_query(cfg, global_cfg["no_cache"])
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, global_cfg["jobs"], global_cfg["no_cache"])
        if args.command == "ablate":
            return _cmd_ablate(cfg, global_cfg["jobs"], global_cfg["no_cache"])
        if args.command == "export-embeddings":
            return _cmd_export_embeddings(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except MissingEmbeddingError as exc:
        print("error: missing embeddings:", file=sys.stderr)
        for item in exc.missing:
            print(f"  {item}", file=sys.stderr)
        return 1
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
