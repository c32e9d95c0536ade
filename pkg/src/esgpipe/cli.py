"""Command-line entry point for the extraction pipeline.

Subcommands: ingest, build-kb, extract, evaluate, ablate, analyze, and
metadata {validate,stats}. Everything is driven by a YAML config file;
environment variables are used only for provider credentials. Every
subcommand accepts --dry-run, which prints the resolved plan and
touches nothing.

Exit codes: 0 success (data-level failures are summarized as warnings),
1 configuration error, 2 input parse error, 3 provider unreachable.

Config file shape (all keys optional unless a command needs them)::

    registry: path            # default: the bundled registry
    corpus_dir: corpus/
    output_dir: out/
    mode: offline             # offline | online
    arm: enhanced_rag_knowledge   # ablation arm, or "all"
    labels: labels.jsonl
    jobs: 1
    value_match_rel_tol: null # optional relative tolerance for Acc_DE
    retrieval: {k: 5, m: 10, budget_chars: 6000}
    chunking: {max_chars: 1200, naive_chunk_chars: 400}
    providers:
      embedding: {kind: offline, dim: 256}        # or kind: http, url, dim
      chat: {kind: mock, replies: replies.json}   # or kind: http, url
      rerank: {kind: offline}                     # or kind: http, url
      summary: {kind: offline, sentences: 2}

Relative paths resolve against the config file's directory. In offline
mode no provider may carry a url; in online mode embedding and chat
must.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__, agent, analytics, docmodel, evaluation, kb as kbmod, metadata
from .errors import (
    AnalyticsError,
    ConfigError,
    DocumentError,
    EvaluationError,
    KnowledgeBaseError,
    PipelineError,
    ProviderError,
    RegistryError,
)
from .pipeline import (
    ABLATION_ARMS,
    DEFAULT_ARM,
    PipelineConfig,
    ablation_arm,
    build_document_kb,
    extract_document,
)
from .providers import (
    HashEmbedder,
    HttpChatProvider,
    HttpEmbedder,
    HttpEndpoint,
    HttpReranker,
    JaccardReranker,
    LeadSentenceSummarizer,
    MockChatProvider,
    ProviderSet,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INPUT = 2
EXIT_PROVIDER = 3

CORPUS_SUFFIXES = {".json", ".md", ".markdown", ".txt"}

_CONFIG_KEYS = {
    "registry",
    "corpus_dir",
    "output_dir",
    "mode",
    "arm",
    "labels",
    "jobs",
    "value_match_rel_tol",
    "retrieval",
    "chunking",
    "providers",
}


@dataclass
class RunConfig:
    base_dir: Path
    registry_path: Path | None
    corpus_dir: Path | None
    output_dir: Path
    mode: str
    arm: str
    labels_path: Path | None
    jobs: int
    rel_tol: float | None
    retrieval_k: int
    rerank_m: int
    budget_chars: int
    max_chars: int
    naive_chunk_chars: int
    providers_cfg: dict
    snapshot: dict = field(default_factory=dict)


def _resolve(base: Path, value: object) -> Path:
    p = Path(str(value))
    return p if p.is_absolute() else (base / p)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")

    base = path.parent
    mode = str(raw.get("mode", "offline"))
    if mode not in {"offline", "online"}:
        raise ConfigError(f"config {path}: mode must be offline or online, got {mode!r}")
    retrieval = dict(raw.get("retrieval") or {})
    chunking = dict(raw.get("chunking") or {})
    providers_cfg = {
        name: dict(cfg or {})
        for name, cfg in (raw.get("providers") or {}).items()
    }
    unknown_providers = set(providers_cfg) - {"embedding", "chat", "rerank", "summary"}
    if unknown_providers:
        raise ConfigError(
            f"config {path}: unknown provider sections {sorted(unknown_providers)}"
        )
    if mode == "offline":
        for name, cfg in providers_cfg.items():
            if "url" in cfg:
                raise ConfigError(
                    f"config {path}: offline mode forbids provider urls "
                    f"(found one under {name!r})"
                )
    else:
        for required in ("embedding", "chat"):
            if not providers_cfg.get(required, {}).get("url"):
                raise ConfigError(
                    f"config {path}: online mode requires a url for {required!r}"
                )

    arm = str(raw.get("arm", DEFAULT_ARM))
    if arm != "all" and arm not in ABLATION_ARMS:
        raise ConfigError(
            f"config {path}: arm must be one of {sorted(ABLATION_ARMS)} or 'all'"
        )

    rel_tol = raw.get("value_match_rel_tol")
    config = RunConfig(
        base_dir=base,
        registry_path=_resolve(base, raw["registry"]) if raw.get("registry") else None,
        corpus_dir=_resolve(base, raw["corpus_dir"]) if raw.get("corpus_dir") else None,
        output_dir=_resolve(base, raw.get("output_dir", "out")),
        mode=mode,
        arm=arm,
        labels_path=_resolve(base, raw["labels"]) if raw.get("labels") else None,
        jobs=int(raw.get("jobs", 1)),
        rel_tol=None if rel_tol is None else float(rel_tol),
        retrieval_k=int(retrieval.get("k", 5)),
        rerank_m=int(retrieval.get("m", 10)),
        budget_chars=int(retrieval.get("budget_chars", 6000)),
        max_chars=int(chunking.get("max_chars", kbmod.DEFAULT_CHUNK_CHARS)),
        naive_chunk_chars=int(
            chunking.get("naive_chunk_chars", kbmod.DEFAULT_NAIVE_CHUNK_CHARS)
        ),
        providers_cfg=providers_cfg,
        snapshot=raw,
    )
    if config.jobs < 1:
        raise ConfigError(f"config {path}: jobs must be >= 1")
    return config


def load_registry_for(config: RunConfig) -> metadata.MetadataRegistry:
    path = config.registry_path or metadata.bundled_registry_path()
    if not Path(path).exists():
        raise ConfigError(f"registry file not found: {path}")
    return metadata.load_registry(path)


def build_providers(config: RunConfig) -> ProviderSet:
    emb_cfg = config.providers_cfg.get("embedding", {})
    chat_cfg = config.providers_cfg.get("chat", {})
    rerank_cfg = config.providers_cfg.get("rerank", {})
    summary_cfg = config.providers_cfg.get("summary", {})

    def endpoint(cfg: dict) -> HttpEndpoint:
        return HttpEndpoint(
            url=str(cfg["url"]),
            timeout=float(cfg.get("timeout", 30.0)),
            retries=int(cfg.get("retries", 2)),
            token_env=str(cfg.get("token_env", "ESGPIPE_API_TOKEN")),
        )

    dim = int(emb_cfg.get("dim", 256))
    if config.mode == "online":
        embedder = HttpEmbedder(endpoint(emb_cfg), dim=dim)
        chat = HttpChatProvider(endpoint(chat_cfg))
        reranker = HttpReranker(endpoint(rerank_cfg)) if rerank_cfg.get("url") else JaccardReranker()
    else:
        embedder = HashEmbedder(dim=dim)
        replies = chat_cfg.get("replies")
        if replies:
            chat = MockChatProvider.from_file(_resolve(config.base_dir, replies))
        else:
            logger.warning("no mock replies configured; chat will refuse everything")
            chat = MockChatProvider([])
        reranker = JaccardReranker()
    summarizer = LeadSentenceSummarizer(int(summary_cfg.get("sentences", 2)))
    return ProviderSet(embedder=embedder, chat=chat, reranker=reranker, summarizer=summarizer)


def pipeline_config(config: RunConfig, arm_id: str) -> PipelineConfig:
    return PipelineConfig(
        arm=ablation_arm(arm_id),
        extract=agent.ExtractConfig(
            top_k=config.retrieval_k,
            rerank_m=config.rerank_m,
            budget_chars=config.budget_chars,
        ),
        kb_build=kbmod.BuildConfig(max_chars=config.max_chars),
        naive_chunk_chars=config.naive_chunk_chars,
    )


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def corpus_files(config: RunConfig) -> list[Path]:
    if config.corpus_dir is None:
        raise ConfigError("config has no corpus_dir")
    if not config.corpus_dir.is_dir():
        raise ConfigError(f"corpus_dir not found: {config.corpus_dir}")
    return sorted(
        p
        for p in config.corpus_dir.iterdir()
        if p.is_file() and p.suffix.lower() in CORPUS_SUFFIXES
    )


def ingest_corpus(
    files: Sequence[Path],
) -> tuple[list[docmodel.StructuredDocument], list[str]]:
    """Ingest every file; returns (documents, skip messages)."""
    docs = []
    skipped = []
    for path in files:
        try:
            docs.append(docmodel.ingest(path))
        except DocumentError as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append(f"{path.name}: {exc}")
    docs.sort(key=lambda d: d.doc_id)
    seen: dict[str, str] = {}
    for d in docs:
        if d.doc_id in seen:
            raise DocumentError(
                f"duplicate doc_id {d.doc_id!r} in corpus"
            )
        seen[d.doc_id] = d.doc_id
    return docs, skipped


def kb_cache_path(config: RunConfig, doc_path: Path, embedder_name: str, mode: str) -> Path:
    chunk_param = config.max_chars if mode == "structured" else config.naive_chunk_chars
    digest = sha256_file(doc_path)[:16]
    name = f"{digest}-{embedder_name}-{mode}-{chunk_param}.json"
    return config.output_dir / "kb_cache" / name


def build_or_load_kb(
    doc: docmodel.StructuredDocument,
    doc_path: Path,
    providers: ProviderSet,
    pcfg: PipelineConfig,
    config: RunConfig,
) -> kbmod.KnowledgeBase:
    mode = "structured" if pcfg.arm.use_structured_preprocessing else "naive"
    cache = kb_cache_path(config, doc_path, providers.embedder.name, mode)
    if cache.exists():
        try:
            return kbmod.load(cache)
        except KnowledgeBaseError as exc:
            logger.warning("stale KB cache %s: %s; rebuilding", cache.name, exc)
    built = build_document_kb(doc, providers, pcfg)
    cache.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.with_name(cache.name + ".tmp")
    kbmod.save(built, tmp)
    os.replace(tmp, cache)
    return built


def build_manifest(
    config: RunConfig,
    providers: ProviderSet | None,
    inputs: dict[str, str],
    outputs: dict[str, str],
    started: str,
    arm: str,
) -> dict:
    return {
        "tool_version": __version__,
        "started_utc": started,
        "finished_utc": _utc_now(),
        "arm": arm,
        "mode": config.mode,
        "providers": providers.names() if providers else {},
        "config": config.snapshot,
        "inputs_sha256": inputs,
        "outputs_sha256": outputs,
    }


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _print_plan(title: str, items: dict[str, object]) -> None:
    print(f"dry-run: {title}")
    for key, value in items.items():
        print(f"  {key}: {value}")


def _extract_all(
    docs: Sequence[docmodel.StructuredDocument],
    doc_paths: dict[str, Path],
    registry: metadata.MetadataRegistry,
    providers: ProviderSet,
    pcfg: PipelineConfig,
    config: RunConfig,
) -> list[agent.ExtractionRecord]:
    """Per-document extraction with a bounded worker pool; output order
    is by doc_id regardless of scheduling."""

    def one(doc: docmodel.StructuredDocument) -> list[agent.ExtractionRecord]:
        built = build_or_load_kb(doc, doc_paths[doc.doc_id], providers, pcfg, config)
        return extract_document(doc, registry, built, providers, pcfg)

    results: dict[str, list[agent.ExtractionRecord]] = {}
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            for doc, records in zip(docs, pool.map(one, docs)):
                results[doc.doc_id] = records
    else:
        for doc in docs:
            results[doc.doc_id] = one(doc)
    out: list[agent.ExtractionRecord] = []
    for doc_id in sorted(results):
        out.extend(results[doc_id])
    return out


# --- subcommands ---


def cmd_ingest(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    files = corpus_files(config)
    if args.dry_run:
        _print_plan("ingest", {"corpus_dir": config.corpus_dir, "files": len(files)})
        return EXIT_OK
    docs, skipped = ingest_corpus(files)
    out_dir = config.output_dir / "structured"
    for doc in docs:
        write_text_atomic(out_dir / f"{doc.doc_id}.json", docmodel.serialize(doc))
    print(f"ingested {len(docs)} documents into {out_dir}")
    for msg in skipped:
        print(f"skipped {msg}")
    if not docs:
        print("error: no documents ingested", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_build_kb(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    arm_id = args.arm or (DEFAULT_ARM if config.arm == "all" else config.arm)
    files = corpus_files(config)
    providers = build_providers(config)
    pcfg = pipeline_config(config, arm_id)
    if args.dry_run:
        _print_plan(
            "build-kb",
            {
                "corpus_dir": config.corpus_dir,
                "files": len(files),
                "arm": arm_id,
                "embedder": providers.embedder.name,
            },
        )
        return EXIT_OK
    docs, paths, skipped = _load_corpus_with_paths(config)
    out_dir = config.output_dir / "kb"
    out_dir.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        built = build_or_load_kb(doc, paths[doc.doc_id], providers, pcfg, config)
        target = out_dir / f"{doc.doc_id}.kb.json"
        tmp = target.with_name(target.name + ".tmp")
        kbmod.save(built, tmp)
        os.replace(tmp, target)
        print(f"{doc.doc_id}: {built.counts()}")
    for msg in skipped:
        print(f"skipped {msg}")
    return EXIT_OK if docs else EXIT_INPUT


def _load_corpus_with_paths(
    config: RunConfig,
) -> tuple[list[docmodel.StructuredDocument], dict[str, Path], list[str]]:
    files = corpus_files(config)
    docs = []
    paths: dict[str, Path] = {}
    skipped = []
    for path in files:
        try:
            doc = docmodel.ingest(path)
        except DocumentError as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append(f"{path.name}: {exc}")
            continue
        if doc.doc_id in paths:
            raise DocumentError(f"duplicate doc_id {doc.doc_id!r} in corpus")
        docs.append(doc)
        paths[doc.doc_id] = path
    docs.sort(key=lambda d: d.doc_id)
    return docs, paths, skipped


def cmd_extract(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    arm_id = args.arm or (DEFAULT_ARM if config.arm == "all" else config.arm)
    registry = load_registry_for(config)
    providers = build_providers(config)
    pcfg = pipeline_config(config, arm_id)
    if args.dry_run:
        _print_plan(
            "extract",
            {
                "corpus_dir": config.corpus_dir,
                "arm": arm_id,
                "mode": config.mode,
                "providers": providers.names(),
                "output": config.output_dir / "records.jsonl",
            },
        )
        return EXIT_OK
    started = _utc_now()
    docs, paths, skipped = _load_corpus_with_paths(config)
    if not docs:
        print("error: no documents ingested", file=sys.stderr)
        return EXIT_INPUT
    records = _extract_all(docs, paths, registry, providers, pcfg, config)

    records_path = config.output_dir / "records.jsonl"
    config.output_dir.mkdir(parents=True, exist_ok=True)
    tmp = records_path.with_name(records_path.name + ".tmp")
    agent.write_records(records, tmp)
    os.replace(tmp, records_path)

    inputs = {str(p): sha256_file(p) for p in paths.values()}
    registry_path = config.registry_path or metadata.bundled_registry_path()
    inputs[str(registry_path)] = sha256_file(Path(registry_path))
    manifest = build_manifest(
        config,
        providers,
        inputs,
        {str(records_path): sha256_file(records_path)},
        started,
        arm_id,
    )
    write_text_atomic(
        config.output_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n"
    )
    print(f"wrote {len(records)} records for {len(docs)} documents to {records_path}")
    for msg in skipped:
        print(f"skipped {msg}")
    if skipped:
        print(f"warnings: {len(skipped)} document(s) skipped")
    return EXIT_OK


def _labels_path(config: RunConfig, args: argparse.Namespace) -> Path:
    labels = getattr(args, "labels", None) or config.labels_path
    if labels is None:
        raise EvaluationError("no labels file configured (use --labels or config 'labels')")
    labels = Path(labels)
    if not labels.exists():
        raise EvaluationError(f"labels file not found: {labels}")
    return labels


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    registry = load_registry_for(config)
    arm_id = args.arm or config.arm
    if arm_id == "all":
        return _run_ablation_command(args, config, registry)

    labels_file = _labels_path(config, args)
    if args.dry_run:
        _print_plan(
            "evaluate",
            {"labels": labels_file, "arm": arm_id, "records": args.records or "fresh run"},
        )
        return EXIT_OK
    labels = evaluation.load_labels(labels_file, registry)

    records_path = Path(args.records) if args.records else config.output_dir / "records.jsonl"
    if records_path.exists():
        records = agent.load_records(records_path)
        provider_name = "recorded"
    else:
        providers = build_providers(config)
        pcfg = pipeline_config(config, arm_id)
        docs, paths, _skipped = _load_corpus_with_paths(config)
        if not docs:
            print("error: no documents ingested", file=sys.stderr)
            return EXIT_INPUT
        records = _extract_all(docs, paths, registry, providers, pcfg, config)
        provider_name = providers.chat.name

    by_doc: dict[str, list[agent.ExtractionRecord]] = {}
    for r in records:
        by_doc.setdefault(r.doc_id, []).append(r)
    missing = sorted(set(by_doc) - set(labels))
    if missing:
        raise EvaluationError(f"records reference documents without labels: {missing}")

    aliases = evaluation.UnitAliases.bundled()
    doc_reports = [
        evaluation.evaluate_document(
            labels[doc_id],
            by_doc[doc_id],
            registry,
            config_id=arm_id,
            provider_name=provider_name,
            aliases=aliases,
            rel_tol=config.rel_tol,
        )
        for doc_id in sorted(by_doc)
    ]
    aggregate = evaluation.aggregate_reports(doc_reports, config_id=arm_id, provider_name=provider_name)

    report_json = json.dumps(evaluation.report_to_json(aggregate), indent=2) + "\n"
    write_text_atomic(config.output_dir / "report.json", report_json)
    table = evaluation.comparison_table([aggregate])
    write_text_atomic(config.output_dir / "report.txt", table + "\n")
    print(table)
    return EXIT_OK


def _run_ablation_command(
    args: argparse.Namespace, config: RunConfig, registry: metadata.MetadataRegistry
) -> int:
    labels_file = _labels_path(config, args)
    if args.dry_run:
        _print_plan(
            "ablate",
            {
                "labels": labels_file,
                "arms": sorted(ABLATION_ARMS),
                "corpus_dir": config.corpus_dir,
            },
        )
        return EXIT_OK
    started = _utc_now()
    labels = evaluation.load_labels(labels_file, registry)
    providers = build_providers(config)
    docs, paths, skipped = _load_corpus_with_paths(config)
    if not docs:
        print("error: no documents ingested", file=sys.stderr)
        return EXIT_INPUT

    arms = [ABLATION_ARMS[a] for a in ("benchmark", "enhanced_rag", "enhanced_rag_knowledge")]
    records_sink: dict[str, list[agent.ExtractionRecord]] = {}
    base_cfg = pipeline_config(config, DEFAULT_ARM)
    reports = evaluation.run_ablation(
        docs, registry, labels, arms, providers, base_cfg, records_sink=records_sink
    )

    outputs: dict[str, str] = {}
    config.output_dir.mkdir(parents=True, exist_ok=True)
    for arm in arms:
        rec_path = config.output_dir / f"records-{arm.config_id}.jsonl"
        tmp = rec_path.with_name(rec_path.name + ".tmp")
        agent.write_records(records_sink.get(arm.config_id, []), tmp)
        os.replace(tmp, rec_path)
        outputs[str(rec_path)] = sha256_file(rec_path)
    for report in reports:
        path = config.output_dir / f"report-{report.config_id}.json"
        write_text_atomic(path, json.dumps(evaluation.report_to_json(report), indent=2) + "\n")
        outputs[str(path)] = sha256_file(path)

    table = evaluation.comparison_table(reports)
    write_text_atomic(config.output_dir / "comparison.txt", table + "\n")
    inputs = {str(p): sha256_file(p) for p in paths.values()}
    inputs[str(labels_file)] = sha256_file(labels_file)
    manifest = build_manifest(config, providers, inputs, outputs, started, "all")
    write_text_atomic(config.output_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")

    print(table)
    for report in reports:
        for err in report.errors:
            print(f"warning [{report.config_id}]: {err}")
    for msg in skipped:
        print(f"skipped {msg}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    registry = load_registry_for(config)
    return _run_ablation_command(args, config, registry)


def cmd_analyze(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    registry = load_registry_for(config)
    records_path = Path(args.records) if args.records else config.output_dir / "records.jsonl"
    if args.dry_run:
        _print_plan("analyze", {"records": records_path, "corpus_dir": config.corpus_dir})
        return EXIT_OK
    if not records_path.exists():
        raise ConfigError(f"records file not found: {records_path} (run extract first)")
    records = agent.load_records(records_path)
    docs, _paths, _skipped = _load_corpus_with_paths(config)

    overall = analytics.disclosure_stats(records, registry, "overall")
    by_industry = analytics.disclosure_stats(records, registry, "by-industry", docs)
    intensity = analytics.emission_intensity(records, docs)
    industry_intensity = analytics.industry_mean_intensity(intensity, docs)
    frequencies = analytics.key_action_frequencies(records)

    payload = analytics.stats_to_json(overall + by_industry, intensity, frequencies)
    payload["industry_intensity"] = {
        industry: {"scope1": s1, "scope2": s2}
        for industry, (s1, s2) in industry_intensity.items()
    }
    out_dir = config.output_dir / "analysis"
    write_text_atomic(out_dir / "analysis.json", json.dumps(payload, indent=2) + "\n")

    def write_csv(name: str, rows: list[list[str]]) -> None:
        text = "\n".join(",".join(cell.replace(",", ";") for cell in row) for row in rows)
        write_text_atomic(out_dir / name, text + "\n")

    write_csv("disclosure.csv", analytics.disclosure_csv_rows(overall + by_industry))
    write_csv("intensity.csv", analytics.intensity_csv_rows(intensity))
    write_csv("key_actions.csv", analytics.frequency_csv_rows(frequencies))
    print(f"wrote analysis for {len(records)} records to {out_dir}")
    return EXIT_OK


def cmd_metadata(args: argparse.Namespace) -> int:
    path = Path(args.registry) if args.registry else metadata.bundled_registry_path()
    if not path.exists():
        raise ConfigError(f"registry file not found: {path}")
    if args.metadata_command == "validate":
        registry = metadata.load_registry(path)
        print(f"ok: {registry.standard_name}, {len(registry)} indicators, "
              f"{len(registry.expressions)} expressions")
        return EXIT_OK
    registry = metadata.load_registry(path)
    table = metadata.count_table(registry)
    if args.json:
        payload = {
            "standard_name": registry.standard_name,
            "total": len(registry),
            "counts": {f"{cat}/{kind}": n for (cat, kind), n in sorted(table.items())},
        }
        print(json.dumps(payload, indent=2))
        return EXIT_OK
    print(f"standard: {registry.standard_name}")
    print(f"indicators: {len(registry)}")
    print(f"{'category':<10} {'kind':<10} {'count':>5}")
    for (cat, kind), n in sorted(table.items()):
        print(f"{cat:<10} {kind:<10} {n:>5}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esgpipe",
        description="Metadata-driven extraction of ESG disclosure records from reports",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        if needs_config:
            p.add_argument("--config", required=True, help="path to the YAML run config")
        p.add_argument("--dry-run", action="store_true", help="print the plan, change nothing")

    p = sub.add_parser("ingest", help="parse corpus files into structured documents")
    add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-kb", help="build per-document knowledge bases")
    add_common(p)
    p.add_argument("--arm", choices=sorted(ABLATION_ARMS), help="pipeline arm")
    p.set_defaults(func=cmd_build_kb)

    p = sub.add_parser("extract", help="extract records for every registry indicator")
    add_common(p)
    p.add_argument("--arm", choices=sorted(ABLATION_ARMS), help="pipeline arm")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score records against labels")
    add_common(p)
    p.add_argument("--labels", help="labels file (overrides config)")
    p.add_argument("--records", help="existing records file (default: output_dir/records.jsonl)")
    p.add_argument("--arm", help="arm id or 'all' for the three-arm comparison")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run all three pipeline arms and compare")
    add_common(p)
    p.add_argument("--labels", help="labels file (overrides config)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="disclosure, intensity and key-action analytics")
    add_common(p)
    p.add_argument("--records", help="records file (default: output_dir/records.jsonl)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("metadata", help="registry utilities")
    msub = p.add_subparsers(dest="metadata_command", required=True)
    for name in ("validate", "stats"):
        mp = msub.add_parser(name)
        mp.add_argument("--registry", help="registry path (default: bundled)")
        mp.add_argument("--dry-run", action="store_true")
        if name == "stats":
            mp.add_argument("--json", action="store_true", help="machine-readable output")
        mp.set_defaults(func=cmd_metadata)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"error: provider unreachable: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DocumentError, EvaluationError, AnalyticsError, KnowledgeBaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:  # anything else from this package
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
