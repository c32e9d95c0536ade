"""Accuracy metrics against annotated labels, and the ablation runner.

Two metrics drive everything:

- disclosure-coverage accuracy (acc_dc): the agreement rate between
  predicted and labeled disclosure booleans over ALL registry
  indicators. The companion `disclosed_recall` restricts the view to
  indicators actually labeled disclosed, for comparison.
- data-extraction accuracy (acc_de): the exact-match rate of predicted
  numeric values over the labeled disclosed values; a value matches
  only if the numbers are equal after canonicalization and the units
  are equivalent under the bundled alias table. With zero labeled
  values the metric is undefined and reported as N/A, never as 0.

Labels ship as one JSON object per document (one per line) with the
two maps ``disclosure_labels`` and ``value_labels``; disclosure labels
must cover the registry exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import Sequence

from .agent import ExtractionRecord
from .docmodel import StructuredDocument
from .errors import EvaluationError, PipelineError
from .kb import KnowledgeBase
from .metadata import MetadataRegistry
from .pipeline import (
    AblationConfig,
    PipelineConfig,
    build_document_kb,
    extract_document,
)
from .providers import ProviderSet

logger = logging.getLogger(__name__)


@dataclass
class LabelSet:
    doc_id: str
    disclosure_labels: dict[str, bool]
    value_labels: dict[tuple[str, str], tuple[Decimal, str]]


def validate_label_set(labels: LabelSet, registry: MetadataRegistry) -> None:
    registry_ids = {spec.id for spec in registry.indicators}
    labeled_ids = set(labels.disclosure_labels)
    missing = registry_ids - labeled_ids
    extra = labeled_ids - registry_ids
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing {sorted(missing)[:5]}")
        if extra:
            parts.append(f"unknown {sorted(extra)[:5]}")
        raise EvaluationError(
            f"labels for {labels.doc_id!r} do not cover the registry exactly: "
            + "; ".join(parts)
        )
    for indicator_id, topic in labels.value_labels:
        if not labels.disclosure_labels.get(indicator_id, False):
            raise EvaluationError(
                f"labels for {labels.doc_id!r}: value label for {indicator_id!r} "
                f"({topic!r}) but disclosure label is false"
            )


def _parse_label_value(raw: object, where: str) -> Decimal:
    try:
        value = Decimal(str(raw))
    except InvalidOperation:
        raise EvaluationError(f"{where}: unparseable value {raw!r}") from None
    if not value.is_finite():
        raise EvaluationError(f"{where}: non-finite value {raw!r}")
    return value


def load_labels(path: str | Path, registry: MetadataRegistry) -> dict[str, LabelSet]:
    """Read the one-object-per-line labels file, validated."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise EvaluationError(f"cannot read labels file {path}: {exc}") from exc
    out: dict[str, LabelSet] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvaluationError(f"{where}: invalid JSON: {exc}") from exc
        unknown = set(obj) - {"doc_id", "disclosure_labels", "value_labels"}
        if unknown:
            raise EvaluationError(f"{where}: unknown fields {sorted(unknown)}")
        try:
            doc_id = str(obj["doc_id"])
            disclosure = {str(k): bool(v) for k, v in obj["disclosure_labels"].items()}
            values: dict[tuple[str, str], tuple[Decimal, str]] = {}
            for entry in obj["value_labels"]:
                key = (str(entry["indicator_id"]), str(entry["topic"]).strip())
                if key in values:
                    raise EvaluationError(f"{where}: duplicate value label {key}")
                values[key] = (
                    _parse_label_value(entry["value"], where),
                    str(entry["unit"]).strip(),
                )
        except (KeyError, TypeError, AttributeError) as exc:
            raise EvaluationError(f"{where}: malformed label object: {exc}") from exc
        if doc_id in out:
            raise EvaluationError(f"{where}: duplicate doc_id {doc_id!r}")
        labels = LabelSet(doc_id=doc_id, disclosure_labels=disclosure, value_labels=values)
        validate_label_set(labels, registry)
        out[doc_id] = labels
    if not out:
        raise EvaluationError(f"{path}: labels file contains no documents")
    return out


class UnitAliases:
    """Unit equivalence via the bundled alias groups (case-insensitive)."""

    def __init__(self, groups: Sequence[Sequence[str]]):
        self._group_of: dict[str, int] = {}
        for gid, group in enumerate(groups):
            for unit in group:
                self._group_of[unit.strip().lower()] = gid

    @classmethod
    def bundled(cls) -> "UnitAliases":
        data = json.loads(
            resources.files("esgpipe").joinpath("data/unit_aliases.json").read_text("utf-8")
        )
        return cls(data["groups"])

    def equivalent(self, a: str | None, b: str | None) -> bool:
        na = (a or "").strip().lower()
        nb = (b or "").strip().lower()
        if na == nb:
            return True
        ga = self._group_of.get(na)
        return ga is not None and ga == self._group_of.get(nb)


def _predicted_disclosure(records: Sequence[ExtractionRecord]) -> dict[str, bool]:
    out: dict[str, bool] = {}
    for r in records:
        out[r.indicator_id] = out.get(r.indicator_id, False) or r.disclosure
    return out


def dc_rows(
    labels: LabelSet, records: Sequence[ExtractionRecord], registry: MetadataRegistry
) -> list[dict]:
    """Per-indicator disclosure match table."""
    validate_label_set(labels, registry)
    predicted = _predicted_disclosure(records)
    rows = []
    for spec in registry.indicators:
        labeled = labels.disclosure_labels[spec.id]
        pred = predicted.get(spec.id, False)
        rows.append(
            {
                "indicator_id": spec.id,
                "labeled": labeled,
                "predicted": pred,
                "match": labeled == pred,
            }
        )
    return rows


def acc_dc(
    labels: LabelSet, records: Sequence[ExtractionRecord], registry: MetadataRegistry
) -> float:
    rows = dc_rows(labels, records, registry)
    return sum(r["match"] for r in rows) / len(rows)


def disclosed_recall(
    labels: LabelSet, records: Sequence[ExtractionRecord], registry: MetadataRegistry
) -> float | None:
    """Agreement restricted to indicators labeled disclosed (the prose
    reading of the coverage metric); None when nothing is labeled
    disclosed."""
    rows = dc_rows(labels, records, registry)
    disclosed = [r for r in rows if r["labeled"]]
    if not disclosed:
        return None
    return sum(r["predicted"] for r in disclosed) / len(disclosed)


def _values_match(
    labeled: tuple[Decimal, str],
    predicted: tuple[Decimal | None, str | None] | None,
    aliases: UnitAliases,
    rel_tol: float | None,
) -> bool:
    if predicted is None or predicted[0] is None:
        return False
    lv, lu = labeled
    pv, pu = predicted
    if not aliases.equivalent(lu, pu):
        return False
    if rel_tol is None:
        return pv == lv
    if lv == 0:
        return pv == 0
    return abs(float((pv - lv) / lv)) <= rel_tol


def de_rows(
    labels: LabelSet,
    records: Sequence[ExtractionRecord],
    registry: MetadataRegistry,
    aliases: UnitAliases | None = None,
    rel_tol: float | None = None,
) -> list[dict]:
    """Per-(indicator, topic) value match table over the labeled values."""
    aliases = aliases or UnitAliases.bundled()
    by_key: dict[tuple[str, str], ExtractionRecord] = {}
    for r in records:
        key = (r.indicator_id, r.topic.strip())
        if key not in by_key and r.disclosure:
            by_key[key] = r
    rows = []
    for (indicator_id, topic), (lv, lu) in sorted(labels.value_labels.items()):
        record = by_key.get((indicator_id, topic))
        predicted = (record.value, record.unit) if record is not None else None
        rows.append(
            {
                "indicator_id": indicator_id,
                "topic": topic,
                "labeled_value": lv,
                "labeled_unit": lu,
                "predicted_value": record.value if record else None,
                "predicted_unit": record.unit if record else None,
                "match": _values_match((lv, lu), predicted, aliases, rel_tol),
            }
        )
    return rows


def acc_de(
    labels: LabelSet,
    records: Sequence[ExtractionRecord],
    registry: MetadataRegistry,
    aliases: UnitAliases | None = None,
    rel_tol: float | None = None,
) -> float | None:
    """None (undefined, reported N/A) when no values are labeled."""
    rows = de_rows(labels, records, registry, aliases, rel_tol)
    if not rows:
        return None
    return sum(r["match"] for r in rows) / len(rows)


@dataclass
class EvaluationReport:
    scope: str  # doc_id, or "aggregate"
    config_id: str
    provider_name: str
    acc_dc: float
    acc_de: float | None
    disclosed_recall: float | None
    n_mq: int
    n_v: int
    dc_table: list[dict] = field(default_factory=list)
    de_table: list[dict] = field(default_factory=list)
    per_document: list["EvaluationReport"] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)


def evaluate_document(
    labels: LabelSet,
    records: Sequence[ExtractionRecord],
    registry: MetadataRegistry,
    config_id: str = "",
    provider_name: str = "",
    aliases: UnitAliases | None = None,
    rel_tol: float | None = None,
) -> EvaluationReport:
    aliases = aliases or UnitAliases.bundled()
    dc = dc_rows(labels, records, registry)
    de = de_rows(labels, records, registry, aliases, rel_tol)
    return EvaluationReport(
        scope=labels.doc_id,
        config_id=config_id,
        provider_name=provider_name,
        acc_dc=sum(r["match"] for r in dc) / len(dc),
        acc_de=(sum(r["match"] for r in de) / len(de)) if de else None,
        disclosed_recall=disclosed_recall(labels, records, registry),
        n_mq=len(dc),
        n_v=len(de),
        dc_table=dc,
        de_table=de,
    )


def aggregate_reports(
    reports: Sequence[EvaluationReport],
    config_id: str = "",
    provider_name: str = "",
    errors: Sequence[str] = (),
) -> EvaluationReport:
    """Document-mean aggregate. acc_de averages only documents where it
    is defined; it is None when no document defines it."""
    if not reports:
        raise EvaluationError("cannot aggregate zero document reports")
    de_values = [r.acc_de for r in reports if r.acc_de is not None]
    recalls = [r.disclosed_recall for r in reports if r.disclosed_recall is not None]
    return EvaluationReport(
        scope="aggregate",
        config_id=config_id,
        provider_name=provider_name,
        acc_dc=sum(r.acc_dc for r in reports) / len(reports),
        acc_de=(sum(de_values) / len(de_values)) if de_values else None,
        disclosed_recall=(sum(recalls) / len(recalls)) if recalls else None,
        n_mq=sum(r.n_mq for r in reports),
        n_v=sum(r.n_v for r in reports),
        per_document=list(reports),
        errors=list(errors),
    )


def run_ablation(
    docs: Sequence[StructuredDocument],
    registry: MetadataRegistry,
    labels_by_doc: dict[str, LabelSet],
    configs: Sequence[AblationConfig],
    providers: ProviderSet,
    base_cfg: PipelineConfig | None = None,
    records_sink: dict[str, list[ExtractionRecord]] | None = None,
    kb_cache: dict[tuple[str, str], KnowledgeBase] | None = None,
) -> list[EvaluationReport]:
    """Run each arm over the corpus; one aggregate report per arm.

    A document failing inside one arm is reported in that report's
    errors list and excluded from its means; other documents and arms
    proceed. `records_sink`, when given, receives config_id -> all
    records. `kb_cache` deduplicates KB builds across arms that share
    preprocessing (keyed by doc_id + preprocessing mode).
    """
    base_cfg = base_cfg or PipelineConfig()
    missing = [d.doc_id for d in docs if d.doc_id not in labels_by_doc]
    if missing:
        raise EvaluationError(f"no labels for documents: {missing}")
    if kb_cache is None:
        kb_cache = {}

    reports: list[EvaluationReport] = []
    aliases = UnitAliases.bundled()
    for arm in configs:
        cfg = replace(base_cfg, arm=arm)
        doc_reports: list[EvaluationReport] = []
        errors: list[str] = []
        arm_records: list[ExtractionRecord] = []
        for doc in docs:
            mode = "structured" if arm.use_structured_preprocessing else "naive"
            try:
                cache_key = (doc.doc_id, mode)
                kb = kb_cache.get(cache_key)
                if kb is None:
                    kb = build_document_kb(doc, providers, cfg)
                    kb_cache[cache_key] = kb
                records = extract_document(doc, registry, kb, providers, cfg)
                arm_records.extend(records)
                doc_reports.append(
                    evaluate_document(
                        labels_by_doc[doc.doc_id],
                        records,
                        registry,
                        config_id=arm.config_id,
                        provider_name=providers.chat.name,
                        aliases=aliases,
                    )
                )
            except PipelineError as exc:
                logger.error("arm %s failed on %s: %s", arm.config_id, doc.doc_id, exc)
                errors.append(f"{doc.doc_id}: {exc}")
        if records_sink is not None:
            records_sink[arm.config_id] = arm_records
        if doc_reports:
            reports.append(
                aggregate_reports(
                    doc_reports,
                    config_id=arm.config_id,
                    provider_name=providers.chat.name,
                    errors=errors,
                )
            )
        else:
            reports.append(
                EvaluationReport(
                    scope="aggregate",
                    config_id=arm.config_id,
                    provider_name=providers.chat.name,
                    acc_dc=0.0,
                    acc_de=None,
                    disclosed_recall=None,
                    n_mq=0,
                    n_v=0,
                    errors=errors,
                )
            )
    return reports


def _fmt(metric: float | None) -> str:
    return "N/A" if metric is None else f"{metric:.3f}"


def comparison_table(reports: Sequence[EvaluationReport]) -> str:
    """Human-readable arm comparison (config, Acc_DC, Acc_DE, N docs)."""
    header = f"{'config':<26} {'Acc_DC':>8} {'Acc_DE':>8} {'N docs':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        n_docs = len(r.per_document) if r.per_document else (0 if r.scope == "aggregate" else 1)
        lines.append(
            f"{r.config_id:<26} {_fmt(r.acc_dc):>8} {_fmt(r.acc_de):>8} {n_docs:>7}"
        )
    return "\n".join(lines)


def report_to_json(report: EvaluationReport) -> dict:
    """JSON-safe dict; Decimal values become strings."""

    def row(d: dict) -> dict:
        return {
            k: (str(v) if isinstance(v, Decimal) else v) for k, v in d.items()
        }

    return {
        "scope": report.scope,
        "config_id": report.config_id,
        "provider_name": report.provider_name,
        "acc_dc": report.acc_dc,
        "acc_de": report.acc_de,
        "disclosed_recall": report.disclosed_recall,
        "n_mq": report.n_mq,
        "n_v": report.n_v,
        "dc_table": [row(r) for r in report.dc_table],
        "de_table": [row(r) for r in report.de_table],
        "per_document": [report_to_json(r) for r in report.per_document],
        "errors": report.errors,
    }
