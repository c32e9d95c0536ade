"""Prompt assembly, reply parsing, record serialization, and the extraction loop."""

from __future__ import annotations

import dataclasses
import json
import random
from decimal import Decimal

import pytest

from esgpipe.agent import (
    FLAG_MISSING_DISCLOSURE,
    FLAG_MISSING_TOPIC,
    FLAG_PARSE_FAILURE,
    FLAG_PROVIDER_FAILED,
    FLAG_RANGE_APPROXIMATED,
    FLAG_UNKNOWN_TOPIC,
    FLAG_VALIDATION_WARNING,
    FLAG_VALUE_COERCED,
    ExtractConfig,
    ExtractionRecord,
    build_prompt,
    extract_indicator,
    load_records,
    parse_reply,
    record_from_json,
    record_to_json,
    validate_record,
    write_records,
)
from esgpipe.errors import ConfigError, ProviderError
from esgpipe.kb import Source, build as build_kb
from esgpipe.providers import ChatProvider
from esgpipe.retrieval import NO_EVIDENCE_SENTINEL, EvidenceBundle, ScoredHit

from .fuzzing import random_reply


def _bundle(indicator_id, texts):
    hits = [
        ScoredHit(
            entry_id=f"e{i}",
            source=Source.TEXT,
            similarity=1.0 - i * 0.01,
            resolved_payload=text,
            anchor=f"blocks:{i}-{i}",
        )
        for i, text in enumerate(texts)
    ]
    return EvidenceBundle(
        indicator_id=indicator_id,
        hits=hits,
        total_chars=sum(len(t) for t in texts),
        truncated=False,
    )


# ---------------------------------------------------------------- build_prompt


def test_prompt_sections_knowledge_on(registry):
    spec = registry.indicator("A1.2-scope1")
    prompt = build_prompt(spec, _bundle(spec.id, ["Scope 1 was 2,500 tCO2e."]),
                          registry, knowledge_enabled=True)
    messages = prompt.to_messages()
    assert [m["role"] for m in messages] == ["system", "user"]
    user = messages[1]["content"]
    for section in ("[Reference Content]", "[Expert Knowledge]",
                    "[Question]", "[Answer Format]"):
        assert section in user
    assert "Scope 1 was 2,500 tCO2e." in user
    assert user.index("[Reference Content]") < user.index("[Expert Knowledge]")
    assert user.index("[Expert Knowledge]") < user.index("[Question]")
    assert user.index("[Question]") < user.index("[Answer Format]")


def test_prompt_knowledge_off_omits_section(registry):
    spec = registry.indicator("A1.2-scope1")
    prompt = build_prompt(spec, _bundle(spec.id, ["text"]), registry,
                          knowledge_enabled=False)
    assert prompt.expert_knowledge == ""
    assert "[Expert Knowledge]" not in prompt.to_messages()[1]["content"]


def test_prompt_empty_bundle_uses_sentinel(registry):
    spec = registry.indicator("A1.1-nox")
    empty = EvidenceBundle(indicator_id=spec.id, hits=[], total_chars=0,
                           truncated=False)
    prompt = build_prompt(spec, empty, registry)
    assert prompt.reference_content == NO_EVIDENCE_SENTINEL
    assert NO_EVIDENCE_SENTINEL in prompt.to_messages()[1]["content"]


def test_prompt_joins_hits_with_blank_line(registry):
    spec = registry.indicator("A1.1-nox")
    prompt = build_prompt(spec, _bundle(spec.id, ["first", "second"]), registry)
    assert prompt.reference_content == "first\n\nsecond"


def test_prompt_rejects_mismatched_bundle(registry):
    spec = registry.indicator("A1.1-nox")
    with pytest.raises(ConfigError, match="A1.2-scope1"):
        build_prompt(spec, _bundle("A1.2-scope1", ["x"]), registry)


def test_prompt_carries_audit_identity(registry):
    spec = registry.indicator("A1.1-nox")
    prompt = build_prompt(spec, _bundle(spec.id, ["x"]), registry,
                          doc_id="doc07")
    assert prompt.doc_id == "doc07"
    assert prompt.indicator_id == "A1.1-nox"
    # audit metadata must not leak into the rendered messages
    assert "doc07" not in prompt.to_messages()[1]["content"]


# ----------------------------------------------------------------- parse_reply


def test_parse_numeric_with_commas(registry):
    spec = registry.indicator("A1.1-nox")
    records = parse_reply(
        'Answer: {"disclosure": true, "topic": "Nitrogen Oxides",'
        ' "value": "12,500", "unit": "kg"}',
        spec,
        doc_id="d",
    )
    assert len(records) == 1
    rec = records[0]
    assert rec.disclosure is True
    assert rec.value == Decimal("12500")
    assert rec.unit == "kg"
    assert rec.flags == []


def test_parse_refusal_is_clean_non_disclosure(registry):
    spec = registry.indicator("A1.1-nox")
    records = parse_reply(
        "The requested information is not disclosed in the provided report content.",
        spec,
        doc_id="d",
    )
    assert len(records) == 1
    assert records[0].disclosure is False
    assert records[0].flags == []
    assert records[0].value is None


def test_parse_garbage_flags_failure(registry):
    spec = registry.indicator("A1.1-nox")
    records = parse_reply("]]]] no json here {{{", spec, doc_id="d")
    assert len(records) == 1
    assert records[0].disclosure is False
    assert FLAG_PARSE_FAILURE in records[0].flags


def test_parse_disclosed_numeric_without_value_warns(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"disclosure": true}', spec, doc_id="d")[0]
    assert rec.disclosure is True
    assert rec.value is None
    assert FLAG_VALIDATION_WARNING in rec.flags


def test_parse_range_takes_first_number(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"disclosure": true, "value": "10-20", "unit": "kg"}',
                      spec, doc_id="d")[0]
    assert rec.value == Decimal("10")
    assert FLAG_RANGE_APPROXIMATED in rec.flags


def test_parse_percent_implies_unit(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"disclosure": true, "value": "45%"}', spec, doc_id="d")[0]
    assert rec.value == Decimal("45")
    assert rec.unit == "%"


def test_parse_explicit_unit_beats_implied(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply(
        '{"disclosure": true, "value": "45%", "unit": "percent"}', spec, doc_id="d"
    )[0]
    assert rec.unit == "percent"


def test_parse_unknown_topic_flagged(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply(
        '{"disclosure": true, "topic": "Imaginary Gas", "value": 5, "unit": "kg"}',
        spec,
        doc_id="d",
    )[0]
    assert FLAG_UNKNOWN_TOPIC in rec.flags
    assert rec.topic == "Imaginary Gas"


def test_parse_multi_topic_first_wins(registry):
    spec = registry.indicator("A1.34-waste")  # Hazardous / Non-hazardous
    reply = json.dumps([
        {"disclosure": True, "topic": spec.topics[0], "value": 1, "unit": "t"},
        {"disclosure": True, "topic": spec.topics[0], "value": 2, "unit": "t"},
        {"disclosure": True, "topic": spec.topics[1], "value": 3, "unit": "t"},
    ])
    records = parse_reply(reply, spec, doc_id="d")
    assert len(records) == 2
    by_topic = {r.topic: r for r in records}
    assert by_topic[spec.topics[0]].value == Decimal("1")
    assert by_topic[spec.topics[1]].value == Decimal("3")


def test_parse_missing_topic_single_topic_defaults(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"disclosure": true, "value": 2, "unit": "kg"}',
                      spec, doc_id="d")[0]
    assert rec.topic == spec.topics[0]
    assert FLAG_MISSING_TOPIC not in rec.flags


def test_parse_missing_topic_multi_topic_flagged(registry):
    spec = registry.indicator("A1.34-waste")
    rec = parse_reply('{"disclosure": true, "value": 2, "unit": "t"}',
                      spec, doc_id="d")[0]
    assert FLAG_MISSING_TOPIC in rec.flags


def test_parse_missing_disclosure_with_value_assumes_true(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"value": "7", "unit": "kg"}', spec, doc_id="d")[0]
    assert rec.disclosure is True
    assert FLAG_MISSING_DISCLOSURE in rec.flags


def test_parse_non_disclosure_clears_payload(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply(
        '{"disclosure": false, "value": 9, "unit": "kg", "target": "t",'
        ' "action": "a"}',
        spec,
        doc_id="d",
    )[0]
    assert rec.disclosure is False
    assert rec.value is None and rec.unit is None
    assert rec.target is None and rec.action is None
    assert validate_record(rec)


def test_parse_prose_wrapped_json(registry):
    spec = registry.indicator("A1.1-nox")
    reply = (
        "Based on the report, here is the answer:\n"
        '{"disclosure": "yes", "value": "1e3", "unit": "kg"}\n'
        "I hope that is what you were looking for."
    )
    rec = parse_reply(reply, spec, doc_id="d")[0]
    assert rec.disclosure is True
    assert rec.value == Decimal("1e3")


def test_parse_infinity_value_dropped(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply('{"disclosure": true, "value": Infinity}', spec,
                      doc_id="d")[0]
    assert rec.value is None


def test_parse_value_coercion_flag(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply(
        '{"disclosure": true, "value": "about 320 units", "unit": "kg"}',
        spec,
        doc_id="d",
    )[0]
    assert rec.value == Decimal("320")
    assert FLAG_VALUE_COERCED in rec.flags


def test_parse_excerpt_is_normalized(registry):
    spec = registry.indicator("A1.1-nox")
    rec = parse_reply("line one\n\n  line\ttwo  " + "x" * 500, spec,
                      doc_id="d")[0]
    assert "\n" not in rec.raw_reply_excerpt
    assert len(rec.raw_reply_excerpt) <= 240
    assert rec.raw_reply_excerpt.startswith("line one line two")


def test_parse_fuzz_is_total_and_invariant_clean(registry):
    rng = random.Random(20240816)
    specs = [registry.indicator(i) for i in
             ("A1.1-nox", "A1.2-scope1", "A1.policy", "A1.34-waste")]
    for trial in range(500):
        spec = specs[trial % len(specs)]
        reply = random_reply(rng)
        records = parse_reply(reply, spec, doc_id="fuzz")
        assert records, f"empty result for reply {reply!r}"
        for rec in records:
            assert validate_record(rec)
            assert rec.indicator_id == spec.id
            assert isinstance(rec.disclosure, bool)
            if rec.value is not None:
                assert rec.value.is_finite()


# ------------------------------------------------------------- record (de)ser


def _record(**overrides):
    base = dict(
        doc_id="d", indicator_id="A1.1-nox", disclosure=True,
        kpi="Nitrogen oxides emissions in total", topic="Nitrogen Oxides",
        value=Decimal("12500"), unit="kg", target=None, action=None,
        raw_reply_excerpt="excerpt", flags=["value-coerced"],
    )
    base.update(overrides)
    return ExtractionRecord(**base)


def test_record_json_round_trip_integral():
    rec = _record()
    payload = record_to_json(rec)
    assert payload["value"] == 12500 and isinstance(payload["value"], int)
    assert record_from_json(payload) == rec


def test_record_json_round_trip_fractional():
    rec = _record(value=Decimal("3.25"))
    payload = record_to_json(rec)
    assert payload["value"] == pytest.approx(3.25)
    assert record_from_json(payload).value == Decimal("3.25")


def test_record_json_astronomical_value_falls_back_to_string():
    rec = _record(value=Decimal("1e400"))
    payload = record_to_json(rec)
    assert isinstance(payload["value"], str)
    assert record_from_json(payload).value == Decimal("1e400")


def test_record_json_none_value():
    rec = _record(disclosure=False, value=None, unit=None, flags=[])
    payload = record_to_json(rec)
    assert payload["value"] is None
    assert record_from_json(payload) == rec


def test_write_records_sorted_and_loadable(tmp_path):
    def rec(doc, ind, topic):
        return _record(doc_id=doc, indicator_id=ind, topic=topic)

    out = tmp_path / "records.jsonl"
    write_records(
        [rec("b", "x", "t"), rec("a", "y", "t"), rec("a", "x", "u"),
         rec("a", "x", "t")],
        out,
    )
    text = out.read_text(encoding="utf-8")
    assert text.endswith("\n")
    keys = [(r.doc_id, r.indicator_id, r.topic) for r in load_records(out)]
    assert keys == [("a", "x", "t"), ("a", "x", "u"), ("a", "y", "t"),
                    ("b", "x", "t")]


def test_load_records_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"doc_id": "a"}\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="malformed"):
        load_records(bad)


def test_load_records_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_records(tmp_path / "absent.jsonl")


# ------------------------------------------------------------ extract_indicator


class _FailingChat(ChatProvider):
    name = "always-down"

    def __init__(self):
        self.calls = 0

    def complete(self, prompt, params):
        self.calls += 1
        raise ProviderError("simulated outage")


class _FlakyChat(ChatProvider):
    name = "flaky"

    def __init__(self, inner, failures):
        self.inner = inner
        self.remaining = failures

    def complete(self, prompt, params):
        if self.remaining > 0:
            self.remaining -= 1
            raise ProviderError("transient")
        return self.inner.complete(prompt, params)


@pytest.fixture(scope="module")
def doc00_kb(corpus_docs, offline_providers):
    doc = corpus_docs[0]
    return doc, build_kb(doc, offline_providers.embedder)


def test_extract_golden_path(registry, offline_providers, doc00_kb):
    doc, kb = doc00_kb
    spec = registry.indicator("A1.1-nox")
    records = extract_indicator(doc.doc_id, spec, kb, registry,
                                offline_providers, ExtractConfig())
    assert len(records) == 1
    rec = records[0]
    assert rec.disclosure is True
    assert rec.value == Decimal("41000")
    assert rec.unit == "kg"
    assert rec.flags == []


def test_extract_undisclosed_indicator_refuses(registry, offline_providers,
                                               doc00_kb):
    doc, kb = doc00_kb
    spec = registry.indicator("A1.1-sox")
    records = extract_indicator(doc.doc_id, spec, kb, registry,
                                offline_providers, ExtractConfig())
    assert all(r.disclosure is False for r in records)
    assert all(FLAG_PARSE_FAILURE not in r.flags for r in records)


def test_extract_retries_then_fails(registry, offline_providers, doc00_kb,
                                    monkeypatch):
    doc, kb = doc00_kb
    spec = registry.indicator("A1.1-nox")
    sleeps = []
    monkeypatch.setattr("esgpipe.agent.time.sleep", sleeps.append)
    chat = _FailingChat()
    providers = dataclasses.replace(offline_providers, chat=chat)
    records = extract_indicator(
        doc.doc_id, spec, kb, registry, providers,
        ExtractConfig(retries=2, backoff_seconds=0.5),
    )
    assert chat.calls == 3
    assert sleeps == [0.5, 1.0]
    assert len(records) == 1
    assert records[0].disclosure is False
    assert records[0].flags == [FLAG_PROVIDER_FAILED]


def test_extract_recovers_from_transient_failure(registry, offline_providers,
                                                 doc00_kb, monkeypatch):
    doc, kb = doc00_kb
    spec = registry.indicator("A1.1-nox")
    monkeypatch.setattr("esgpipe.agent.time.sleep", lambda s: None)
    providers = dataclasses.replace(
        offline_providers, chat=_FlakyChat(offline_providers.chat, failures=1)
    )
    records = extract_indicator(doc.doc_id, spec, kb, registry, providers,
                                ExtractConfig(retries=2))
    assert records[0].disclosure is True
    assert records[0].value == Decimal("41000")


def test_extract_requires_chat_provider(registry, offline_providers, doc00_kb):
    doc, kb = doc00_kb
    spec = registry.indicator("A1.1-nox")
    broken = dataclasses.replace(offline_providers, chat=None)
    with pytest.raises(ConfigError):
        extract_indicator(doc.doc_id, spec, kb, registry, broken,
                          ExtractConfig())
