"""Shared fixtures: the bundled registry, the generated corpus, offline providers."""

from pathlib import Path

import pytest

from esgpipe import docmodel, evaluation, metadata
from esgpipe.providers import (
    HashEmbedder,
    JaccardReranker,
    LeadSentenceSummarizer,
    MockChatProvider,
    ProviderSet,
)
from tests import corpusgen


@pytest.fixture(scope="session")
def registry() -> metadata.MetadataRegistry:
    return metadata.load_registry(metadata.bundled_registry_path())


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("fixture")
    corpusgen.generate(root)
    return root


@pytest.fixture(scope="session")
def corpus_docs(fixture_root) -> list[docmodel.StructuredDocument]:
    paths = sorted((fixture_root / "corpus").glob("*.json"))
    return [docmodel.ingest(p) for p in paths]


@pytest.fixture(scope="session")
def corpus_labels(fixture_root, registry) -> dict[str, evaluation.LabelSet]:
    return evaluation.load_labels(fixture_root / "labels.jsonl", registry)


@pytest.fixture(scope="session")
def offline_providers(fixture_root) -> ProviderSet:
    return ProviderSet(
        embedder=HashEmbedder(),
        chat=MockChatProvider.from_file(fixture_root / "mock_replies.json"),
        reranker=JaccardReranker(),
        summarizer=LeadSentenceSummarizer(),
    )
