"""Metadata-driven extraction of structured ESG disclosure records.

The package turns corporate report documents into per-indicator records
of the form <Disclosure, KPI, Topic, Value, Unit, Target, Action> by
pairing an indicator registry with retrieval-augmented prompting, and
ships an evaluation harness plus corpus-level analytics on top.
"""

__version__ = "0.1.0"

from .errors import (
    AnalyticsError,
    ConfigError,
    DocumentError,
    EvaluationError,
    KnowledgeBaseError,
    PipelineError,
    ProviderError,
    RegistryError,
    RetrievalError,
    TableStructureError,
)

__all__ = [
    "AnalyticsError",
    "ConfigError",
    "DocumentError",
    "EvaluationError",
    "KnowledgeBaseError",
    "PipelineError",
    "ProviderError",
    "RegistryError",
    "RetrievalError",
    "TableStructureError",
    "__version__",
]
