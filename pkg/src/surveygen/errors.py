"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, corpus/retrieval
errors -> 3, gateway errors -> 4.
"""

from __future__ import annotations


class SurveyGenError(Exception):
    """Base class for all package errors."""


class ConfigError(SurveyGenError):
    """Bad or missing configuration."""


class CorpusError(SurveyGenError):
    """Fatal corpus problem (unreadable file, missing store, bad sidecar)."""


class RetrievalError(SurveyGenError):
    """Retrieval substrate failure: empty context, missing embedding, bad dims."""


class GatewayError(SurveyGenError):
    """LLM gateway failure (transport exhausted, unusable model output)."""


class TransportError(GatewayError):
    """Transient backend failure; the gateway retries these."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class PromptError(GatewayError):
    """Template/bindings mismatch, raised before any network call."""


class MockScriptError(GatewayError):
    """The scripted mock backend has no entry matching a call."""


class StructuredOutputError(GatewayError):
    """Model output stayed unparsable after the allowed repair re-prompts."""

    def __init__(self, message: str, attempts: list[str] | None = None):
        super().__init__(message)
        self.attempts = attempts or []


class OutlineError(GatewayError):
    """Generated outline violates the structural contract."""


class DraftError(GatewayError):
    """Generated prose violates the citation contract."""
