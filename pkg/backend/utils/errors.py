from typing import Any, Optional


class InsightsError(Exception):
    """
    Base error carrying a machine-readable kind and a human-readable detail,
    shaped like an HTTP error (kind in place of status code).
    """

    kind = "error"

    def __init__(self, detail: Any = "", kind: Optional[str] = None):
        self.detail = str(detail.value if hasattr(detail, "value") else detail)
        if kind:
            self.kind = kind
        super().__init__(self.detail)

    def to_dict(self) -> dict:
        return {"error": self.kind, "detail": self.detail}


class ConfigError(InsightsError):
    kind = "config_error"


class IngestionError(InsightsError):
    kind = "ingestion_error"


class NotFoundError(InsightsError):
    kind = "not_found"


class StoreError(InsightsError):
    kind = "store_error"


class IndexBuildError(InsightsError):
    kind = "index_error"


class SearchError(InsightsError):
    kind = "search_error"


class StatisticsError(InsightsError):
    kind = "statistics_error"


class LLMError(InsightsError):
    kind = "llm_error"


class LLMTimeoutError(LLMError):
    kind = "timeout"


class LLMBackendError(LLMError):
    kind = "backend_error"


class LLMParseError(LLMError):
    kind = "parse_error"


class ToolError(InsightsError):
    kind = "tool_error"


class ToolForbiddenError(ToolError):
    kind = "tool_forbidden"


class AnalysisError(InsightsError):
    kind = "analysis_error"


class EvalError(InsightsError):
    kind = "eval_error"


class LoopError(InsightsError):
    kind = "loop_error"


class AnalysisAbortedError(AnalysisError):
    """Unrecoverable gateway failure mid-run; `partial` holds the findings gathered so far."""

    kind = "analysis_aborted"

    def __init__(self, detail: Any = "", partial: Optional[dict] = None):
        super().__init__(detail)
        self.partial = partial or {}
