import os
import sys
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from constants import ERROR_MESSAGES
from utils.errors import ConfigError

####################################
# Load .env file
####################################

BACKEND_DIR = Path(__file__).parent  # the path containing this file
BASE_DIR = BACKEND_DIR.parent  # the path containing the backend/

try:
    from dotenv import load_dotenv, find_dotenv

    load_dotenv(find_dotenv(str(BASE_DIR / ".env")))
except ImportError:
    print("dotenv not installed, skipping...", file=sys.stderr)


####################################
# LOGGING
####################################

log_levels = ["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"]

# stdout carries command output (report paths, stats JSON), so logs go to stderr
GLOBAL_LOG_LEVEL = os.environ.get("GLOBAL_LOG_LEVEL", "").upper()
if GLOBAL_LOG_LEVEL in log_levels:
    logging.basicConfig(stream=sys.stderr, level=GLOBAL_LOG_LEVEL, force=True)
else:
    GLOBAL_LOG_LEVEL = "WARNING"

log = logging.getLogger(__name__)
log.info(f"GLOBAL_LOG_LEVEL: {GLOBAL_LOG_LEVEL}")

log_sources = [
    "AGENTS",
    "CLI",
    "CONFIG",
    "EVAL",
    "LLM",
    "LOOP",
    "SEARCH",
    "STATS",
    "STORE",
    "TOOLS",
]

SRC_LOG_LEVELS = {}

for source in log_sources:
    log_env_var = source + "_LOG_LEVEL"
    SRC_LOG_LEVELS[source] = os.environ.get(log_env_var, "").upper()
    if SRC_LOG_LEVELS[source] not in log_levels:
        SRC_LOG_LEVELS[source] = GLOBAL_LOG_LEVEL
    log.info(f"{log_env_var}: {SRC_LOG_LEVELS[source]}")

log.setLevel(SRC_LOG_LEVELS["CONFIG"])


####################################
# DATA / PROMPTS
####################################

DATA_DIR = Path(os.getenv("TI_DATA_DIR", BACKEND_DIR / "data")).resolve()
PROMPTS_DIR = Path(os.getenv("TI_PROMPTS_DIR", DATA_DIR / "prompts")).resolve()


####################################
# ANALYSIS DEFAULTS
####################################

CHUNK_THRESHOLD_TOKENS = int(os.environ.get("TI_CHUNK_THRESHOLD_TOKENS", "50000"))
SEARCH_TOP_K = int(os.environ.get("TI_SEARCH_TOP_K", "20"))
EXTRACTION_CONCURRENCY = int(os.environ.get("TI_EXTRACTION_CONCURRENCY", "50"))
ROLE_CONCURRENCY = int(os.environ.get("TI_ROLE_CONCURRENCY", "50"))
CALL_TIMEOUT = float(os.environ.get("TI_CALL_TIMEOUT", "300"))
MAX_ORCHESTRATOR_TURNS = int(os.environ.get("TI_MAX_ORCHESTRATOR_TURNS", "500"))
MAX_SUBAGENT_TURNS = int(os.environ.get("TI_MAX_SUBAGENT_TURNS", "500"))
CHECKPOINT_INTERVAL = int(os.environ.get("TI_CHECKPOINT_INTERVAL", "5000"))
AUTOSAVE_THRESHOLD = int(os.environ.get("TI_AUTOSAVE_THRESHOLD", "250"))
NOTABLE_CORRELATION = float(os.environ.get("TI_NOTABLE_CORRELATION", "0.3"))
CONTEXT_INJECTION_TOKENS = int(os.environ.get("TI_CONTEXT_INJECTION_TOKENS", "20000"))
COMPARE_TOKEN_BUDGET = int(os.environ.get("TI_COMPARE_TOKEN_BUDGET", "60000"))
TOP_VALUE_COUNTS = 20

SCOUT_BATCH = int(os.environ.get("TI_SCOUT_BATCH", "3"))
INVESTIGATOR_BATCH = int(os.environ.get("TI_INVESTIGATOR_BATCH", "5"))
SCOUT_SAMPLE_SIZE = int(os.environ.get("TI_SCOUT_SAMPLE_SIZE", "100"))
SCOUT_SAMPLE_MIN = 50
SCOUT_SAMPLE_MAX = 200
MIN_CONFIRMED_EVIDENCE = 8

EMBEDDING_DIM = int(os.environ.get("TI_EMBEDDING_DIM", "256"))
EMBEDDING_MODEL = os.environ.get("TI_EMBEDDING_MODEL", "")
BM25_K1 = float(os.environ.get("TI_BM25_K1", "1.2"))
BM25_B = float(os.environ.get("TI_BM25_B", "0.75"))
RRF_K = int(os.environ.get("TI_RRF_K", "60"))

# "" keeps the ceil(chars / 4) approximation; a tiktoken encoding name swaps in a real tokenizer
TOKENIZER = os.environ.get("TI_TOKENIZER", "")

SEED = int(os.environ.get("TI_SEED", "0"))


####################################
# LLM BACKEND
####################################

# IG_LLM_* are the documented names; TI_LLM_* are accepted as aliases
LLM_ENV_ALIASES = {
    "llm_base_url": ("IG_LLM_BASE_URL", "TI_LLM_BASE_URL"),
    "llm_api_key": ("IG_LLM_API_KEY", "TI_LLM_API_KEY"),
}


def _first_env(names: tuple[str, ...], default: Optional[str]) -> Optional[str]:
    return next((os.environ[name] for name in names if name in os.environ), default)


LLM_BASE_URL = _first_env(LLM_ENV_ALIASES["llm_base_url"], "https://api.openai.com/v1")
LLM_API_KEY = _first_env(LLM_ENV_ALIASES["llm_api_key"], "")
LLM_RETRY_ATTEMPTS = int(os.environ.get("TI_LLM_RETRY_ATTEMPTS", "3"))
LLM_RETRY_WAIT = float(os.environ.get("TI_LLM_RETRY_WAIT", "1"))
LLM_MAX_OUTPUT_TOKENS = int(os.environ.get("TI_LLM_MAX_OUTPUT_TOKENS", "8192"))

MODEL_LARGE = os.environ.get("TI_MODEL_LARGE", "analysis-large")
MODEL_SMALL = os.environ.get("TI_MODEL_SMALL", "analysis-small")

ROLES = (
    "orchestrator",
    "scout",
    "investigator",
    "cohort_compare",
    "extraction",
    "summarization",
    "judge",
    "patcher",
    "subagent",
)
SMALL_MODEL_ROLES = ("extraction", "summarization")

DEFAULT_PRICES = {
    MODEL_LARGE: {"input_per_million": 15.0, "output_per_million": 75.0},
    MODEL_SMALL: {"input_per_million": 1.0, "output_per_million": 5.0},
}


####################################
# RUN CONFIG
####################################

AnalysisMode = Literal["full", "orchestrator_only", "generic_subagents"]


class ModelPrice(BaseModel):
    input_per_million: float = Field(ge=0)
    output_per_million: float = Field(ge=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    store_dir: Optional[str] = None
    mock_script: Optional[str] = None
    llm_base_url: str = LLM_BASE_URL
    llm_api_key: str = LLM_API_KEY
    llm_retry_attempts: int = Field(default=LLM_RETRY_ATTEMPTS, ge=1)
    llm_retry_wait: float = Field(default=LLM_RETRY_WAIT, ge=0)

    model_large: str = MODEL_LARGE
    model_small: str = MODEL_SMALL
    role_models: dict[str, str] = {}
    max_output_tokens: int = Field(default=LLM_MAX_OUTPUT_TOKENS, ge=1)
    temperature: float = Field(default=0.0, ge=0)
    prices: dict[str, ModelPrice] = {
        name: ModelPrice(**price) for name, price in DEFAULT_PRICES.items()
    }

    seed: int = SEED
    mode: AnalysisMode = "full"
    max_orchestrator_turns: int = Field(default=MAX_ORCHESTRATOR_TURNS, ge=1)
    max_subagent_turns: int = Field(default=MAX_SUBAGENT_TURNS, ge=1)
    scout_batch: int = Field(default=SCOUT_BATCH, ge=1)
    investigator_batch: int = Field(default=INVESTIGATOR_BATCH, ge=1)
    scout_sample_size: int = SCOUT_SAMPLE_SIZE

    notable_correlation: float = Field(default=NOTABLE_CORRELATION, ge=0, le=1)
    chunk_threshold_tokens: int = Field(default=CHUNK_THRESHOLD_TOKENS, ge=1)
    search_top_k: int = Field(default=SEARCH_TOP_K, ge=1)
    extraction_concurrency: int = Field(default=EXTRACTION_CONCURRENCY, ge=1)
    role_concurrency: int = Field(default=ROLE_CONCURRENCY, ge=1)
    call_timeout: float = Field(default=CALL_TIMEOUT, gt=0)
    checkpoint_interval: int = Field(default=CHECKPOINT_INTERVAL, ge=1)
    autosave_threshold: int = Field(default=AUTOSAVE_THRESHOLD, ge=1)
    context_injection_tokens: int = Field(default=CONTEXT_INJECTION_TOKENS, ge=1)
    compare_token_budget: int = Field(default=COMPARE_TOKEN_BUDGET, ge=2)

    embedding_dim: int = Field(default=EMBEDDING_DIM, ge=1)
    embedding_model: str = EMBEDDING_MODEL
    bm25_k1: float = BM25_K1
    bm25_b: float = BM25_B
    rrf_k: int = Field(default=RRF_K, ge=1)
    tokenizer: str = TOKENIZER

    @model_validator(mode="after")
    def check_routes(self) -> "RunConfig":
        unknown = sorted(set(self.role_models) - set(ROLES))
        if unknown:
            raise ValueError(ERROR_MESSAGES.UNKNOWN_ROLES(unknown))
        return self

    def model_for(self, role: str) -> str:
        if role in self.role_models:
            return self.role_models[role]
        return self.model_small if role in SMALL_MODEL_ROLES else self.model_large

    @property
    def sample_size(self) -> int:
        return min(max(self.scout_sample_size, SCOUT_SAMPLE_MIN), SCOUT_SAMPLE_MAX)


def _env_overrides() -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for name, field in RunConfig.model_fields.items():
        if name in LLM_ENV_ALIASES:
            value = _first_env(LLM_ENV_ALIASES[name], None)
        else:
            value = os.environ.get(f"TI_{name.upper()}")
        if value is None:
            continue
        if field.annotation in (int, float, str) or name in ("store_dir", "mock_script", "mode"):
            overrides[name] = value
        else:
            try:
                overrides[name] = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(ERROR_MESSAGES.INVALID_ENV_JSON(f"TI_{name.upper()}"))
    return overrides


def load_run_config(
    config_file: Optional[str | Path] = None, **flags: Any
) -> RunConfig:
    """
    Build the effective run configuration.
    Precedence: built-in defaults < flat JSON config file < environment variables < flags.
    Flags passed as None are treated as unset.
    """
    values: dict[str, Any] = {}
    if config_file:
        path = Path(config_file)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(ERROR_MESSAGES.FILE_NOT_FOUND(str(path)))
        except json.JSONDecodeError as e:
            raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), str(e)))
        if not isinstance(data, dict):
            raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), "expected an object"))
        values.update(data)

    values.update(_env_overrides())
    values.update({key: value for key, value in flags.items() if value is not None})

    try:
        config = RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_CONFIG(str(e)))

    log.debug(f"run config: {config.model_dump(exclude={'llm_api_key'})}")
    return config
