import os
import json
import math
import logging
import tempfile
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

import tiktoken

from config import SRC_LOG_LEVELS

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["CONFIG"])

TokenCounter = Callable[[str], int]


####################
# Tokens
####################


def approximate_tokens(text: str, counter: Optional[TokenCounter] = None) -> int:
    """Approximate token count: ceil(chars / 4), at least 1, unless a tokenizer is plugged in."""
    if counter is not None:
        return max(1, counter(text))
    return max(1, math.ceil(len(text) / 4))


@lru_cache(maxsize=8)
def get_token_counter(encoding: str = "") -> Optional[TokenCounter]:
    # None means the chars / 4 approximation
    if not encoding:
        return None
    try:
        func: tiktoken.Encoding = tiktoken.get_encoding(encoding)
        return lambda text: len(func.encode(text, disallowed_special=()))
    except Exception as e:
        log.exception(e)
        log.warning(f"tokenizer '{encoding}' unavailable, falling back to chars / 4")
    return None


####################
# JSON helpers
####################


def extract_json_value(text: str) -> Any:
    """
    Return the first balanced top-level JSON object or array found in text.
    Raises ValueError when no candidate parses.
    """
    decoder = json.JSONDecoder()
    idx = 0
    while idx < len(text):
        starts = [pos for pos in (text.find("{", idx), text.find("[", idx)) if pos != -1]
        if not starts:
            break
        start = min(starts)
        try:
            value, _ = decoder.raw_decode(text, start)
            return value
        except json.JSONDecodeError:
            idx = start + 1
    raise ValueError("no JSON value found")


def dumps_stable(obj: Any, indent: Optional[int] = 2) -> str:
    return json.dumps(obj, indent=indent, sort_keys=False, ensure_ascii=False, default=str)


def read_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for index, line in enumerate(f):
            line = line.strip()
            if line:
                yield index, json.loads(line)


def write_atomic(path: str | Path, content: str) -> None:
    """Write through a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: str | Path, obj: Any) -> None:
    write_atomic(path, dumps_stable(obj) + "\n")


####################
# Metadata
####################


def flatten_metadata(metadata: dict) -> dict:
    """
    Flatten one level with "." joins. Anything still nested (or a list) is kept
    as its compact JSON string so every value stays scalar.
    """
    flat = {}
    for key, value in (metadata or {}).items():
        if isinstance(value, dict):
            for sub_key, sub_value in value.items():
                flat[f"{key}.{sub_key}"] = _scalar(sub_value)
        else:
            flat[key] = _scalar(value)
    return flat


def _scalar(value: Any) -> Any:
    if value is None or isinstance(value, (str, bool, int, float)):
        return value
    return json.dumps(value, separators=(",", ":"), sort_keys=True)


####################
# Numbers
####################


def round_half_up(value: float, ndigits: int = 0) -> float:
    # rounding on the decimal representation so 77.85 -> 77.9 regardless of binary error
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(str(round(value, ndigits + 6))).quantize(quantum, rounding=ROUND_HALF_UP))


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)
