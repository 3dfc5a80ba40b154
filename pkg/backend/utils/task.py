import re
from functools import lru_cache
from pathlib import Path
from typing import Optional

from config import PROMPTS_DIR


@lru_cache(maxsize=64)
def _read_prompt(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def load_prompt(name: str, prompts_dir: Optional[Path] = None) -> str:
    """Load an editable prompt asset, e.g. load_prompt("scout") reads prompts/scout.txt."""
    return _read_prompt(str((prompts_dir or PROMPTS_DIR) / f"{name}.txt"))


def prompt_template(template: str, **variables: object) -> str:
    """Replace {{NAME}} placeholders; unknown placeholders are left untouched."""

    def replacement_function(match: re.Match) -> str:
        key = match.group(1)
        if key in variables:
            return str(variables[key])
        return match.group(0)

    return re.sub(r"{{([A-Z0-9_]+)}}", replacement_function, template)


def render_prompt(name: str, prompts_dir: Optional[Path] = None, **variables: object) -> str:
    return prompt_template(load_prompt(name, prompts_dir), **variables)


def first_line_preview(text: str, max_chars: int = 120) -> str:
    for line in text.splitlines():
        if line.strip():
            return line.strip()[:max_chars]
    return ""
