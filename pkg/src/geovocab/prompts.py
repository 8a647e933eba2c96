"""Prompt template loading and rendering.

Templates are plain UTF-8 files with ``{{name}}`` placeholders, shipped as
package data under ``prompts/distill/`` and ``prompts/reason/``.  A config
may point at an override directory containing files with the same names.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


def load_template(stream: str, name: str, override_dir: str | Path | None = None) -> str:
    """Load a template by stream (``distill`` or ``reason``) and stage name."""
    if override_dir is not None:
        path = Path(override_dir) / f"{name}.txt"
        return path.read_text(encoding="utf-8")
    resource = resources.files("geovocab").joinpath(f"prompts/{stream}/{name}.txt")
    return resource.read_text(encoding="utf-8")


def render_template(template: str, values: dict[str, str]) -> str:
    """Substitute ``{{name}}`` placeholders; unknown placeholders are an error."""
    missing: list[str] = []

    def _sub(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in values:
            missing.append(key)
            return match.group(0)
        return values[key]

    rendered = _PLACEHOLDER.sub(_sub, template)
    if missing:
        raise KeyError(f"template placeholders without values: {sorted(set(missing))}")
    return rendered
