"""Model configuration files.

Instrument model configs are plain ``key = value`` text files with
``[section]`` headers, ``#`` comments and SI units throughout (documented
in docs/config_schema.md). Values parse to int, float, bool, a list of
floats (comma separated) or a bare string.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config file or value."""


def _parse_value(raw: str):
    text = raw.strip()
    if not text:
        raise ConfigError("empty value")
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return [float(part) for part in text.split(",")]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def parse_config(text: str) -> dict:
    """Parse config text into a {section: {key: value}} dict."""
    out: dict[str, dict] = {}
    section: dict | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            section = out.setdefault(name, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in section:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            section[key] = _parse_value(raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return out


def load_config(path: str | Path) -> dict:
    return parse_config(Path(path).read_text())


def config_hash(config: dict) -> str:
    """Content hash of a parsed config (canonical JSON, sorted keys)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(config: dict) -> str:
    """Render a nested config dict back to the key = value text format."""
    lines: list[str] = []
    for section in sorted(config):
        if section:
            lines.append(f"[{section}]")
        for key, value in sorted(config[section].items()):
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (list, tuple)):
                text = ", ".join(repr(float(v)) for v in value)
            else:
                text = repr(value) if not isinstance(value, str) else value
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
