"""Plain-text key-value configuration files.

Lines look like ``engine.forward.kind = http``; blank lines and ``#`` comments
are ignored. Keys are flat dotted paths documented in the README.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def load_config(path) -> dict[str, str]:
    cfg: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def get_float(cfg: dict[str, str], key: str, default: float) -> float:
    return float(cfg[key]) if key in cfg else default


def get_int(cfg: dict[str, str], key: str, default: int) -> int:
    return int(cfg[key]) if key in cfg else default
