"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Values are typed by the default they override. A resolved configuration is
written back in the same format, keys sorted, so it can be fed to ``--config``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError

PRETRAIN_DEFAULTS = {
    "seed": 0, "epochs": 1000, "lr": 1e-2, "batch_size": 16, "m_bins": 6, "signed_angles": False,
    "objective": "coarse", "encoder": "default", "checkpoint_every": 50,
    "schedule": "200:0.05,400:0.10,600:0.15,800:0.20",
}

TRAIN_DEFAULTS = {
    "seed": 0, "epochs": 100, "lr": 1e-3, "batch_size": 32, "provider": "skeleton",
    "backbone": "resnet", "match_mode": "attention", "d": 256, "width": 32, "shots": 0, "seeds": 5,
}

PREPARE_DEFAULTS = {"seed": 0, "format": "json"}
EMBED_DEFAULTS = {"seed": 0, "shots": 5}
SYNTH_DEFAULTS = {"seed": 0, "activities": 4, "subjects": 5, "windows": 4, "noise": 0.0, "subject_offset": 0}
IMU_DEFAULTS = {"seed": 0, "noise": 0.05}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from None
    return value


def resolve(defaults: Mapping, *layers: Mapping) -> dict:
    """Apply layers left to right over ``defaults``; unknown keys are an error."""
    out = dict(defaults)
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key not in defaults:
                raise ConfigError(f"unknown setting {key!r}; known: {', '.join(sorted(defaults))}")
            out[key] = _coerce(key, value, defaults[key])
    return out


def load_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_text(p.read_text(encoding="utf-8"), str(p))


def format_config(cfg: Mapping) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``"200:0.05,400:0.10"`` -> ((200, 0.05), (400, 0.10)); empty text means no dropout."""
    steps = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            epoch, frac = part.split(":")
            steps.append((int(epoch), float(frac)))
        except ValueError:
            raise ConfigError(f"bad schedule entry {part!r}; expected epoch:fraction") from None
    return tuple(sorted(steps))
