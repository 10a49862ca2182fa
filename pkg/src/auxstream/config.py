"""Key-value experiment config files and the bundled preset configs.

The file format is one `key = value` per line; `#` starts a comment.  Lists
are comma-separated, booleans are `true`/`false`, schedule windows are
`rank:start:end` triples separated by `;`, and label maps are
`token:class` pairs separated by commas.  Unknown keys are rejected so typos
surface immediately.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .harness import ExperimentConfig
from .streams import ScheduleWindow, StreamSpec

_STREAM_KEYS = {
    "dataset_path": ("path", str),
    "format": ("fmt", str),
    "label_position": ("label_position", str),
    "feature_limit": ("feature_limit", int),
    "corruption": ("corruption", str),
    "p": ("p", float),
    "chunks": ("chunks", int),
    "schedule_preset": ("schedule_preset", str),
    "shuffle": ("shuffle", bool),
    "limit": ("limit", int),
    "standardize": ("standardize", bool),
}

_MODEL_KEYS = {
    "backbone": str,
    "depth": int,
    "width": int,
    "aux_nodes": int,
    "position": int,
    "dropout": float,
    "learning_rate": float,
    "discount": float,
    "smoothing": float,
    "strategy": str,
    "n_classes": int,
    "activation": str,
    "rescale_kept": bool,
    "aux_enabled": bool,
    "random_drop_mode": str,
}

_EXPERIMENT_KEYS = {
    "name": str,
    "n_runs": int,
    "base_seed": int,
    "outputs": str,
    "window_size": int,
    "thin": int,
    "workers": int,
    "declare_aux": bool,
}

_EXPECT_KEYS = {"expect_metric": str, "expect_mean": float, "expect_std": float,
                "expect_sigmas": float}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _convert(raw: str, kind):
    if kind is bool:
        return _parse_bool(raw)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {raw!r}") from None


def _parse_windows(raw: str) -> tuple[ScheduleWindow, ...]:
    windows = []
    for chunk in filter(None, (c.strip() for c in raw.split(";"))):
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ConfigError(f"window {chunk!r} is not rank:start:end")
        windows.append(ScheduleWindow(int(parts[0]), int(parts[1]), int(parts[2])))
    return tuple(windows)


def _parse_base_indices(raw: str):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if len(parts) == 1:
        return int(parts[0])
    return tuple(int(p) for p in parts)


def _parse_label_map(raw: str) -> dict:
    mapping = {}
    for chunk in filter(None, (c.strip() for c in raw.split(","))):
        token, _, cls = chunk.partition(":")
        if not cls:
            raise ConfigError(f"label_map entry {chunk!r} is not token:class")
        mapping[token.strip()] = int(cls)
    return mapping


def parse_config_text(text: str, name: str = "experiment") -> ExperimentConfig:
    stream_fields: dict = {}
    model_fields: dict = {}
    extras: dict = {"name": name}
    expect: dict = {}
    seeds = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in _STREAM_KEYS:
            field_name, kind = _STREAM_KEYS[key]
            stream_fields[field_name] = _convert(raw, kind)
        elif key == "base_indices":
            stream_fields["base_indices"] = _parse_base_indices(raw)
        elif key == "windows":
            stream_fields["windows"] = _parse_windows(raw)
        elif key == "label_map":
            stream_fields["label_map"] = _parse_label_map(raw)
        elif key in _MODEL_KEYS:
            model_fields[key] = _convert(raw, _MODEL_KEYS[key])
        elif key in _EXPERIMENT_KEYS:
            extras[key] = _convert(raw, _EXPERIMENT_KEYS[key])
        elif key == "seeds":
            seeds = tuple(int(p) for p in raw.split(",") if p.strip())
        elif key in _EXPECT_KEYS:
            expect[key.removeprefix("expect_")] = _convert(raw, _EXPECT_KEYS[key])
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    if "path" not in stream_fields:
        raise ConfigError("config is missing dataset_path")
    return ExperimentConfig(stream=StreamSpec(**stream_fields), model=model_fields,
                            seeds=seeds, expect=expect or None, **extras)


def preset_names() -> list[str]:
    root = resources.files("auxstream") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(name_or_path: str) -> ExperimentConfig:
    """Load a config from a filesystem path or a bundled preset name."""
    path = Path(name_or_path)
    if path.exists():
        return parse_config_text(path.read_text(encoding="utf-8"), name=path.stem)
    packaged = resources.files("auxstream") / "configs" / f"{name_or_path}.cfg"
    if packaged.is_file():
        return parse_config_text(packaged.read_text(encoding="utf-8"), name=name_or_path)
    raise ConfigError(
        f"{name_or_path!r} is neither a config file nor a preset; "
        f"available presets: {', '.join(preset_names())}")
