"""Run configuration: a line-based ``key = value`` file.

Blank lines and ``#`` comments are ignored. Keys are the fields of
:class:`ModelConfig` plus the run settings in :class:`RunConfig`; any other
key is an error so typos do not pass silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from gvdiff.diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS
from gvdiff.errors import GVDiffError
from gvdiff.pipeline import DEFAULT_CHUNK
from gvdiff.unet import ModelConfig


@dataclass
class RunConfig:
    steps: int = DEFAULT_STEPS
    scale: float = DEFAULT_GUIDANCE
    seed: int = 0
    window: int = 8
    chunk: int = DEFAULT_CHUNK
    total_frames: int = 16
    stage: str = "base"
    lr: float = 0.05
    train_steps: int = 200
    batch_size: int = 4
    cond_drop: float = 0.1
    usage_penalty: float = 0.0
    train_videos: int = 4
    train_frames: int = 8
    checkpoint: str = ""
    all_pairs: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        return kind(raw)
    except ValueError:
        raise GVDiffError("config-value", f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _kinds(obj):
    return {f.name: type(getattr(obj, f.name)) for f in fields(obj)}


def set_value(cfg: RunConfig, key, raw):
    """Set one key from its string form; model keys go to ``cfg.model``."""
    key = key.strip().replace("-", "_")
    run_kinds = _kinds(cfg)
    run_kinds.pop("model")
    if key in run_kinds:
        setattr(cfg, key, _convert(key, raw, run_kinds[key]))
        return
    model_kinds = _kinds(cfg.model)
    if key in model_kinds:
        setattr(cfg.model, key, _convert(key, raw, model_kinds[key]))
        return
    raise GVDiffError("config-key", f"unknown config key {key!r}")


def parse_config(text, base: RunConfig | None = None):
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GVDiffError("config-syntax", f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw.strip())
    # re-run the model's own checks after field assignment
    cfg.model = ModelConfig(**{f.name: getattr(cfg.model, f.name) for f in fields(cfg.model)})
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise GVDiffError("missing-file", str(path)) from None
    return parse_config(text)


def format_config(cfg: RunConfig):
    lines = []
    for obj in (cfg, cfg.model):
        for f in fields(obj):
            if f.name != "model":
                lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
