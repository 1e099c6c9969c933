"""Run configuration files (JSON) with sections ``pipeline``, ``planner``
and ``output``. Unknown keys are errors; absent keys take defaults."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


# config key -> PipelineConfig field
PIPELINE_KEYS = {
    "h": "h",
    "w": "w",
    "d": "d",
    "T": "steps",
    "seed": "seed",
    "stack": "stack",
    "lambda": "lam",
    "mask_warmup_steps": "mask_warmup_steps",
    "d_txt": "d_txt",
    "iso_self": "iso_self",
    "iso_cross": "iso_cross",
    "reweight": "reweight",
}
PLANNER_KEYS = {"mode", "endpoint", "template"}
OUTPUT_KEYS = {"directory", "dump_attn"}
SECTIONS = {"pipeline": PIPELINE_KEYS, "planner": PLANNER_KEYS, "output": OUTPUT_KEYS}

_INT_KEYS = {"h", "w", "d", "T", "seed", "mask_warmup_steps", "d_txt"}
_BOOL_KEYS = {"iso_self", "iso_cross", "reweight", "dump_attn"}


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    planner_mode: str = "script"
    endpoint: str | None = None
    template: str | None = None
    directory: str = "run"

    def to_dict(self) -> dict:
        p = self.pipeline
        return {
            "pipeline": {key: (list(getattr(p, attr)) if key == "stack" else getattr(p, attr))
                         for key, attr in PIPELINE_KEYS.items()},
            "planner": {"mode": self.planner_mode, "endpoint": self.endpoint, "template": self.template},
            "output": {"directory": self.directory, "dump_attn": p.dump_attn},
        }


def _check_type(section: str, key: str, value):
    where = f"{section}.{key}"
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
    elif key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
    elif key == "lambda":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where} must be a finite number")
    elif key == "stack":
        if not isinstance(value, list) or not value or not all(isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a non-empty list of booleans (true = extended)")
    elif key == "mode":
        if value not in ("script", "llm"):
            raise ConfigError(f"{where} must be 'script' or 'llm'")
    elif value is not None and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")


def parse_config(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in body.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            _check_type(section, key, value)

    pipe = doc.get("pipeline", {})
    out = doc.get("output", {})
    kwargs = {PIPELINE_KEYS[k]: (tuple(v) if k == "stack" else v) for k, v in pipe.items()}
    if "lam" in kwargs:
        kwargs["lam"] = float(kwargs["lam"])
    kwargs["dump_attn"] = out.get("dump_attn", False)
    try:
        pipeline = PipelineConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid pipeline config: {exc}") from None
    planner = doc.get("planner", {})
    return RunConfig(
        pipeline=pipeline,
        planner_mode=planner.get("mode", "script"),
        endpoint=planner.get("endpoint"),
        template=planner.get("template"),
        directory=out.get("directory", "run"),
    )


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)
