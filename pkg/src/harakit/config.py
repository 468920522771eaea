"""Key-value configuration files.

One UTF-8 `key = value` document configures a run; the effective
configuration is copied into the run directory for provenance. Environment
variables override only the credential, never the analysis settings.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

from .model import GoalStrategy
from .pipeline import ALL_STRATEGIES, PipelineConfig

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in _BOOL_TRUE:
        return True
    if lowered in _BOOL_FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_strategies(value: str) -> tuple[GoalStrategy, ...]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    try:
        chosen = tuple(GoalStrategy(name) for name in names)
    except ValueError as exc:
        raise ConfigError(f"strategies_enabled: {exc}") from exc
    # Keep canonical order regardless of how the file lists them.
    return tuple(s for s in ALL_STRATEGIES if s in chosen)


def build_pipeline_config(values: Mapping[str, str]) -> PipelineConfig:
    """PipelineConfig from parsed key-value settings; unknown keys rejected."""
    known = {
        "backend",
        "fixtures",
        "base_url",
        "model",
        "credential_env",
        "guide_word_extensions",
        "scenarios_target_count",
        "diverse_selection_count",
        "strategies_enabled",
        "parallelism",
        "jaccard_threshold",
        "retries",
        "timeout",
        "template_dir",
        "key_terms",
        "key_term_overrides",
        "deep_check",
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    kwargs: dict = {}
    try:
        if "backend" in values:
            kwargs["backend"] = values["backend"]
        if values.get("fixtures"):
            kwargs["fixtures"] = Path(values["fixtures"])
        if "base_url" in values:
            kwargs["base_url"] = values["base_url"]
        if "model" in values:
            kwargs["model"] = values["model"]
        if "credential_env" in values:
            kwargs["credential_env"] = values["credential_env"]
        if "guide_word_extensions" in values:
            kwargs["guide_word_extensions"] = _parse_bool(
                values["guide_word_extensions"], "guide_word_extensions"
            )
        if "scenarios_target_count" in values:
            kwargs["scenarios_target_count"] = int(values["scenarios_target_count"])
        if "diverse_selection_count" in values:
            kwargs["diverse_selection_count"] = int(values["diverse_selection_count"])
        if "strategies_enabled" in values:
            kwargs["strategies_enabled"] = _parse_strategies(values["strategies_enabled"])
        if "parallelism" in values:
            kwargs["parallelism"] = int(values["parallelism"])
        if "jaccard_threshold" in values:
            kwargs["jaccard_threshold"] = values["jaccard_threshold"]
        if "retries" in values:
            kwargs["retries"] = int(values["retries"])
        if "timeout" in values:
            kwargs["timeout"] = float(values["timeout"])
        if values.get("template_dir"):
            kwargs["template_dir"] = Path(values["template_dir"])
        if values.get("key_terms"):
            overrides = json.loads(Path(values["key_terms"]).read_text(encoding="utf-8"))
            if not isinstance(overrides, dict):
                raise ConfigError("key_terms file must hold a JSON object")
            kwargs["key_term_overrides"] = {str(k): str(v) for k, v in overrides.items()}
        if values.get("key_term_overrides"):
            inline = json.loads(values["key_term_overrides"])
            if not isinstance(inline, dict):
                raise ConfigError("key_term_overrides must be a JSON object")
            kwargs["key_term_overrides"] = {str(k): str(v) for k, v in inline.items()}
        if "deep_check" in values:
            kwargs["deep_check"] = _parse_bool(values["deep_check"], "deep_check")
        return PipelineConfig(**kwargs)
    except (ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_pipeline_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return build_pipeline_config(parse_config_text(Path(path).read_text(encoding="utf-8")))


def serialize_config(cfg: PipelineConfig) -> str:
    """The provenance copy written into every run directory."""
    lines = [
        f"backend = {cfg.backend}",
        f"fixtures = {cfg.fixtures or ''}",
        f"base_url = {cfg.base_url}",
        f"model = {cfg.model}",
        f"credential_env = {cfg.credential_env}",
        f"guide_word_extensions = {str(cfg.guide_word_extensions).lower()}",
        f"scenarios_target_count = {cfg.scenarios_target_count}",
        f"diverse_selection_count = {cfg.diverse_selection_count}",
        "strategies_enabled = " + ",".join(s.value for s in cfg.strategies_enabled),
        f"parallelism = {cfg.parallelism}",
        f"jaccard_threshold = {float(cfg.jaccard_threshold)}",
        f"retries = {cfg.retries}",
        f"timeout = {cfg.timeout}",
        f"template_dir = {cfg.template_dir or ''}",
        f"deep_check = {str(cfg.deep_check).lower()}",
    ]
    if cfg.key_term_overrides:
        lines.append(
            "key_term_overrides = "
            + json.dumps(dict(sorted(cfg.key_term_overrides.items())), ensure_ascii=False)
        )
    return "\n".join(lines) + "\n"
