"""Layered configuration: defaults, YAML file, environment, CLI flags.

Each layer overrides the previous one field by field. Environment
variables follow CLAIMCHECK_{SECTION}_{FIELD}, for example
CLAIMCHECK_RETRIEVAL_OMEGA=2000. Only recognized section/field pairs
are read from the environment; unknown names in a config file or a
--set override are errors.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import yaml

from .dense import EmbeddingProviderConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .retriever import RetrievalConfig
from .scoring import ScoringConfig

DEFAULTS: dict[str, dict] = {
    "retrieval": {
        "max_chars": 2048,
        "omega": 6000,
        "pool_size": 40,
        "k": 10,
        "lambda": 0.75,
    },
    "embedding": {
        "kind": "mock",
        "base_url": None,
        "model_name": None,
        "batch_size": 64,
        "timeout_s": 30.0,
        "retries": 3,
        "api_key_env": "CLAIMCHECK_API_KEY",
    },
    "generator": {
        "l": 10,
        "fewshot_count": 10,
        "max_retries": 3,
        "kind": "mock",
        "model_name": "",
        "base_url": "",
        "temperature": None,
        "script_path": None,
        "api_key_env": "CLAIMCHECK_API_KEY",
        "simplified": False,
        "timeout_s": 120.0,
        "transport_retries": 3,
    },
    "ensemble": {
        "weight_external": 0.5,
        "probs_path": None,
    },
    "scoring": {
        "thresholds": [0.25],
        "mode": "QA",
    },
    "paths": {
        "dataset": None,
        "knowledge_store": None,
        "train_set": None,
        "cache_dir": None,
        "output_dir": "out",
    },
}

# Fields whose default is None still need a declared type for coercion.
_NONE_FIELD_TYPES = {
    ("embedding", "base_url"): str,
    ("embedding", "model_name"): str,
    ("generator", "temperature"): float,
    ("generator", "script_path"): str,
    ("ensemble", "probs_path"): str,
    ("paths", "dataset"): str,
    ("paths", "knowledge_store"): str,
    ("paths", "train_set"): str,
    ("paths", "cache_dir"): str,
    ("paths", "output_dir"): str,
}

_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class EnsembleSection:
    weight_external: float = 0.5
    probs_path: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.weight_external <= 1.0:
            raise ConfigError("weight_external must be in [0, 1]")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str | None = None
    knowledge_store: str | None = None
    train_set: str | None = None
    cache_dir: str | None = None
    output_dir: str = "out"


@dataclass(frozen=True)
class AppConfig:
    retrieval: RetrievalConfig
    generator: GeneratorConfig
    embedding: EmbeddingProviderConfig
    ensemble: EnsembleSection
    scoring: ScoringConfig
    paths: PathsConfig

    def require_paths(self, *names: str) -> None:
        """Fail fast when a command's input paths are unset or missing."""
        problems = []
        for name in names:
            value = getattr(self.paths, name)
            if not value:
                problems.append(f"paths.{name} is not configured")
            elif not os.path.exists(value):
                problems.append(f"paths.{name} does not exist: {value}")
        if problems:
            raise ConfigError("; ".join(problems))


def _field_type(section: str, field_name: str, default) -> type | str:
    if field_name == "thresholds":
        return "float_list"
    if default is None:
        return _NONE_FIELD_TYPES[(section, field_name)]
    if isinstance(default, bool):
        return bool
    return type(default)


def _coerce_string(section: str, field_name: str, raw: str):
    kind = _field_type(section, field_name, DEFAULTS[section][field_name])
    try:
        if kind == "float_list":
            return [float(part) for part in raw.split(",") if part.strip()]
        if kind is bool:
            word = raw.strip().lower()
            if word in _TRUE_WORDS:
                return True
            if word in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{field_name}: {exc}") from exc


def _check_known(section: str, field_name: str | None = None) -> None:
    if section not in DEFAULTS:
        raise ConfigError(
            f"unknown config section {section!r}; known: {sorted(DEFAULTS)}"
        )
    if field_name is not None and field_name not in DEFAULTS[section]:
        raise ConfigError(
            f"unknown field {section}.{field_name}; known: {sorted(DEFAULTS[section])}"
        )


def _merge_file(merged: dict, path: str) -> None:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: bad YAML: {exc}") from exc
    if data is None:
        return
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, fields in data.items():
        _check_known(section)
        if not isinstance(fields, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        for field_name, value in fields.items():
            _check_known(section, field_name)
            if isinstance(value, str):
                value = _coerce_string(section, field_name, value)
            merged[section][field_name] = value


def _merge_env(merged: dict, env) -> None:
    for section, fields in DEFAULTS.items():
        for field_name in fields:
            key = f"CLAIMCHECK_{section.upper()}_{field_name.upper()}"
            if key in env:
                merged[section][field_name] = _coerce_string(
                    section, field_name, env[key]
                )


def _merge_overrides(merged: dict, overrides: dict[str, str]) -> None:
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override key must be section.field, got {dotted!r}")
        section, field_name = dotted.split(".", 1)
        _check_known(section, field_name)
        merged[section][field_name] = _coerce_string(section, field_name, raw)


def load_app_config(
    config_path: str | None = None,
    env=None,
    overrides: dict[str, str] | None = None,
) -> AppConfig:
    """Resolve the app config: flags > environment > file > defaults."""
    merged = copy.deepcopy(DEFAULTS)
    if config_path:
        if not os.path.isfile(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        _merge_file(merged, config_path)
    _merge_env(merged, os.environ if env is None else env)
    if overrides:
        _merge_overrides(merged, overrides)

    r = merged["retrieval"]
    g = merged["generator"]
    e = merged["embedding"]
    retrieval = RetrievalConfig(
        max_chars=int(r["max_chars"]),
        omega=int(r["omega"]),
        pool_size=int(r["pool_size"]),
        k=int(r["k"]),
        lambda_=float(r["lambda"]),
    )
    generator = GeneratorConfig(
        l=int(g["l"]),
        fewshot_count=int(g["fewshot_count"]),
        max_retries=int(g["max_retries"]),
        kind=str(g["kind"]),
        model_name=str(g["model_name"]),
        base_url=str(g["base_url"]),
        temperature=None if g["temperature"] is None else float(g["temperature"]),
        script_path=g["script_path"],
        api_key_env=str(g["api_key_env"]),
        simplified=bool(g["simplified"]),
        timeout_s=float(g["timeout_s"]),
        transport_retries=int(g["transport_retries"]),
    )
    embedding = EmbeddingProviderConfig(
        kind=str(e["kind"]),
        base_url=e["base_url"],
        model_name=e["model_name"],
        batch_size=int(e["batch_size"]),
        timeout_s=float(e["timeout_s"]),
        retries=int(e["retries"]),
        api_key_env=str(e["api_key_env"]),
    )
    ensemble = EnsembleSection(
        weight_external=float(merged["ensemble"]["weight_external"]),
        probs_path=merged["ensemble"]["probs_path"],
    )
    scoring = ScoringConfig(
        thresholds=tuple(float(t) for t in merged["scoring"]["thresholds"]),
        mode=str(merged["scoring"]["mode"]),
    )
    paths = PathsConfig(
        dataset=merged["paths"]["dataset"],
        knowledge_store=merged["paths"]["knowledge_store"],
        train_set=merged["paths"]["train_set"],
        cache_dir=merged["paths"]["cache_dir"],
        output_dir=merged["paths"]["output_dir"],
    )
    return AppConfig(
        retrieval=retrieval,
        generator=generator,
        embedding=embedding,
        ensemble=ensemble,
        scoring=scoring,
        paths=paths,
    )
