"""Application configuration: JSON file, then command-line overrides.

Only the API token comes from the environment (``AGENTRAG_API_KEY``).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from urllib.parse import urlparse

from .grpo import GrpoParams
from .rollout import RolloutConfig

API_KEY_ENV = "AGENTRAG_API_KEY"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    """How to build a policy or generator.

    kind ``scripted``: *path* is a script (policy) or answers file (generator).
    kind ``extractive`` (generator only): *path* maps question -> candidate answers.
    kind ``remote``: *endpoint* is an OpenAI-compatible base URL, *model* its model name.
    """

    kind: str = "scripted"
    path: str | None = None
    endpoint: str | None = None
    model: str | None = None


@dataclass(frozen=True)
class AppConfig:
    corpus_path: str | None = None
    index_path: str | None = None
    retriever_url: str | None = None  # None means the embedded BM25 index
    policy: BackendConfig = field(default_factory=BackendConfig)
    generator: BackendConfig | None = None
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    grpo: GrpoParams = field(default_factory=GrpoParams)

    @property
    def api_key(self) -> str | None:
        return os.environ.get(API_KEY_ENV)


def _is_url(s: str) -> bool:
    u = urlparse(s)
    return u.scheme in ("http", "https") and bool(u.netloc)


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    return str(p if Path(p).is_absolute() else base / p)


def _backend(raw: dict | None, base: Path, where: str) -> BackendConfig | None:
    if raw is None:
        return None
    known = {f.name for f in fields(BackendConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    b = BackendConfig(**raw)
    return replace(b, path=_resolve(base, b.path))


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    try:
        return AppConfig(
            corpus_path=_resolve(base, raw.get("corpus_path")),
            index_path=_resolve(base, raw.get("index_path")),
            retriever_url=raw.get("retriever_url"),
            policy=_backend(raw.get("policy"), base, "policy") or BackendConfig(),
            generator=_backend(raw.get("generator"), base, "generator"),
            rollout=RolloutConfig(**raw.get("rollout", {})),
            grpo=GrpoParams(**raw.get("grpo", {})),
        )
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def validate(config: AppConfig) -> None:
    """Check URLs are well formed and backend kinds are known."""
    if config.retriever_url is not None and not _is_url(config.retriever_url):
        raise ConfigError(f"retriever_url is not a valid URL: {config.retriever_url}")
    for name, b, kinds in (
        ("policy", config.policy, ("scripted", "remote")),
        ("generator", config.generator, ("scripted", "extractive", "remote")),
    ):
        if b is None:
            continue
        if b.kind not in kinds:
            raise ConfigError(f"{name}.kind must be one of {kinds}, got {b.kind!r}")
        if b.kind == "remote":
            if not b.endpoint or not _is_url(b.endpoint):
                raise ConfigError(f"{name}.endpoint is not a valid URL: {b.endpoint}")
            if not b.model:
                raise ConfigError(f"{name}.model is required for a remote backend")
