"""JSON run configuration and backend construction for the CLI."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backends import (
    DEFAULT_DECODING,
    ChatBackend,
    DecodingParams,
    OracleBackend,
    RemoteChatBackend,
    RemoteEmbedder,
    ReplayBackend,
)
from .embedding import HASH_DIM, CachedEmbedder, HashEmbedder
from .errors import ConfigError
from .instructions import Task
from .pipelines import PipelineConfig
from .taxonomy import load_taxonomy

DEFAULT_SEED = 20240601


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EmbeddingSettings(_Strict):
    backend: Literal["hash", "remote"] = "hash"
    model: Optional[str] = None
    dim: int = Field(HASH_DIM, ge=1)
    base_url: Optional[str] = None


class DecodingSettings(_Strict):
    temperature: float = Field(0.0, ge=0)
    max_tokens: int = Field(256, ge=1)
    seed: Optional[int] = None


class PipelineSettings(_Strict):
    k_candidates: int = Field(20, ge=1)
    target_entities: int = Field(400, ge=1)
    max_shuffles: int = Field(50, ge=1)
    r_shuffles: int = Field(10, ge=1)
    candidate_scope: Literal["layer", "taxonomy"] = "layer"
    parse_retries: int = Field(1, ge=0)
    workers: int = Field(1, ge=1)


class SweepSettings(_Strict):
    seed_sets: list[list[str]] = Field(default_factory=list)
    gold: Optional[str] = None
    k: int = Field(10, ge=1)


class RunConfig(_Strict):
    backend: Literal["remote", "oracle", "replay"] = "oracle"
    # remote
    model: Optional[str] = None
    base_url: Optional[str] = None
    max_retries: int = Field(3, ge=0)
    timeout: float = Field(60.0, gt=0)
    max_in_flight: int = Field(4, ge=1)
    # oracle
    gold: Optional[str] = None
    parent_error_rate: float = Field(0.0, ge=0, lt=1)
    sibling_noise_rate: float = Field(0.0, ge=0, lt=1)
    max_entities_per_response: Optional[int] = Field(None, ge=1)
    # replay
    replay: Optional[str] = None
    record: Optional[str] = None

    embedding: EmbeddingSettings = Field(default_factory=EmbeddingSettings)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    decoding: dict[Literal["ParentGen", "SetExpand", "TaxoExpand"], DecodingSettings] = Field(default_factory=dict)
    rng_seed: int = DEFAULT_SEED
    root_label: Optional[str] = None
    sweep: Optional[SweepSettings] = None

    base_dir: Path = Field(default=Path("."), exclude=True)

    @model_validator(mode="after")
    def _backend_inputs(self) -> RunConfig:
        if self.backend == "oracle" and not self.gold:
            raise ValueError('backend "oracle" needs "gold": <taxonomy path>')
        if self.backend == "replay" and not self.replay:
            raise ValueError('backend "replay" needs "replay": <jsonl path>')
        if self.backend == "remote" and not self.model:
            raise ValueError('backend "remote" needs "model"')
        if self.embedding.backend == "remote" and not self.embedding.model:
            raise ValueError('remote embedding needs "embedding.model"')
        return self

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def pipeline_config(self) -> PipelineConfig:
        decoding = dict(DEFAULT_DECODING)
        for task, d in self.decoding.items():
            decoding[Task(task)] = DecodingParams(d.temperature, d.max_tokens, d.seed)
        p = self.pipeline
        return PipelineConfig(
            k_candidates=p.k_candidates,
            target_entities=p.target_entities,
            max_shuffles=p.max_shuffles,
            r_shuffles=p.r_shuffles,
            decoding=decoding,
            rng_seed=self.rng_seed,
            parse_retries=p.parse_retries,
            candidate_scope=p.candidate_scope,
            workers=p.workers,
        )


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON config; ``None`` gives the defaults (which require no backend inputs)."""
    if path is None:
        return _defaults()
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(x) for x in first["loc"]) or "config"
        raise ConfigError(f"{path}: {where}: {first['msg']}") from None
    cfg.base_dir = path.parent
    return cfg


def _defaults() -> RunConfig:
    # no file given: embedding-only commands (gen-data) still need a config object
    return RunConfig.model_construct(
        **{name: f.get_default(call_default_factory=True) for name, f in RunConfig.model_fields.items()}
    )


def build_embedder(cfg: RunConfig) -> CachedEmbedder:
    e = cfg.embedding
    if e.backend == "hash":
        return CachedEmbedder(HashEmbedder(dim=e.dim))
    return CachedEmbedder(
        RemoteEmbedder(
            e.model,
            base_url=e.base_url or cfg.base_url,
            max_retries=cfg.max_retries,
            timeout=cfg.timeout,
            max_in_flight=cfg.max_in_flight,
        )
    )


def build_chat(cfg: RunConfig) -> ChatBackend:
    if cfg.backend == "oracle":
        gold = cfg.path(cfg.gold)
        if not gold.exists():
            raise ConfigError(f"gold taxonomy not found: {gold}")
        return OracleBackend(
            load_taxonomy(gold, root_label=cfg.root_label),
            parent_error_rate=cfg.parent_error_rate,
            sibling_noise_rate=cfg.sibling_noise_rate,
            rng_seed=cfg.rng_seed,
            max_entities_per_response=cfg.max_entities_per_response,
        )
    if cfg.backend == "replay":
        replay = cfg.path(cfg.replay)
        if not replay.exists():
            raise ConfigError(f"replay file not found: {replay}")
        return ReplayBackend.from_file(replay)
    return RemoteChatBackend(
        cfg.model,
        base_url=cfg.base_url,
        max_retries=cfg.max_retries,
        timeout=cfg.timeout,
        max_in_flight=cfg.max_in_flight,
    )
