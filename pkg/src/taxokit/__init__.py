"""Taxonomy enrichment with instruction-following language models."""

from .backends import (
    DecodingParams,
    OracleBackend,
    RecordingBackend,
    RemoteChatBackend,
    RemoteEmbedder,
    ReplayBackend,
    parse_expansion_response,
    parse_parent_response,
)
from .embedding import CachedEmbedder, HashEmbedder, build_candidate_parents, rank_entities, top_k_candidates
from .errors import (
    BackendError,
    ConfigError,
    DatasetFormatError,
    EmbeddingError,
    ParseEmpty,
    PipelineError,
    ResponseParseError,
    TaxoError,
    TaxonomyError,
)
from .instructions import (
    InstructionTuple,
    SupervisionDataset,
    Task,
    gen_parent_finding_supervision,
    gen_sibling_recovery_supervision,
    read_dataset,
    write_dataset,
)
from .metrics import EvalReport, MembershipOracle, average_precision_at_k, map_at_k
from .pipelines import (
    ConstructionResult,
    ExpansionError,
    ExpansionResult,
    PipelineConfig,
    Prediction,
    construct_taxonomy,
    expand_entity_set,
    expand_taxonomy,
    shuffle_sweep,
)
from .taxonomy import ROOT, Entity, SeedSet, Taxonomy, load_taxonomy, parse_taxonomy

__version__ = "0.1.0"

__all__ = [
    "ROOT",
    "BackendError",
    "CachedEmbedder",
    "ConfigError",
    "ConstructionResult",
    "DatasetFormatError",
    "DecodingParams",
    "EmbeddingError",
    "Entity",
    "EvalReport",
    "ExpansionError",
    "ExpansionResult",
    "HashEmbedder",
    "InstructionTuple",
    "MembershipOracle",
    "OracleBackend",
    "ParseEmpty",
    "PipelineConfig",
    "PipelineError",
    "Prediction",
    "RecordingBackend",
    "RemoteChatBackend",
    "RemoteEmbedder",
    "ReplayBackend",
    "ResponseParseError",
    "SeedSet",
    "SupervisionDataset",
    "Task",
    "TaxoError",
    "Taxonomy",
    "TaxonomyError",
    "average_precision_at_k",
    "build_candidate_parents",
    "construct_taxonomy",
    "expand_entity_set",
    "expand_taxonomy",
    "gen_parent_finding_supervision",
    "gen_sibling_recovery_supervision",
    "load_taxonomy",
    "map_at_k",
    "parse_expansion_response",
    "parse_parent_response",
    "parse_taxonomy",
    "rank_entities",
    "read_dataset",
    "shuffle_sweep",
    "top_k_candidates",
    "write_dataset",
]
