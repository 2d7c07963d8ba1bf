"""End-to-end pipelines: entity set expansion, taxonomy expansion and
seed-guided taxonomy construction, plus the shuffle-budget sweep.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, TypeVar

from .backends import (
    DEFAULT_DECODING,
    ChatBackend,
    DecodingParams,
    Match,
    parse_expansion_response,
    parse_generated_parent,
    parse_parent_response,
)
from .embedding import EmbeddingBackend, build_candidate_parents, rank_entities
from .errors import ParseEmpty, PipelineError, TaxonomyError
from .instructions import (
    InstructionTuple,
    Task,
    TupleMeta,
    build_parent_gen_prompt,
    build_set_expansion_prompt,
    build_taxo_expansion_prompt,
    seed_permutations,
)
from .metrics import MembershipOracle, average_precision_at_k
from .rng import derive_seed
from .taxonomy import ROOT, Entity, SeedSet, Taxonomy, as_entity

log = logging.getLogger(__name__)

T = TypeVar("T")


class ExpansionError(PipelineError):
    """Set expansion produced nothing usable (parent or every expansion unparseable)."""


@dataclass(frozen=True)
class PipelineConfig:
    k_candidates: int = 20
    target_entities: int = 400
    max_shuffles: int = 50
    r_shuffles: int = 10
    decoding: Mapping[Task, DecodingParams] = field(default_factory=lambda: dict(DEFAULT_DECODING))
    rng_seed: int = 0
    parse_retries: int = 1
    # "layer": construction attaches layer-l entities among layer l-1 only
    candidate_scope: Literal["layer", "taxonomy"] = "layer"
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("k_candidates", "target_entities", "max_shuffles", "r_shuffles", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be >= 0")
        if self.candidate_scope not in ("layer", "taxonomy"):
            raise ValueError("candidate_scope must be 'layer' or 'taxonomy'")

    def params(self, task: Task) -> DecodingParams:
        return self.decoding.get(task, DEFAULT_DECODING[task])


@dataclass
class ExpansionResult:
    seeds: SeedSet
    ranked: list[tuple[Entity, float]]
    parent_used: Entity
    permutations_used: int
    raw_union_size: int
    diagnostics: list[str] = field(default_factory=list)

    @property
    def entities(self) -> list[Entity]:
        return [e for e, _ in self.ranked]

    def to_dict(self) -> dict:
        return {
            "seeds": [s.surface for s in self.seeds],
            "parent": self.parent_used.surface,
            "permutations_used": self.permutations_used,
            "raw_union_size": self.raw_union_size,
            "ranked": [{"entity": e.surface, "score": s} for e, s in self.ranked],
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ExpansionResult:
        return cls(
            seeds=SeedSet.of(d["seeds"]),
            ranked=[(Entity(r["entity"]), float(r["score"])) for r in d["ranked"]],
            parent_used=Entity(d["parent"]),
            permutations_used=int(d["permutations_used"]),
            raw_union_size=int(d["raw_union_size"]),
            diagnostics=list(d.get("diagnostics", [])),
        )


@dataclass(frozen=True)
class Prediction:
    """One parent-finding decision. ``parent`` is None if the answer was unusable."""

    entity: Entity
    parent: Entity | None
    matched: Match | None
    candidates: tuple[Entity, ...] = ()

    def to_dict(self) -> dict:
        return {
            "entity": self.entity.surface,
            "parent": None if self.parent is None else self.parent.surface,
            "matched": None if self.matched is None else self.matched.value,
            "candidates": [c.surface for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Prediction:
        return cls(
            entity=Entity(d["entity"]),
            parent=None if d.get("parent") is None else as_entity(d["parent"]),
            matched=None if d.get("matched") is None else Match(d["matched"]),
            candidates=tuple(as_entity(c) for c in d.get("candidates", [])),
        )


def _ask(
    chat: ChatBackend,
    prompt: InstructionTuple,
    params: DecodingParams,
    parse: Callable[[str], T],
    retries: int,
    diagnostics: list[str],
) -> T | None:
    """Complete and parse, re-asking the identical prompt on unparseable output."""
    for attempt in range(retries + 1):
        text = chat.complete(prompt, params)
        try:
            return parse(text)
        except ParseEmpty as exc:
            msg = f"{prompt.task.value} prompt {prompt.prompt_key()[:12]}: unparseable ({exc}), attempt {attempt + 1}"
            log.info(msg)
            diagnostics.append(msg)
    return None


def expand_entity_set(
    seeds: SeedSet | Sequence[Entity],
    chat: ChatBackend,
    embed: EmbeddingBackend,
    cfg: PipelineConfig = PipelineConfig(),
    parent_override: Entity | None = None,
) -> ExpansionResult:
    """Find more members of the seeds' class.

    The parent class comes from *parent_override* when given, otherwise from a
    ParentGen prompt. One SetExpand prompt is issued per seed permutation; the
    parsed answers are unioned (minus seeds) until the union exceeds
    ``target_entities``, ``max_shuffles`` prompts were issued, or permutations
    run out. The union is then ranked by similarity to the parent.
    """
    seeds = seeds if isinstance(seeds, SeedSet) else SeedSet.of(seeds)
    diagnostics: list[str] = []
    if parent_override is not None:
        parent = parent_override
    else:
        parent = _ask(
            chat, build_parent_gen_prompt(seeds), cfg.params(Task.PARENT_GEN),
            parse_generated_parent, cfg.parse_retries, diagnostics,
        )
        if parent is None:
            raise ExpansionError("could not parse a parent class for the seeds")

    seed_norms = seeds.norms()
    perm_seed = derive_seed(cfg.rng_seed, "permutations", sorted(seed_norms))
    union: dict[Entity, None] = {}
    issued = 0
    parsed = 0
    params = cfg.params(Task.SET_EXPAND)
    for j, perm in enumerate(seed_permutations(seeds, cfg.max_shuffles, perm_seed)):
        prompt = build_set_expansion_prompt(parent, perm, meta=TupleMeta(permutation_index=j))
        issued += 1
        found = _ask(chat, prompt, params, parse_expansion_response, cfg.parse_retries, diagnostics)
        if found is None:
            continue
        parsed += 1
        for e in found:
            if e.norm not in seed_norms:
                union.setdefault(e, None)
        if len(union) > cfg.target_entities:
            break
    if parsed == 0:
        raise ExpansionError(f"all {issued} expansion prompt(s) were unparseable")
    ranked = rank_entities(union, parent, embed) if union else []
    return ExpansionResult(seeds, ranked, parent, issued, len(union), diagnostics)


def expand_taxonomy(
    t: Taxonomy,
    new_entities: Iterable[Entity],
    chat: ChatBackend,
    embed: EmbeddingBackend,
    cfg: PipelineConfig = PipelineConfig(),
    pool: Sequence[Entity] | None = None,
) -> tuple[Taxonomy, list[Prediction]]:
    """Attach each new entity under the parent the model picks among its top-k candidates.

    Candidates always come from the input taxonomy (optionally restricted to
    *pool*), so earlier insertions never become parents of later ones.
    Unusable answers leave the entity unattached; its log entry has no parent.
    """
    new = list(new_entities)
    seen: set[Entity] = set()
    for e in new:
        if e in t or e in seen:
            raise TaxonomyError(f"entity {e.surface!r} is already in the taxonomy", node=e.surface)
        seen.add(e)
    if len(t) < 2:
        raise TaxonomyError("taxonomy has fewer than 2 nodes; cannot retrieve candidates")
    params = cfg.params(Task.TAXO_EXPAND)

    def predict(e: Entity) -> Prediction:
        cands = build_candidate_parents(e, t, cfg.k_candidates, embed, pool=pool)
        prompt = build_taxo_expansion_prompt(e, cands)
        diag: list[str] = []
        hit = _ask(
            chat, prompt, params,
            lambda text: parse_parent_response(text, cands.candidates, embed),
            cfg.parse_retries, diag,
        )
        if hit is None:
            log.warning("no usable parent for %r; left unattached", e.surface)
            return Prediction(e, None, None, cands.candidates)
        return Prediction(e, hit[0], hit[1], cands.candidates)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            preds = list(ex.map(predict, new))
    else:
        preds = [predict(e) for e in new]
    expanded = t.attach_many((p.entity, p.parent) for p in preds if p.parent is not None)
    return expanded, preds


@dataclass
class LayerResult:
    layer: int
    expansion: ExpansionResult | None
    predictions: list[Prediction]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "expansion": None if self.expansion is None else self.expansion.to_dict(),
            "predictions": [p.to_dict() for p in self.predictions],
        }


@dataclass
class ConstructionResult:
    taxonomy: Taxonomy
    layers: list[LayerResult]
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layers": [lr.to_dict() for lr in self.layers],
            "diagnostics": list(self.diagnostics),
        }


def construct_taxonomy(
    seed_taxo: Taxonomy,
    chat: ChatBackend,
    embed: EmbeddingBackend,
    cfg: PipelineConfig = PipelineConfig(),
    root_label: str | None = None,
) -> ConstructionResult:
    """Grow a small seed taxonomy layer by layer: find siblings, then parents.

    For each layer (top-down) the layer's seeds are expanded with the root's
    label as the class when it has one, else with a generated parent class.
    New layer-1 entities go straight under ROOT; deeper ones are attached by
    parent-finding among the current layer above (or the whole taxonomy with
    ``candidate_scope="taxonomy"``).
    """
    if seed_taxo.num_layers < 2:
        raise PipelineError("seed taxonomy needs at least two layers below ROOT")
    label = root_label or seed_taxo.root_label
    anchor = Entity(label) if label else None
    working = seed_taxo
    layers: list[LayerResult] = []
    diagnostics: list[str] = []
    for l in range(1, seed_taxo.num_layers + 1):
        seeds = SeedSet(seed_taxo.layer(l))
        try:
            expansion = expand_entity_set(seeds, chat, embed, cfg, parent_override=anchor)
        except ExpansionError as exc:
            msg = f"layer {l}: expansion skipped ({exc})"
            log.warning(msg)
            diagnostics.append(msg)
            layers.append(LayerResult(l, None, []))
            continue
        new = [e for e in expansion.entities if e not in working]
        if not new:
            layers.append(LayerResult(l, expansion, []))
            continue
        if l == 1:
            working = working.attach_many((e, ROOT) for e in new)
            preds = [Prediction(e, ROOT, None) for e in new]
        else:
            pool = working.layer(l - 1) if cfg.candidate_scope == "layer" else None
            working, preds = expand_taxonomy(working, new, chat, embed, cfg, pool=pool)
        layers.append(LayerResult(l, expansion, preds))
    return ConstructionResult(working, layers, diagnostics)


@dataclass(frozen=True)
class SweepQuery:
    seeds: SeedSet
    oracle: MembershipOracle


def shuffle_sweep(
    queries: Sequence[SweepQuery],
    chat: ChatBackend,
    embed: EmbeddingBackend,
    shuffle_counts: Sequence[int],
    cfg: PipelineConfig = PipelineConfig(),
    k: int = 10,
) -> list[tuple[int, float]]:
    """MAP@k of set expansion at each shuffle budget, same rng seed for every budget."""
    if not shuffle_counts:
        raise ValueError("need at least one shuffle count")
    if any(c < 1 for c in shuffle_counts):
        raise ValueError("shuffle counts must be >= 1")
    if not queries:
        raise ValueError("need at least one query")
    rows = []
    for count in shuffle_counts:
        run_cfg = replace(cfg, max_shuffles=count)
        aps = []
        for q in queries:
            res = expand_entity_set(q.seeds, chat, embed, run_cfg)
            aps.append(average_precision_at_k(res.entities, q.oracle, k))
        rows.append((count, sum(aps) / len(aps)))
    return rows
