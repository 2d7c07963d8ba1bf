"""Instruction/query/output tuples, seed permutations, candidate shuffles and
self-supervision datasets built from an existing taxonomy.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import math
import random
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

from .embedding import CandidateSet, EmbeddingBackend, build_candidate_parents
from .errors import DatasetFormatError, TaxonomyError
from .rng import derive_seed, derived_rng
from .taxonomy import ROOT, Entity, SeedSet, Taxonomy

PARENT_GEN_INSTRUCTION = (
    "Given a list of entities, output the most likely parent class for the entity given by user."
)
SET_EXPAND_INSTRUCTION = (
    "Given a category and an entity set belonging to this category, output other entities "
    "of this category that share the same granularity as the seeds."
)
TAXO_EXPAND_INSTRUCTION = (
    "Given a set of candidate parent classes: {candidates}, output the most likely parent "
    "class for the entity given by user."
)
PARENT_QUERY = "Find the parent for {entities}."
SET_EXPAND_QUERY = (
    "Find other entities belonging to category {parent} and sharing the same granularity "
    "as the seeds {seeds}."
)
PARENT_PREFIX = "The parent class is "
EXPANSION_PREFIX = "The expanded entities are "

LIST_SEP = ", "

DEFAULT_PERMUTATION_CAP = 50
DEFAULT_SUBSET_SIZE = 4
DEFAULT_MAX_SUBSETS = 10


class Task(str, enum.Enum):
    PARENT_GEN = "ParentGen"
    SET_EXPAND = "SetExpand"
    TAXO_EXPAND = "TaxoExpand"


@dataclass(frozen=True)
class TupleMeta:
    source_node: Entity | None = None
    permutation_index: int = 0
    shuffle_index: int = 0


@dataclass(frozen=True)
class InstructionTuple:
    instruction: str
    query: str
    task: Task
    output: str | None = None
    meta: TupleMeta = field(default_factory=TupleMeta)

    def __post_init__(self) -> None:
        if not self.instruction.strip() or not self.query.strip():
            raise ValueError("instruction and query must be non-empty")
        object.__setattr__(self, "task", Task(self.task))

    @property
    def is_training(self) -> bool:
        return self.output is not None

    def prompt_key(self) -> str:
        """Hash of what a model actually sees; output and meta are excluded."""
        return hashlib.sha256(f"{self.instruction}\x1e{self.query}".encode("utf-8")).hexdigest()

    def without_output(self) -> InstructionTuple:
        return InstructionTuple(self.instruction, self.query, self.task, None, self.meta)


def _join(entities: Iterable[Entity]) -> str:
    return LIST_SEP.join(e.surface for e in entities)


def build_parent_gen_prompt(seeds: SeedSet | Sequence[Entity], meta: TupleMeta | None = None) -> InstructionTuple:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("parent generation needs at least one seed")
    return InstructionTuple(
        PARENT_GEN_INSTRUCTION,
        PARENT_QUERY.format(entities=_join(seeds)),
        Task.PARENT_GEN,
        meta=meta or TupleMeta(),
    )


def build_set_expansion_prompt(
    parent: Entity | str,
    seeds: SeedSet | Sequence[Entity],
    output: Sequence[Entity] | None = None,
    meta: TupleMeta | None = None,
) -> InstructionTuple:
    parent_text = parent.surface if isinstance(parent, Entity) else str(parent).strip()
    if not parent_text:
        raise ValueError("parent class text is empty")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("set expansion needs at least one seed")
    out = None
    if output is not None:
        overlap = {e.norm for e in output} & {s.norm for s in seeds}
        if overlap:
            raise ValueError(f"expansion output repeats seeds: {sorted(overlap)}")
        out = EXPANSION_PREFIX + _join(output)
    return InstructionTuple(
        SET_EXPAND_INSTRUCTION,
        SET_EXPAND_QUERY.format(parent=parent_text, seeds=_join(seeds)),
        Task.SET_EXPAND,
        out,
        meta or TupleMeta(),
    )


def build_taxo_expansion_prompt(
    query_entity: Entity,
    candidates: CandidateSet | Sequence[Entity],
    gold: Entity | None = None,
    meta: TupleMeta | None = None,
) -> InstructionTuple:
    cands = list(candidates)
    if not cands:
        raise ValueError("candidate list is empty")
    out = None
    if gold is not None:
        match = next((c for c in cands if c == gold), None)
        if match is None:
            raise ValueError(f"gold parent {gold.surface!r} is not among the candidates")
        out = f"{PARENT_PREFIX}{match.surface}."
    return InstructionTuple(
        TAXO_EXPAND_INSTRUCTION.format(candidates=_join(cands)),
        PARENT_QUERY.format(entities=query_entity.surface),
        Task.TAXO_EXPAND,
        out,
        meta or TupleMeta(source_node=query_entity),
    )


def _unrank_permutation(items: Sequence, rank: int) -> list:
    pool = list(items)
    out = []
    for i in range(len(pool), 0, -1):
        idx, rank = divmod(rank, math.factorial(i - 1))
        out.append(pool.pop(idx))
    return out


def seed_permutations(seeds: SeedSet, cap: int = DEFAULT_PERMUTATION_CAP, rng_seed: int = 0) -> list[SeedSet]:
    """Every ordering of the seeds if there are at most *cap*, else *cap* distinct random ones.

    Exhaustive output is in lexicographic order of seed positions, starting
    with the given order. Sampling draws permutation ranks without replacement.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    items = list(seeds)
    total = math.factorial(len(items))
    if total <= cap:
        return [SeedSet(p) for p in itertools.permutations(items)]
    ranks = random.Random(rng_seed).sample(range(total), cap)
    return [SeedSet(tuple(_unrank_permutation(items, r))) for r in ranks]


def shuffle_candidates(candidates: CandidateSet, r: int, rng_seed: int = 0) -> list[CandidateSet]:
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = random.Random(rng_seed)
    out = []
    for _ in range(r):
        order = list(candidates.candidates)
        rng.shuffle(order)
        out.append(candidates.reordered(order))
    return out


@dataclass(frozen=True)
class SupervisionDataset:
    tuples: tuple[InstructionTuple, ...] = ()
    source_taxonomy_name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tuples", tuple(self.tuples))
        for i, t in enumerate(self.tuples):
            if t.output is None:
                raise ValueError(f"tuple {i} has no output; supervision data needs outputs")

    def __len__(self) -> int:
        return len(self.tuples)

    def __iter__(self) -> Iterator[InstructionTuple]:
        return iter(self.tuples)

    def counts(self) -> dict[str, int]:
        c: dict[str, int] = {}
        for t in self.tuples:
            c[t.task.value] = c.get(t.task.value, 0) + 1
        return c


def gen_parent_finding_supervision(
    t: Taxonomy, k: int, r: int, backend: EmbeddingBackend, rng_seed: int = 0
) -> SupervisionDataset:
    """``r`` shuffled TaxoExpand tuples per non-root node, gold parent always among candidates."""
    if len(t) < 2:
        raise TaxonomyError("need at least 2 non-root nodes to build parent-finding data")
    tuples = []
    for node in t.nodes:
        gold = t.parent(node)
        cands = build_candidate_parents(node, t, k, backend, true_parent=gold)
        for j, shuffled in enumerate(shuffle_candidates(cands, r, derive_seed(rng_seed, "shuffle", node.norm))):
            meta = TupleMeta(source_node=node, shuffle_index=j)
            tuples.append(build_taxo_expansion_prompt(node, shuffled, gold, meta))
    return SupervisionDataset(tuple(tuples), t.name)


def _child_subsets(n: int, size: int, limit: int, rng: random.Random) -> list[tuple[int, ...]]:
    if math.comb(n, size) <= limit:
        return list(itertools.combinations(range(n), size))
    seen: dict[tuple[int, ...], None] = {}
    while len(seen) < limit:
        seen.setdefault(tuple(sorted(rng.sample(range(n), size))), None)
    return list(seen)


def gen_sibling_recovery_supervision(
    t: Taxonomy,
    subset_size: int = DEFAULT_SUBSET_SIZE,
    max_subsets_per_parent: int = DEFAULT_MAX_SUBSETS,
    rng_seed: int = 0,
) -> SupervisionDataset:
    """SetExpand tuples: a child subset as seeds, the remaining siblings as output.

    Parents with ``subset_size`` or fewer children are skipped. ROOT takes part
    only when the taxonomy gives it a label, since "ROOT" is no category name.
    """
    if subset_size < 1 or max_subsets_per_parent < 1:
        raise ValueError("subset_size and max_subsets_per_parent must be >= 1")
    parents: list[Entity] = ([ROOT] if t.root_label else []) + list(t.nodes)
    tuples = []
    for parent in parents:
        kids = t.children(parent)
        if len(kids) <= subset_size:
            continue
        rng = derived_rng(rng_seed, "siblings", parent.norm)
        anchor = Entity(t.display(parent))
        for j, idx in enumerate(_child_subsets(len(kids), subset_size, max_subsets_per_parent, rng)):
            chosen = set(idx)
            seeds = [kids[i] for i in idx]
            rest = [c for i, c in enumerate(kids) if i not in chosen]
            meta = TupleMeta(source_node=parent, permutation_index=j)
            tuples.append(build_set_expansion_prompt(anchor, seeds, rest, meta))
    return SupervisionDataset(tuple(tuples), t.name)


# -- JSONL (de)serialization -------------------------------------------------

_KEYS = ("instruction", "input", "output", "task", "meta")
_META_KEYS = ("source_node", "permutation_index", "shuffle_index")


def tuple_to_record(t: InstructionTuple) -> dict:
    return {
        "instruction": t.instruction,
        "input": t.query,
        "output": t.output,
        "task": t.task.value,
        "meta": {
            "source_node": t.meta.source_node.surface if t.meta.source_node is not None else None,
            "permutation_index": t.meta.permutation_index,
            "shuffle_index": t.meta.shuffle_index,
        },
    }


def record_to_tuple(rec: object, line: int | None = None) -> InstructionTuple:
    where = f"line {line}: " if line is not None else ""

    def bad(msg: str) -> DatasetFormatError:
        return DatasetFormatError(where + msg, line=line)

    if not isinstance(rec, dict):
        raise bad("record is not a JSON object")
    missing = [k for k in _KEYS if k not in rec]
    if missing:
        raise bad(f"missing field(s) {', '.join(repr(k) for k in missing)}")
    extra = sorted(set(rec) - set(_KEYS))
    if extra:
        raise bad(f"unexpected field(s) {', '.join(repr(k) for k in extra)}")
    for k in ("instruction", "input", "task"):
        if not isinstance(rec[k], str):
            raise bad(f"field {k!r} must be a string")
    if rec["output"] is not None and not isinstance(rec["output"], str):
        raise bad("field 'output' must be a string or null")
    meta = rec["meta"]
    if not isinstance(meta, dict) or any(k not in meta for k in _META_KEYS):
        raise bad(f"field 'meta' must be an object with keys {', '.join(_META_KEYS)}")
    src = meta["source_node"]
    if src is not None and not isinstance(src, str):
        raise bad("meta.source_node must be a string or null")
    for k in ("permutation_index", "shuffle_index"):
        if not isinstance(meta[k], int) or isinstance(meta[k], bool):
            raise bad(f"meta.{k} must be an integer")
    try:
        return InstructionTuple(
            rec["instruction"],
            rec["input"],
            Task(rec["task"]),
            rec["output"],
            TupleMeta(
                Entity(src) if src is not None else None,
                meta["permutation_index"],
                meta["shuffle_index"],
            ),
        )
    except ValueError as exc:
        raise bad(str(exc)) from None


def serialize_dataset(d: SupervisionDataset, sink: IO[str]) -> None:
    for t in d.tuples:
        sink.write(json.dumps(tuple_to_record(t), ensure_ascii=False))
        sink.write("\n")


def deserialize_dataset(source: Iterable[str], name: str = "") -> SupervisionDataset:
    tuples = []
    for lineno, raw in enumerate(source, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})", line=lineno) from None
        t = record_to_tuple(rec, lineno)
        if t.output is None:
            raise DatasetFormatError(f"line {lineno}: 'output' is null in a supervision dataset", line=lineno)
        tuples.append(t)
    return SupervisionDataset(tuple(tuples), name)


def write_dataset(d: SupervisionDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        serialize_dataset(d, fh)


def read_dataset(path: str | Path, name: str | None = None) -> SupervisionDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return deserialize_dataset(fh, path.stem if name is None else name)
