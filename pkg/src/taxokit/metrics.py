"""Evaluation metrics for the three tasks and report assembly.

Set expansion uses AP@k / MAP@k, taxonomy expansion uses exact-match accuracy
and Wu & Palmer similarity, seed-guided construction uses Sibling P@k and
Parent P@k. Ranked lists shorter than ``k`` are padded with misses.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .taxonomy import Entity, Taxonomy


class MembershipOracle:
    """Gold-class membership test backed by an explicit set of entities."""

    def __init__(self, members: Iterable[Entity], name: str = ""):
        self._norms = frozenset(e.norm for e in members)
        self.name = name

    @classmethod
    def for_seeds(cls, gold: Taxonomy, seeds: Iterable[Entity]) -> MembershipOracle:
        """Members of the seeds' class at the seeds' level in *gold* (seeds included)."""
        seeds = [gold.get(s) for s in seeds]
        return cls(gold.peers(seeds) + seeds, name=", ".join(s.surface for s in seeds))

    @classmethod
    def for_layer(cls, gold: Taxonomy, layer: int) -> MembershipOracle:
        return cls(gold.layer(layer), name=f"layer {layer}")

    def is_relevant(self, e: Entity) -> bool:
        return e.norm in self._norms

    __call__ = is_relevant

    def __len__(self) -> int:
        return len(self._norms)


def _entity(item: Entity | tuple) -> Entity:
    return item[0] if isinstance(item, tuple) else item


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def average_precision_at_k(
    ranked: Sequence[Entity | tuple], oracle: Callable[[Entity], bool], k: int
) -> float:
    _check_k(k)
    hits = 0
    total = 0.0
    for u, item in enumerate(ranked[:k], start=1):
        if oracle(_entity(item)):
            hits += 1
            total += hits / u
    return total / k


def map_at_k(results: Sequence[tuple[Sequence, Callable[[Entity], bool]]], k: int) -> float:
    if not results:
        raise ValueError("MAP needs at least one query")
    return sum(average_precision_at_k(r, o, k) for r, o in results) / len(results)


def accuracy(predictions: Sequence[tuple[Entity | None, Entity]]) -> float:
    if not predictions:
        raise ValueError("accuracy needs at least one prediction")
    return sum(p is not None and p.norm == g.norm for p, g in predictions) / len(predictions)


def wu_palmer(t: Taxonomy, predicted: Entity, gold: Entity) -> float:
    """``2 * depth(lca) / (depth(predicted) + depth(gold))`` with ``depth(ROOT) == 1``."""
    return 2 * t.depth(t.lca(predicted, gold)) / (t.depth(predicted) + t.depth(gold))


def mean_wu_palmer(t: Taxonomy, predictions: Sequence[tuple[Entity, Entity]]) -> float:
    if not predictions:
        raise ValueError("Wu&P needs at least one prediction")
    return sum(wu_palmer(t, p, g) for p, g in predictions) / len(predictions)


def sibling_precision_at_k(
    expanded: Sequence[Entity | tuple], oracle: Callable[[Entity], bool], k: int
) -> float:
    _check_k(k)
    return sum(bool(oracle(_entity(e))) for e in expanded[:k]) / k


def parent_precision_at_k(
    expanded: Sequence[tuple[Entity, Entity | None]],
    gold_parent: Mapping[Entity, Entity],
    k: int,
) -> float:
    """Share of the top-k expansions attached under their gold parent.

    Entities without a gold parent (spurious expansions) count as wrong.
    """
    _check_k(k)
    correct = 0
    for entity, predicted in expanded[:k]:
        gold = gold_parent.get(entity)
        if gold is not None and predicted is not None and predicted.norm == gold.norm:
            correct += 1
    return correct / k


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    query_count: int
    fixtures: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.query_count < 1:
            raise ValueError("a report needs at least one query")
        for name, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "query_count": self.query_count,
            "metrics": dict(self.metrics),
            "fixtures": dict(self.fixtures),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def to_table(self) -> str:
        rows = [("metric", "value")] + [(k, f"{v:.4f}") for k, v in self.metrics.items()]
        w = max(len(r[0]) for r in rows)
        lines = [f"{a:<{w}}  {b:>8}" for a, b in rows]
        lines.insert(1, "-" * (w + 10))
        lines.append(f"{'queries':<{w}}  {self.query_count:>8}")
        return "\n".join(lines) + "\n"


def sweep_csv(rows: Iterable[tuple[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shuffles", "metric"])
    for shuffles, metric in rows:
        w.writerow([shuffles, repr(float(metric))])
    return buf.getvalue()


def write_sweep_csv(rows: Iterable[tuple[int, float]], path: str | Path) -> None:
    Path(path).write_text(sweep_csv(rows), encoding="utf-8")
