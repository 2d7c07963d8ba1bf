"""Synthetic gold taxonomies for offline tests, demos and calibration runs.

Node names are compositional: a child's name is a fresh pseudo-word followed
by its parent's name ("vumo kelari" under "kelari"), the way real terms such
as "vascular disease" carry their hypernym. This gives text embedders the
lexical signal that makes parent retrieval and class ranking meaningful.
"""

from __future__ import annotations

import random
from collections.abc import Sequence

from .taxonomy import ROOT, Entity, Taxonomy

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


class _Namer:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.words: set[str] = set()
        self.names: set[str] = set()

    def word(self) -> str:
        while True:
            n = self.rng.choice((2, 3, 3))
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(n))
            if w not in self.words:
                self.words.add(w)
                return w

    def child_name(self, parent: Entity) -> str:
        while True:
            name = self.word() if parent == ROOT else f"{self.word()} {parent.surface}"
            if name not in self.names:
                self.names.add(name)
                return name


def layered_taxonomy(
    widths: Sequence[int], rng_seed: int = 0, root_label: str | None = None, name: str = "synthetic"
) -> Taxonomy:
    """Balanced tree: ``widths[0]`` top classes, each node of layer l has ``widths[l]`` children."""
    if not widths or any(w < 1 for w in widths):
        raise ValueError("widths must be a non-empty list of positive integers")
    namer = _Namer(random.Random(rng_seed))
    pairs: list[tuple[Entity, Entity]] = []
    frontier = [ROOT]
    for w in widths:
        nxt = []
        for p in frontier:
            for _ in range(w):
                c = Entity(namer.child_name(p))
                pairs.append((c, p))
                nxt.append(c)
        frontier = nxt
    return Taxonomy(pairs, root_label=root_label, name=name)


def random_taxonomy(
    n_nodes: int, rng_seed: int = 0, top_level: int = 5, name: str = "random"
) -> Taxonomy:
    """Random recursive tree with ``n_nodes`` non-root nodes.

    The first ``top_level`` nodes hang off ROOT; every later node picks a
    uniformly random earlier node as its parent.
    """
    if n_nodes < 1 or top_level < 1:
        raise ValueError("n_nodes and top_level must be >= 1")
    rng = random.Random(rng_seed)
    namer = _Namer(rng)
    nodes: list[Entity] = []
    pairs: list[tuple[Entity, Entity]] = []
    for i in range(n_nodes):
        parent = ROOT if i < top_level else rng.choice(nodes)
        c = Entity(namer.child_name(parent))
        pairs.append((c, parent))
        nodes.append(c)
    return Taxonomy(pairs, name=name)


def add_leaves(t: Taxonomy, n_leaves: int, rng_seed: int = 0) -> Taxonomy:
    """Copy of *t* with ``n_leaves`` new leaves under uniformly random non-root nodes."""
    rng = random.Random(rng_seed)
    namer = _Namer(rng)
    namer.names = {n.surface for n in t.nodes}
    hosts = list(t.nodes)
    if not hosts:
        raise ValueError("taxonomy has no non-root nodes to hang leaves on")
    pairs = []
    for _ in range(n_leaves):
        p = rng.choice(hosts)
        pairs.append((Entity(namer.child_name(p)), p))
    return t.attach_many(pairs)


def hold_out_leaves(
    t: Taxonomy, fraction: float = 0.2, rng_seed: int = 0, count: int | None = None
) -> tuple[Taxonomy, list[Entity]]:
    """Remove a random share of the leaves that sit below a real (non-root) parent.

    Returns the reduced taxonomy and the held-out leaves in taxonomy order.
    """
    eligible = [n for n in t.leaves() if t.parent(n) != ROOT]
    if count is None:
        count = max(1, round(fraction * len(t.leaves())))
    if count > len(eligible):
        raise ValueError(f"only {len(eligible)} eligible leaves, cannot hold out {count}")
    picked = set(random.Random(rng_seed).sample(eligible, count))
    held = [n for n in t.nodes if n in picked]
    return t.without(held), held
