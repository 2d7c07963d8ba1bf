"""Immutable rooted taxonomy: entities, parsing, depth/LCA queries and copy-on-attach."""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .errors import TaxonomyError

ROOT_TOKEN = "ROOT"

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace runs to one space."""
    return _WS.sub(" ", text.strip()).lower()


@dataclass(frozen=True)
class Entity:
    """A taxonomy term. Identity (equality, hashing) is the normalized form."""

    surface: str = field(compare=False)
    norm: str = field(init=False)

    def __post_init__(self) -> None:
        if not isinstance(self.surface, str):
            raise TypeError(f"entity surface must be str, got {type(self.surface).__name__}")
        norm = normalize(self.surface)
        if not norm:
            raise ValueError("entity text is empty after normalization")
        object.__setattr__(self, "surface", self.surface.strip())
        object.__setattr__(self, "norm", norm)

    @property
    def is_root(self) -> bool:
        return self.norm == ROOT_TOKEN

    def __str__(self) -> str:
        return self.surface

    def __repr__(self) -> str:
        return f"Entity({self.surface!r})"


def _make_root() -> Entity:
    # Normalized entity text is always lowercase, so an uppercase norm can never
    # collide with a real node, even one literally called "root".
    root = object.__new__(Entity)
    object.__setattr__(root, "surface", ROOT_TOKEN)
    object.__setattr__(root, "norm", ROOT_TOKEN)
    return root


ROOT = _make_root()


def as_entity(value: Entity | str) -> Entity:
    if isinstance(value, Entity):
        return value
    if value == ROOT_TOKEN:
        return ROOT
    return Entity(value)


def entity_sort_key(e: Entity) -> str:
    return e.norm


@dataclass(frozen=True)
class SeedSet:
    """Ordered, duplicate-free, non-empty list of seed entities."""

    seeds: tuple[Entity, ...]

    def __post_init__(self) -> None:
        seeds = tuple(as_entity(s) for s in self.seeds)
        if not seeds:
            raise ValueError("a seed set needs at least one entity")
        seen: set[str] = set()
        for s in seeds:
            if s.is_root:
                raise ValueError("ROOT cannot be a seed")
            if s.norm in seen:
                raise ValueError(f"duplicate seed {s.surface!r}")
            seen.add(s.norm)
        object.__setattr__(self, "seeds", seeds)

    @classmethod
    def of(cls, items: Iterable[Entity | str]) -> SeedSet:
        return cls(tuple(items))

    def __len__(self) -> int:
        return len(self.seeds)

    def __iter__(self) -> Iterator[Entity]:
        return iter(self.seeds)

    def __getitem__(self, i: int) -> Entity:
        return self.seeds[i]

    @property
    def size(self) -> int:
        return len(self.seeds)

    def norms(self) -> frozenset[str]:
        return frozenset(s.norm for s in self.seeds)


class Taxonomy:
    """Rooted tree of entities.

    Construct from a child -> parent mapping; the parent of a top-level node is
    :data:`ROOT`. Instances are immutable: :meth:`attach` and :meth:`without`
    return new taxonomies. Depth follows the convention ``depth(ROOT) == 1``.
    """

    __slots__ = ("_parent", "_children", "_depth", "_stored", "root_label", "name")

    def __init__(
        self,
        parent: Mapping[Entity, Entity] | Iterable[tuple[Entity, Entity]] = (),
        root_label: str | None = None,
        name: str = "",
    ):
        items = parent.items() if isinstance(parent, Mapping) else parent
        pmap: dict[Entity, Entity] = {}
        for child, par in items:
            child, par = as_entity(child), as_entity(par)
            if child.is_root:
                raise TaxonomyError("ROOT cannot have a parent", node=child.surface)
            if child in pmap:
                if pmap[child] == par:
                    raise TaxonomyError(f"duplicate node {child.surface!r}", node=child.surface)
                raise TaxonomyError(
                    f"node {child.surface!r} has two parents "
                    f"({pmap[child].surface!r} and {par.surface!r})",
                    node=child.surface,
                )
            pmap[child] = par
        _check_rooted(pmap)
        self._init(pmap, root_label, name)

    def _init(self, pmap: dict[Entity, Entity], root_label: str | None, name: str) -> None:
        stored = {n: n for n in pmap}
        stored[ROOT] = ROOT
        # parents may be equal-by-norm copies with another surface; keep one object per node
        pmap = {c: stored[p] for c, p in pmap.items()}
        self._parent = pmap
        self.root_label = root_label
        self.name = name
        children: dict[Entity, list[Entity]] = {ROOT: []}
        for n in pmap:
            children.setdefault(n, [])
        for n, p in pmap.items():
            children[p].append(n)
        self._children = {k: tuple(v) for k, v in children.items()}
        depth: dict[Entity, int] = {ROOT: 1}
        stack = [ROOT]
        while stack:
            n = stack.pop()
            for c in self._children[n]:
                depth[c] = depth[n] + 1
                stack.append(c)
        self._depth = depth
        self._stored = {n: n for n in pmap}

    @classmethod
    def _trusted(cls, pmap: dict[Entity, Entity], root_label: str | None, name: str) -> Taxonomy:
        t = cls.__new__(cls)
        t._init(pmap, root_label, name)
        return t

    # -- basic queries -------------------------------------------------

    @property
    def nodes(self) -> tuple[Entity, ...]:
        """Non-root nodes in insertion order."""
        return tuple(self._parent)

    def __len__(self) -> int:
        return len(self._parent)

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._parent)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, str):
            item = as_entity(item)
        return item == ROOT or item in self._parent

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return self._parent == other._parent

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Taxonomy(nodes={len(self)}, layers={self.num_layers})"

    def get(self, text: Entity | str) -> Entity:
        """Return the stored entity (with its original surface) for *text*."""
        e = as_entity(text)
        if e == ROOT:
            return ROOT
        try:
            return self._stored[e]
        except KeyError:
            raise TaxonomyError(f"unknown node {e.surface!r}", node=e.surface) from None

    def _check(self, n: Entity | str) -> Entity:
        e = as_entity(n)
        if e not in self._depth:
            raise TaxonomyError(f"unknown node {e.surface!r}", node=e.surface)
        return e

    def parent(self, n: Entity | str) -> Entity:
        e = self._check(n)
        if e == ROOT:
            raise TaxonomyError("ROOT has no parent", node=ROOT_TOKEN)
        return self._parent[e]

    def children(self, n: Entity | str) -> tuple[Entity, ...]:
        return self._children[self._check(n)]

    def siblings(self, n: Entity | str) -> tuple[Entity, ...]:
        e = self._check(n)
        return tuple(c for c in self._children[self.parent(e)] if c != e)

    def depth(self, n: Entity | str) -> int:
        return self._depth[self._check(n)]

    def path_to_root(self, n: Entity | str) -> list[Entity]:
        """``[n, parent(n), ..., ROOT]``."""
        e = self._check(n)
        path = [e]
        while e != ROOT:
            e = self._parent[e]
            path.append(e)
        return path

    def ancestors(self, n: Entity | str) -> list[Entity]:
        return self.path_to_root(n)[1:]

    def is_ancestor(self, anc: Entity | str, n: Entity | str) -> bool:
        """True if *anc* is an ancestor-or-self of *n*."""
        a = self._check(anc)
        return a in self.path_to_root(n)

    def lca(self, a: Entity | str, b: Entity | str) -> Entity:
        a, b = self._check(a), self._check(b)
        da, db = self._depth[a], self._depth[b]
        while da > db:
            a = self._parent[a]
            da -= 1
        while db > da:
            b = self._parent[b]
            db -= 1
        while a != b:
            a, b = self._parent[a], self._parent[b]
        return a

    @property
    def num_layers(self) -> int:
        """Number of layers below ROOT (0 for a bare root)."""
        return max(self._depth.values()) - 1

    def layer(self, l: int) -> tuple[Entity, ...]:
        """Nodes of layer *l*, i.e. at depth ``l + 1`` (layer 1 = children of ROOT)."""
        if l == 0:
            return (ROOT,)
        return tuple(n for n in self._parent if self._depth[n] == l + 1)

    def leaves(self) -> tuple[Entity, ...]:
        return tuple(n for n in self._parent if not self._children[n])

    def display(self, n: Entity) -> str:
        if n == ROOT:
            return self.root_label or ROOT_TOKEN
        return n.surface

    def parent_map(self) -> dict[Entity, Entity]:
        return dict(self._parent)

    def peers(self, seeds: Iterable[Entity | str]) -> list[Entity]:
        """Nodes in the seeds' class at the seeds' granularity, minus the seeds.

        The class is the lowest common ancestor of all seeds; granularity is
        their (shared) depth. For seeds with one common parent this is simply
        their remaining siblings.
        """
        seeds = [self._check(s) for s in seeds]
        if not seeds:
            raise ValueError("peers() needs at least one seed")
        depths = {self._depth[s] for s in seeds}
        if len(depths) != 1 or ROOT in seeds:
            raise TaxonomyError("seeds are not at a common depth; they share no class")
        (d,) = depths
        anchor = seeds[0]
        for s in seeds[1:]:
            anchor = self.lca(anchor, s)
        if anchor in seeds:
            anchor = self._parent[anchor]
        exclude = set(seeds)
        return [
            n
            for n in self._parent
            if self._depth[n] == d and n not in exclude and self.is_ancestor(anchor, n)
        ]

    # -- copy-with-change ------------------------------------------------

    def attach(self, child: Entity | str, parent: Entity | str) -> Taxonomy:
        child, parent = as_entity(child), as_entity(parent)
        if child.is_root or child in self._parent:
            raise TaxonomyError(f"node {child.surface!r} already in taxonomy", node=child.surface)
        self._check(parent)
        pmap = dict(self._parent)
        pmap[child] = parent
        return Taxonomy._trusted(pmap, self.root_label, self.name)

    def attach_many(self, pairs: Iterable[tuple[Entity, Entity]]) -> Taxonomy:
        pmap = dict(self._parent)
        for child, parent in pairs:
            child, parent = as_entity(child), as_entity(parent)
            if child.is_root or child in pmap:
                raise TaxonomyError(f"node {child.surface!r} already in taxonomy", node=child.surface)
            if parent != ROOT and parent not in pmap:
                raise TaxonomyError(f"unknown node {parent.surface!r}", node=parent.surface)
            pmap[child] = parent
        return Taxonomy._trusted(pmap, self.root_label, self.name)

    def without(self, removed: Iterable[Entity | str]) -> Taxonomy:
        """Copy with *removed* nodes dropped; none of them may keep a surviving child."""
        drop = {self._check(r) for r in removed}
        for n in drop:
            for c in self._children[n]:
                if c not in drop:
                    raise TaxonomyError(
                        f"cannot remove {n.surface!r}: child {c.surface!r} would be orphaned",
                        node=n.surface,
                    )
        pmap = {c: p for c, p in self._parent.items() if c not in drop}
        return Taxonomy._trusted(pmap, self.root_label, self.name)

    # -- serialization ---------------------------------------------------

    def edges(self) -> Iterator[tuple[Entity, Entity]]:
        """(parent, child) pairs in breadth-first order, children in insertion order."""
        queue = [ROOT]
        i = 0
        while i < len(queue):
            p = queue[i]
            i += 1
            for c in self._children[p]:
                yield p, c
                queue.append(c)

    def to_edge_text(self) -> str:
        lines = [f"{p.surface}\t{c.surface}" for p, c in self.edges()]
        return "".join(line + "\n" for line in lines)

    def to_tree(self) -> dict:
        def build(n: Entity) -> dict:
            return {"name": n.surface, "children": [build(c) for c in self._children[n]]}

        tree = build(ROOT)
        if self.root_label:
            tree["label"] = self.root_label
        return tree


def _check_rooted(pmap: dict[Entity, Entity]) -> None:
    state: dict[Entity, int] = {}  # 1 = on current walk, 2 = known to reach ROOT
    for start in pmap:
        walk: list[Entity] = []
        n = start
        while True:
            if n == ROOT or state.get(n) == 2:
                break
            if state.get(n) == 1:
                raise TaxonomyError(f"cycle through node {n.surface!r}", node=n.surface)
            if n not in pmap:
                raise TaxonomyError(
                    f"node {n.surface!r} does not reach ROOT (orphan subtree)", node=n.surface
                )
            state[n] = 1
            walk.append(n)
            n = pmap[n]
        for w in walk:
            state[w] = 2


def _parse_edges(text: str) -> list[tuple[Entity, Entity]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise TaxonomyError(
                f"line {lineno}: expected '<parent>\\t<child>', got {len(fields)} field(s)",
                line=lineno,
            )
        par_text, child_text = fields[0].strip(), fields[1].strip()
        if not par_text or not child_text:
            raise TaxonomyError(f"line {lineno}: empty node name", line=lineno)
        if child_text == ROOT_TOKEN:
            raise TaxonomyError(f"line {lineno}: ROOT cannot be a child", node=ROOT_TOKEN, line=lineno)
        pairs.append((Entity(child_text), as_entity(par_text)))
    return pairs


def _parse_tree(doc: object) -> tuple[list[tuple[Entity, Entity]], str | None]:
    if not isinstance(doc, dict) or doc.get("name") != ROOT_TOKEN:
        raise TaxonomyError('JSON taxonomy must be an object with top-level "name": "ROOT"')
    label = doc.get("label")
    if label is not None and not isinstance(label, str):
        raise TaxonomyError('"label" must be a string')
    pairs: list[tuple[Entity, Entity]] = []

    def walk(parent: Entity, kids: object) -> None:
        if not isinstance(kids, list):
            raise TaxonomyError(f'"children" of {parent.surface!r} must be a list', node=parent.surface)
        for kid in kids:
            if not isinstance(kid, dict) or not isinstance(kid.get("name"), str):
                raise TaxonomyError(f'child of {parent.surface!r} lacks a string "name"', node=parent.surface)
            if kid["name"] == ROOT_TOKEN:
                raise TaxonomyError("ROOT cannot be a child", node=ROOT_TOKEN)
            try:
                child = Entity(kid["name"])
            except ValueError as exc:
                raise TaxonomyError(f"child of {parent.surface!r}: {exc}", node=parent.surface) from None
            pairs.append((child, parent))
            walk(child, kid.get("children", []))

    walk(ROOT, doc.get("children", []))
    return pairs, label


def parse_taxonomy(source: str, name: str = "") -> Taxonomy:
    """Parse an edge list (``parent<TAB>child`` lines) or a nested JSON tree."""
    source = source.removeprefix("\ufeff")
    stripped = source.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"invalid JSON taxonomy: {exc}", line=exc.lineno) from None
        pairs, label = _parse_tree(doc)
        return Taxonomy(pairs, root_label=label, name=name)
    return Taxonomy(_parse_edges(source), name=name)


def load_taxonomy(path: str | Path, root_label: str | None = None) -> Taxonomy:
    path = Path(path)
    t = parse_taxonomy(path.read_text(encoding="utf-8"), name=path.stem)
    if root_label is not None:
        t = Taxonomy._trusted(t.parent_map(), root_label, t.name)
    return t


def dump_taxonomy(t: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(t.to_edge_text(), encoding="utf-8")


def read_entity_list(path: str | Path) -> list[Entity]:
    """One entity per line; blank lines and ``#`` comments skipped; duplicates rejected."""
    out: list[Entity] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        e = Entity(raw)
        if e.norm in seen:
            raise TaxonomyError(f"line {lineno}: duplicate entity {e.surface!r}", node=e.surface, line=lineno)
        seen.add(e.norm)
        out.append(e)
    return out
