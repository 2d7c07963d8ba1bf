from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxokit.backends import OracleBackend, ReplayBackend, parse_expansion_response
from taxokit.embedding import CachedEmbedder, HashEmbedder, rank_entities
from taxokit.errors import BackendError, PipelineError, TaxonomyError
from taxokit.instructions import Task, build_set_expansion_prompt
from taxokit.metrics import MembershipOracle
from taxokit.pipelines import (
    ExpansionError,
    ExpansionResult,
    PipelineConfig,
    Prediction,
    SweepQuery,
    construct_taxonomy,
    expand_entity_set,
    expand_taxonomy,
    shuffle_sweep,
)
from taxokit.synthetic import hold_out_leaves, layered_taxonomy, random_taxonomy
from taxokit.taxonomy import ROOT, Entity, SeedSet, Taxonomy

E = Entity
_EMB = CachedEmbedder(HashEmbedder())


class Scripted:
    """Returns canned answers in call order and records the prompts."""

    name = "scripted"

    def __init__(self, answers):
        self.answers = list(answers)
        self.prompts = []

    def complete(self, prompt, params):
        self.prompts.append(prompt)
        return self.answers.pop(0)


class Exploding:
    name = "exploding"

    def complete(self, prompt, params):
        raise AssertionError("backend must not be called")


class Counting:
    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.calls = {t: 0 for t in Task}
        self.answers = []

    def complete(self, prompt, params):
        self.calls[prompt.task] += 1
        out = self.inner.complete(prompt, params)
        if prompt.task is Task.SET_EXPAND:
            self.answers.append(out)
        return out


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(max_shuffles=0)
    with pytest.raises(ValueError):
        PipelineConfig(candidate_scope="everything")
    cfg = PipelineConfig()
    assert cfg.params(Task.SET_EXPAND).temperature == 0.7
    assert cfg.params(Task.TAXO_EXPAND).temperature == 0.0


def test_ese_returns_exactly_the_held_out_siblings(embedder):
    gold = layered_taxonomy([2, 10], rng_seed=11)
    kids = gold.children(gold.layer(1)[0])
    res = expand_entity_set(SeedSet(kids[:3]), OracleBackend(gold), embedder)
    assert set(res.entities) == set(kids[3:])
    assert res.parent_used == gold.layer(1)[0]
    assert res.permutations_used == 6
    scores = [s for _, s in res.ranked]
    assert scores == sorted(scores, reverse=True)


def test_ese_union_semantics_with_replay(embedder):
    seeds = SeedSet.of(["s1", "s2"])
    responses = {
        build_set_expansion_prompt("cls", list(seeds)).prompt_key(): "The expanded entities are A, B",
        build_set_expansion_prompt("cls", list(seeds)[::-1]).prompt_key(): "The expanded entities are B, C, s1",
    }
    res = expand_entity_set(seeds, ReplayBackend(responses), embedder, parent_override=E("cls"))
    assert res.raw_union_size == 3
    assert {e.norm for e in res.entities} == {"a", "b", "c"}


def test_ese_retries_unparseable_answer_once(embedder):
    chat = Scripted([
        "The parent class is fruit.",
        "I am not sure.",
        "The expanded entities are pear",
    ])
    res = expand_entity_set([E("apple")], chat, embedder)
    assert res.entities == [E("pear")]
    assert len(chat.prompts) == 3
    assert chat.prompts[1].prompt_key() == chat.prompts[2].prompt_key()


def test_ese_skips_prompt_after_second_failure(embedder):
    chat = Scripted([
        "No idea.", "Still no idea.",
        "The expanded entities are c",
    ])
    res = expand_entity_set(SeedSet.of(["a", "b"]), chat, embedder, parent_override=E("letters"))
    assert res.entities == [E("c")]
    assert res.permutations_used == 2
    assert len(res.diagnostics) == 2 and res.diagnostics[-1].endswith("attempt 2")


def test_ese_errors(embedder):
    with pytest.raises(ExpansionError):
        expand_entity_set([E("a")], Scripted(["", "The parent class is"]), embedder)
    with pytest.raises(ExpansionError):
        expand_entity_set([E("a")], Scripted(["Nope.", "Nope."]), embedder, parent_override=E("p"))
    with pytest.raises(ValueError):
        expand_entity_set([], Exploding(), embedder)


def test_expansion_result_json_round_trip(embedder):
    gold = layered_taxonomy([2, 6], rng_seed=2)
    res = expand_entity_set(SeedSet(gold.layer(2)[:2]), OracleBackend(gold), embedder)
    again = ExpansionResult.from_dict(res.to_dict())
    assert again.entities == res.entities and again.seeds == res.seeds


def test_ranking_is_independent_of_union_order(embedder):
    ents = [E(f"item {i}") for i in range(30)]
    shuffled = ents[:]
    random.Random(1).shuffle(shuffled)
    assert rank_entities(ents, E("item"), embedder) == rank_entities(shuffled, E("item"), embedder)


@settings(max_examples=25, deadline=None)
@given(
    n_seeds=st.integers(1, 5),
    cap=st.integers(1, 60),
    per_response=st.integers(1, 12),
    target=st.integers(1, 80),
    noise=st.sampled_from([0.0, 0.3]),
)
def test_stop_rules_and_seed_exclusion(n_seeds, cap, per_response, target, noise):
    gold = layered_taxonomy([2, 60], rng_seed=5)
    seeds = SeedSet(gold.children(gold.layer(1)[0])[:n_seeds])
    chat = Counting(OracleBackend(gold, sibling_noise_rate=noise, max_entities_per_response=per_response))
    res = expand_entity_set(seeds, chat, _EMB, PipelineConfig(max_shuffles=cap, target_entities=target))
    issued = chat.calls[Task.SET_EXPAND]
    limit = min(math.factorial(n_seeds), cap)
    assert issued == res.permutations_used <= limit
    assert not {e.norm for e in res.entities} & seeds.norms()
    assert len({e.norm for e in res.entities}) == len(res.entities)
    # replay the union growth: it stays within target until the last poll
    union: set[str] = set()
    sizes = []
    for answer in chat.answers:
        union |= {e.norm for e in parse_expansion_response(answer)} - seeds.norms()
        sizes.append(len(union))
    assert sizes[-1] == res.raw_union_size
    assert all(n <= target for n in sizes[:-1])
    if issued < limit:
        assert res.raw_union_size > target


def test_expand_taxonomy_zero_noise(embedder):
    gold = random_taxonomy(100, 3)
    reduced, held = hold_out_leaves(gold, 0.2, rng_seed=4)
    out, preds = expand_taxonomy(reduced, held, OracleBackend(gold), embedder)
    assert out == gold
    assert all(p.parent == gold.parent(p.entity) for p in preds)
    # every pre-existing relation survives
    assert all(out.parent(n) == reduced.parent(n) for n in reduced.nodes)


def test_expand_taxonomy_rejects_existing_entity_before_calling_backend(diseases, embedder):
    with pytest.raises(TaxonomyError):
        expand_taxonomy(diseases, [E("Asthma")], Exploding(), embedder)
    with pytest.raises(TaxonomyError):
        expand_taxonomy(diseases, [E("x"), E("X")], Exploding(), embedder)
    with pytest.raises(TaxonomyError):
        expand_taxonomy(Taxonomy({E("a"): ROOT}), [E("b")], Exploding(), embedder)


def test_expand_taxonomy_leaves_unusable_answers_unattached(diseases, embedder):
    chat = Scripted(["", ""])
    out, (pred,) = expand_taxonomy(diseases, [E("pleurisy")], chat, embedder)
    assert pred.parent is None and pred.matched is None
    assert out == diseases
    assert Prediction.from_dict(pred.to_dict()) == pred


def test_expand_taxonomy_parallel_matches_serial(embedder):
    gold = random_taxonomy(80, 8)
    reduced, held = hold_out_leaves(gold, 0.25, rng_seed=1)
    oracle = OracleBackend(gold, parent_error_rate=0.3, rng_seed=2)
    serial = expand_taxonomy(reduced, held, oracle, embedder, PipelineConfig(workers=1))
    parallel = expand_taxonomy(reduced, held, oracle, embedder, PipelineConfig(workers=4))
    assert serial[0] == parallel[0] and serial[1] == parallel[1]


def _seed_taxonomy(gold, n_top, n_kids):
    top = gold.layer(1)[:n_top]
    pmap = {t: ROOT for t in top}
    for t in top:
        for c in gold.children(t)[:n_kids]:
            pmap[c] = t
    return Taxonomy(pmap)


def test_construct_reproduces_gold(embedder):
    gold = layered_taxonomy([3, 8], rng_seed=12)
    seed = _seed_taxonomy(gold, 3, 3)
    assert len(seed) == 12
    res = construct_taxonomy(seed, OracleBackend(gold), embedder)
    assert res.taxonomy == gold
    assert all(res.taxonomy.parent(n) == seed.parent(n) for n in seed.nodes)


def test_construct_with_root_label_uses_it_as_class(embedder):
    gold = layered_taxonomy([4, 6], rng_seed=13, root_label="things")
    seed = _seed_taxonomy(gold, 2, 2)
    chat = Counting(OracleBackend(gold))
    res = construct_taxonomy(seed, chat, embedder, root_label="things")
    assert res.layers[0].expansion.parent_used == E("things")
    assert res.taxonomy == gold


def test_construct_needs_two_layers(embedder):
    with pytest.raises(PipelineError):
        construct_taxonomy(Taxonomy({E("a"): ROOT}), Exploding(), embedder)


def test_sweep_shape_and_noiseless_value(embedder):
    gold = layered_taxonomy([2, 15], rng_seed=21)
    queries = []
    for p in gold.layer(1):
        seeds = SeedSet(gold.children(p)[:3])
        queries.append(SweepQuery(seeds, MembershipOracle.for_seeds(gold, seeds)))
    rows = shuffle_sweep(queries, OracleBackend(gold), embedder, [1, 5, 10], k=10)
    assert [c for c, _ in rows] == [1, 5, 10]
    assert all(v == 1.0 for _, v in rows)
    with pytest.raises(ValueError):
        shuffle_sweep(queries, OracleBackend(gold), embedder, [])
    with pytest.raises(ValueError):
        shuffle_sweep(queries, OracleBackend(gold), embedder, [0])


def test_backend_errors_propagate(embedder):
    class Down:
        name = "down"

        def complete(self, prompt, params):
            raise BackendError("service unavailable")

    with pytest.raises(BackendError):
        expand_entity_set([E("a")], Down(), embedder)
