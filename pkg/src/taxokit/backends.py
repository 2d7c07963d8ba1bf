"""Chat-completion backends and the strict parsers for their two answer formats.

Three backends share one contract (``complete(prompt, params) -> str``):

* :class:`RemoteChatBackend` speaks an OpenAI-style HTTP protocol,
* :class:`OracleBackend` answers from a hidden gold taxonomy with tunable noise,
* :class:`ReplayBackend` returns canned answers keyed by prompt hash.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import httpx
import numpy as np

from .embedding import EmbeddingBackend, cosine_similarity, embed_many
from .errors import BackendError, ConfigError, ParseEmpty
from .instructions import (
    EXPANSION_PREFIX,
    PARENT_PREFIX,
    PARENT_QUERY,
    SET_EXPAND_QUERY,
    TAXO_EXPAND_INSTRUCTION,
    InstructionTuple,
    Task,
)
from .rng import derived_rng
from .taxonomy import Entity, Taxonomy, TaxonomyError, as_entity, normalize

log = logging.getLogger(__name__)

API_KEY_ENV = "TAXO_API_KEY"
BASE_URL_ENV = "TAXO_BASE_URL"


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 256
    rng_seed: int | None = None

    def __post_init__(self) -> None:
        if not (self.temperature >= 0 and math.isfinite(self.temperature)):
            raise ValueError("temperature must be a finite number >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


DEFAULT_DECODING: dict[Task, DecodingParams] = {
    Task.PARENT_GEN: DecodingParams(0.0, 64),
    Task.TAXO_EXPAND: DecodingParams(0.0, 64),
    Task.SET_EXPAND: DecodingParams(0.7, 1024),
}


@runtime_checkable
class ChatBackend(Protocol):
    name: str

    def complete(self, prompt: InstructionTuple, params: DecodingParams) -> str: ...


# -- response parsing ---------------------------------------------------------

class Match(str, enum.Enum):
    EXACT = "Exact"
    FALLBACK = "Fallback"


_EXPANSION_PREFIX_RE = re.compile(r"the expanded entities are\s*:?", re.IGNORECASE)
_PARENT_PREFIX_RE = re.compile(r"the parent class is\s*:?", re.IGNORECASE)
_SPLIT_RE = re.compile(r"[,;\n]")
_MARKER_RE = re.compile(r"^(?:[-*•·]+\s*|\(?\d{1,3}[.)]\s*(?=\D))")
_QUOTES = "\"'`“”‘’«»"
_CONJ_RE = re.compile(r"^(?:and|or)\s+", re.IGNORECASE)


def _clean_item(item: str) -> tuple[str, bool]:
    """Strip bullets, numbering, quotes, conjunctions and end punctuation until stable."""
    marked = False
    prev = None
    s = item
    while s != prev:
        prev = s
        s = s.strip()
        m = _MARKER_RE.match(s)
        if m:
            s = s[m.end():]
            marked = True
        s = s.strip(_QUOTES)
        s = _CONJ_RE.sub("", s)
        s = s.rstrip(".!?")
    return s, marked


def parse_expansion_response(text: str) -> list[Entity]:
    """Extract the expanded entities from a model answer.

    Raises :class:`ParseEmpty` when nothing list-like is found, e.g. for a
    refusal sentence.
    """
    m = _EXPANSION_PREFIX_RE.search(text)
    body = text[m.end():] if m else text
    raw_items = _SPLIT_RE.split(body)
    items = []
    any_marker = False
    for raw in raw_items:
        cleaned, marked = _clean_item(raw)
        any_marker |= marked
        if cleaned.strip():
            items.append(cleaned)
    if m is None and len(items) == 1 and not any_marker and body.strip().endswith((".", "!", "?")):
        raise ParseEmpty("response is a sentence, not an entity list")
    out: dict[Entity, None] = {}
    for it in items:
        out.setdefault(Entity(it), None)
    if not out:
        raise ParseEmpty("no entities found in response")
    return list(out)


def _parent_remainder(text: str) -> str:
    m = _PARENT_PREFIX_RE.search(text)
    body = text[m.end():] if m else text
    for line in body.splitlines():
        if line.strip():
            return line.strip().strip(_QUOTES).strip()
    return ""


def parse_generated_parent(text: str) -> Entity:
    """The class name from a ParentGen answer (no candidate list to match against)."""
    rem = _parent_remainder(text).rstrip(".").strip().strip(_QUOTES)
    if not rem:
        raise ParseEmpty("no parent class in response")
    return Entity(rem)


def parse_parent_response(
    text: str, candidates: Iterable[Entity], backend: EmbeddingBackend
) -> tuple[Entity, Match]:
    """Map a TaxoExpand answer onto one of the candidates.

    An exact (normalized) match wins; otherwise the candidate whose embedding is
    closest to the answer text is returned, so the result is always a candidate.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("no candidates to match against")
    rem = _parent_remainder(text)
    if not rem.rstrip(".").strip():
        raise ParseEmpty("empty parent class in response")
    by_norm: dict[str, Entity] = {}
    for c in cands:
        by_norm.setdefault(normalize(c.surface), c)
    for variant in (rem, rem.rstrip(".")):
        hit = by_norm.get(normalize(variant))
        if hit is not None:
            return hit, Match.EXACT
    vecs = embed_many(backend, [normalize(rem.rstrip("."))] + [normalize(c.surface) for c in cands])
    scores = [cosine_similarity(vecs[0], v) for v in vecs[1:]]
    best = min(range(len(cands)), key=lambda i: (-scores[i], cands[i].norm))
    return cands[best], Match.FALLBACK


# -- oracle -------------------------------------------------------------------

def _template_parts(template: str, placeholder: str) -> tuple[str, str]:
    pre, _, post = template.partition("{" + placeholder + "}")
    return pre, post


_PQ_PRE, _PQ_POST = _template_parts(PARENT_QUERY, "entities")
_TI_PRE, _TI_POST = _template_parts(TAXO_EXPAND_INSTRUCTION, "candidates")
_SQ_PRE, _SQ_REST = _template_parts(SET_EXPAND_QUERY, "parent")
_SQ_MID, _SQ_POST = _template_parts(_SQ_REST, "seeds")


def _strip_frame(text: str, pre: str, post: str, what: str) -> str:
    if not (text.startswith(pre) and text.endswith(post)) or len(text) < len(pre) + len(post):
        raise BackendError(f"oracle cannot read {what}: {text[:80]!r}")
    return text[len(pre): len(text) - len(post)]


def _permutation_rank(order: Sequence[str]) -> int:
    rest = sorted(order)
    rank = 0
    for i, x in enumerate(order):
        j = rest.index(x)
        rank += j * math.factorial(len(order) - 1 - i)
        rest.pop(j)
    return rank


class OracleBackend:
    """Answers prompts from a gold taxonomy, optionally with calibrated noise.

    * ParentGen: the seeds' lowest common class.
    * TaxoExpand: the gold parent; with probability ``parent_error_rate`` a
      uniformly random other candidate instead.
    * SetExpand: the gold members of the seeds' class at the seeds' depth that
      are not seeds; each independently swapped with probability
      ``sibling_noise_rate`` for a random node outside the class.

    ``max_entities_per_response`` caps a SetExpand answer; the window of class
    members returned then depends on the seed order in the query, so different
    permutations surface different members. All randomness is derived from
    ``(rng_seed, prompt hash)``, never from call order.
    """

    def __init__(
        self,
        gold: Taxonomy,
        parent_error_rate: float = 0.0,
        sibling_noise_rate: float = 0.0,
        rng_seed: int = 0,
        max_entities_per_response: int | None = None,
    ):
        for name, rate in (("parent_error_rate", parent_error_rate), ("sibling_noise_rate", sibling_noise_rate)):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if max_entities_per_response is not None and max_entities_per_response < 1:
            raise ValueError("max_entities_per_response must be >= 1")
        self.gold = gold
        self.parent_error_rate = parent_error_rate
        self.sibling_noise_rate = sibling_noise_rate
        self.rng_seed = rng_seed
        self.max_entities_per_response = max_entities_per_response
        self.name = "oracle"

    def _known_list(self, text: str) -> list[tuple[str, Entity]]:
        """Split a ``, ``-joined list back into gold nodes (names may contain commas)."""
        out = []
        acc = ""
        for piece in text.split(", "):
            acc = f"{acc}, {piece}" if acc else piece
            node = self._lookup(acc)
            if node is not None:
                out.append((acc, node))
                acc = ""
        if acc:
            raise BackendError(f"oracle: unknown entity {acc!r}")
        return out

    def _lookup(self, text: str) -> Entity | None:
        try:
            e = as_entity(text.strip()) if text.strip() else None
        except ValueError:
            return None
        if e is None:
            return None
        return self.gold.get(e) if e in self.gold else None

    def _need(self, text: str) -> Entity:
        node = self._lookup(text)
        if node is None:
            raise BackendError(f"oracle: unknown entity {text!r}")
        return node

    def complete(self, prompt: InstructionTuple, params: DecodingParams) -> str:
        rng = derived_rng(self.rng_seed, prompt.prompt_key())
        if prompt.task is Task.PARENT_GEN:
            seeds = [e for _, e in self._known_list(_strip_frame(prompt.query, _PQ_PRE, _PQ_POST, "query"))]
            return f"{PARENT_PREFIX}{self.gold.display(self._common_class(seeds))}."
        if prompt.task is Task.TAXO_EXPAND:
            entity = self._need(_strip_frame(prompt.query, _PQ_PRE, _PQ_POST, "query"))
            cands = self._known_list(_strip_frame(prompt.instruction, _TI_PRE, _TI_POST, "candidates"))
            gold_parent = self.gold.parent(entity)
            answer = next((txt for txt, e in cands if e == gold_parent), self.gold.display(gold_parent))
            others = [txt for txt, e in cands if e != gold_parent]
            if rng.random() < self.parent_error_rate and others:
                answer = rng.choice(others)
            return f"{PARENT_PREFIX}{answer}."
        if prompt.task is Task.SET_EXPAND:
            body = _strip_frame(prompt.query, _SQ_PRE, _SQ_POST, "query")
            _, sep, seed_text = body.partition(_SQ_MID)
            if not sep:
                raise BackendError("oracle cannot read SetExpand query")
            seeds = [e for _, e in self._known_list(seed_text)]
            return EXPANSION_PREFIX + ", ".join(e.surface for e in self._expand(seeds, rng))
        raise BackendError(f"oracle: unsupported task {prompt.task}")

    def _common_class(self, seeds: list[Entity]) -> Entity:
        anchor = seeds[0]
        for s in seeds[1:]:
            anchor = self.gold.lca(anchor, s)
        if anchor in seeds:
            anchor = self.gold.parent(anchor)
        return anchor

    def _expand(self, seeds: list[Entity], rng) -> list[Entity]:
        try:
            members = full = self.gold.peers(seeds)
        except TaxonomyError as exc:
            raise BackendError(f"oracle: seeds share no gold class ({exc})") from None
        cap = self.max_entities_per_response
        if cap is not None and len(members) > cap:
            offset = (_permutation_rank([s.norm for s in seeds]) * cap) % len(members)
            members = [members[(offset + i) % len(members)] for i in range(cap)]
        if self.sibling_noise_rate == 0.0:
            return members
        excluded = set(full) | {a for s in seeds for a in self.gold.path_to_root(s)}
        outsiders = [n for n in self.gold.nodes if n not in excluded]
        out = []
        for m in members:
            if rng.random() < self.sibling_noise_rate and outsiders:
                out.append(rng.choice(outsiders))
            else:
                out.append(m)
        return out


# -- replay / recording -------------------------------------------------------

class ReplayBackend:
    """Canned responses keyed by prompt hash; unknown prompts are an error."""

    def __init__(self, responses: Mapping[str, str], name: str = "replay"):
        self.responses = dict(responses)
        self.name = name

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayBackend:
        responses: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                    key = rec.get("prompt_hash") or InstructionTuple(
                        rec["instruction"], rec["input"], Task(rec.get("task", Task.PARENT_GEN))
                    ).prompt_key()
                    out = rec["output"]
                except (json.JSONDecodeError, KeyError, ValueError, AttributeError) as exc:
                    raise BackendError(f"{path}: line {lineno}: bad replay record ({exc})") from None
                if not isinstance(out, str):
                    raise BackendError(f"{path}: line {lineno}: replay output must be a string")
                responses[key] = out
        return cls(responses, name=f"replay:{Path(path).name}")

    def complete(self, prompt: InstructionTuple, params: DecodingParams) -> str:
        key = prompt.prompt_key()
        try:
            return self.responses[key]
        except KeyError:
            raise BackendError(
                f"replay has no response for {prompt.task.value} prompt {key[:12]} ({prompt.query[:60]!r})"
            ) from None


class RecordingBackend:
    """Pass-through that remembers every exchange, for building replay files."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.name = f"recording:{inner.name}"
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, prompt: InstructionTuple, params: DecodingParams) -> str:
        out = self.inner.complete(prompt, params)
        rec = {
            "prompt_hash": prompt.prompt_key(),
            "task": prompt.task.value,
            "instruction": prompt.instruction,
            "input": prompt.query,
            "output": out,
        }
        with self._lock:
            self.records.append(rec)
        return out

    def save(self, path: str | Path, merge: bool = False) -> None:
        """Write the exchanges as replay records.

        With ``merge`` the records of an existing file are kept (new answers win)
        and the result is ordered by prompt hash, so reruns rewrite identical bytes.
        """
        path = Path(path)
        records = list(self.records)
        if merge:
            by_key: dict[str, dict] = {}
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    for raw in fh:
                        if raw.strip():
                            rec = json.loads(raw)
                            by_key[rec["prompt_hash"]] = rec
            for rec in records:
                by_key[rec["prompt_hash"]] = rec
            records = [by_key[k] for k in sorted(by_key)]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# -- remote HTTP --------------------------------------------------------------

RETRY_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


class _HttpEndpoint:
    def __init__(
        self,
        base_url: str | None,
        api_key: str | None,
        max_retries: int,
        timeout: float,
        max_in_flight: int,
        backoff: float,
        client: httpx.Client | None,
        sleep: Callable[[float], None],
    ):
        base_url = base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ConfigError(f"no base URL: pass one or set {BASE_URL_ENV}")
        api_key = api_key or os.environ.get(API_KEY_ENV)
        if not api_key:
            raise BackendError(f"missing credentials: set {API_KEY_ENV}")
        if max_retries < 0 or max_in_flight < 1:
            raise ValueError("max_retries must be >= 0 and max_in_flight >= 1")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.retries = 0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()

    def _delay(self, attempt: int, resp: httpx.Response | None) -> float:
        if resp is not None:
            try:
                return max(0.0, float(resp.headers.get("retry-after", "")))
            except ValueError:
                pass
        return self.backoff * (2 ** attempt)

    def post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last = "no attempt made"
        for attempt in range(self.max_retries + 1):
            resp = None
            try:
                with self._slots:
                    resp = self.client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError:
                        raise BackendError(f"malformed response from {url}: body is not JSON") from None
                if resp.status_code not in RETRY_STATUS:
                    raise BackendError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_retries:
                with self._lock:
                    self.retries += 1
                log.warning("retrying %s after %s (attempt %d)", url, last, attempt + 1)
                self.sleep(self._delay(attempt, resp))
        raise BackendError(f"{url} failed after {self.max_retries + 1} attempt(s): {last}")


class RemoteChatBackend:
    """OpenAI-compatible ``/v1/chat/completions`` client.

    Instruction goes out as the system message and query as the user message.
    Transient failures (transport errors, 408/425/429/5xx) are retried up to
    ``max_retries`` times; ``retries`` counts retries actually performed.
    """

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        max_retries: int = 3,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model = model
        self.name = f"remote:{model}"
        self._http = _HttpEndpoint(base_url, api_key, max_retries, timeout, max_in_flight, backoff, client, sleep)

    @property
    def retries(self) -> int:
        return self._http.retries

    def complete(self, prompt: InstructionTuple, params: DecodingParams) -> str:
        body: dict = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.instruction},
                {"role": "user", "content": prompt.query},
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.rng_seed is not None:
            body["seed"] = params.rng_seed
        data = self._http.post("/v1/chat/completions", body)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError("malformed chat response: no choices[0].message.content") from None
        if not isinstance(content, str):
            raise BackendError("malformed chat response: message content is not text")
        return content


class RemoteEmbedder:
    """OpenAI-compatible ``/v1/embeddings`` client (batched)."""

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        dim: int | None = None,
        batch_size: int = 64,
        max_retries: int = 3,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model = model
        self.name = f"remote-embed:{model}"
        self.dim = dim or 0
        self.batch_size = batch_size
        self._http = _HttpEndpoint(base_url, api_key, max_retries, timeout, max_in_flight, backoff, client, sleep)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(texts), self.batch_size):
            chunk = texts[i: i + self.batch_size]
            data = self._http.post("/v1/embeddings", {"model": self.model, "input": chunk})
            try:
                rows = data["data"]
                vecs = [np.asarray(rows[j]["embedding"], dtype=float) for j in range(len(chunk))]
            except (KeyError, IndexError, TypeError, ValueError):
                raise BackendError("malformed embedding response: expected data[i].embedding") from None
            for v in vecs:
                if v.ndim != 1 or not v.size or not np.all(np.isfinite(v)):
                    raise BackendError("malformed embedding response: bad vector")
                if self.dim and v.size != self.dim:
                    raise BackendError(f"embedding dimension changed: {v.size} != {self.dim}")
                self.dim = v.size
            out.extend(vecs)
        return out
