"""Pointwise LLM scorer abstraction.

A scorer backend maps a rendered prompt (task description, k demonstrations,
one test input) to a probability distribution over the Yes/No label space.
Two backends ship: a deterministic mock built on token overlap, used for all
tests and desk experiments, and an HTTP client for a real model server.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from hashlib import sha256
from math import exp
from typing import Callable, Protocol
from urllib.parse import urljoin

import requests

from .bm25 import tokenize
from .data import Demonstration, Label, LABEL_SPACE, TrainingInput

ENV_SCORER_URL = "DEMORANK_SCORER_URL"

DEFAULT_TASK = (
    "Given a passage and a query, decide whether the passage answers the query."
)
DEFAULT_INPUT_FORMAT = (
    "Passage: {passage}\nQuery: {query}\nDoes the passage answer the query? Answer:"
)
DEFAULT_DEMO_FORMAT = DEFAULT_INPUT_FORMAT + " {label}"


class BackendError(RuntimeError):
    pass


class BackendUnavailableError(BackendError):
    """All retry attempts failed."""


class MalformedResponseError(BackendError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str = DEFAULT_TASK
    demo_format: str = DEFAULT_DEMO_FORMAT
    input_format: str = DEFAULT_INPUT_FORMAT
    separator: str = "\n\n"

    def __post_init__(self) -> None:
        for name, fmt, holes in (
            ("demo_format", self.demo_format, ("{query}", "{passage}", "{label}")),
            ("input_format", self.input_format, ("{query}", "{passage}")),
        ):
            for hole in holes:
                if fmt.count(hole) != 1:
                    raise ValueError(f"{name} must contain {hole} exactly once")
        if "{label}" in self.input_format:
            raise ValueError("input_format must not contain {label}")

    def render(self, request: "ScoreRequest") -> str:
        parts = [self.task_description]
        for d in request.demos:
            parts.append(self.demo_format.format(
                query=d.query.text, passage=d.passage.text, label=d.label.value))
        parts.append(self.input_format.format(
            query=request.input_query, passage=request.input_passage))
        return self.separator.join(parts)


@dataclass(frozen=True)
class ScoreRequest:
    template: PromptTemplate
    demos: tuple[Demonstration, ...]
    input_query: str
    input_passage: str
    label_space: tuple[str, str] = LABEL_SPACE

    def digest(self) -> str:
        payload = self.template.render(self) + "\x1f" + "\x1f".join(self.label_space)
        return sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LabelDistribution:
    p_yes: float
    p_no: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_yes <= 1.0 and 0.0 <= self.p_no <= 1.0):
            raise ValueError(f"probabilities out of range: {self.p_yes}, {self.p_no}")
        if abs(self.p_yes + self.p_no - 1.0) > 1e-9:
            raise ValueError(f"distribution does not sum to 1: {self.p_yes} + {self.p_no}")

    @classmethod
    def from_unnormalized(cls, yes: float, no: float) -> "LabelDistribution":
        if yes < 0 or no < 0:
            raise MalformedResponseError(f"negative mass: yes={yes} no={no}")
        total = yes + no
        if total <= 0:
            raise MalformedResponseError("zero total mass over the label space")
        return cls(yes / total, no / total)

    def p(self, label: Label) -> float:
        return self.p_yes if label is Label.YES else self.p_no


class ScorerBackend(Protocol):
    def distribution(self, request: ScoreRequest) -> LabelDistribution: ...


# ---------------------------------------------------------------------------
# Mock backend


@lru_cache(maxsize=1 << 17)
def _word_set(text: str) -> frozenset[str]:
    return frozenset(tokenize(text))


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class MockScorerWeights:
    rel: float = 2.0
    div: float = 1.0
    bal: float = 1.0
    raw_scale: float = 2.0
    offset: float = -1.0
    relevance: float = 3.0


class MockScorer:
    """Deterministic stand-in for an LLM relevance scorer.

    p_yes = sigmoid(raw_scale * raw + offset + relevance * tr * overlap) where
    raw = rel * relevance_of_demos + div * demo_diversity + bal * label_balance,
    overlap is the query-passage Jaccard similarity, and tr is +1 when the pair
    is truly relevant (ground-truth oracle when available, otherwise an overlap
    threshold) and -1 otherwise.  Invariant under demonstration permutation.
    """

    def __init__(self, weights: MockScorerWeights = MockScorerWeights(),
                 relevance_fn: Callable[[str, str], bool | None] | None = None,
                 relevance_threshold: float = 0.2) -> None:
        self.weights = weights
        self.relevance_fn = relevance_fn
        self.relevance_threshold = relevance_threshold

    def distribution(self, request: ScoreRequest) -> LabelDistribution:
        w = self.weights
        input_words = _word_set(f"{request.input_query} {request.input_passage}")
        demos = request.demos
        m = len(demos)

        rel = 0.0
        if m:
            rel = sum(
                _jaccard(_word_set(f"{d.query.text} {d.passage.text}"), input_words)
                for d in demos
            ) / m

        div = 0.0
        if m > 1:
            qsets = [_word_set(d.query.text) for d in demos]
            acc = 0.0
            for j in range(m):
                for l in range(j + 1, m):
                    acc += 1.0 - _jaccard(qsets[j], qsets[l])
            div = 2.0 * acc / (m * (m - 1))

        bal = 0.0
        if m:
            yes = sum(1 for d in demos if d.label is Label.YES)
            bal = 1.0 - abs(yes - (m - yes)) / m

        raw = w.rel * rel + w.div * div + w.bal * bal
        overlap = _jaccard(_word_set(request.input_query), _word_set(request.input_passage))
        truly_relevant = None
        if self.relevance_fn is not None:
            truly_relevant = self.relevance_fn(request.input_query, request.input_passage)
        if truly_relevant is None:
            truly_relevant = overlap > self.relevance_threshold
        tr = 1.0 if truly_relevant else -1.0

        p_yes = _sigmoid(w.raw_scale * raw + w.offset + w.relevance * tr * overlap)
        return LabelDistribution(p_yes, 1.0 - p_yes)


# ---------------------------------------------------------------------------
# HTTP backend

SCORE_PATH = "/v1/score"


class HttpScorer:
    """Client for a scorer server speaking the /v1/score JSON protocol.

    Retries timeouts, connection failures, non-2xx statuses, and malformed
    bodies with exponential backoff plus jitter; after `max_retries` attempts
    raises BackendUnavailableError.  A semaphore bounds in-flight requests.
    """

    def __init__(self, base_url: str, timeout: float = 10.0, max_retries: int = 3,
                 backoff_base: float = 0.5, max_in_flight: int = 8,
                 session: requests.Session | None = None) -> None:
        if max_retries < 1:
            raise ValueError("max_retries must be at least 1")
        self.base_url = base_url
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def _url(self) -> str:
        return urljoin(self.base_url, SCORE_PATH)

    @staticmethod
    def _body(request: ScoreRequest) -> dict:
        return {
            "task_description": request.template.task_description,
            "demonstrations": [
                {"query": d.query.text, "passage": d.passage.text, "label": d.label.value}
                for d in request.demos
            ],
            "input": {"query": request.input_query, "passage": request.input_passage},
            "label_space": list(request.label_space),
        }

    def _parse(self, resp: requests.Response, request: ScoreRequest) -> LabelDistribution:
        try:
            obj = resp.json()
            p = obj["p"]
            yes = float(p[request.label_space[0]])
            no = float(p[request.label_space[1]])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"bad response body: {exc}") from exc
        return LabelDistribution.from_unnormalized(yes, no)

    def distribution(self, request: ScoreRequest) -> LabelDistribution:
        body = self._body(request)
        url = self._url()
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay + random.uniform(0, 0.1 * delay))
            try:
                with self._gate:
                    resp = self._session.post(url, json=body, timeout=self.timeout)
                if not 200 <= resp.status_code < 300:
                    last_err = BackendError(f"status {resp.status_code}")
                    continue
                return self._parse(resp, request)
            except MalformedResponseError as exc:
                last_err = exc
            except requests.RequestException as exc:
                last_err = exc
        raise BackendUnavailableError(
            f"scorer at {url} failed after {self.max_retries} attempts "
            f"(query={request.input_query[:60]!r}): {last_err}"
        ) from last_err


def resolve_scorer_url(configured: str | None) -> str | None:
    return os.environ.get(ENV_SCORER_URL) or configured


# ---------------------------------------------------------------------------
# Cache


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0


class ScoreCache:
    """Thread-safe map from request digest to (p_yes, p_no)."""

    def __init__(self) -> None:
        self._store: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()
        self.stats = CacheStats()

    def __len__(self) -> int:
        return len(self._store)

    def lookup(self, digest: str) -> tuple[float, float] | None:
        with self._lock:
            got = self._store.get(digest)
            if got is None:
                self.stats.misses += 1
            else:
                self.stats.hits += 1
            return got

    def store(self, digest: str, dist: LabelDistribution) -> None:
        with self._lock:
            self._store[digest] = (dist.p_yes, dist.p_no)

    def save(self, path) -> None:
        with self._lock:
            snapshot = dict(self._store)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(snapshot, fh)

    def load(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        with self._lock:
            for k, (yes, no) in obj.items():
                self._store[k] = (float(yes), float(no))


class CachedScorer:
    """Read-through cache around any backend; identical values either way."""

    def __init__(self, backend: ScorerBackend, cache: ScoreCache | None = None) -> None:
        self.backend = backend
        self.cache = cache or ScoreCache()

    def distribution(self, request: ScoreRequest) -> LabelDistribution:
        digest = request.digest()
        got = self.cache.lookup(digest)
        if got is not None:
            return LabelDistribution(got[0], got[1])
        dist = self.backend.distribution(request)
        self.cache.store(digest, dist)
        return dist


# ---------------------------------------------------------------------------
# Scoring entry points


def score_list(backend: ScorerBackend, template: PromptTemplate,
               demos, input: TrainingInput) -> float:
    """Normalized probability of the input's gold label given the demo list."""
    request = ScoreRequest(template, tuple(demos), input.query.text, input.passage.text)
    return backend.distribution(request).p(input.gold)


def relevance_score(backend: ScorerBackend, template: PromptTemplate,
                    demos, query, passage) -> float:
    """Probability of Yes for a test pair; the ranking score."""
    request = ScoreRequest(template, tuple(demos), query.text, passage.text)
    return backend.distribution(request).p_yes
