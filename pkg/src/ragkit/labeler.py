"""Relevance-label oracle: question generation, evidence identification,
and evidence scoring behind one interface.

Two implementations ship: a deterministic mock whose decisions are
checkable by brute force (content-token overlap with fixed thresholds),
and an HTTP chat-completion client with retries, bounded parallelism,
and an audit log. Every oracle invocation charges a shared budget, so
annotation cost is observable and enforceable.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from importlib import resources
from string import Formatter
from typing import Callable, Sequence

import numpy as np

from .clustering import Embedder, embed_text
from .data import ChunkingPolicy, Document, EvidenceChunk, SupportLevel, chunk_document
from .errors import (
    BudgetExhaustedError,
    DataError,
    InvariantError,
    OracleTransportError,
)
from .text import STRUCTURE_WORDS, content_tokens, tokenize, word_spans

log = logging.getLogger(__name__)


class OracleBudget:
    """Call allowance shared across oracle invocations. Thread-safe.

    max_calls None means unlimited. charge() admits exactly one call and
    raises once the allowance is spent, so calls_used never exceeds
    max_calls when bounded.
    """

    def __init__(self, max_calls: int | None = None):
        if max_calls is not None and max_calls < 0:
            raise InvariantError("max_calls must be >= 0 or None")
        self.max_calls = max_calls
        self._calls_used = 0
        self._lock = threading.Lock()

    @property
    def calls_used(self) -> int:
        return self._calls_used

    @property
    def remaining(self) -> int | None:
        if self.max_calls is None:
            return None
        return self.max_calls - self._calls_used

    def charge(self) -> None:
        with self._lock:
            if self.max_calls is not None and self._calls_used >= self.max_calls:
                raise BudgetExhaustedError(
                    f"oracle budget of {self.max_calls} calls exhausted")
            self._calls_used += 1


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def placeholders(self) -> set[str]:
        return {fname for _, fname, _, _ in Formatter().parse(self.text) if fname}

    def render(self, **substitutions: str) -> str:
        missing = sorted(self.placeholders() - substitutions.keys())
        if missing:
            raise InvariantError(
                f"template {self.name!r} missing substitutions: {', '.join(missing)}")
        return self.text.format(**substitutions)


def load_template(name: str) -> PromptTemplate:
    """Load a packaged prompt template by file stem."""
    root = resources.files("ragkit").joinpath("templates")
    return PromptTemplate(name, root.joinpath(f"{name}.txt").read_text("utf-8"))


class LabelerOracle(ABC):
    """Three-call relevance oracle.

    The public methods charge the budget (exactly one call each) and
    accumulate cost before delegating to the implementation hooks, so
    counters stay correct for every subclass.
    """

    cost_per_call: float = 0.0

    def __init__(self, budget: OracleBudget | None = None):
        self.budget = budget if budget is not None else OracleBudget()
        self._cost = 0.0
        self._cost_lock = threading.Lock()

    @property
    def calls_used(self) -> int:
        return self.budget.calls_used

    @property
    def cost(self) -> float:
        return self._cost

    def _account(self) -> None:
        self.budget.charge()
        with self._cost_lock:
            self._cost += self.cost_per_call

    def generate_question(self, doc: Document,
                          demonstrations: Sequence[str] = ()) -> tuple[str, EvidenceChunk]:
        self._account()
        question, evidence = self._generate_question(doc, tuple(demonstrations))
        evidence.check_against(doc)
        if not question:
            raise InvariantError(f"oracle produced an empty question for doc {doc.id!r}")
        return question, evidence

    def identify_evidence(self, question: str,
                          doc: Document) -> tuple[EvidenceChunk, SupportLevel]:
        if not question:
            raise DataError("question must be non-empty")
        self._account()
        evidence, support = self._identify_evidence(question, doc)
        evidence.check_against(doc)
        return evidence, support

    def score_evidence(self, question: str, evidence: EvidenceChunk) -> SupportLevel:
        if not question:
            raise DataError("question must be non-empty")
        self._account()
        return self._score_evidence(question, evidence)

    @abstractmethod
    def _generate_question(self, doc, demonstrations): ...

    @abstractmethod
    def _identify_evidence(self, question, doc): ...

    @abstractmethod
    def _score_evidence(self, question, evidence): ...


# ---------------------------------------------------------------------------
# Deterministic mock


def overlap_support(question: str, chunk_text: str) -> SupportLevel:
    """Mock scoring rule: fraction of question content-tokens present in
    the chunk, thresholded at 0.8 (full) and 0.4 (partial)."""
    wanted = set(content_tokens(question))
    if not wanted:
        return SupportLevel.NONE
    ratio = len(wanted & set(tokenize(chunk_text))) / len(wanted)
    if ratio >= 0.8:
        return SupportLevel.FULL
    if ratio >= 0.4:
        return SupportLevel.PARTIAL
    return SupportLevel.NONE


def _first_entity_like(text: str) -> str | None:
    """First capitalized non-structure token, else first numeral token."""
    cores = []
    for start, end in word_spans(text):
        core = text[start:end].strip("\"'()[]{}.,;:!?")
        if core:
            cores.append(core)
    for core in cores:
        if core[0].isupper() and core.lower() not in STRUCTURE_WORDS:
            return core
    for core in cores:
        if any(ch.isdigit() for ch in core):
            return core
    return None


class MockLabeler(LabelerOracle):
    """Pure-function oracle for tests and offline runs.

    Question generation picks the chunk with the most distinct content
    tokens and asks about its first entity-like token; identification
    returns the best-overlap chunk; scoring applies overlap_support.
    Every answer is a deterministic function of (inputs, seed).
    """

    def __init__(self, seed: int = 0, budget: OracleBudget | None = None,
                 chunking: ChunkingPolicy = ChunkingPolicy(),
                 cost_per_call: float = 0.0):
        super().__init__(budget)
        self.seed = seed
        self.chunking = chunking
        self.cost_per_call = cost_per_call

    def _generate_question(self, doc, demonstrations):
        chunks = chunk_document(doc, self.chunking)
        best = max(chunks, key=lambda c: (len(set(content_tokens(c.text))), -c.start))
        entity = _first_entity_like(best.text)
        if entity is None:
            fallback = content_tokens(best.text)
            entity = fallback[0] if fallback else best.text.split()[0]
        return f"What is {entity}?", best

    def _identify_evidence(self, question, doc):
        chunks = chunk_document(doc, self.chunking)
        wanted = set(content_tokens(question))

        def ratio(chunk):
            if not wanted:
                return 0.0
            return len(wanted & set(tokenize(chunk.text))) / len(wanted)

        best = max(chunks, key=lambda c: (ratio(c), -c.start))
        return best, overlap_support(question, best.text)

    def _score_evidence(self, question, evidence):
        return overlap_support(question, evidence.text)


# ---------------------------------------------------------------------------
# HTTP chat-completion client


def parse_support_reply(reply: str) -> SupportLevel | None:
    """Map the first reply line to a support level; None if unparseable.

    Case-insensitive; "no" is checked after "full"/"partial" so phrases
    like "no, partial support" still resolve to partial.
    """
    first = reply.strip().splitlines()[0].lower() if reply.strip() else ""
    if "full" in first:
        return SupportLevel.FULL
    if "partial" in first:
        return SupportLevel.PARTIAL
    if "no" in first:
        return SupportLevel.NONE
    return None


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float) -> dict:
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        resp.raise_for_status()
        return resp.json()
    except requests.RequestException as exc:
        raise OracleTransportError(str(exc)) from exc


@dataclass(frozen=True)
class HttpOracleConfig:
    endpoint: str
    model: str
    api_key_env: str = "RAGKIT_API_KEY"
    max_retries: int = 3
    backoff_base: float = 1.0
    max_in_flight: int = 4
    timeout: float = 30.0
    audit_path: str | None = None
    cost_per_call: float = 0.0

    def __post_init__(self):
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise InvariantError("max_retries must be >= 0 and max_in_flight >= 1")


Transport = Callable[[str, dict, dict, float], dict]


class ChatCompletionClient:
    """JSON chat-completion POST with retries and an audit trail.

    Retries with exponential backoff (base doubling per attempt), caps
    concurrent requests with a semaphore, and appends every exchange to
    an audit JSONL. The transport and sleeper are injectable so tests can
    run without a network or a clock. Shared by the labeling oracle and
    the reader client.
    """

    def __init__(self, config: HttpOracleConfig,
                 transport: Transport = _requests_transport,
                 sleeper: Callable[[float], None] = time.sleep):
        self.config = config
        self._transport = transport
        self._sleep = sleeper
        self._sema = threading.BoundedSemaphore(config.max_in_flight)
        self._audit_lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.config.model,
                   "messages": [{"role": "user", "content": prompt}]}
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                with self._sema:
                    response = self._transport(self.config.endpoint, headers,
                                               payload, self.config.timeout)
                reply = response["choices"][0]["message"]["content"]
            except OracleTransportError as exc:
                last = exc
                log.warning("oracle transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            except (KeyError, IndexError, TypeError) as exc:
                raise OracleTransportError(f"malformed oracle response: {exc}") from exc
            self._audit(prompt, reply, attempt)
            return reply
        raise OracleTransportError(
            f"oracle unreachable after {self.config.max_retries + 1} attempts: {last}")

    def _audit(self, prompt: str, reply: str, attempt: int) -> None:
        if self.config.audit_path is None:
            return
        record = json.dumps({"prompt": prompt, "reply": reply, "attempt": attempt},
                            ensure_ascii=False)
        with self._audit_lock:
            with open(self.config.audit_path, "a", encoding="utf-8") as fh:
                fh.write(record + "\n")


class HttpChatLabeler(LabelerOracle):
    """Chat-completion-style oracle over JSON POST."""

    def __init__(self, config: HttpOracleConfig, budget: OracleBudget | None = None,
                 transport: Transport = _requests_transport,
                 sleeper: Callable[[float], None] = time.sleep,
                 chunking: ChunkingPolicy = ChunkingPolicy()):
        super().__init__(budget)
        self.config = config
        self.cost_per_call = config.cost_per_call
        self.chunking = chunking
        self.parse_failures = 0
        self._client = ChatCompletionClient(config, transport, sleeper)
        self._templates = {name: load_template(name) for name in
                           ("generate_question", "identify_evidence", "score_evidence")}

    def _complete(self, prompt: str) -> str:
        return self._client.complete(prompt)

    def _note_parse_failure(self, reply: str) -> None:
        self.parse_failures += 1
        log.warning("unparseable oracle reply treated as no support: %r", reply[:80])

    def _locate_span(self, doc: Document, text: str) -> EvidenceChunk | None:
        needle = text.strip()
        if not needle:
            return None
        start = doc.text.find(needle)
        if start < 0:
            return None
        return EvidenceChunk(doc.id, start, start + len(needle), needle)

    def _generate_question(self, doc, demonstrations):
        prompt = self._templates["generate_question"].render(
            demonstrations="\n".join(demonstrations), passage=doc.text)
        reply = self._complete(prompt)
        lines = reply.strip().splitlines()
        question = lines[0].strip() if lines else ""
        evidence = self._locate_span(doc, "\n".join(lines[1:]))
        if not question or evidence is None:
            # evidence not quoted verbatim: fall back to the best-overlap chunk
            self._note_parse_failure(reply)
            chunks = chunk_document(doc, self.chunking)
            question = question or "What is this passage about?"
            wanted = set(content_tokens(question))
            evidence = max(chunks, key=lambda c: (len(wanted & set(tokenize(c.text))), -c.start))
        return question, evidence

    def _identify_evidence(self, question, doc):
        prompt = self._templates["identify_evidence"].render(
            question=question, passage=doc.text)
        reply = self._complete(prompt)
        support = parse_support_reply(reply)
        if support is None:
            self._note_parse_failure(reply)
            support = SupportLevel.NONE
        lines = reply.strip().splitlines()
        evidence = self._locate_span(doc, "\n".join(lines[1:]))
        if evidence is None:
            chunks = chunk_document(doc, self.chunking)
            wanted = set(content_tokens(question))
            evidence = max(chunks, key=lambda c: (len(wanted & set(tokenize(c.text))), -c.start))
        return evidence, support

    def _score_evidence(self, question, evidence):
        prompt = self._templates["score_evidence"].render(
            question=question, passage=evidence.text)
        reply = self._complete(prompt)
        support = parse_support_reply(reply)
        if support is None:
            self._note_parse_failure(reply)
            support = SupportLevel.NONE
        return support


# ---------------------------------------------------------------------------
# Hard-negative mining


def mine_negative_candidates(positive, pool: Sequence[EvidenceChunk], k: int,
                             embedder: Embedder = embed_text) -> list[EvidenceChunk]:
    """Top-k pool chunks by embedding cosine to the positive evidence.

    The pool must not contain the positive span itself (same document and
    offsets); exact text duplicates from other spans are fine and rank
    first. Ties break toward earlier pool order. Callers then score the
    survivors with the oracle and discard any labeled full support.
    """
    if k < 1:
        raise InvariantError("k must be >= 1")
    ev = positive.evidence
    for chunk in pool:
        if (chunk.doc_id, chunk.start, chunk.end) == (ev.doc_id, ev.start, ev.end):
            raise DataError("negative pool contains the positive evidence span itself")
    if not pool:
        return []
    anchor = embedder(ev.text)
    sims = np.array([float(anchor @ embedder(c.text)) for c in pool])
    order = sorted(range(len(pool)), key=lambda i: (-sims[i], i))
    return [pool[i] for i in order[:k]]


def score_and_filter_negatives(question: str, candidates: Sequence[EvidenceChunk],
                               oracle: LabelerOracle) -> list[tuple[EvidenceChunk, SupportLevel]]:
    """Oracle-score candidates, keeping partial/no-support as negatives."""
    kept = []
    for chunk in candidates:
        support = oracle.score_evidence(question, chunk)
        if support is not SupportLevel.FULL:
            kept.append((chunk, support))
    return kept
