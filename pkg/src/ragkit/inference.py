"""Inference-time reformulation: evidence reordering, within-subset
permutations, likelihood ensembling over a pluggable reader, and the
chunk-level re-ranker.

The reorder places the most relevant documents at the edges of the
context (first j kept in front, next j reversed onto the back, the rest
in the middle) so a position-biased reader keeps sight of them. The
ensemble sums raw reader likelihoods over N permutations; summation
never changes the argmax for an order-insensitive reader.
"""

from __future__ import annotations

import re
import string
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ChunkingPolicy, Document, EvidenceChunk, chunk_document
from .encoder import DOCUMENT, QUERY, EncoderParams, encode
from .errors import DataError, InvariantError
from .index import VectorIndex, search
from .labeler import ChatCompletionClient, HttpOracleConfig, Transport, _requests_transport
from .rng import substream
from .text import content_tokens, tokenize


# ---------------------------------------------------------------------------
# Reordering


@dataclass(frozen=True)
class ReorderedDocs:
    """An edge-packed ordering split into its three subsets.

    order = head + middle + tail. Degenerate marks the single-document
    case where no split exists.
    """

    head: tuple
    middle: tuple
    tail: tuple
    degenerate: bool = False

    @property
    def order(self) -> list:
        return list(self.head) + list(self.middle) + list(self.tail)


def reorder(docs: Sequence, j: int) -> ReorderedDocs:
    """Edge-pack a descending-relevance list.

    Keeps d_1..d_j in front, moves d_{j+1}..d_{2j} reversed to the back,
    and leaves d_{2j+1}..d_k in the middle. A single document is
    returned as-is with the degeneracy flag set.
    """
    docs = list(docs)
    k = len(docs)
    if k == 0:
        raise DataError("cannot reorder an empty document list")
    if k == 1:
        return ReorderedDocs(head=(docs[0],), middle=(), tail=(), degenerate=True)
    if not 1 <= j <= k // 2:
        raise InvariantError(f"subset size {j} out of range [1, {k // 2}] for {k} docs")
    head = tuple(docs[:j])
    tail = tuple(reversed(docs[j:2 * j]))
    middle = tuple(docs[2 * j:])
    return ReorderedDocs(head=head, middle=middle, tail=tail)


def permutations(reordered: ReorderedDocs, n: int, seed: int = 0) -> list[list]:
    """N orderings of the same documents, shuffled within each subset.

    The first element is the edge-packed order itself; later elements
    shuffle head, middle, and tail independently so every document stays
    inside its subset.
    """
    if n < 1:
        raise InvariantError("permutation count must be >= 1")
    rng = substream(seed, "permutations")
    out = [reordered.order]
    for _ in range(n - 1):
        parts = []
        for subset in (reordered.head, reordered.middle, reordered.tail):
            idx = rng.permutation(len(subset))
            parts.extend(subset[i] for i in idx)
        out.append(parts)
    return out


@dataclass(frozen=True)
class OrderingPlan:
    """How to arrange retrieved evidence before reading.

    edge_size defaults to floor(top_k / 3) so head, middle, and tail are
    balanced; num_permutations sets the ensemble width.
    """

    top_k: int = 10
    edge_size: int | None = None
    num_permutations: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise InvariantError("top_k must be >= 1")
        if self.num_permutations < 1:
            raise InvariantError("num_permutations must be >= 1")
        if self.edge_size is not None and self.top_k >= 2:
            if not 1 <= self.edge_size <= self.top_k // 2:
                raise InvariantError(
                    f"edge_size {self.edge_size} out of range [1, {self.top_k // 2}]")

    def effective_edge_size(self, k: int) -> int:
        """Subset size for an actual context of k documents."""
        j = self.edge_size if self.edge_size is not None else max(1, k // 3)
        return max(1, min(j, k // 2)) if k >= 2 else 1


# ---------------------------------------------------------------------------
# Readers


@dataclass(frozen=True)
class ReaderContext:
    """What the reader sees: the question plus ordered evidence texts."""

    question: str
    docs: tuple[str, ...]


class Reader(ABC):
    """Scores candidate answers given an ordered evidence context."""

    @abstractmethod
    def score_answers(self, context: ReaderContext,
                      candidates: Sequence[str]) -> list[float]:
        """One non-negative finite likelihood per candidate."""


def _position_weight(position: int, total: int, middle_weight: float) -> float:
    # thirds of the context: head and tail keep full weight
    edge = -(-total // 3)  # ceil
    if position < edge or position >= total - edge:
        return 1.0
    return middle_weight


class PositionAgnosticReader(Reader):
    """Deterministic mock: likelihood from candidate-token occurrences.

    Order of the context documents never matters, which makes ensembling
    over permutations provably argmax-preserving.
    """

    def __init__(self, base_rate: float = 0.05, bonus: float = 1.0, seed: int = 0):
        self.base_rate = base_rate
        self.bonus = bonus
        self.seed = seed  # part of the interface; scoring is already pure

    def _doc_weight(self, position: int, total: int) -> float:
        return 1.0

    def score_answers(self, context: ReaderContext,
                      candidates: Sequence[str]) -> list[float]:
        doc_tokens = [tokenize(d) for d in context.docs]
        total = len(context.docs)
        scores = []
        for cand in candidates:
            wanted = content_tokens(cand) or tokenize(cand)
            s = self.base_rate
            for pos, toks in enumerate(doc_tokens):
                hits = sum(toks.count(w) for w in set(wanted))
                s += self.bonus * self._doc_weight(pos, total) * hits
            scores.append(s)
        return scores


class PositionBiasedReader(PositionAgnosticReader):
    """Mock with lost-in-the-middle behavior.

    Token hits in the middle third of the context count at middle_weight
    (default 0.5); hits near either edge count fully.
    """

    def __init__(self, base_rate: float = 0.05, bonus: float = 1.0,
                 middle_weight: float = 0.5, seed: int = 0):
        super().__init__(base_rate, bonus, seed)
        if not 0.0 <= middle_weight <= 1.0:
            raise InvariantError("middle_weight must be in [0, 1]")
        self.middle_weight = middle_weight

    def _doc_weight(self, position: int, total: int) -> float:
        return _position_weight(position, total, self.middle_weight)


_READER_PROMPT = (
    "Given the question and the evidence passages, rate how likely each "
    "candidate answer is correct with one number between 0 and 1 per line, "
    "in the candidates' order.\n\nQuestion: {question}\n\nEvidence:\n{evidence}"
    "\n\nCandidates:\n{candidates}\n\nReply with one number per line."
)


class HttpChatReader(Reader):
    """Reader backed by a chat-completion endpoint.

    Shares the transport configuration (retries, backoff, concurrency
    cap, audit trail) with the HTTP labeling oracle. Malformed replies
    raise, which the ensemble treats as a failed permutation.
    """

    def __init__(self, config: HttpOracleConfig,
                 transport: Transport = _requests_transport,
                 sleeper=time.sleep):
        self.config = config
        self._client = ChatCompletionClient(config, transport, sleeper)

    def score_answers(self, context: ReaderContext,
                      candidates: Sequence[str]) -> list[float]:
        prompt = _READER_PROMPT.format(
            question=context.question,
            evidence="\n".join(f"[{i + 1}] {d}" for i, d in enumerate(context.docs)),
            candidates="\n".join(candidates))
        reply = self._client.complete(prompt)
        numbers = re.findall(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?", reply)
        if len(numbers) < len(candidates):
            raise DataError(f"reader reply has {len(numbers)} scores for "
                            f"{len(candidates)} candidates")
        scores = [float(x) for x in numbers[: len(candidates)]]
        if any(not np.isfinite(s) or s < 0 for s in scores):
            raise DataError("reader likelihoods must be finite and non-negative")
        return scores


# ---------------------------------------------------------------------------
# Ensembling


@dataclass(frozen=True)
class AnswerScore:
    candidate: str
    score: float
    per_permutation: tuple[float, ...]

    def __post_init__(self):
        if abs(self.score - sum(self.per_permutation)) > 1e-9:
            raise InvariantError("ensembled score must equal the sum of "
                                 "per-permutation scores")


@dataclass
class EnsembleResult:
    ranked: list[AnswerScore]
    failed_permutations: int
    permutation_status: list[bool]  # per input permutation, in order

    @property
    def best(self) -> str:
        return self.ranked[0].candidate


def ensemble_answer(question: str, candidates: Sequence[str],
                    perms: Sequence[Sequence[str]], reader: Reader,
                    parallelism: int = 4,
                    normalized: bool = False) -> EnsembleResult:
    """Sum reader likelihoods over permutations and rank the candidates.

    A reader failure on one permutation skips that permutation for all
    candidates and is counted; scores come from the successful calls.
    Ties rank by candidate order. normalized divides the reported score
    by the successful-permutation count, which cannot change the argmax.
    """
    if not candidates:
        raise InvariantError("need at least one candidate answer")
    if not perms:
        raise InvariantError("need at least one permutation")
    if parallelism < 1:
        raise InvariantError("parallelism must be >= 1")

    def call(perm: Sequence[str]) -> list[float] | None:
        try:
            scores = reader.score_answers(
                ReaderContext(question=question, docs=tuple(perm)), candidates)
        except Exception:
            return None
        if len(scores) != len(candidates):
            raise InvariantError("reader returned a wrong-length score list")
        if any(not np.isfinite(s) or s < 0 for s in scores):
            raise InvariantError("reader likelihoods must be finite and >= 0")
        return [float(s) for s in scores]

    if parallelism == 1 or len(perms) == 1:
        rows = [call(p) for p in perms]
    else:
        with ThreadPoolExecutor(max_workers=min(parallelism, len(perms))) as pool:
            rows = list(pool.map(call, perms))

    status = [row is not None for row in rows]
    good = [row for row in rows if row is not None]
    if not good:
        raise DataError("reader failed on every permutation")

    denom = len(good) if normalized else 1
    scored = []
    for ci, cand in enumerate(candidates):
        per = tuple(row[ci] / denom for row in good)
        scored.append(AnswerScore(candidate=cand, score=float(sum(per)),
                                  per_permutation=per))
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return EnsembleResult(ranked=[scored[i] for i in ranked],
                          failed_permutations=len(rows) - len(good),
                          permutation_status=status)


# ---------------------------------------------------------------------------
# Chunk re-ranking


def rerank_chunks(question: str, top_docs: Sequence[Document],
                  policy: ChunkingPolicy,
                  scorer_params: EncoderParams) -> list[tuple[EvidenceChunk, float]]:
    """Score every chunk of the top documents with the re-ranker encoder.

    The scorer is a separately checkpointed encoder (same architecture
    and loss as the retriever); output is descending by score, ties by
    document then chunk position. Chunks keep their provenance offsets.
    """
    if not top_docs:
        raise DataError("no documents to re-rank")
    q = encode(scorer_params, question, QUERY)
    rows: list[tuple[EvidenceChunk, float]] = []
    for doc in top_docs:
        for chunk in chunk_document(doc, policy):
            score = float(q @ encode(scorer_params, chunk.text, DOCUMENT))
            rows.append((chunk, score))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i][1], i))
    return [rows[i] for i in order]


# ---------------------------------------------------------------------------
# End-to-end answering


def answer(question: str, candidates: Sequence[str], index: VectorIndex,
           texts: Mapping[str, str], params: EncoderParams, plan: OrderingPlan,
           reader: Reader, mode: str = "docs",
           documents: Mapping[str, Document] | None = None,
           chunking: ChunkingPolicy = ChunkingPolicy(),
           rerank_params: EncoderParams | None = None,
           parallelism: int = 4) -> tuple[EnsembleResult, dict]:
    """Retrieve, reorder, permute, ensemble; returns the ranking and a trace.

    mode "docs" reads whole retrieved documents; mode "chunks" re-ranks
    the retrieved documents' chunks (with rerank_params, a separately
    trained scorer, falling back to the retriever) and reads the top
    chunks instead. The trace records retrieved ids, the edge-packed
    order, every permutation, and each reader call's likelihoods.
    """
    if index.matrix.shape[0] == 0:
        raise DataError("no evidence: the index is empty")
    if mode not in ("docs", "chunks"):
        raise DataError(f"unknown answer mode {mode!r}")
    if len(set(candidates)) != len(candidates):
        raise DataError("candidate answers must be distinct")

    result = search(index, encode(params, question, QUERY), k=plan.top_k,
                    query_id=question)
    retrieved = list(result.ranked)
    ids = [doc_id for doc_id, _ in retrieved]

    if mode == "docs":
        items = []
        for doc_id in ids:
            if doc_id not in texts:
                raise DataError(f"retrieved id {doc_id!r} has no text")
            items.append((doc_id, texts[doc_id]))
    else:
        if documents is None:
            raise DataError("chunks mode needs the documents mapping")
        docs = []
        for doc_id in ids:
            if doc_id not in documents:
                raise DataError(f"retrieved id {doc_id!r} has no document")
            docs.append(documents[doc_id])
        scorer = rerank_params if rerank_params is not None else params
        ranked_chunks = rerank_chunks(question, docs, chunking, scorer)
        top = ranked_chunks[: plan.top_k]
        items = [(f"{c.doc_id}:{c.start}-{c.end}", c.text) for c, _ in top]

    j = plan.effective_edge_size(len(items))
    reordered = reorder(items, j)
    perms = permutations(reordered, plan.num_permutations, plan.seed)
    perm_texts = [[text for _, text in perm] for perm in perms]

    ensemble = ensemble_answer(question, candidates, perm_texts, reader,
                               parallelism=parallelism)

    by_candidate = {a.candidate: a for a in ensemble.ranked}
    in_input_order = [by_candidate[c] for c in candidates]
    likelihood_rows = []
    per_perm_index = 0
    for status in ensemble.permutation_status:
        if status:
            likelihood_rows.append(
                [a.per_permutation[per_perm_index] for a in in_input_order])
            per_perm_index += 1
        else:
            likelihood_rows.append(None)

    trace = {
        "question": question,
        "mode": mode,
        "retrieved": [[doc_id, score] for doc_id, score in retrieved],
        "edge_size": j,
        "degenerate": reordered.degenerate,
        "r1": [item_id for item_id, _ in reordered.order],
        "permutations": [[item_id for item_id, _ in perm] for perm in perms],
        "permutation_status": ensemble.permutation_status,
        "likelihoods": likelihood_rows,
        "candidates": list(candidates),
        "ranking": [[a.candidate, a.score] for a in ensemble.ranked],
    }
    return ensemble, trace


# ---------------------------------------------------------------------------
# Exact-match accuracy


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Standard open-domain QA normalization: lowercase, strip articles
    and punctuation, collapse whitespace."""
    text = text.lower()
    text = _ARTICLES.sub(" ", text)
    text = text.translate(_PUNCT_TABLE)
    return " ".join(text.split())


def exact_match(prediction: str, gold: str) -> bool:
    return normalize_answer(prediction) == normalize_answer(gold)


def exact_match_rate(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise DataError("prediction and gold lists differ in length")
    if not predictions:
        raise DataError("nothing to score")
    hits = sum(exact_match(p, g) for p, g in zip(predictions, golds))
    return hits / len(predictions)
