"""Seeded synthetic corpora for tests, demos, and acceptance runs.

Three task builders with controlled structure:
  separable_task: each query shares one unique rare token with its gold
    document, nothing else; retrieval is learnable and exactly checkable.
  graded_task: topic families give full/partial/no evidence levels, so
    the pairwise loss has real order constraints to enforce.
  adaptive_task: three question patterns, two of them warmup-trained,
    for exercising confidence-routed labeling.

Rare tokens are drawn so their hashed unigram buckets never collide
with each other or with template words, keeping the intended signal
clean at the configured feature dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import (
    ChunkingPolicy,
    Corpus,
    Document,
    EvidenceChunk,
    Source,
    SupportLevel,
    TrainingTuple,
    chunk_document,
    save_corpus,
)
from .encoder import DOCUMENT, QUERY, EncoderConfig, EncoderParams, encode
from .index import build as build_index, recall_at_k, search
from .losses import LossConfig
from .rng import stable_hash, substream
from .training import TrainSchedule

_ONSETS = ["vex", "lor", "mek", "tas", "rin", "dul", "pol", "zan"]
_MIDS = ["ar", "ul", "es", "on", "ia", "eth", "or", "um"]
_CODAS = ["ite", "ine", "ase", "olt", "ium", "ene", "ard", "ex"]

_FILLERS = [
    "stone", "river", "valley", "trade", "market", "harvest", "winter",
    "summer", "road", "bridge", "tower", "sound", "grain", "cloth", "iron",
    "copper", "timber", "salt", "honey", "wax", "leather", "pottery",
    "glass", "rope", "sail", "cart", "mill", "forge", "quarry", "orchard",
    "meadow", "fence", "granary", "cellar", "lantern", "ledger", "scroll",
    "anvil", "loom", "kiln",
]

_TASK_ENCODER = EncoderConfig(dim=256, feature_dim=16384, shared_projection=True)


def _unique_tokens(feature_dim: int, used_buckets: set[int]) -> Iterator[str]:
    """Word-like tokens whose unigram hash buckets are all distinct."""
    i = 0
    while True:
        base = _ONSETS[i % 8] + _MIDS[(i // 8) % 8] + _CODAS[(i // 64) % 8]
        rep = i // 512
        tok = base if rep == 0 else f"{base}{rep}"
        i += 1
        bucket = stable_hash("u:" + tok, feature_dim)
        if bucket in used_buckets:
            continue
        used_buckets.add(bucket)
        yield tok


def _reserve(words, feature_dim: int) -> set[int]:
    return {stable_hash("u:" + w.lower(), feature_dim) for w in words}


@dataclass
class RetrievalTask:
    corpus: Corpus
    train_tuples: list[TrainingTuple]
    eval_pairs: list[tuple[str, str]]  # (question, gold doc id)
    encoder_cfg: EncoderConfig
    held_out_triples: list[tuple[str, str, str, str]] = field(default_factory=list)
    schedule: TrainSchedule | None = None
    loss_cfg: LossConfig | None = None


def _whole_chunk(doc: Document) -> EvidenceChunk:
    chunks = chunk_document(doc, ChunkingPolicy())
    if len(chunks) != 1:
        raise AssertionError(f"synthetic doc {doc.id} should be a single chunk")
    return chunks[0]


def separable_task(num_docs: int = 500, num_queries: int = 200,
                   train_fraction: float = 0.8, seed: int = 0) -> RetrievalTask:
    """Corpus where query i and document i share one unique rare token.

    Documents are identical apart from the rare token. Holding the
    surrounding context fixed means the shared context contributes the
    same similarity to every candidate, so the only learnable and
    checkable signal is the query-gold token match itself.
    """
    if num_queries > num_docs:
        raise ValueError("need at least one document per query")
    rng = substream(seed, "separable")
    template_words = ("is a kind of stone found near the river traders value "
                      "salt and wax beside it what").split()
    used = _reserve(template_words, _TASK_ENCODER.feature_dim)
    tokens = _unique_tokens(_TASK_ENCODER.feature_dim, used)
    rares = [next(tokens) for _ in range(num_docs)]

    docs = []
    for i, rare in enumerate(rares):
        text = (f"{rare.capitalize()} is a kind of stone found near the river. "
                f"Traders value salt and wax beside it.")
        docs.append(Document(id=f"doc{i:04d}", title=rare, text=text,
                             source=Source.SYNTHETIC))
    corpus = Corpus(docs)

    num_train = int(round(num_queries * train_fraction))
    tuples: list[TrainingTuple] = []
    eval_pairs: list[tuple[str, str]] = []
    for qi in range(num_queries):
        question = f"what is {rares[qi]}?"
        if qi < num_train:
            positive = _whole_chunk(docs[qi])
            tuples.append(TrainingTuple(question=question, doc_id=docs[qi].id,
                                        evidence=positive, support=SupportLevel.FULL))
            others = [int(j) for j in rng.choice(num_docs, size=5, replace=False)
                      if j != qi][:3]
            for j in others:
                tuples.append(TrainingTuple(question=question, doc_id=docs[j].id,
                                            evidence=_whole_chunk(docs[j]),
                                            support=SupportLevel.NONE))
        else:
            eval_pairs.append((question, docs[qi].id))
    return RetrievalTask(corpus, tuples, eval_pairs, _TASK_ENCODER)


def graded_task(num_topics: int = 24, train_entities: int = 5,
                held_out_entities: int = 3, seed: int = 0) -> RetrievalTask:
    """Topic-family corpus with full/partial/no evidence per query.

    Every entity's document carries its topic's vocabulary, so another
    entity of the same topic is a topic-overlapping distractor (partial)
    and any other topic's document shares nothing (no support).
    """
    rng = substream(seed, "graded")
    template_words = ("belongs with and the keeps close what is").split()
    used = _reserve(_FILLERS + template_words, _TASK_ENCODER.feature_dim)
    tokens = _unique_tokens(_TASK_ENCODER.feature_dim, used)

    per_topic = train_entities + held_out_entities
    topic_vocab = [[next(tokens) for _ in range(5)] for _ in range(num_topics)]
    entities = [[next(tokens) for _ in range(per_topic)] for _ in range(num_topics)]

    docs: dict[tuple[int, int], Document] = {}
    all_docs = []
    for t in range(num_topics):
        w = topic_vocab[t]
        for e in range(per_topic):
            ent = entities[t][e]
            text = (f"{ent.capitalize()} belongs with {w[0]} {w[1]} and {w[2]}. "
                    f"The {w[3]} keeps {w[4]} close.")
            doc = Document(id=f"t{t:02d}e{e}", title=ent, text=text,
                           source=Source.SYNTHETIC)
            docs[(t, e)] = doc
            all_docs.append(doc)
    corpus = Corpus(all_docs)

    def question(t: int, e: int) -> str:
        w = topic_vocab[t]
        return f"what is {entities[t][e]} with {w[0]} {w[1]}?"

    tuples: list[TrainingTuple] = []
    eval_pairs: list[tuple[str, str]] = []
    triples: list[tuple[str, str, str, str]] = []
    for t in range(num_topics):
        for e in range(per_topic):
            q = question(t, e)
            full_doc = docs[(t, e)]
            partner = (e + 1) % per_topic
            partial_doc = docs[(t, partner)]
            other_t = (t + 1 + int(rng.integers(num_topics - 1))) % num_topics
            none_doc = docs[(other_t, int(rng.integers(per_topic)))]
            if e < train_entities:
                tuples.append(TrainingTuple(question=q, doc_id=full_doc.id,
                                            evidence=_whole_chunk(full_doc),
                                            support=SupportLevel.FULL))
                tuples.append(TrainingTuple(question=q, doc_id=partial_doc.id,
                                            evidence=_whole_chunk(partial_doc),
                                            support=SupportLevel.PARTIAL))
                tuples.append(TrainingTuple(question=q, doc_id=none_doc.id,
                                            evidence=_whole_chunk(none_doc),
                                            support=SupportLevel.NONE))
            else:
                eval_pairs.append((q, full_doc.id))
                triples.append((q, full_doc.text, partial_doc.text, none_doc.text))
    # gentle schedule: the untrained rare-token signal already orders the
    # triples, so training must sharpen the graded margins without
    # washing that signal out
    schedule = TrainSchedule(main_epochs=3, lr=3e-3, seed=seed)
    return RetrievalTask(corpus, tuples, eval_pairs, _TASK_ENCODER,
                         held_out_triples=triples, schedule=schedule,
                         loss_cfg=LossConfig(pairwise_weight=2.0))


@dataclass
class AdaptiveTask:
    """Three question patterns, A/B warmup-labeled, C untouched."""

    corpus: Corpus
    warmup_tuples: list[TrainingTuple]
    unlabeled_pairs: list[tuple[str, Document]]
    unlabeled_patterns: list[str]  # pattern letter per unlabeled pair
    eval_pairs: list[tuple[str, str]]
    encoder_cfg: EncoderConfig


_PATTERNS = {
    "A": ("{ent} is a dense mineral found deep underground.",
          "tell me what {ent} is"),
    "B": ("{ent} is found along the warm coastal waters.",
          "where would {ent} be found"),
    "C": ("The {ent} file describes old archive listings.",
          "which file describes {ent}"),
}


def adaptive_task(warmup_per_pattern: int = 20, unlabeled_per_pattern: int = 20,
                  eval_per_pattern: int = 10, seed: int = 0) -> AdaptiveTask:
    """Corpus for confidence-routed labeling.

    Patterns A and B get warmup supervision; pattern C shares no template
    words with them, so after warmup A/B clusters are confidently
    retrievable and C is not. Every question's content tokens appear in
    its document, so an overlap oracle grades the gold chunk full
    support. Documents are single-chunk by construction.
    """
    rng = substream(seed, "adaptive")
    template_words = [w for doc_t, q_t in _PATTERNS.values()
                      for w in (doc_t + " " + q_t).replace("{ent}", "").split()]
    used = _reserve(_FILLERS + [w.strip(".,") for w in template_words],
                    _TASK_ENCODER.feature_dim)
    tokens = _unique_tokens(_TASK_ENCODER.feature_dim, used)

    all_docs: list[Document] = []
    warmup_tuples: list[TrainingTuple] = []
    unlabeled_pairs: list[tuple[str, Document]] = []
    unlabeled_patterns: list[str] = []
    eval_pairs: list[tuple[str, str]] = []

    def make(pattern: str, role: str, n: int):
        doc_t, q_t = _PATTERNS[pattern]
        out = []
        for i in range(n):
            ent = next(tokens).capitalize()
            doc = Document(id=f"{pattern}-{role}-{i:02d}", title=ent,
                           text=doc_t.format(ent=ent), source=Source.SYNTHETIC)
            all_docs.append(doc)
            out.append((q_t.format(ent=ent), doc))
        return out

    for pattern in ("A", "B"):
        for question, doc in make(pattern, "warm", warmup_per_pattern):
            warmup_tuples.append(TrainingTuple(
                question=question, doc_id=doc.id, evidence=_whole_chunk(doc),
                support=SupportLevel.FULL))
    # labeled distractor negatives so hard-negative selection has material
    warm_docs = list(all_docs)
    for t in list(warmup_tuples):
        j = int(rng.integers(len(warm_docs)))
        if warm_docs[j].id != t.doc_id:
            warmup_tuples.append(TrainingTuple(
                question=t.question, doc_id=warm_docs[j].id,
                evidence=_whole_chunk(warm_docs[j]), support=SupportLevel.NONE))

    for pattern in ("A", "B", "C"):
        for question, doc in make(pattern, "new", unlabeled_per_pattern):
            unlabeled_pairs.append((question, doc))
            unlabeled_patterns.append(pattern)

    for pattern in ("A", "B", "C"):
        for question, doc in make(pattern, "eval", eval_per_pattern):
            eval_pairs.append((question, doc.id))

    return AdaptiveTask(Corpus(all_docs), warmup_tuples, unlabeled_pairs,
                        unlabeled_patterns, eval_pairs, _TASK_ENCODER)


# ---------------------------------------------------------------------------
# Evaluation over whole-document indexes


def document_recall(params: EncoderParams, corpus: Corpus,
                    eval_pairs: list[tuple[str, str]],
                    ks: tuple[int, ...] = (1, 10)) -> dict[int, float]:
    """Recall@k for (question, gold doc id) pairs over the full corpus."""
    rows = {doc.id: encode(params, doc.text, DOCUMENT) for doc in corpus}
    idx = build_index(rows)
    results, gold = [], {}
    for qi, (question, gold_doc) in enumerate(eval_pairs):
        qid = f"q{qi:04d}"
        results.append(search(idx, encode(params, question, QUERY),
                              k=max(ks), query_id=qid))
        gold[qid] = {gold_doc}
    return {k: recall_at_k(results, gold, k=k) for k in ks}


# ---------------------------------------------------------------------------
# Small browsable corpus for demos and the CLI walkthrough


def sample_corpus(num_docs: int = 50, seed: int = 7) -> Corpus:
    rng = substream(seed, "sample-corpus")
    used: set[int] = set()
    tokens = _unique_tokens(2 ** 16, used)
    docs = []
    for i in range(num_docs):
        name = next(tokens).capitalize()
        f = [str(x) for x in rng.choice(_FILLERS, size=6, replace=False)]
        text = (f"{name} is traded at the {f[0]} {f[1]} beside the {f[2]}. "
                f"Caravans carry {f[3]} and {f[4]} past the {f[5]}. "
                f"Records name {name} in the old ledger.")
        docs.append(Document(id=f"sample{i:03d}", title=name, text=text,
                             source=Source.SYNTHETIC))
    return Corpus(docs)


def write_sample_corpus(path: str | Path, num_docs: int = 50, seed: int = 7) -> None:
    save_corpus(sample_corpus(num_docs, seed), path)
