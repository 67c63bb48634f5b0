"""Retriever training: bootstrapped negative sampling, the epoch loop,
and the adaptive self-labeling scheduler.

Warmup epochs train the list-wise term with in-batch negatives only;
main epochs add the pairwise term over mined hard negatives (partials
first, ranked by the frozen model's current scores, refreshed on a
step interval). The adaptive round routes whole question clusters either
to cheap self-labeling or to the oracle, by cluster confidence.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import (
    ChunkingPolicy,
    Corpus,
    Document,
    EvidenceChunk,
    Provenance,
    SupportLevel,
    TrainingTuple,
    chunk_document,
)
from .encoder import (
    DOCUMENT,
    QUERY,
    BatchExample,
    EncoderConfig,
    EncoderParams,
    OptimizerState,
    apply_update,
    encode,
    forward_backward,
    init_params,
)
from .errors import BudgetExhaustedError, DataError, InvariantError
from .index import build as build_index, recall_at_k, search
from .labeler import LabelerOracle
from .losses import (  # re-exported: the loss surface lives with training
    Candidate,
    CandidateSet,
    LossConfig,
    list_loss,
    pair_loss,
    score_gradients,
    total_loss,
)
from .rng import substream

__all__ = [
    "Candidate", "CandidateSet", "LossConfig", "list_loss", "pair_loss",
    "total_loss", "score_gradients", "TrainSchedule", "AdaptiveConfig",
    "TRANSFORMER_SCALE_PROFILE", "QueryGroup", "build_query_groups",
    "in_batch_negatives", "select_hard_negatives", "train", "TrainResult",
    "MetricsRow", "metrics_to_csv", "query_confidence", "cluster_confidence",
    "adaptive_round", "AdaptiveRoundResult", "chunk_key",
]

# Hyperparameters for a transformer-scale run of the same recipe, kept as
# reference data; the defaults below are sized for the hashed encoder.
TRANSFORMER_SCALE_PROFILE = {
    "batch_size": 256,
    "lr": 2e-5,
    "warmup_ratio": 0.1,
    "temperature": 0.05,
}


@dataclass(frozen=True)
class TrainSchedule:
    warmup_epochs: int = 1
    main_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0
    refresh_interval: int = 500
    hard_negative_limit: int = 4

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.main_epochs < 0:
            raise InvariantError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.refresh_interval < 1 or self.hard_negative_limit < 1:
            raise InvariantError("batch_size, refresh_interval, hard_negative_limit must be >= 1")
        if self.lr <= 0:
            raise InvariantError("lr must be positive")


@dataclass(frozen=True)
class AdaptiveConfig:
    """Confidence routing policy for an adaptive labeling round.

    percentile p: a cluster is confident when its confidence reaches the
    p-th percentile of all cluster confidences; p=0 marks every cluster
    confident and p=100 none (boundary settings for the two extremes).
    absolute: compare against a fixed threshold in [-1, 1]. Clusters
    smaller than min_cluster_size are never trusted for self-labeling.
    """

    policy: str = "percentile"
    percentile: float = 70.0
    absolute_threshold: float = 0.0
    min_cluster_size: int = 1
    round_budget: int | None = None

    def __post_init__(self):
        if self.policy not in ("percentile", "absolute"):
            raise InvariantError(f"unknown threshold policy {self.policy!r}")
        if not 0.0 <= self.percentile <= 100.0:
            raise InvariantError("percentile must be in [0, 100]")
        if not -1.0 <= self.absolute_threshold <= 1.0:
            raise InvariantError("absolute threshold must be in [-1, 1]")
        if self.min_cluster_size < 1:
            raise InvariantError("min_cluster_size must be >= 1")
        if self.round_budget is not None and self.round_budget < 0:
            raise InvariantError("round_budget must be >= 0 or None")


def chunk_key(chunk: EvidenceChunk) -> str:
    """Stable id for an evidence span."""
    return f"{chunk.doc_id}:{chunk.start}-{chunk.end}"


@dataclass
class QueryGroup:
    """All supervision for one question: the designated positive plus
    labeled negatives."""

    question: str
    positive: TrainingTuple
    negatives: list[TrainingTuple] = field(default_factory=list)

    def base_candidate_set(self) -> CandidateSet:
        cands = [Candidate(ref=self.positive.evidence.text, label=1.0)]
        cands += [Candidate(ref=t.evidence.text, label=float(t.support))
                  for t in self.negatives]
        return CandidateSet(query_id=self.question, candidates=cands, positive_idx=0)


def build_query_groups(tuples: Sequence[TrainingTuple]) -> tuple[list[QueryGroup], dict]:
    """Group tuples by question text.

    The first full-support tuple of a question is its designated
    positive; later full-support duplicates are dropped (counted in the
    report) because the list-wise softmax admits one positive. Questions
    with no positive cannot be trained and are skipped.
    """
    by_question: dict[str, list[TrainingTuple]] = {}
    for t in tuples:
        by_question.setdefault(t.question, []).append(t)
    groups: list[QueryGroup] = []
    skipped_no_positive = 0
    dropped_extra_positives = 0
    for question, members in by_question.items():
        positives = [t for t in members if t.support is SupportLevel.FULL]
        if not positives:
            skipped_no_positive += 1
            continue
        dropped_extra_positives += len(positives) - 1
        negatives = [t for t in members if t.support is not SupportLevel.FULL]
        groups.append(QueryGroup(question, positives[0], negatives))
    report = {"groups": len(groups),
              "skipped_no_positive": skipped_no_positive,
              "dropped_extra_positives": dropped_extra_positives}
    return groups, report


# ---------------------------------------------------------------------------
# Negative construction


def in_batch_negatives(batch: Sequence[CandidateSet]) -> list[CandidateSet]:
    """Extend each set with the other queries' positives, labeled 0.

    A foreign positive is excluded when its query text equals this set's
    (duplicate question in the batch) or when its text equals this set's
    own positive, so no query ever sees its positive as a negative.
    """
    out = []
    for me in batch:
        own_positive = me.candidates[me.positive_idx].ref
        extended = list(me.candidates)
        for other in batch:
            if other is me or other.query_id == me.query_id:
                continue
            foreign = other.candidates[other.positive_idx].ref
            if foreign == own_positive:
                continue
            extended.append(Candidate(ref=foreign, label=0.0))
        out.append(CandidateSet(me.query_id, extended, me.positive_idx))
    return out


def predict_scores(params: EncoderParams, question: str,
                   texts: Sequence[str]) -> np.ndarray:
    """Cosine of the query against each candidate text."""
    q = encode(params, question, QUERY)
    return np.array([float(q @ encode(params, t, DOCUMENT)) for t in texts])


def select_hard_negatives(groups: Sequence[QueryGroup], per_query_limit: int,
                          params: EncoderParams) -> tuple[list[CandidateSet], list[str]]:
    """Build candidate sets with mined hard negatives.

    Partial-support negatives come first, ranked by the frozen model's
    current score (hardest first), then no-support ones fill the
    remaining slots the same way. Questions with no labeled negatives
    are returned positive-only and flagged; the train loop gives them
    in-batch negatives instead.
    """
    if per_query_limit < 1:
        raise InvariantError("per_query_limit must be >= 1")
    sets: list[CandidateSet] = []
    flagged: list[str] = []
    for group in groups:
        partials = [t for t in group.negatives if t.support is SupportLevel.PARTIAL]
        nones = [t for t in group.negatives if t.support is SupportLevel.NONE]
        texts = [t.evidence.text for t in partials + nones]
        scores = predict_scores(params, group.question, texts) if texts else np.zeros(0)
        p_scores = scores[: len(partials)]
        n_scores = scores[len(partials):]
        p_order = sorted(range(len(partials)), key=lambda i: (-p_scores[i], i))
        chosen = [(partials[i], float(p_scores[i])) for i in p_order[:per_query_limit]]
        room = per_query_limit - len(chosen)
        if room > 0:
            n_order = sorted(range(len(nones)), key=lambda i: (-n_scores[i], i))
            chosen += [(nones[i], float(n_scores[i])) for i in n_order[:room]]
        pos_score = float(predict_scores(params, group.question,
                                         [group.positive.evidence.text])[0])
        cands = [Candidate(ref=group.positive.evidence.text, label=1.0, score=pos_score)]
        cands += [Candidate(ref=t.evidence.text, label=float(t.support), score=s)
                  for t, s in chosen]
        if len(cands) == 1:
            flagged.append(group.question)
        sets.append(CandidateSet(group.question, cands, 0))
    return sets, flagged


def _to_batch_example(cs: CandidateSet) -> BatchExample:
    return BatchExample(query=cs.query_id,
                        candidates=[c.ref for c in cs.candidates],
                        labels=[c.label for c in cs.candidates],
                        positive_idx=cs.positive_idx)


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    split: str
    loss_list: float
    loss_pair: float
    recall_at_10: float | None
    recall_at_20: float | None
    oracle_calls_cum: int


def metrics_to_csv(history: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "split", "loss_list", "loss_pair",
                     "recall@10", "recall@20", "oracle_calls_cum"])
    for row in history:
        writer.writerow([
            row.epoch, row.split, f"{row.loss_list:.6f}", f"{row.loss_pair:.6f}",
            "" if row.recall_at_10 is None else f"{row.recall_at_10:.4f}",
            "" if row.recall_at_20 is None else f"{row.recall_at_20:.4f}",
            row.oracle_calls_cum,
        ])
    return buf.getvalue()


def _epoch_losses(params: EncoderParams, groups: Sequence[QueryGroup],
                  loss_cfg: LossConfig) -> tuple[float, float]:
    """Mean list/pair losses over the groups' base candidate sets.

    Groups without negatives are skipped for the list term (it is
    undefined there); returns (0, 0) when nothing is measurable.
    """
    lists, pairs = [], []
    for group in groups:
        cs = group.base_candidate_set()
        texts = [c.ref for c in cs.candidates]
        scores = predict_scores(params, cs.query_id, texts)
        if len(texts) >= 2:
            lists.append(list_loss(scores, cs.positive_idx, loss_cfg.temperature))
            for c, s in zip(cs.candidates, scores):
                c.score = float(s)
            pairs.append(pair_loss(cs, loss_cfg.include_positive_in_pairs))
    return (float(np.mean(lists)) if lists else 0.0,
            float(np.mean(pairs)) if pairs else 0.0)


def evaluate_recall(params: EncoderParams, dev_tuples: Sequence[TrainingTuple],
                    ks: Sequence[int] = (10, 20)) -> dict[int, float]:
    """Recall@k over the dev tuples' evidence universe.

    Index rows are all distinct dev evidence spans; each dev question's
    gold ids are its full-support spans.
    """
    dev_groups, _ = build_query_groups(dev_tuples)
    if not dev_groups:
        raise DataError("dev split has no usable query groups")
    rows: dict[str, np.ndarray] = {}
    for t in dev_tuples:
        key = chunk_key(t.evidence)
        if key not in rows:
            rows[key] = encode(params, t.evidence.text, DOCUMENT)
    idx = build_index(rows)
    results = []
    gold = {}
    for group in dev_groups:
        q = encode(params, group.question, QUERY)
        results.append(search(idx, q, k=max(ks), query_id=group.question))
        gold[group.question] = {chunk_key(group.positive.evidence)}
    return {k: recall_at_k(results, gold, k=k) for k in ks}


# ---------------------------------------------------------------------------
# The epoch loop


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[MetricsRow]
    group_report: dict
    flagged_queries: list[str]
    refresh_count: int
    skipped_examples: int


def train(corpus: Corpus, tuples: Sequence[TrainingTuple],
          schedule: TrainSchedule = TrainSchedule(),
          loss_cfg: LossConfig = LossConfig(),
          encoder_cfg: EncoderConfig = EncoderConfig(),
          dev_tuples: Sequence[TrainingTuple] | None = None,
          optimizer: OptimizerState | None = None,
          oracle_calls_cum: int = 0) -> TrainResult:
    """Deterministic two-phase training run.

    Warmup epochs: list-wise loss only, in-batch negatives. Main epochs:
    full loss over hard-negative candidate sets, re-mined with current
    scores every refresh_interval steps. Fixed seed means byte-identical
    checkpoints across runs.
    """
    if not tuples:
        raise DataError("no training tuples")
    for t in tuples:
        t.evidence.check_against(corpus[t.doc_id])
    groups, group_report = build_query_groups(tuples)
    if not groups:
        raise DataError("no query group has a full-support positive")

    params = init_params(encoder_cfg, schedule.seed)
    state = optimizer if optimizer is not None else OptimizerState(mode="adamw")
    history: list[MetricsRow] = []
    flagged_all: list[str] = []
    refresh_count = 0
    skipped = 0

    def record(epoch: int, split: str, eval_cfg: LossConfig):
        l_list, l_pair = _epoch_losses(params, groups, eval_cfg)
        recalls = {10: None, 20: None}
        if dev_tuples:
            recalls = evaluate_recall(params, dev_tuples)
        history.append(MetricsRow(epoch, split, l_list, l_pair,
                                  recalls[10], recalls[20], oracle_calls_cum))

    def batches(n: int, epoch_name: str):
        perm = substream(schedule.seed, f"batch-order-{epoch_name}").permutation(n)
        for i in range(0, n, schedule.batch_size):
            yield [int(g) for g in perm[i : i + schedule.batch_size]]

    warmup_cfg = replace(loss_cfg, pairwise_weight=0.0)
    epoch = 0
    for _ in range(schedule.warmup_epochs):
        epoch += 1
        for batch_idx in batches(len(groups), f"warmup-{epoch}"):
            posonly = [CandidateSet(groups[g].question,
                                    [Candidate(groups[g].positive.evidence.text, 1.0)], 0)
                       for g in batch_idx]
            sets = [cs for cs in in_batch_negatives(posonly) if len(cs.candidates) >= 2]
            skipped += len(posonly) - len(sets)
            if not sets:
                continue
            _, grads = forward_backward(params, [_to_batch_example(cs) for cs in sets],
                                        warmup_cfg)
            apply_update(params, grads, state, schedule.lr)
        record(epoch, "warmup", warmup_cfg)

    sets_by_group: list[CandidateSet] = []
    steps_since_refresh = 0

    def refresh():
        nonlocal sets_by_group, steps_since_refresh, refresh_count, flagged_all
        sets_by_group, flagged = select_hard_negatives(
            groups, schedule.hard_negative_limit, params)
        flagged_all = flagged
        steps_since_refresh = 0
        refresh_count += 1

    for _ in range(schedule.main_epochs):
        epoch += 1
        refresh()
        for batch_idx in batches(len(groups), f"main-{epoch}"):
            if steps_since_refresh >= schedule.refresh_interval:
                refresh()
            chosen = [sets_by_group[g] for g in batch_idx]
            # positive-only sets fall back to in-batch negatives
            needs_fallback = [cs for cs in chosen if len(cs.candidates) < 2]
            if needs_fallback:
                chosen = in_batch_negatives(chosen)
            usable = [cs for cs in chosen if len(cs.candidates) >= 2]
            skipped += len(chosen) - len(usable)
            if not usable:
                continue
            _, grads = forward_backward(params, [_to_batch_example(cs) for cs in usable],
                                        loss_cfg)
            apply_update(params, grads, state, schedule.lr)
            steps_since_refresh += 1
        record(epoch, "main", loss_cfg)

    return TrainResult(params, history, group_report, flagged_all,
                       refresh_count, skipped)


# ---------------------------------------------------------------------------
# Adaptive relevance labeling


def query_confidence(params: EncoderParams, question: str,
                     doc_chunks: Sequence[EvidenceChunk]) -> float:
    """Max cosine between the query and any chunk of its document."""
    if not doc_chunks:
        raise InvariantError("no chunks")
    q = encode(params, question, QUERY)
    return max(float(q @ encode(params, c.text, DOCUMENT)) for c in doc_chunks)


def cluster_confidence(confidences: Sequence[float]) -> float:
    """Arithmetic mean of member confidences."""
    if len(confidences) == 0:
        raise InvariantError("cluster has no member confidences")
    return float(np.mean(np.asarray(confidences, dtype=np.float64)))


@dataclass
class AdaptiveRoundResult:
    self_labeled: list[TrainingTuple]
    oracle_labeled: list[TrainingTuple]
    report: dict


def adaptive_round(params: EncoderParams,
                   pairs: Sequence[tuple[str, Document]],
                   clusters,
                   cfg: AdaptiveConfig,
                   oracle: LabelerOracle,
                   chunking: ChunkingPolicy = ChunkingPolicy()) -> AdaptiveRoundResult:
    """Route each question cluster to self-labeling or the oracle.

    Confident clusters (confidence at or above the policy threshold, and
    large enough to trust) self-label every member with its argmax chunk
    at full support; the rest go through the oracle's identify_evidence
    under the round budget. Members of confident clusters never cost an
    oracle call. Runs out of budget -> partial results plus a flag.
    """
    if not pairs:
        raise DataError("no unlabeled pairs")
    chunk_cache: dict[str, list[EvidenceChunk]] = {}

    def chunks_for(doc: Document) -> list[EvidenceChunk]:
        if doc.id not in chunk_cache:
            chunk_cache[doc.id] = chunk_document(doc, chunking)
        return chunk_cache[doc.id]

    confidences = []
    for question, doc in pairs:
        confidences.append(query_confidence(params, question, chunks_for(doc)))

    cluster_conf = {}
    for cl in clusters:
        cluster_conf[cl.id] = cluster_confidence([confidences[i] for i in cl.member_ids])
        cl.confidence = cluster_conf[cl.id]

    conf_values = np.array([cluster_conf[cl.id] for cl in clusters])
    if cfg.policy == "absolute":
        threshold = cfg.absolute_threshold
    elif cfg.percentile >= 100.0:
        threshold = np.inf  # boundary: no cluster is confident
    else:
        threshold = float(np.percentile(conf_values, cfg.percentile))

    confident_ids = {cl.id for cl in clusters
                     if cluster_conf[cl.id] >= threshold
                     and len(cl.member_ids) >= cfg.min_cluster_size}

    self_labeled: list[TrainingTuple] = []
    oracle_labeled: list[TrainingTuple] = []
    issued = 0
    exhausted = False
    pending = 0

    for cl in sorted(clusters, key=lambda c: c.id):
        if cl.id in confident_ids:
            for member in cl.member_ids:
                question, doc = pairs[member]
                doc_chunks = chunks_for(doc)
                q = encode(params, question, QUERY)
                sims = np.array([float(q @ encode(params, c.text, DOCUMENT))
                                 for c in doc_chunks])
                best = doc_chunks[int(np.argmax(sims))]  # ties: lowest chunk index
                self_labeled.append(TrainingTuple(
                    question=question, doc_id=doc.id, evidence=best,
                    support=SupportLevel.FULL, provenance=Provenance.SELF_LABELED))
        else:
            for member in cl.member_ids:
                question, doc = pairs[member]
                if exhausted or (cfg.round_budget is not None
                                 and issued >= cfg.round_budget):
                    exhausted = True
                    pending += 1
                    continue
                try:
                    evidence, support = oracle.identify_evidence(question, doc)
                except BudgetExhaustedError:
                    exhausted = True
                    pending += 1
                    continue
                issued += 1
                oracle_labeled.append(TrainingTuple(
                    question=question, doc_id=doc.id, evidence=evidence,
                    support=support, provenance=Provenance.ORACLE_LABELED))

    report = {
        "policy": cfg.policy,
        "threshold": float(threshold) if np.isfinite(threshold) else "none-confident",
        "clusters": [{"id": cl.id, "size": len(cl.member_ids),
                      "confidence": cluster_conf[cl.id],
                      "confident": cl.id in confident_ids}
                     for cl in sorted(clusters, key=lambda c: c.id)],
        "oracle_calls": issued,
        "self_label_count": len(self_labeled),
        "budget_exhausted": exhausted,
        "pending_members": pending,
    }
    return AdaptiveRoundResult(self_labeled, oracle_labeled, report)
