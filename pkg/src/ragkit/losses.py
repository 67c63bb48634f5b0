"""Ranking losses over predicted relevance scores.

Two terms trained jointly: a list-wise contrastive loss pushing the
designated full-support candidate above everything else, and a pairwise
logistic loss enforcing the graded order full > partial > none. Both are
defined on raw score vectors here; chaining through the encoder happens
in encoder.forward_backward via score_gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InvariantError


@dataclass
class LossConfig:
    temperature: float = 0.05
    pairwise_weight: float = 1.0
    include_positive_in_pairs: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvariantError("temperature must be positive")


@dataclass
class Candidate:
    """One scored evidence candidate: an opaque ref, its labeled support,
    and the model's current predicted score."""

    ref: Any
    label: float
    score: float = 0.0


@dataclass
class CandidateSet:
    """A query's positive plus its negative candidates.

    Exactly one member is the designated positive and it must carry full
    support; the list-wise loss softmaxes over the whole set.
    """

    query_id: str
    candidates: list[Candidate] = field(default_factory=list)
    positive_idx: int = 0

    def validate(self):
        if not (0 <= self.positive_idx < len(self.candidates)):
            raise InvariantError(f"positive_idx {self.positive_idx} out of range "
                                 f"for {len(self.candidates)} candidates")
        if self.candidates[self.positive_idx].label != 1.0:
            raise InvariantError(f"designated positive of query {self.query_id!r} "
                                 f"has support {self.candidates[self.positive_idx].label}")

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.candidates], dtype=np.float64)

    def scores(self) -> np.ndarray:
        return np.array([c.score for c in self.candidates], dtype=np.float64)


def _log_softmax_at(scores: np.ndarray, idx: int) -> float:
    shifted = scores - scores.max()
    return float(shifted[idx] - np.log(np.exp(shifted).sum()))


def list_loss(scores, positive_idx: int, temperature: float) -> float:
    """Contrastive loss: -log softmax(scores / temperature)[positive].

    scores covers the positive and at least one negative; an empty
    negative list is rejected because the softmax would be vacuous.
    """
    s = np.asarray(scores, dtype=np.float64)
    if temperature <= 0:
        raise InvariantError("temperature must be positive")
    if not (0 <= positive_idx < len(s)):
        raise InvariantError(f"positive_idx {positive_idx} out of range")
    if len(s) < 2:
        raise InvariantError("list_loss needs at least one negative candidate")
    return -_log_softmax_at(s / temperature, positive_idx)


def _pair_indices(labels: np.ndarray, positive_idx: int, include_positive: bool):
    """Ordered index pairs (a, b) with labels[a] > labels[b] among the
    compared candidates."""
    idx = np.arange(len(labels))
    if not include_positive:
        idx = idx[idx != positive_idx]
    pairs = []
    for a in idx:
        for b in idx:
            if labels[a] > labels[b]:
                pairs.append((int(a), int(b)))
    return pairs


def pair_loss(candidates: CandidateSet, include_positive: bool = True) -> float:
    """Logistic loss over every ordered pair with strictly differing support.

    Each violating-or-tight pair (a, b) with label_a > label_b contributes
    log(1 + exp(score_b - score_a)); zero when all margins are infinite.
    """
    labels = candidates.labels()
    scores = candidates.scores()
    total = 0.0
    for a, b in _pair_indices(labels, candidates.positive_idx, include_positive):
        total += float(np.logaddexp(0.0, scores[b] - scores[a]))
    return total


def total_loss(candidates: CandidateSet, cfg: LossConfig) -> float:
    """Combined objective: list term plus weighted pair term."""
    candidates.validate()
    lo = list_loss(candidates.scores(), candidates.positive_idx, cfg.temperature)
    if cfg.pairwise_weight != 0.0:
        lo += cfg.pairwise_weight * pair_loss(candidates, cfg.include_positive_in_pairs)
    return lo


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def score_gradients(labels, scores, positive_idx: int, cfg: LossConfig):
    """Loss and its analytic gradient with respect to the scores.

    Returns (loss, grad) where grad[c] = dL/dscore_c. The list term
    contributes (softmax_c - 1{c=positive}) / temperature; each pair
    (a, b) contributes sigmoid(score_b - score_a) to b and its negation
    to a, scaled by pairwise_weight. The loss value matches total_loss
    on the same scores exactly.
    """
    labels = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    grad = np.zeros_like(s)

    loss = -_log_softmax_at(s / cfg.temperature, positive_idx)
    z = s / cfg.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    grad += p / cfg.temperature
    grad[positive_idx] -= 1.0 / cfg.temperature

    if cfg.pairwise_weight != 0.0:
        w = cfg.pairwise_weight
        pair_total = 0.0
        for a, b in _pair_indices(labels, positive_idx, cfg.include_positive_in_pairs):
            margin = s[b] - s[a]
            pair_total += float(np.logaddexp(0.0, margin))
            sig = _sigmoid(margin)
            grad[b] += w * sig
            grad[a] -= w * sig
        loss += w * pair_total
    return loss, grad
