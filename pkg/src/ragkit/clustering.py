"""Question-pattern clustering: entity masking, embedding, K-means.

Masked questions expose sentence structure ("Who founded [ENT] in
[ENT]?"), which drives two things downstream: picking structurally
diverse demonstrations for question generation, and grouping questions
into confidence clusters for adaptive labeling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .encoder import featurize
from .errors import InvariantError
from .rng import substream
from .text import STRUCTURE_WORDS, word_spans

log = logging.getLogger(__name__)

MASK_TOKEN = "[ENT]"

_PUNCT = "\"'()[]{}.,;:!?"


@dataclass(frozen=True)
class MaskedQuestion:
    original: str
    masked: str
    mask_count: int


def _split_token(tok: str) -> tuple[str, str, str]:
    """(leading punctuation, core, trailing punctuation)."""
    start, end = 0, len(tok)
    while start < end and tok[start] in _PUNCT:
        start += 1
    while end > start and tok[end - 1] in _PUNCT:
        end -= 1
    return tok[:start], tok[start:end], tok[end:]


def _maskable(core: str) -> bool:
    if not core or core == "ENT":  # the core of a previous "[ENT]"
        return False
    if any(ch.isdigit() for ch in core):
        return True
    return core[0].isupper() and core.lower() not in STRUCTURE_WORDS


def mask_entities(question: str) -> MaskedQuestion:
    """Replace entity-like spans with the mask token.

    Entity-like means capitalized non-structure words and numeric
    literals; adjacent ones collapse into a single mask. Structure words
    (who/what/which..., auxiliaries, articles) survive even when
    capitalized, so question patterns stay intact. Idempotent.
    """
    spans = word_spans(question)
    pieces: list[str] = []
    pos = 0
    run_open = False
    for start, end in spans:
        tok = question[start:end]
        lead, core, trail = _split_token(tok)
        gap = question[pos:start]
        if _maskable(core):
            if run_open and not gap.strip():
                # extend the current masked run; keep only final trail
                pieces[-1] = MASK_TOKEN + trail
            else:
                pieces.append(gap + lead)
                pieces.append(MASK_TOKEN + trail)
                run_open = True
        else:
            pieces.append(gap + tok)
            run_open = False
        pos = end
    pieces.append(question[pos:])
    masked = "".join(pieces)
    return MaskedQuestion(question, masked, masked.count(MASK_TOKEN))


# ---------------------------------------------------------------------------
# Embedding


def embed_text(text: str, feature_dim: int = 512) -> np.ndarray:
    """Reference sentence embedding: dense normalized hashed counts.

    Exact-match semantics: strings with disjoint token sets (and no hash
    collisions) have cosine exactly 0. Empty text maps to the first basis
    vector. Any callable str -> unit vector can substitute.
    """
    feats = featurize(text, feature_dim)
    vec = np.zeros(feature_dim)
    vec[feats.indices] = feats.values
    return vec


Embedder = Callable[[str], np.ndarray]


# ---------------------------------------------------------------------------
# Clustering


@dataclass(frozen=True)
class ClusteringConfig:
    k: int = 6
    max_iters: int = 100
    seed: int = 0
    split_variance_threshold: float | None = None
    merge_distance_threshold: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise InvariantError("k must be >= 1")


@dataclass
class QuestionCluster:
    id: int
    member_ids: list[int]
    centroid: np.ndarray
    confidence: float | None = None


@dataclass
class ClusterRun:
    clusters: list[QuestionCluster]
    objective_history: list[float]
    effective_k: int
    adjustments: list[str]


def _normalized_mean(rows: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        return fallback
    return mean / norm


def _kmeanspp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on already-chosen points (duplicates)
            chosen.append(chosen[-1])
            continue
        chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int):
    """Lloyd iterations with unit-norm centroids.

    Assignment ties break to the lowest cluster id; empty clusters keep
    their previous centroid. Returns (assignments, centroids, objective
    per iteration); the objective is non-increasing because on unit
    vectors the normalized mean minimizes the summed squared distance.
    """
    history = []
    assign = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(len(centroids)):
            members = points[assign == c]
            if len(members):
                centroids[c] = _normalized_mean(members, centroids[c])
    return assign, centroids, history


def run_clustering(embeddings: Sequence[np.ndarray], cfg: ClusteringConfig) -> ClusterRun:
    """Cluster unit-norm embeddings; K-means by default, ISODATA
    split/merge passes when the thresholds are set.

    Deterministic for a fixed seed, and invariant to input order up to
    relabeling: points are canonicalized (sorted by byte content) before
    any seeded choice, then results are mapped back.
    """
    if len(embeddings) == 0:
        raise InvariantError("cannot cluster zero embeddings")
    pts = np.asarray(list(embeddings), dtype=np.float64)
    adjustments: list[str] = []
    k = cfg.k
    if k > len(pts):
        adjustments.append(f"k reduced from {k} to {len(pts)} (not enough points)")
        log.warning(adjustments[-1])
        k = len(pts)

    canon = sorted(range(len(pts)), key=lambda i: pts[i].tobytes())
    cpoints = pts[canon]

    rng = substream(cfg.seed, "kmeans")
    centroids = _kmeanspp_seeds(cpoints, k, rng)
    assign, centroids, history = _lloyd(cpoints, centroids, cfg.max_iters)

    if cfg.merge_distance_threshold is not None:
        centroids, assign = _merge_pass(cpoints, centroids, assign,
                                        cfg.merge_distance_threshold, adjustments)
    if cfg.split_variance_threshold is not None:
        centroids, assign, extra = _split_pass(cpoints, centroids, assign,
                                               cfg.split_variance_threshold,
                                               cfg.max_iters, adjustments)
        history.extend(extra)

    clusters = []
    for c in range(len(centroids)):
        rows = np.flatnonzero(assign == c)
        if len(rows) == 0:
            continue
        # invariant: centroid is the re-normalized mean of the final members,
        # even when the iteration cap stopped Lloyd before convergence
        centroid = _normalized_mean(cpoints[rows], centroids[c])
        clusters.append(QuestionCluster(id=len(clusters),
                                        member_ids=sorted(canon[i] for i in rows),
                                        centroid=centroid.copy()))
    return ClusterRun(clusters, history, len(clusters), adjustments)


def _merge_pass(points, centroids, assign, threshold, adjustments):
    """Repeatedly merge the closest centroid pair under the threshold."""
    centroids = list(centroids)
    ids = list(range(len(centroids)))
    while len(centroids) > 1:
        best = None
        for i in range(len(centroids)):
            for j in range(i + 1, len(centroids)):
                d = float(np.linalg.norm(centroids[i] - centroids[j]))
                if d < threshold and (best is None or d < best[0]):
                    best = (d, i, j)
        if best is None:
            break
        _, i, j = best
        adjustments.append(f"merged clusters {ids[i]} and {ids[j]}")
        assign = np.where(assign == ids[j], ids[i], assign)
        members = points[np.isin(assign, [ids[i]])]
        centroids[i] = _normalized_mean(members, centroids[i])
        del centroids[j], ids[j]
    # compact assignment labels to 0..len-1 in id order
    remap = {old: new for new, old in enumerate(ids)}
    assign = np.array([remap[a] for a in assign])
    return np.array(centroids), assign


def _split_pass(points, centroids, assign, threshold, max_iters, adjustments):
    """Split clusters whose per-axis variance exceeds the threshold, then
    re-run Lloyd to settle the new centroids."""
    centroids = list(centroids)
    split_any = False
    for c in range(len(centroids)):
        members = points[assign == c]
        if len(members) < 2:
            continue
        variances = members.var(axis=0)
        axis = int(variances.argmax())
        if variances[axis] > threshold:
            delta = np.zeros_like(centroids[c])
            delta[axis] = np.sqrt(variances[axis])
            lo = centroids[c] - delta
            hi = centroids[c] + delta
            centroids[c] = lo / max(np.linalg.norm(lo), 1e-12)
            centroids.append(hi / max(np.linalg.norm(hi), 1e-12))
            adjustments.append(f"split cluster {c} on axis {axis}")
            split_any = True
    centroids = np.array(centroids)
    if split_any:
        assign, centroids, history = _lloyd(points, centroids, max_iters)
        return centroids, assign, history
    return centroids, assign, []


def cluster(embeddings: Sequence[np.ndarray], cfg: ClusteringConfig) -> list[QuestionCluster]:
    """Spec surface: the clusters of run_clustering."""
    return run_clustering(embeddings, cfg).clusters


def cluster_questions(questions: Sequence[str], cfg: ClusteringConfig,
                      embedder: Embedder = embed_text) -> list[QuestionCluster]:
    """Mask entities, embed the masked text, cluster."""
    masked = [mask_entities(q).masked for q in questions]
    return cluster([embedder(m) for m in masked], cfg)


def select_diverse_demonstrations(clusters: Sequence[QuestionCluster],
                                  questions: Sequence[str],
                                  n_per_cluster: int = 1,
                                  seed: int = 0) -> list[str]:
    """Sample n questions from each non-empty cluster, without replacement.

    Returns original (unmasked) question text; clusters smaller than
    n_per_cluster contribute all their members. Seeded-deterministic.
    """
    if not clusters:
        raise InvariantError("no clusters to select from")
    rng = substream(seed, "demo-selection")
    out: list[str] = []
    for cl in sorted(clusters, key=lambda c: c.id):
        take = min(n_per_cluster, len(cl.member_ids))
        picked = rng.choice(len(cl.member_ids), size=take, replace=False)
        out.extend(questions[cl.member_ids[int(i)]] for i in sorted(picked))
    return out


def cluster_report_lines(clusters: Sequence[QuestionCluster],
                         questions: Sequence[str], samples: int = 3) -> list[dict]:
    """JSONL-ready report: id, size, confidence, sample questions."""
    report = []
    for cl in clusters:
        report.append({
            "cluster_id": cl.id,
            "size": len(cl.member_ids),
            "confidence": cl.confidence,
            "samples": [questions[i] for i in cl.member_ids[:samples]],
        })
    return report
