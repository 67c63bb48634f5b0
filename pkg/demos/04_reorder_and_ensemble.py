"""Walkthrough: edge-packed evidence order and permutation ensembling.

Readers pay less attention to the middle of a long context. Edge
packing keeps the best-ranked evidence at the start, walks the next
tier backward from the end, and relegates the weakest tier to the
middle. Ensembling over within-subset permutations then averages out
whatever position sensitivity remains.

    python3 demos/04_reorder_and_ensemble.py
"""

from ragkit.inference import (PositionAgnosticReader, PositionBiasedReader,
                              ReaderContext, ensemble_answer, permutations,
                              reorder)

docs = [f"d{i}" for i in range(1, 10)]
packed = reorder(docs, j=3)
print("retrieval order:  ", " ".join(docs))
print("edge-packed order:", " ".join(packed.order))
print(f"  head={list(packed.head)}  middle={list(packed.middle)}  "
      f"tail={list(packed.tail)}")

perms = permutations(packed, n=4, seed=0)
print("\nfour permutations (head/middle/tail shuffled within themselves):")
for i, perm in enumerate(perms):
    print(f"  {i}: {' '.join(perm)}")

# A fixture where the right answer's evidence ranks third: mid-pack for
# a naive descending order, but tail (full attention) once edge-packed.
evidence = [
    "filler alpha", "filler beta",
    "the answer gold appears here: gold.",
    "filler gamma", "decoy rumor says decoy.", "filler delta",
]
candidates = ["gold", "decoy"]
biased = PositionBiasedReader(middle_weight=0.5)

naive_scores = biased.score_answers(
    ReaderContext("what appears here?", tuple(evidence)), candidates)
print("\nposition-biased reader, naive descending order:")
for cand, score in zip(candidates, naive_scores):
    print(f"  {cand}: {score:.2f}")

packed6 = reorder(evidence, j=2)
result = ensemble_answer("what appears here?", candidates,
                         permutations(packed6, n=4, seed=0), biased)
print("edge-packed + 4-permutation ensemble:")
for entry in result.ranked:
    print(f"  {entry.candidate}: {entry.score:.2f} "
          f"(per-permutation {['%.2f' % p for p in entry.per_permutation]})")
print(f"best answer: {result.best!r}")

# With a position-agnostic reader the ensemble changes nothing: summed
# likelihoods rank answers exactly like a single pass.
agnostic = PositionAgnosticReader()
single = agnostic.score_answers(
    ReaderContext("what appears here?", tuple(packed6.order)), candidates)
ensembled = ensemble_answer("what appears here?", candidates,
                            permutations(packed6, n=4, seed=0), agnostic)
print(f"\nposition-agnostic reader: single-pass best "
      f"{candidates[single.index(max(single))]!r}, "
      f"ensembled best {ensembled.best!r}")
