"""Walkthrough: documents, evidence chunks, and oracle-built labels.

Loads the bundled sample corpus, chunks a document, then lets the mock
oracle build a training tuple the same way a remote LLM oracle would:
generate a question, point at the evidence span, mine and score hard
negatives. Run from the repository root:

    python3 demos/01_corpus_and_labels.py
"""

from pathlib import Path

from ragkit import ChunkingPolicy, chunk_document, load_corpus
from ragkit.labeler import (MockLabeler, mine_negative_candidates,
                            score_and_filter_negatives)

corpus = load_corpus(Path(__file__).parent.parent / "data" / "sample_corpus.jsonl")
print(f"loaded {len(corpus)} documents")

doc = next(iter(corpus))
print(f"\nfirst document ({doc.id}):\n  {doc.text}")

policy = ChunkingPolicy(max_words=20, max_sentences=2)
chunks = chunk_document(doc, policy)
print(f"\nchunked at <= {policy.max_words} words / {policy.max_sentences} sentences:")
for chunk in chunks:
    print(f"  [{chunk.start:3d}, {chunk.end:3d})  {chunk.text!r}")

# The oracle interface has three calls: generate a question about a
# document, identify the evidence span for a question, and grade a
# (question, chunk) pair as full / partial / no support. The mock is a
# pure function of its inputs, so everything below is reproducible.
oracle = MockLabeler(seed=0, chunking=policy)
question, evidence = oracle.generate_question(doc)
print(f"\noracle question: {question!r}")
print(f"evidence span:   {evidence.text!r}")

# Hard negatives: near-miss chunks from other documents, ranked by
# embedding similarity to the evidence, then oracle-graded so genuine
# matches are filtered out rather than mislabeled.
pool = [c for other in corpus if other.id != doc.id
        for c in chunk_document(other, policy)]
from ragkit import SupportLevel, TrainingTuple
positive = TrainingTuple(question, doc.id, evidence, SupportLevel.FULL)
candidates = mine_negative_candidates(positive, pool, k=4)
print(f"\ntop {len(candidates)} mined negatives:")
for chunk, support in score_and_filter_negatives(question, candidates, oracle):
    print(f"  {support.name:<7}  {chunk.doc_id}  {chunk.text[:60]!r}")

print(f"\noracle calls spent: {oracle.calls_used}")
