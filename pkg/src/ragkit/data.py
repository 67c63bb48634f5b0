"""Corpus, tuple, and chunking data model plus JSONL serialization.

All types are immutable after construction and safe to share across
threads. Offsets index into the document text string and chunk text is
always exactly the document slice, so provenance survives serialization.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError
from .text import sentence_spans, word_spans

SCHEMA_VERSION = 1


class Source(str, enum.Enum):
    WIKI = "wiki"
    MSMARCO = "msmarco"
    SYNTHETIC = "synthetic"
    OTHER = "other"


class Provenance(str, enum.Enum):
    BENCHMARK = "benchmark"
    GENERATED = "generated"
    SELF_LABELED = "self_labeled"
    ORACLE_LABELED = "oracle_labeled"


class SupportLevel(float, enum.Enum):
    """Three-valued relevance grade: no / partial / full support."""

    NONE = 0.0
    PARTIAL = 0.5
    FULL = 1.0

    @classmethod
    def from_value(cls, value) -> "SupportLevel":
        try:
            return cls(float(value))
        except ValueError:
            raise DataError(f"support level must be one of 0, 0.5, 1; got {value!r}") from None


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str
    source: Source = Source.OTHER

    def __post_init__(self):
        if not self.id:
            raise DataError("document id must be non-empty")
        if not self.text:
            raise DataError(f"document {self.id!r} has empty text")
        if not isinstance(self.source, Source):
            object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class EvidenceChunk:
    """A contiguous segment of a document, with provenance offsets."""

    doc_id: str
    start: int
    end: int
    text: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise DataError(f"bad chunk offsets [{self.start}, {self.end}) for doc {self.doc_id!r}")
        if len(self.text) != self.end - self.start:
            raise DataError(f"chunk text length {len(self.text)} does not match offsets "
                            f"[{self.start}, {self.end}) for doc {self.doc_id!r}")

    def check_against(self, doc: Document) -> None:
        """Verify this chunk really is a slice of doc."""
        if self.doc_id != doc.id:
            raise DataError(f"chunk belongs to {self.doc_id!r}, not {doc.id!r}")
        if self.end > len(doc.text) or doc.text[self.start : self.end] != self.text:
            raise DataError(f"chunk [{self.start}, {self.end}) is not a slice of doc {doc.id!r}")


@dataclass(frozen=True)
class TrainingTuple:
    """One unit of relevance supervision: (question, document, evidence, support)."""

    question: str
    doc_id: str
    evidence: EvidenceChunk
    support: SupportLevel
    provenance: Provenance = Provenance.BENCHMARK

    def __post_init__(self):
        if not self.question:
            raise DataError("training tuple question must be non-empty")
        if self.evidence.doc_id != self.doc_id:
            raise DataError(f"tuple doc_id {self.doc_id!r} does not match evidence doc "
                            f"{self.evidence.doc_id!r}")
        if not isinstance(self.support, SupportLevel):
            object.__setattr__(self, "support", SupportLevel.from_value(self.support))
        if not isinstance(self.provenance, Provenance):
            object.__setattr__(self, "provenance", Provenance(self.provenance))


@dataclass(frozen=True)
class ChunkingPolicy:
    """Size limits for evidence chunks: at most max_words words or max_sentences sentences."""

    max_words: int = 50
    max_sentences: int = 3

    def __post_init__(self):
        if self.max_words < 1 or self.max_sentences < 1:
            raise DataError("chunking limits must be >= 1")


class Corpus:
    """An ordered collection of documents with unique ids."""

    def __init__(self, documents: Iterable[Document] = ()):
        self._docs: dict[str, Document] = {}
        for doc in documents:
            self.add(doc)

    def add(self, doc: Document) -> None:
        if doc.id in self._docs:
            raise DataError(f"duplicate document id {doc.id!r}")
        self._docs[doc.id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __getitem__(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise DataError(f"unknown document id {doc_id!r}") from None

    def ids(self) -> list[str]:
        return list(self._docs)

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self._docs == other._docs


def chunk_document(doc: Document, policy: ChunkingPolicy = ChunkingPolicy()) -> list[EvidenceChunk]:
    """Segment a document into evidence chunks under the policy limits.

    Sentences are packed greedily left to right; a chunk closes when
    adding the next sentence would exceed max_words or max_sentences.
    A single sentence longer than max_words is split at word boundaries.
    Chunks never overlap and cover all non-whitespace text in order.
    """
    # Units are (start, end, word_count): whole sentences, or word-boundary
    # slices of sentences that alone exceed the word limit.
    units: list[tuple[int, int, int]] = []
    for s_start, s_end in sentence_spans(doc.text):
        words = word_spans(doc.text[s_start:s_end])
        if len(words) <= policy.max_words:
            units.append((s_start, s_end, len(words)))
        else:
            for i in range(0, len(words), policy.max_words):
                group = words[i : i + policy.max_words]
                units.append((s_start + group[0][0], s_start + group[-1][1], len(group)))

    chunks: list[EvidenceChunk] = []
    current: list[tuple[int, int, int]] = []
    current_words = 0

    def close():
        nonlocal current, current_words
        if current:
            start, end = current[0][0], current[-1][1]
            chunks.append(EvidenceChunk(doc.id, start, end, doc.text[start:end]))
            current = []
            current_words = 0

    for unit in units:
        if current and (current_words + unit[2] > policy.max_words
                        or len(current) + 1 > policy.max_sentences):
            close()
        current.append(unit)
        current_words += unit[2]
    close()
    return chunks


# ---------------------------------------------------------------------------
# JSONL serialization. One object per line, schema version in each record;
# loaders accept records without the version field and treat them as v1.


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _support_json(support: SupportLevel):
    v = float(support)
    return int(v) if v in (0.0, 1.0) else v


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(_dump_line({"v": SCHEMA_VERSION, "id": doc.id, "title": doc.title,
                                 "text": doc.text, "source": doc.source.value}) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    """Load a corpus JSONL file; errors carry the offending line number."""
    corpus = Corpus()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Document(id=rec["id"], title=rec.get("title", ""),
                               text=rec["text"], source=Source(rec.get("source", "other")))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: malformed corpus record ({exc})") from None
            corpus.add(doc)
    return corpus


def save_tuples(tuples: Iterable[TrainingTuple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tuples:
            fh.write(_dump_line({
                "v": SCHEMA_VERSION,
                "question": t.question,
                "doc_id": t.doc_id,
                "evidence": {"start": t.evidence.start, "end": t.evidence.end,
                             "text": t.evidence.text},
                "support": _support_json(t.support),
                "provenance": t.provenance.value,
            }) + "\n")


def load_tuples(path: str | Path) -> list[TrainingTuple]:
    out: list[TrainingTuple] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ev = rec["evidence"]
                out.append(TrainingTuple(
                    question=rec["question"],
                    doc_id=rec["doc_id"],
                    evidence=EvidenceChunk(rec["doc_id"], ev["start"], ev["end"], ev["text"]),
                    support=SupportLevel.from_value(rec["support"]),
                    provenance=Provenance(rec.get("provenance", "benchmark")),
                ))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: malformed tuple record ({exc})") from None
    return out
