"""Command-line pipeline driver.

Eight sequential commands share one TOML config: ingest, generate-data,
train, adaptive-label, build-index, eval-retrieval, answer, report.
Every command writes a manifest under the run directory recording the
resolved config, input and output hashes, and oracle usage, so a rerun
with the same config and seed is byte-auditable end to end.

Exit codes: 0 success, 2 config error, 3 oracle budget exhausted,
4 data error, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Any

from .clustering import (cluster_questions, cluster_report_lines,
                         select_diverse_demonstrations)
from .config import COMMANDS, RunConfig, load_run_config
from .data import (Provenance, SupportLevel, TrainingTuple, chunk_document,
                   load_corpus, load_tuples, save_corpus, save_tuples)
from .encoder import DOCUMENT, QUERY, encode, load_checkpoint, params_hash, save_checkpoint
from .errors import (BudgetExhaustedError, ConfigError, DataError,
                     OracleTransportError, RagkitError)
from .index import build as build_vector_index
from .index import load_index, recall_at_k, save_index, search
from .inference import (HttpChatReader, PositionAgnosticReader,
                        PositionBiasedReader, answer, exact_match_rate)
from .labeler import (HttpChatLabeler, HttpOracleConfig, MockLabeler,
                      OracleBudget, mine_negative_candidates,
                      score_and_filter_negatives)
from .rng import substream
from .training import adaptive_round, metrics_to_csv, train

__all__ = ["main", "run"]


# ---------------------------------------------------------------------------
# Manifests


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", "utf-8")


def _write_manifest(cfg: RunConfig, command: str, inputs: list[Path],
                    outputs: list[Path], oracle_calls: int,
                    summary: dict) -> dict:
    """Record what a command read, wrote, and spent.

    No timestamps on purpose: a rerun with identical config and seed
    must produce a byte-identical manifest.
    """
    manifest = {
        "command": command,
        "config": cfg.snapshot(),
        "provenance": cfg.provenance,
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "outputs": {str(p): _sha256_file(p) for p in outputs},
        "oracle_calls": oracle_calls,
        "summary": summary,
    }
    _dump_json(manifest, cfg.run_dir / "manifests" / f"{command}.json")
    return manifest


def _reports_dir(cfg: RunConfig) -> Path:
    return cfg.run_dir / "reports"


# ---------------------------------------------------------------------------
# Shared constructors


def _http_config(cfg: RunConfig) -> HttpOracleConfig:
    s = cfg.oracle
    return HttpOracleConfig(
        endpoint=s.endpoint, model=s.model, api_key_env=s.api_key_env,
        max_retries=s.max_retries, backoff_base=s.backoff_base,
        max_in_flight=s.max_in_flight, timeout=s.timeout,
        audit_path=str(_reports_dir(cfg) / "oracle_audit.jsonl"),
        cost_per_call=s.cost_per_call)


def _make_oracle(cfg: RunConfig):
    budget = OracleBudget(cfg.oracle.max_calls)
    if cfg.oracle.kind == "mock":
        return MockLabeler(seed=cfg.oracle.seed, budget=budget,
                           chunking=cfg.chunking,
                           cost_per_call=cfg.oracle.cost_per_call)
    _reports_dir(cfg).mkdir(parents=True, exist_ok=True)
    return HttpChatLabeler(_http_config(cfg), budget=budget,
                           chunking=cfg.chunking)


def _make_reader(cfg: RunConfig):
    r = cfg.reader
    if r.kind == "agnostic":
        return PositionAgnosticReader(base_rate=r.base_rate, bonus=r.bonus,
                                      seed=r.seed)
    if r.kind == "biased":
        return PositionBiasedReader(base_rate=r.base_rate, bonus=r.bonus,
                                    middle_weight=r.middle_weight, seed=r.seed)
    _reports_dir(cfg).mkdir(parents=True, exist_ok=True)
    return HttpChatReader(_http_config(cfg))


def _load_jsonl(path: Path, required: tuple[str, ...]) -> list[dict]:
    rows = []
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        missing = [key for key in required if key not in row]
        if missing:
            raise DataError(f"{path}:{lineno}: missing keys {missing}")
        rows.append(row)
    return rows


def _checkpoint_for_index(cfg: RunConfig, index) -> Any:
    """Load the encoder and refuse to pair it with a stale index."""
    params = load_checkpoint(cfg.paths.checkpoint)
    if index.checkpoint_hash and index.checkpoint_hash != params_hash(params):
        raise DataError(
            "index was built from a different checkpoint "
            f"({index.checkpoint_hash[:12]}... != {params_hash(params)[:12]}...)")
    return params


# ---------------------------------------------------------------------------
# Commands


def _cmd_ingest(cfg: RunConfig) -> dict:
    source = Path(cfg.option("ingest", "input"))
    corpus = load_corpus(source)
    if len(corpus) == 0:
        raise DataError(f"corpus {source} holds no documents")
    out_path = Path(cfg.paths.corpus)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out_path)

    chunk_counts = []
    word_counts = []
    by_source: collections.Counter = collections.Counter()
    for doc in corpus:
        chunks = chunk_document(doc, cfg.chunking)
        chunk_counts.append(len(chunks))
        word_counts.extend(len(c.text.split()) for c in chunks)
        by_source[doc.source.value] += 1
    stats = {
        "documents": len(corpus),
        "chunks": sum(chunk_counts),
        "chunks_per_document": {
            "min": min(chunk_counts), "max": max(chunk_counts),
            "mean": round(sum(chunk_counts) / len(chunk_counts), 4),
        },
        "words_per_chunk": {
            "min": min(word_counts), "max": max(word_counts),
            "mean": round(sum(word_counts) / len(word_counts), 4),
        },
        "by_source": dict(sorted(by_source.items())),
    }
    stats_path = _reports_dir(cfg) / "ingest_stats.json"
    _dump_json(stats, stats_path)
    return _write_manifest(cfg, "ingest", [source], [out_path, stats_path], 0,
                           {"documents": len(corpus)})


def _cmd_generate_data(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.paths.corpus)
    oracle = _make_oracle(cfg)
    max_docs = cfg.option("generate_data", "max_docs")
    negatives_k = cfg.option("generate_data", "negatives_per_question")
    docs = list(corpus)
    if max_docs is not None:
        docs = docs[:max_docs]
    if not docs:
        raise DataError("no documents to generate questions from")

    chunks_by_doc = {doc.id: chunk_document(doc, cfg.chunking) for doc in corpus}
    questions: list[str] = []
    tuples: list[TrainingTuple] = []
    for doc in docs:
        question, evidence = oracle.generate_question(doc)
        questions.append(question)
        tuples.append(TrainingTuple(question, doc.id, evidence, SupportLevel.FULL,
                                    Provenance.GENERATED))

    # Hard negatives come from other documents' chunks, oracle-scored so
    # accidental full-support matches are filtered out.
    positives = list(tuples)
    for question, positive in zip(questions, positives):
        pool = [chunk for doc_id, chunks in chunks_by_doc.items()
                if doc_id != positive.doc_id for chunk in chunks]
        candidates = mine_negative_candidates(positive, pool, negatives_k)
        for chunk, support in score_and_filter_negatives(question, candidates, oracle):
            tuples.append(TrainingTuple(question, chunk.doc_id, chunk, support,
                                        Provenance.GENERATED))

    tuples_path = Path(cfg.paths.tuples)
    tuples_path.parent.mkdir(parents=True, exist_ok=True)
    save_tuples(tuples, tuples_path)

    clustering = dataclasses.replace(cfg.clustering,
                                     k=min(cfg.clustering.k, len(questions)))
    clusters = cluster_questions(questions, clustering)
    demos = select_diverse_demonstrations(
        clusters, questions, cfg.option("generate_data", "demos_per_cluster"),
        seed=clustering.seed)

    support_counts = collections.Counter(t.support.name for t in tuples)
    report = {
        "questions": len(questions),
        "tuples": len(tuples),
        "support_counts": dict(sorted(support_counts.items())),
        "clusters": cluster_report_lines(clusters, questions),
        "demonstrations": demos,
        "oracle_cost": oracle.cost,
    }
    report_path = _reports_dir(cfg) / "generate_data.json"
    _dump_json(report, report_path)
    return _write_manifest(cfg, "generate-data", [Path(cfg.paths.corpus)],
                           [tuples_path, report_path], oracle.calls_used,
                           {"questions": len(questions), "tuples": len(tuples)})


def _split_dev(tuples: list[TrainingTuple], fraction: float,
               seed: int) -> tuple[list[TrainingTuple], list[TrainingTuple] | None]:
    """Hold out a fraction of queries (whole groups, never split)."""
    if fraction <= 0:
        return tuples, None
    questions = list(dict.fromkeys(t.question for t in tuples))
    n_dev = int(round(len(questions) * fraction))
    if n_dev == 0:
        return tuples, None
    perm = substream(seed, "cli-dev-split").permutation(len(questions))
    dev_questions = {questions[int(i)] for i in perm[:n_dev]}
    dev = [t for t in tuples if t.question in dev_questions]
    kept = [t for t in tuples if t.question not in dev_questions]
    if not kept:
        raise DataError("dev split left no training tuples")
    return kept, dev


def _cmd_train(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.paths.corpus)
    tuples = load_tuples(cfg.paths.tuples)
    kept, dev = _split_dev(tuples, cfg.option("train", "dev_fraction"), cfg.seed)
    result = train(corpus, kept, cfg.schedule, cfg.loss, cfg.encoder,
                   dev_tuples=dev)

    ckpt_path = Path(cfg.paths.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, ckpt_path)
    metrics_path = _reports_dir(cfg) / "train_metrics.csv"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text(metrics_to_csv(result.history), "utf-8")
    report = {
        "checkpoint_hash": params_hash(result.params),
        "group_report": result.group_report,
        "flagged_queries": result.flagged_queries,
        "refresh_count": result.refresh_count,
        "skipped_examples": result.skipped_examples,
        "train_tuples": len(kept),
        "dev_tuples": len(dev) if dev else 0,
    }
    report_path = _reports_dir(cfg) / "train_report.json"
    _dump_json(report, report_path)
    return _write_manifest(
        cfg, "train", [Path(cfg.paths.corpus), Path(cfg.paths.tuples)],
        [ckpt_path, metrics_path, report_path], 0,
        {"checkpoint_hash": report["checkpoint_hash"]})


def _cmd_adaptive_label(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.paths.corpus)
    params = load_checkpoint(cfg.paths.checkpoint)
    pairs_path = Path(cfg.option("adaptive_label", "pairs"))
    rows = _load_jsonl(pairs_path, ("question", "doc_id"))
    if not rows:
        raise DataError(f"no unlabeled pairs in {pairs_path}")
    pairs = [(row["question"], corpus[row["doc_id"]]) for row in rows]

    clustering = dataclasses.replace(cfg.clustering,
                                     k=min(cfg.clustering.k, len(pairs)))
    clusters = cluster_questions([q for q, _ in pairs], clustering)
    oracle = _make_oracle(cfg)
    result = adaptive_round(params, pairs, clusters, cfg.adaptive, oracle,
                            cfg.chunking)

    out_raw = cfg.option("adaptive_label", "output")
    out_path = Path(out_raw) if out_raw else cfg.run_dir / "adaptive_tuples.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_tuples(result.self_labeled + result.oracle_labeled, out_path)
    report = dict(result.report)
    report["oracle_cost"] = oracle.cost
    report_path = _reports_dir(cfg) / "adaptive_label.json"
    _dump_json(report, report_path)
    return _write_manifest(
        cfg, "adaptive-label",
        [Path(cfg.paths.corpus), Path(cfg.paths.checkpoint), pairs_path],
        [out_path, report_path], oracle.calls_used,
        {"self_labeled": len(result.self_labeled),
         "oracle_labeled": len(result.oracle_labeled)})


def _cmd_build_index(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.paths.corpus)
    if len(corpus) == 0:
        raise DataError("cannot index an empty corpus")
    params = load_checkpoint(cfg.paths.checkpoint)
    embeddings = {doc.id: encode(params, doc.text, DOCUMENT) for doc in corpus}
    index = build_vector_index(embeddings, checkpoint_hash=params_hash(params))
    index_path = Path(cfg.paths.index)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, index_path)
    return _write_manifest(
        cfg, "build-index",
        [Path(cfg.paths.corpus), Path(cfg.paths.checkpoint)], [index_path], 0,
        {"vectors": len(index), "dimension": index.dimension})


def _cmd_eval_retrieval(cfg: RunConfig) -> dict:
    index = load_index(cfg.paths.index)
    params = _checkpoint_for_index(cfg, index)
    pairs_path = Path(cfg.option("eval_retrieval", "pairs"))
    rows = _load_jsonl(pairs_path, ("question", "gold"))
    if not rows:
        raise DataError(f"no evaluation pairs in {pairs_path}")
    ks = cfg.option("eval_retrieval", "ks")

    results = []
    gold = {}
    for qi, row in enumerate(rows):
        qid = f"q{qi:05d}"
        vec = encode(params, row["question"], QUERY)
        results.append(search(index, vec, max(ks), query_id=qid))
        gold[qid] = row["gold"]
    recalls = {k: recall_at_k(results, gold, k) for k in sorted(set(ks))}

    lines = ["k,recall"] + [f"{k},{recalls[k]:.4f}" for k in sorted(recalls)]
    csv_path = _reports_dir(cfg) / "eval_metrics.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text("\n".join(lines) + "\n", "utf-8")
    report = {
        "queries": len(rows),
        "recall_at": {str(k): round(v, 6) for k, v in recalls.items()},
        "index_vectors": len(index),
    }
    report_path = _reports_dir(cfg) / "eval_retrieval.json"
    _dump_json(report, report_path)
    return _write_manifest(
        cfg, "eval-retrieval",
        [Path(cfg.paths.index), Path(cfg.paths.checkpoint), pairs_path],
        [csv_path, report_path], 0, {"recall_at": report["recall_at"]})


def _cmd_answer(cfg: RunConfig) -> dict:
    index = load_index(cfg.paths.index)
    params = _checkpoint_for_index(cfg, index)
    corpus = load_corpus(cfg.paths.corpus)
    questions_path = Path(cfg.option("answer", "questions"))
    rows = _load_jsonl(questions_path, ("question", "candidates"))
    if not rows:
        raise DataError(f"no questions in {questions_path}")
    reader = _make_reader(cfg)
    mode = cfg.option("answer", "mode")
    texts = {doc.id: doc.text for doc in corpus}
    documents = {doc.id: doc for doc in corpus}

    traces = []
    predictions = []
    golds = []
    for row in rows:
        result, trace = answer(
            row["question"], row["candidates"], index, texts, params,
            cfg.ordering, reader, mode=mode, documents=documents,
            chunking=cfg.chunking,
            parallelism=cfg.option("answer", "parallelism"))
        best = result.best
        trace["best"] = best
        if "gold" in row:
            trace["gold"] = row["gold"]
            predictions.append(best)
            golds.append(row["gold"])
        traces.append(trace)

    traces_path = cfg.run_dir / "traces" / "answer_traces.jsonl"
    traces_path.parent.mkdir(parents=True, exist_ok=True)
    traces_path.write_text(
        "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces), "utf-8")
    report = {
        "questions": len(rows),
        "exact_match": round(exact_match_rate(predictions, golds), 6)
            if golds else None,
        "answered_with_gold": len(golds),
    }
    report_path = _reports_dir(cfg) / "answer_report.json"
    _dump_json(report, report_path)
    return _write_manifest(
        cfg, "answer",
        [Path(cfg.paths.index), Path(cfg.paths.checkpoint),
         Path(cfg.paths.corpus), questions_path],
        [traces_path, report_path], 0, {"questions": len(rows)})


def _cmd_report(cfg: RunConfig) -> dict:
    manifests_dir = cfg.run_dir / "manifests"
    manifest_paths = sorted(p for p in manifests_dir.glob("*.json")
                            if p.name != "report.json") \
        if manifests_dir.is_dir() else []
    if not manifest_paths:
        raise DataError(f"no manifests under {manifests_dir}; run a command first")

    commands = {}
    artifacts = {}
    total_calls = 0
    for manifest_path in manifest_paths:
        recorded = json.loads(manifest_path.read_text("utf-8"))
        commands[recorded["command"]] = {
            "inputs": len(recorded["inputs"]),
            "outputs": len(recorded["outputs"]),
            "oracle_calls": recorded["oracle_calls"],
            "summary": recorded["summary"],
        }
        artifacts.update(recorded["outputs"])
        total_calls += recorded["oracle_calls"]
    summary = {
        "commands": commands,
        "artifacts": dict(sorted(artifacts.items())),
        "total_oracle_calls": total_calls,
    }
    summary_path = _reports_dir(cfg) / "summary.json"
    _dump_json(summary, summary_path)
    for name, entry in commands.items():
        print(f"{name}: {entry['outputs']} artifact(s), "
              f"{entry['oracle_calls']} oracle call(s)")
    return _write_manifest(cfg, "report", manifest_paths, [summary_path],
                           0, {"commands": sorted(commands)})


_HANDLERS = {
    "ingest": _cmd_ingest,
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "adaptive-label": _cmd_adaptive_label,
    "build-index": _cmd_build_index,
    "eval-retrieval": _cmd_eval_retrieval,
    "answer": _cmd_answer,
    "report": _cmd_report,
}


def run(command: str, cfg: RunConfig) -> dict:
    """Execute one pipeline command; returns its manifest."""
    if command not in _HANDLERS:
        raise ConfigError([f"unknown command {command!r}"])
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    return _HANDLERS[command](cfg)


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragkit",
        description="Retriever training and retrieval-augmented answering pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} step")
        cmd.add_argument("--config", default="ragkit.toml",
                         help="path to the TOML run configuration")
        cmd.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config field (dotted path)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="shorthand for --set seed=N")
        cmd.add_argument("--run-dir", default=None,
                         help="shorthand for --set run_dir=DIR")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.run_dir is not None:
        overrides.append(f"run_dir='{args.run_dir}'")
    try:
        cfg = load_run_config(args.config, overrides, command=args.command)
        manifest = run(args.command, cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except BudgetExhaustedError as exc:
        print(f"oracle budget exhausted: {exc}", file=sys.stderr)
        return 3
    except (DataError, OracleTransportError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except RagkitError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 5
    outputs = ", ".join(manifest["outputs"]) or "none"
    print(f"{args.command}: ok ({manifest['oracle_calls']} oracle calls) -> {outputs}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
