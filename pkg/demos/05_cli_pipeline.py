"""Walkthrough: the full pipeline through the command-line interface.

Runs every command against a synthetic corpus in a scratch directory:
ingest, generate-data, train, build-index, eval-retrieval, answer, and
report, all driven by one TOML config. Each command writes a manifest
with input/output hashes, so the run is auditable and reruns are
byte-identical.

    python3 demos/05_cli_pipeline.py
"""

import json
import os
import tempfile
from pathlib import Path

from ragkit import cli, save_corpus
from ragkit.synthetic import separable_task

workdir = Path(tempfile.mkdtemp(prefix="ragkit-demo-"))
os.chdir(workdir)
print(f"working in {workdir}")

task = separable_task(num_docs=60, num_queries=30, seed=3)
save_corpus(task.corpus, workdir / "raw.jsonl")

docs = list(task.corpus)
rares = [doc.text.split()[0].lower() for doc in docs]
with open(workdir / "eval.jsonl", "w") as fh:
    for rare, doc in zip(rares[:10], docs[:10]):
        fh.write(json.dumps({"question": f"what is {rare}?",
                             "gold": [doc.id]}) + "\n")
with open(workdir / "questions.jsonl", "w") as fh:
    for i in range(3):
        fh.write(json.dumps({"question": f"what is {rares[i]}?",
                             "candidates": [rares[i], rares[i + 1]],
                             "gold": rares[i]}) + "\n")

(workdir / "ragkit.toml").write_text("""
seed = 13
run_dir = "run"

[ingest]
input = "raw.jsonl"

[encoder]
dim = 96
feature_dim = 8192

[schedule]
warmup_epochs = 1
main_epochs = 3

[clustering]
k = 3

[eval_retrieval]
pairs = "eval.jsonl"

[answer]
questions = "questions.jsonl"
""")

for command in ("ingest", "generate-data", "train", "build-index",
                "eval-retrieval", "answer", "report"):
    code = cli.main([command, "--config", "ragkit.toml"])
    assert code == 0, f"{command} exited {code}"

print("\neval report:")
print((workdir / "run/reports/eval_retrieval.json").read_text())
print("answer report:")
print((workdir / "run/reports/answer_report.json").read_text())
trace = json.loads((workdir / "run/traces/answer_traces.jsonl")
                   .read_text().splitlines()[0])
print(f"first answer trace: question={trace['question']!r} "
      f"best={trace['best']!r} edge_size={trace['edge_size']}")
print(f"\nmanifests under {workdir / 'run/manifests'}:")
for manifest in sorted((workdir / "run/manifests").glob("*.json")):
    print(f"  {manifest.name}")
