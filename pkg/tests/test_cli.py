"""Config loading and CLI command tests.

Commands run in a temp working directory through cli.main, the same
entry point the console script uses, so exit codes and manifests are
exercised end to end.
"""

import json
import hashlib
from pathlib import Path

import pytest

from ragkit import cli
from ragkit.config import (OracleSettings, load_run_config, parse_override)
from ragkit.data import load_corpus, load_tuples, save_corpus, save_tuples
from ragkit.errors import ConfigError, InvariantError
from ragkit.synthetic import adaptive_task, sample_corpus, separable_task
from ragkit.training import TrainSchedule


def write_config(path: Path, body: str) -> Path:
    path.write_text(body, "utf-8")
    return path


MINIMAL = """
seed = 5
run_dir = "run"
"""


class TestParseOverride:
    def test_typed_values(self):
        assert parse_override("seed=3") == ("seed", 3)
        assert parse_override("schedule.lr=0.5") == ("schedule.lr", 0.5)
        assert parse_override("loss.include_positive_in_pairs=false") == (
            "loss.include_positive_in_pairs", False)
        assert parse_override("eval_retrieval.ks=[1, 5]") == (
            "eval_retrieval.ks", [1, 5])
        assert parse_override("paths.corpus='a b.jsonl'") == (
            "paths.corpus", "a b.jsonl")

    def test_bare_strings_pass_through(self):
        # Unquoted paths are not valid TOML literals; keep them as-is.
        assert parse_override("paths.corpus=data/x.jsonl") == (
            "paths.corpus", "data/x.jsonl")

    @pytest.mark.parametrize("text", ["seed", "=3", "  =x"])
    def test_malformed_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)


class TestLoadRunConfig:
    def test_defaults_fill_in(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path / "c.toml", MINIMAL))
        assert cfg.seed == 5
        assert cfg.run_dir == Path("run")
        assert cfg.paths.corpus == str(Path("run") / "corpus.jsonl")
        assert cfg.paths.checkpoint == str(Path("run") / "encoder.ckpt")
        assert cfg.schedule.warmup_epochs == 1
        assert cfg.oracle.kind == "mock"
        assert cfg.option("eval_retrieval", "ks") == [1, 10]

    def test_file_values_and_overrides_win(self, tmp_path):
        path = write_config(tmp_path / "c.toml", MINIMAL + """
[schedule]
lr = 0.5
main_epochs = 2
""")
        cfg = load_run_config(path, overrides=["schedule.lr=0.25", "seed=9"])
        assert cfg.schedule.lr == 0.25
        assert cfg.schedule.main_epochs == 2
        assert cfg.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_run_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigError, match="not valid TOML"):
            load_run_config(write_config(tmp_path / "c.toml", "seed = = 3"))

    def test_all_problems_reported_at_once(self, tmp_path):
        path = write_config(tmp_path / "c.toml", """
seed = "high"
[schedule]
lr = -1.0
typo_field = 3
[mystery]
x = 1
[answer]
mode = "sideways"
""")
        with pytest.raises(ConfigError) as err:
            load_run_config(path)
        text = "\n".join(err.value.problems)
        assert "seed: expected int" in text
        assert "schedule: lr must be positive" in text
        assert "schedule.typo_field: unknown field" in text
        assert "mystery: unknown section or field" in text
        assert "answer.mode: must be 'docs' or 'chunks'" in text
        assert len(err.value.problems) == 5

    def test_type_mismatches_carry_field_paths(self, tmp_path):
        path = write_config(tmp_path / "c.toml", """
[encoder]
dim = true
[eval_retrieval]
ks = [1, "ten"]
""")
        with pytest.raises(ConfigError) as err:
            load_run_config(path)
        text = "\n".join(err.value.problems)
        assert "encoder.dim: expected int" in text
        assert "eval_retrieval.ks[1]: expected int" in text

    def test_http_oracle_requires_endpoint_and_model(self, tmp_path):
        path = write_config(tmp_path / "c.toml", """
[oracle]
kind = "http"
""")
        with pytest.raises(ConfigError) as err:
            load_run_config(path)
        text = "\n".join(err.value.problems)
        assert "oracle.endpoint: required" in text
        assert "oracle.model: required" in text

    def test_none_literal_for_optional_fields(self, tmp_path):
        path = write_config(tmp_path / "c.toml", "[oracle]\nmax_calls = 4\n")
        cfg = load_run_config(path, overrides=["oracle.max_calls=none"])
        assert cfg.oracle.max_calls is None

    def test_snapshot_is_json_ready(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path / "c.toml", MINIMAL))
        snap = json.loads(json.dumps(cfg.snapshot(), sort_keys=True))
        assert snap["seed"] == 5
        assert snap["schedule"]["batch_size"] == 32
        assert snap["paths"]["index"] == str(Path("run") / "index.bin")

    @pytest.mark.parametrize("body,fragment", [
        ("[train]\ndev_fraction = 1.5\n", "train.dev_fraction"),
        ("[eval_retrieval]\nks = []\n", "eval_retrieval.ks"),
        ("[generate_data]\nnegatives_per_question = 0\n",
         "generate_data.negatives_per_question"),
        ("[answer]\nparallelism = 0\n", "answer.parallelism"),
        ("[reader]\nkind = \"psychic\"\n", "reader.kind"),
    ], ids=["dev-fraction", "empty-ks", "bad-negatives", "parallelism", "reader-kind"])
    def test_range_checks(self, tmp_path, body, fragment):
        with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
            load_run_config(write_config(tmp_path / "c.toml", MINIMAL + body))


class TestProvenanceAndSeeds:
    def test_provenance_tracks_origin(self, tmp_path):
        path = write_config(tmp_path / "c.toml", MINIMAL + "[schedule]\nlr = 0.5\n")
        cfg = load_run_config(path, overrides=["schedule.batch_size=8"])
        assert cfg.provenance["seed"] == "file"
        assert cfg.provenance["schedule.lr"] == "file"
        assert cfg.provenance["schedule.batch_size"] == "override"
        assert cfg.provenance["schedule.main_epochs"] == "default"
        assert cfg.provenance["schedule.seed"] == "derived"

    def test_unset_module_seeds_derive_from_global(self, tmp_path):
        path = write_config(tmp_path / "c.toml", MINIMAL)
        first = load_run_config(path)
        again = load_run_config(path)
        other = load_run_config(path, overrides=["seed=6"])
        assert first.schedule.seed == again.schedule.seed
        assert first.schedule.seed != other.schedule.seed
        # Named substreams keep modules decorrelated.
        assert first.schedule.seed != first.clustering.seed

    def test_explicit_module_seed_wins(self, tmp_path):
        path = write_config(tmp_path / "c.toml", MINIMAL + "[schedule]\nseed = 77\n")
        cfg = load_run_config(path)
        assert cfg.schedule.seed == 77
        assert cfg.provenance["schedule.seed"] == "file"

    def test_provenance_logged(self, tmp_path, caplog):
        with caplog.at_level("INFO", logger="ragkit.config"):
            load_run_config(write_config(tmp_path / "c.toml", MINIMAL))
        lines = [r.message for r in caplog.records]
        assert any("config seed = 5 (file)" in line for line in lines)
        assert any("config schedule.lr = 0.01 (default)" in line for line in lines)


class TestCommandValidation:
    def test_required_option_enforced_per_command(self, tmp_path):
        path = write_config(tmp_path / "c.toml", MINIMAL)
        load_run_config(path)  # fine without a command
        with pytest.raises(ConfigError, match="ingest.input: required"):
            load_run_config(path, command="ingest")

    def test_input_paths_must_exist(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.toml",
                            MINIMAL + "[ingest]\ninput = \"absent.jsonl\"\n")
        with pytest.raises(ConfigError, match="path does not exist"):
            load_run_config(path, command="ingest")

    def test_train_checks_corpus_and_tuples(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_config(tmp_path / "c.toml", MINIMAL)
        with pytest.raises(ConfigError) as err:
            load_run_config(path, command="train")
        text = "\n".join(err.value.problems)
        assert "paths.corpus" in text
        assert "paths.tuples" in text

    def test_unknown_command_rejected(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path / "c.toml", MINIMAL))
        with pytest.raises(ConfigError, match="unknown command"):
            cli.run("transmogrify", cfg)


# ---------------------------------------------------------------------------
# Command runs


SMALL_SECTIONS = """
[encoder]
dim = 32
feature_dim = 2048

[schedule]
warmup_epochs = 1
main_epochs = 1

[clustering]
k = 3
"""


def seed_corpus(tmp_path: Path, num_docs: int = 12) -> Path:
    path = tmp_path / "raw.jsonl"
    save_corpus(sample_corpus(num_docs=num_docs, seed=3), path)
    return path


def run_ingest(tmp_path: Path, extra: str = "") -> Path:
    seed_corpus(tmp_path)
    config = write_config(tmp_path / "ragkit.toml",
                          MINIMAL + SMALL_SECTIONS + extra +
                          "\n[ingest]\ninput = \"raw.jsonl\"\n")
    assert cli.main(["ingest", "--config", str(config)]) == 0
    return config


class TestIngestCommand:
    def test_writes_corpus_stats_and_manifest(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        run_ingest(tmp_path)
        corpus = load_corpus(tmp_path / "run" / "corpus.jsonl")
        assert len(corpus) == 12
        stats = json.loads((tmp_path / "run" / "reports" / "ingest_stats.json")
                           .read_text())
        assert stats["documents"] == 12
        assert stats["chunks"] >= 12
        assert stats["words_per_chunk"]["min"] >= 1
        manifest = json.loads((tmp_path / "run" / "manifests" / "ingest.json")
                              .read_text())
        assert manifest["command"] == "ingest"
        assert manifest["oracle_calls"] == 0
        assert manifest["config"]["seed"] == 5
        assert manifest["provenance"]["schedule.seed"] == "derived"

    def test_manifest_hashes_match_files(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        run_ingest(tmp_path)
        manifest = json.loads((tmp_path / "run" / "manifests" / "ingest.json")
                              .read_text())
        for group in ("inputs", "outputs"):
            for path, recorded in manifest[group].items():
                digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
                assert digest == recorded

    def test_rerun_is_byte_identical(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path)
        manifest_path = tmp_path / "run" / "manifests" / "ingest.json"
        first = manifest_path.read_bytes()
        assert cli.main(["ingest", "--config", str(config)]) == 0
        assert manifest_path.read_bytes() == first

    def test_bundled_sample_corpus_ingests(self, tmp_path, monkeypatch):
        bundled = Path(__file__).parent.parent / "data" / "sample_corpus.jsonl"
        monkeypatch.chdir(tmp_path)
        config = write_config(tmp_path / "ragkit.toml",
                              MINIMAL + f"[ingest]\ninput = '{bundled}'\n")
        assert cli.main(["ingest", "--config", str(config)]) == 0
        stats = json.loads((tmp_path / "run" / "reports" / "ingest_stats.json")
                           .read_text())
        assert stats["documents"] == 50
        assert stats["by_source"] == {"synthetic": 50}

    def test_missing_input_exits_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config = write_config(tmp_path / "ragkit.toml",
                              MINIMAL + "[ingest]\ninput = \"absent.jsonl\"\n")
        assert cli.main(["ingest", "--config", str(config)]) == 2
        assert "path does not exist" in capsys.readouterr().err


class TestGenerateDataCommand:
    def test_tuples_report_and_oracle_accounting(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path)
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        tuples = load_tuples(tmp_path / "run" / "tuples.jsonl")
        questions = {t.question for t in tuples}
        assert len(questions) == 12
        assert all(t.provenance.value == "generated" for t in tuples)
        report = json.loads((tmp_path / "run" / "reports" / "generate_data.json")
                            .read_text())
        assert report["questions"] == 12
        assert report["tuples"] == len(tuples)
        assert len(report["demonstrations"]) >= 1
        assert sum(c["size"] for c in report["clusters"]) == 12
        manifest = json.loads(
            (tmp_path / "run" / "manifests" / "generate-data.json").read_text())
        # One generation call per doc plus one scoring call per mined negative.
        assert manifest["oracle_calls"] == 12 + 12 * 3

    def test_budget_exhaustion_exits_3(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path, extra="[oracle]\nmax_calls = 5\n")
        assert cli.main(["generate-data", "--config", str(config)]) == 3
        assert "budget" in capsys.readouterr().err


class TestTrainCommand:
    def test_identical_config_gives_identical_checkpoints(self, tmp_path,
                                                          monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path)
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        assert cli.main(["train", "--config", str(config)]) == 0
        ckpt = tmp_path / "run" / "encoder.ckpt"
        manifest_path = tmp_path / "run" / "manifests" / "train.json"
        first_bytes = ckpt.read_bytes()
        first_manifest = manifest_path.read_bytes()
        first_hash = json.loads(first_manifest)["summary"]["checkpoint_hash"]

        assert cli.main(["train", "--config", str(config)]) == 0
        assert ckpt.read_bytes() == first_bytes
        assert manifest_path.read_bytes() == first_manifest
        assert json.loads(manifest_path.read_text())["summary"][
            "checkpoint_hash"] == first_hash

    def test_different_seed_changes_checkpoint(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path)
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        assert cli.main(["train", "--config", str(config)]) == 0
        first = (tmp_path / "run" / "encoder.ckpt").read_bytes()
        assert cli.main(["train", "--config", str(config), "--seed", "6"]) == 0
        assert (tmp_path / "run" / "encoder.ckpt").read_bytes() != first

    def test_dev_split_records_recall_columns(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path, extra="[train]\ndev_fraction = 0.25\n")
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        assert cli.main(["train", "--config", str(config)]) == 0
        lines = (tmp_path / "run" / "reports" / "train_metrics.csv") \
            .read_text().splitlines()
        assert lines[0].startswith("epoch,split")
        assert not lines[1].endswith(",,")  # dev recalls filled in
        report = json.loads((tmp_path / "run" / "reports" / "train_report.json")
                            .read_text())
        assert report["dev_tuples"] > 0
        assert report["train_tuples"] + report["dev_tuples"] == \
            len(load_tuples(tmp_path / "run" / "tuples.jsonl"))


def run_pipeline(tmp_path: Path, config_body: str) -> Path:
    """ingest -> generate-data -> train -> build-index on a separable corpus."""
    task = separable_task(num_docs=60, num_queries=30, seed=3)
    save_corpus(task.corpus, tmp_path / "raw.jsonl")
    config = write_config(tmp_path / "ragkit.toml", config_body)
    for command in ("ingest", "generate-data", "train", "build-index"):
        assert cli.main([command, "--config", str(config)]) == 0, command
    return config


PIPELINE_CONFIG = MINIMAL + """
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
"""


class TestFullPipeline:
    @pytest.fixture()
    def pipeline(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        return run_pipeline(tmp_path, PIPELINE_CONFIG)

    def write_eval_pairs(self, tmp_path: Path) -> Path:
        tuples = load_tuples(tmp_path / "run" / "tuples.jsonl")
        gold = {}
        for t in tuples:
            if t.support.value == 1.0:
                gold.setdefault(t.question, t.doc_id)
        path = tmp_path / "eval.jsonl"
        with open(path, "w") as fh:
            for question, doc_id in gold.items():
                fh.write(json.dumps({"question": question, "gold": [doc_id]}) + "\n")
        return path

    def test_recall_clears_bar(self, tmp_path, pipeline):
        self.write_eval_pairs(tmp_path)
        assert cli.main(["eval-retrieval", "--config", str(pipeline),
                         "--set", "eval_retrieval.pairs='eval.jsonl'"]) == 0
        report = json.loads(
            (tmp_path / "run" / "reports" / "eval_retrieval.json").read_text())
        assert report["recall_at"]["10"] >= 0.95
        csv_lines = (tmp_path / "run" / "reports" / "eval_metrics.csv") \
            .read_text().splitlines()
        assert csv_lines[0] == "k,recall"
        assert len(csv_lines) == 3

    def test_stale_index_detected(self, tmp_path, pipeline, capsys):
        self.write_eval_pairs(tmp_path)
        # Retrain with a different seed so the checkpoint no longer matches.
        assert cli.main(["train", "--config", str(pipeline), "--seed", "99"]) == 0
        code = cli.main(["eval-retrieval", "--config", str(pipeline),
                         "--set", "eval_retrieval.pairs='eval.jsonl'"])
        assert code == 4
        assert "different checkpoint" in capsys.readouterr().err

    def test_answer_writes_traces_and_report(self, tmp_path, pipeline):
        corpus = load_corpus(tmp_path / "run" / "corpus.jsonl")
        docs = list(corpus)
        rares = [doc.text.split()[0].lower() for doc in docs]
        rows = [
            {"question": f"what is {rares[0]}?",
             "candidates": [rares[0], rares[1]], "gold": rares[0]},
            {"question": f"what is {rares[2]}?",
             "candidates": [rares[2], rares[3]], "gold": rares[2]},
        ]
        questions = tmp_path / "questions.jsonl"
        questions.write_text("".join(json.dumps(r) + "\n" for r in rows))
        assert cli.main(["answer", "--config", str(pipeline),
                         "--set", "answer.questions='questions.jsonl'"]) == 0

        traces = [json.loads(line) for line in
                  (tmp_path / "run" / "traces" / "answer_traces.jsonl")
                  .read_text().splitlines()]
        assert len(traces) == 2
        for trace, row in zip(traces, rows):
            assert trace["best"] == row["gold"]
            assert trace["mode"] == "docs"
            assert len(trace["permutations"]) == 4
        report = json.loads((tmp_path / "run" / "reports" / "answer_report.json")
                            .read_text())
        assert report["exact_match"] == 1.0
        assert report["questions"] == 2

    def test_report_aggregates_manifests(self, tmp_path, pipeline, capsys):
        assert cli.main(["report", "--config", str(pipeline)]) == 0
        out = capsys.readouterr().out
        assert "ingest:" in out and "train:" in out
        summary = json.loads((tmp_path / "run" / "reports" / "summary.json")
                             .read_text())
        assert set(summary["commands"]) == {"ingest", "generate-data", "train",
                                            "build-index"}
        assert summary["total_oracle_calls"] > 0
        assert str(tmp_path / "run" / "encoder.ckpt") in summary["artifacts"] \
            or "run/encoder.ckpt" in summary["artifacts"]


class TestAdaptiveLabelCommand:
    def test_routes_and_saves_tuples(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        task = adaptive_task(warmup_per_pattern=12, unlabeled_per_pattern=8,
                             eval_per_pattern=4, seed=0)
        save_corpus(task.corpus, tmp_path / "raw.jsonl")
        save_tuples(task.warmup_tuples, tmp_path / "warmup.jsonl")
        with open(tmp_path / "pairs.jsonl", "w") as fh:
            for question, doc in task.unlabeled_pairs:
                fh.write(json.dumps({"question": question, "doc_id": doc.id}) + "\n")
        config = write_config(tmp_path / "ragkit.toml", f"""
seed = 0
run_dir = "run"

[paths]
corpus = "raw.jsonl"
tuples = "warmup.jsonl"

[encoder]
dim = {task.encoder_cfg.dim}
feature_dim = {task.encoder_cfg.feature_dim}

[schedule]
warmup_epochs = 1
main_epochs = 2
seed = 0

[clustering]
k = 3
seed = 0

[adaptive]
percentile = 50.0

[adaptive_label]
pairs = "pairs.jsonl"
""")
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["adaptive-label", "--config", str(config)]) == 0

        labeled = load_tuples(tmp_path / "run" / "adaptive_tuples.jsonl")
        assert len(labeled) == len(task.unlabeled_pairs)
        by_prov = {t.provenance.value for t in labeled}
        assert by_prov == {"self_labeled", "oracle_labeled"}
        report = json.loads(
            (tmp_path / "run" / "reports" / "adaptive_label.json").read_text())
        assert report["oracle_calls"] < len(task.unlabeled_pairs)
        manifest = json.loads(
            (tmp_path / "run" / "manifests" / "adaptive-label.json").read_text())
        assert manifest["oracle_calls"] == report["oracle_calls"]
        assert manifest["summary"]["self_labeled"] + \
            manifest["summary"]["oracle_labeled"] == len(labeled)


class TestExitCodes:
    def test_no_manifests_report_exits_4(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config = write_config(tmp_path / "ragkit.toml", MINIMAL)
        assert cli.main(["report", "--config", str(config)]) == 4
        assert "no manifests" in capsys.readouterr().err

    def test_invariant_violation_exits_5(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config = write_config(tmp_path / "ragkit.toml", MINIMAL)

        def explode(cfg):
            raise InvariantError("wires crossed")

        monkeypatch.setitem(cli._HANDLERS, "report", explode)
        assert cli.main(["report", "--config", str(config)]) == 5
        assert "invariant" in capsys.readouterr().err

    def test_corrupt_index_exits_4(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config = run_ingest(tmp_path)
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        assert cli.main(["train", "--config", str(config)]) == 0
        (tmp_path / "run" / "index.bin").write_bytes(b"not an index")
        (tmp_path / "eval.jsonl").write_text(
            json.dumps({"question": "what is x?", "gold": ["d0"]}) + "\n")
        code = cli.main(["eval-retrieval", "--config", str(config),
                         "--set", "eval_retrieval.pairs='eval.jsonl'"])
        assert code == 4
        assert capsys.readouterr().err.startswith("data error")

    def test_success_prints_outputs(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        run_ingest(tmp_path)
        out = capsys.readouterr().out
        assert "ingest: ok" in out
        assert "corpus.jsonl" in out


class TestSettingsDataclasses:
    def test_oracle_settings_defaults(self):
        s = OracleSettings()
        assert s.kind == "mock" and s.max_calls is None

    def test_schedule_reuse(self, tmp_path):
        # The schedule section maps onto the training dataclass directly.
        cfg = load_run_config(write_config(tmp_path / "c.toml", MINIMAL))
        assert isinstance(cfg.schedule, TrainSchedule)
