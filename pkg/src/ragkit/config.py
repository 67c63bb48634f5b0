"""Run configuration: one TOML file drives every pipeline command.

Values resolve in layers (dataclass defaults, config file, command-line
overrides) and every field remembers which layer set it, so manifests
can record provenance. Validation never stops at the first problem: all
failures are collected and reported together with dotted field paths.
"""

from __future__ import annotations

import dataclasses
import logging
import types
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

import tomli

from .clustering import ClusteringConfig
from .data import ChunkingPolicy
from .encoder import EncoderConfig
from .errors import ConfigError, RagkitError
from .inference import OrderingPlan
from .losses import LossConfig
from .rng import substream
from .training import AdaptiveConfig, TrainSchedule

__all__ = [
    "OracleSettings", "ReaderSettings", "PathsConfig", "RunConfig",
    "load_run_config", "parse_override", "COMMANDS",
]

logger = logging.getLogger("ragkit.config")

COMMANDS = (
    "ingest", "generate-data", "train", "adaptive-label",
    "build-index", "eval-retrieval", "answer", "report",
)


@dataclass(frozen=True)
class OracleSettings:
    """Which relevance oracle to construct and how to budget it."""

    kind: str = "mock"  # "mock" or "http"
    seed: int = 0
    max_calls: int | None = None
    cost_per_call: float = 0.0
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "RAGKIT_API_KEY"
    max_retries: int = 3
    backoff_base: float = 1.0
    max_in_flight: int = 4
    timeout: float = 30.0


@dataclass(frozen=True)
class ReaderSettings:
    """Which answer-scoring reader the answer command uses."""

    kind: str = "agnostic"  # "agnostic", "biased", or "http"
    seed: int = 0
    base_rate: float = 0.05
    bonus: float = 1.0
    middle_weight: float = 0.5


@dataclass(frozen=True)
class PathsConfig:
    """Shared artifact locations. Relative paths resolve against the
    working directory; unset fields land under the run directory."""

    corpus: str = ""
    tuples: str = ""
    checkpoint: str = ""
    index: str = ""


_SECTIONS: dict[str, type] = {
    "paths": PathsConfig,
    "chunking": ChunkingPolicy,
    "clustering": ClusteringConfig,
    "encoder": EncoderConfig,
    "loss": LossConfig,
    "schedule": TrainSchedule,
    "adaptive": AdaptiveConfig,
    "ordering": OrderingPlan,
    "oracle": OracleSettings,
    "reader": ReaderSettings,
}

_REQUIRED = object()

# Per-command extras: {section: {key: (type hint, default)}}. A _REQUIRED
# default means the key must be present when that command runs.
_COMMAND_OPTIONS: dict[str, dict[str, tuple[Any, Any]]] = {
    "ingest": {"input": (str, _REQUIRED)},
    "generate_data": {
        "max_docs": (int | None, None),
        "negatives_per_question": (int, 3),
        "demos_per_cluster": (int, 1),
    },
    "train": {"dev_fraction": (float, 0.0)},
    "adaptive_label": {
        "pairs": (str, _REQUIRED),
        "output": (str, ""),
    },
    "build_index": {},
    "eval_retrieval": {
        "pairs": (str, _REQUIRED),
        "ks": (list[int], [1, 10]),
    },
    "answer": {
        "questions": (str, _REQUIRED),
        "mode": (str, "docs"),
        "parallelism": (int, 4),
    },
    "report": {},
}

# Input paths each command checks for existence at validation time.
_COMMAND_INPUTS: dict[str, list[str]] = {
    "ingest": ["ingest.input"],
    "generate-data": ["paths.corpus"],
    "train": ["paths.corpus", "paths.tuples"],
    "adaptive-label": ["paths.corpus", "paths.checkpoint", "adaptive_label.pairs"],
    "build-index": ["paths.corpus", "paths.checkpoint"],
    "eval-retrieval": ["paths.corpus", "paths.checkpoint", "paths.index",
                       "eval_retrieval.pairs"],
    "answer": ["paths.corpus", "paths.checkpoint", "paths.index",
               "answer.questions"],
    "report": [],
}


def _type_name(hint: Any) -> str:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        return " | ".join(_type_name(a) for a in get_args(hint))
    if origin is list:
        return f"list[{_type_name(get_args(hint)[0])}]"
    if hint is type(None):
        return "none"
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, path: str, problems: list[str]) -> Any:
    """Check value against a type hint, recording a problem on mismatch.

    Ints promote to floats; bools never pass as ints (TOML keeps them
    distinct and so do we). Returns _REQUIRED as a failure sentinel.
    """
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        args = get_args(hint)
        if type(None) in args and (value is None or value == "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, problems)
    if origin is list:
        (item_hint,) = get_args(hint)
        if not isinstance(value, list):
            problems.append(f"{path}: expected {_type_name(hint)}, got {value!r}")
            return _REQUIRED
        out = []
        for i, item in enumerate(value):
            got = _coerce(item, item_hint, f"{path}[{i}]", problems)
            if got is _REQUIRED:
                return _REQUIRED
            out.append(got)
        return out
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected bool, got {value!r}")
            return _REQUIRED
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected int, got {value!r}")
            return _REQUIRED
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected float, got {value!r}")
            return _REQUIRED
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected str, got {value!r}")
            return _REQUIRED
        return value
    return value


def parse_override(text: str) -> tuple[str, Any]:
    """Split a --set override "dotted.path=value" into (path, value).

    The value is parsed as a TOML literal when possible (so numbers,
    bools, and lists come through typed); anything unparseable stays a
    bare string, which makes unquoted paths convenient.
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    raw = raw.strip()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def _set_dotted(tree: dict, path: str, value: Any) -> None:
    parts = path.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {path!r} descends into a non-table value"])
    node[parts[-1]] = value


def _leaf_paths(tree: dict, prefix: str = "") -> list[str]:
    out = []
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.extend(_leaf_paths(value, f"{path}."))
        else:
            out.append(path)
    return out


def _derive_seed(global_seed: int, name: str) -> int:
    """Per-module seed from the global seed via a named substream."""
    return int(substream(global_seed, f"cli-seed-{name}").integers(0, 2**31 - 1))


def _build_section(cls: type, name: str, raw: dict, override_keys: set[str],
                   global_seed: int, problems: list[str],
                   provenance: dict[str, str]) -> Any:
    hints = get_type_hints(cls)
    field_names = [f.name for f in dataclasses.fields(cls)]
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in field_names:
            problems.append(f"{path}: unknown field")
            continue
        got = _coerce(value, hints[key], path, problems)
        if got is not _REQUIRED:
            kwargs[key] = got
    for fname in field_names:
        path = f"{name}.{fname}"
        if fname in kwargs:
            provenance[path] = "override" if path in override_keys else "file"
        elif fname == "seed":
            # Unset per-module seeds derive from the one global seed, so
            # a single knob reseeds the whole pipeline.
            kwargs[fname] = _derive_seed(global_seed, name)
            provenance[path] = "derived"
        else:
            provenance[path] = "default"
    try:
        return cls(**kwargs)
    except RagkitError as exc:
        problems.append(f"{name}: {exc}")
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
    return None


def _build_options(raw_all: dict, override_keys: set[str], command: str | None,
                   problems: list[str], provenance: dict[str, str]) -> dict:
    options: dict[str, dict[str, Any]] = {}
    for section, schema in _COMMAND_OPTIONS.items():
        raw = raw_all.get(section, {})
        if not isinstance(raw, dict):
            problems.append(f"{section}: expected a table")
            raw = {}
        out: dict[str, Any] = {}
        for key, value in raw.items():
            path = f"{section}.{key}"
            if key not in schema:
                problems.append(f"{path}: unknown field")
                continue
            got = _coerce(value, schema[key][0], path, problems)
            if got is not _REQUIRED:
                out[key] = got
        for key, (_, default) in schema.items():
            path = f"{section}.{key}"
            if key in out:
                provenance[path] = "override" if path in override_keys else "file"
            elif default is _REQUIRED:
                if command is not None and command.replace("-", "_") == section:
                    problems.append(f"{path}: required for command {command!r}")
            else:
                out[key] = default
                provenance[path] = "default"
        options[section] = out
    return options


@dataclass
class RunConfig:
    """Everything a command needs: seed, artifact paths, module configs,
    transport settings, and per-command options."""

    seed: int
    run_dir: Path
    paths: PathsConfig
    chunking: ChunkingPolicy
    clustering: ClusteringConfig
    encoder: EncoderConfig
    loss: LossConfig
    schedule: TrainSchedule
    adaptive: AdaptiveConfig
    ordering: OrderingPlan
    oracle: OracleSettings
    reader: ReaderSettings
    options: dict[str, dict[str, Any]]
    provenance: dict[str, str]

    def option(self, command: str, key: str) -> Any:
        return self.options[command.replace("-", "_")][key]

    def resolve(self, dotted: str) -> Any:
        """Look up a field by its dotted path (as used in provenance)."""
        section, _, key = dotted.partition(".")
        if not key:
            return getattr(self, section)
        holder = getattr(self, section, None)
        if holder is None or section in self.options:
            return self.options[section][key]
        return getattr(holder, key)

    def snapshot(self) -> dict:
        """Plain nested dict of every resolved value, for manifests."""
        out: dict[str, Any] = {"seed": self.seed, "run_dir": str(self.run_dir)}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        for section, values in self.options.items():
            out[section] = dict(values)
        return out


def load_run_config(path: str | Path, overrides: list[str] | None = None,
                    command: str | None = None) -> RunConfig:
    """Parse, merge, and validate a run configuration.

    overrides are "dotted.path=value" strings applied on top of the
    file. When command is given, that command's required options and
    input paths are checked too. All problems raise together in one
    ConfigError, each prefixed with its field path.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file does not exist: {path}"])
    try:
        tree = tomli.loads(path.read_text("utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid TOML: {exc}"]) from exc

    override_keys = set()
    for text in overrides or []:
        key, value = parse_override(text)
        _set_dotted(tree, key, value)
        override_keys.add(key)

    problems: list[str] = []
    provenance: dict[str, str] = {}

    known = {"seed", "run_dir"} | set(_SECTIONS) | set(_COMMAND_OPTIONS)
    for key in tree:
        if key not in known:
            problems.append(f"{key}: unknown section or field")

    seed = tree.get("seed", 0)
    seed = _coerce(seed, int, "seed", problems)
    if seed is _REQUIRED:
        seed = 0
    provenance["seed"] = "override" if "seed" in override_keys else (
        "file" if "seed" in tree else "default")

    run_dir_raw = tree.get("run_dir", "runs/default")
    run_dir_raw = _coerce(run_dir_raw, str, "run_dir", problems)
    if run_dir_raw is _REQUIRED or not run_dir_raw:
        if run_dir_raw == "":
            problems.append("run_dir: must be non-empty")
        run_dir_raw = "runs/default"
    provenance["run_dir"] = "override" if "run_dir" in override_keys else (
        "file" if "run_dir" in tree else "default")
    run_dir = Path(run_dir_raw)

    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        raw = tree.get(name, {})
        if not isinstance(raw, dict):
            problems.append(f"{name}: expected a table")
            raw = {}
        sections[name] = _build_section(cls, name, raw, override_keys, seed,
                                        problems, provenance)

    # Artifact paths default to files under the run directory.
    paths = sections.get("paths")
    if paths is not None:
        defaults = {"corpus": "corpus.jsonl", "tuples": "tuples.jsonl",
                    "checkpoint": "encoder.ckpt", "index": "index.bin"}
        filled = {key: getattr(paths, key) or str(run_dir / fname)
                  for key, fname in defaults.items()}
        sections["paths"] = PathsConfig(**filled)

    options = _build_options(tree, override_keys, command, problems, provenance)

    extra_checks = {
        "train.dev_fraction": lambda v: 0.0 <= v < 1.0 or "must be in [0, 1)",
        "generate_data.negatives_per_question": lambda v: v >= 1 or "must be >= 1",
        "generate_data.demos_per_cluster": lambda v: v >= 1 or "must be >= 1",
        "answer.mode": lambda v: v in ("docs", "chunks") or "must be 'docs' or 'chunks'",
        "answer.parallelism": lambda v: v >= 1 or "must be >= 1",
        "eval_retrieval.ks": lambda v: (len(v) > 0 and all(k >= 1 for k in v))
            or "must be a non-empty list of ints >= 1",
    }
    for dotted, check in extra_checks.items():
        section, _, key = dotted.partition(".")
        if key in options.get(section, {}):
            verdict = check(options[section][key])
            if verdict is not True:
                problems.append(f"{dotted}: {verdict}")

    oracle = sections.get("oracle")
    if oracle is not None:
        if oracle.kind not in ("mock", "http"):
            problems.append("oracle.kind: must be 'mock' or 'http'")
        elif oracle.kind == "http":
            for key in ("endpoint", "model"):
                if not getattr(oracle, key):
                    problems.append(f"oracle.{key}: required when oracle.kind = 'http'")
        if oracle.max_calls is not None and oracle.max_calls < 0:
            problems.append("oracle.max_calls: must be >= 0 or unset")
    reader = sections.get("reader")
    if reader is not None and reader.kind not in ("agnostic", "biased", "http"):
        problems.append("reader.kind: must be 'agnostic', 'biased', or 'http'")
    if reader is not None and reader.kind == "http" and oracle is not None:
        # The HTTP reader rides on the oracle transport settings.
        if not oracle.endpoint or not oracle.model:
            problems.append("oracle.endpoint: required when reader.kind = 'http'")

    if command is not None and problems == []:
        for dotted in _COMMAND_INPUTS[command]:
            value = str(_lookup(sections, options, dotted))
            if not Path(value).exists():
                problems.append(f"{dotted}: path does not exist: {value}")

    if problems:
        raise ConfigError(sorted(problems))

    cfg = RunConfig(seed=seed, run_dir=run_dir, options=options,
                    provenance=provenance,
                    **{name: sections[name] for name in _SECTIONS})
    for dotted in sorted(provenance):
        logger.info("config %s = %r (%s)", dotted, cfg.resolve(dotted),
                    provenance[dotted])
    return cfg


def _lookup(sections: dict, options: dict, dotted: str) -> Any:
    section, _, key = dotted.partition(".")
    if section in options:
        return options[section][key]
    return getattr(sections[section], key)
