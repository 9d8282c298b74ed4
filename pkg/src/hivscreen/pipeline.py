"""Stage orchestration: configuration, digests and artifact I/O.

Stages and their artifacts (all inside ``paths.results_dir``)::

    records   records.jsonl (+ facts.jsonl for synthetic corpora)
    split     split.json
    run       runs.jsonl
    aggregate decisions.jsonl
    evaluate  metrics.csv, confusion.csv
    analyze   analysis.json, scatter_<prompt>.csv

Each artifact carries a digest chaining its own parameters to its upstream
artifact's digest. Downstream stages refuse inputs whose digest differs from
what the current configuration expects.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from . import __version__
from .corpus import (
    DatasetSplit, PatientRecord, build_records, read_medication_csv, read_metadata_csv,
    read_notes_csv, read_virology_csv, stratified_split,
)
from .decide import ALL_STRATEGIES, AggregateDecision, Strategy, decision_row
from .evalkit import (
    MetricsError, evaluate_strategy, metrics_row, write_confusion_csv, write_metrics_csv,
)
from .inference import (
    HttpTransport, InferenceClient, InferenceConfig, InProcessTransport, RunOutput, all_failed, make_dialect,
)
from .mockserver import MockPolicy, MockServer
from .prompts import build_prompt, load_template
from .stats import LengthAnalysisConfig, LengthRecord, StatsError, run_length_analysis, scatter_csv
from .synth import SynthConfig, generate_corpus

logger = logging.getLogger(__name__)

ENV_PREFIX = "HIVSCREEN_"
STAGES = ("records", "split", "run", "aggregate", "evaluate", "analyze")

# Inference settings that change outputs (and therefore enter the digest).
_RESULT_AFFECTING = ("temperature", "top_k", "top_p", "min_p", "max_tokens", "n_runs", "seed_policy", "base_seed")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "source": "synth",  # "synth" | "ingest"
    "paths": {
        "results_dir": "results",
        "notes_csv": None,
        "metadata_csv": None,
        "medication_csv": None,
        "virology_csv": None,
    },
    "synth": {"n": 500, "inclusion_fraction": 0.1, "seed": None},
    "split": {"fraction": 0.1, "seed": None},
    "evaluate_on": "test",  # "test" | "all"
    "prompts": ["SP", "CP"],
    "strategies": [s.value for s in ALL_STRATEGIES],
    "inference": {
        "backend": "mock",  # "mock" (in-process) | "http"
        "base_url": "http://127.0.0.1:8080",
        "dialect": "native",
        "model": None,
        "api_key_env": "HIVSCREEN_API_KEY",
        "temperature": 0.8, "top_k": 64, "top_p": 0.95, "min_p": 0.0, "max_tokens": 8192,
        "n_runs": 3, "seed_policy": "per_run", "base_seed": None,
        "timeout_ms": 120000, "max_retries": 3, "backoff_ms": 250, "parallelism": 1,
    },
    "mock": {"p_flip": 0.0, "server_seed": None},
    "stats": {
        "strategy": "self_consistency",
        "input_mw_alternative": "two_sided",
        "output_mw_alternative": "two_sided",
    },
}


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class StageError(RuntimeError):
    """A stage could not complete (exit code 3)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class ServerUnreachable(RuntimeError):
    """The inference server could not be reached (exit code 4)."""


# --- configuration ------------------------------------------------------------


def _merge(base: dict[str, Any], override: Mapping[str, Any], where: str = "") -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in out and where.split(".")[0] not in ("mock", "paths"):
            raise ConfigError(f"unknown configuration key '{path}'")
        if isinstance(out.get(key), dict) and isinstance(value, Mapping):
            out[key] = _merge(out[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _set_path(tree: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"'{dotted}' does not name a nested setting")
    node[parts[-1]] = value


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    """``HIVSCREEN_SECTION__KEY=value`` pairs as a nested override dict."""
    tree: dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == DEFAULTS["inference"]["api_key_env"]:
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(tree, dotted, _parse_value(raw))
    return tree


def flag_overrides(assignments: Iterable[str]) -> dict[str, Any]:
    """``section.key=value`` strings as a nested override dict."""
    tree: dict[str, Any] = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, raw = item.split("=", 1)
        _set_path(tree, dotted.strip(), _parse_value(raw))
    return tree


@dataclass
class PipelineConfig:
    raw: dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(
        cls,
        path: str | os.PathLike | None = None,
        environ: Mapping[str, str] | None = None,
        flags: Mapping[str, Any] | None = None,
    ) -> PipelineConfig:
        """Defaults < config file < environment < command-line flags."""
        raw = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from None
            except ValueError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigError("config file must hold a JSON object")
            raw = _merge(raw, doc)
        raw = _merge(raw, env_overrides(os.environ if environ is None else environ))
        raw = _merge(raw, flags or {})
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, overrides: Mapping[str, Any]) -> PipelineConfig:
        cfg = cls(_merge(DEFAULTS, overrides))
        cfg.validate()
        return cfg

    # typed views -------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def _seeded(self, section: str, key: str = "seed") -> int:
        value = self.raw[section].get(key)
        return self.seed if value is None else int(value)

    @property
    def results_dir(self) -> Path:
        return Path(self.raw["paths"]["results_dir"])

    @property
    def prompts(self) -> list[str]:
        return list(self.raw["prompts"])

    @property
    def strategies(self) -> list[Strategy]:
        return [Strategy(s) for s in self.raw["strategies"]]

    def synth_config(self) -> SynthConfig:
        s = self.raw["synth"]
        return SynthConfig(n=int(s["n"]), inclusion_fraction=float(s["inclusion_fraction"]),
                           seed=self._seeded("synth"))

    def split_params(self) -> tuple[float, int]:
        return float(self.raw["split"]["fraction"]), self._seeded("split")

    def inference_config(self) -> InferenceConfig:
        inf = self.raw["inference"]
        fields = {k: inf[k] for k in (*_RESULT_AFFECTING, "timeout_ms", "max_retries", "backoff_ms", "parallelism")}
        fields["base_seed"] = self._seeded("inference", "base_seed")
        return InferenceConfig(**fields)

    def mock_policy(self) -> MockPolicy:
        fields = dict(self.raw["mock"])
        fields["server_seed"] = self._seeded("mock", "server_seed")
        return MockPolicy.from_dict(fields)

    def stats_config(self) -> LengthAnalysisConfig:
        s = self.raw["stats"]
        return LengthAnalysisConfig(s["input_mw_alternative"], s["output_mw_alternative"])

    def validate(self) -> None:
        raw = self.raw
        try:
            if raw["source"] not in ("synth", "ingest"):
                raise ConfigError(f"source must be 'synth' or 'ingest', got {raw['source']!r}")
            if raw["evaluate_on"] not in ("test", "all"):
                raise ConfigError(f"evaluate_on must be 'test' or 'all', got {raw['evaluate_on']!r}")
            if not raw["prompts"]:
                raise ConfigError("at least one prompt id is required")
            for p in raw["prompts"]:
                load_template(p)
            if not raw["strategies"]:
                raise ConfigError("at least one strategy is required")
            self.strategies
            Strategy(raw["stats"]["strategy"])
            if raw["inference"]["backend"] not in ("mock", "http"):
                raise ConfigError("inference.backend must be 'mock' or 'http'")
            make_dialect(raw["inference"]["dialect"])
            if raw["inference"]["backend"] == "mock" and raw["inference"]["dialect"] != "native":
                raise ConfigError("the in-process mock speaks only the native dialect")
            self.synth_config()
            fraction, _ = self.split_params()
            if not 0 < fraction < 1:
                raise ConfigError(f"split.fraction must lie in (0, 1), got {fraction}")
            self.inference_config()
            self.mock_policy()
            self.stats_config()
            if raw["source"] == "ingest":
                for key in ("notes_csv", "metadata_csv"):
                    if not raw["paths"].get(key):
                        raise ConfigError(f"source 'ingest' needs paths.{key}")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    # digests ------------------------------------------------------------
    def stage_params(self, stage: str) -> dict[str, Any]:
        raw = self.raw
        if stage == "records":
            if raw["source"] == "synth":
                return {"source": "synth", "synth": asdict(self.synth_config())}
            keys = ("notes_csv", "metadata_csv", "medication_csv", "virology_csv")
            files = {k: _file_digest(raw["paths"][k]) for k in keys if raw["paths"].get(k)}
            return {"source": "ingest", "files": files}
        if stage == "split":
            fraction, seed = self.split_params()
            return {"fraction": fraction, "seed": seed}
        if stage == "run":
            inf = self.inference_config().to_dict()
            params = {
                "prompts": self.prompts,
                "template_digests": {p: _text_digest(load_template(p).body) for p in self.prompts},
                "evaluate_on": raw["evaluate_on"],
                "inference": {k: inf[k] for k in _RESULT_AFFECTING},
                "backend": raw["inference"]["backend"],
                "dialect": raw["inference"]["dialect"],
                "model": raw["inference"]["model"],
            }
            if raw["inference"]["backend"] == "mock":
                params["mock"] = asdict(self.mock_policy())
            return params
        if stage == "aggregate":
            return {"strategies": [s.value for s in self.strategies]}
        if stage == "evaluate":
            return {}
        if stage == "analyze":
            return {"strategy": raw["stats"]["strategy"], **asdict(self.stats_config())}
        raise KeyError(stage)

    def digests(self) -> dict[str, str]:
        chain: dict[str, str] = {}
        upstream = ""
        for stage in STAGES:
            payload = {"stage": stage, "upstream": upstream, "params": self.stage_params(stage)}
            upstream = _text_digest(json.dumps(payload, sort_keys=True, default=str))
            chain[stage] = upstream
        return chain


def _text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _file_digest(path: str) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except OSError as exc:
        raise ConfigError(f"cannot read input file {path}: {exc}") from None


# --- artifact I/O --------------------------------------------------------------


ARTIFACTS = {
    "records": "records.jsonl",
    "split": "split.json",
    "run": "runs.jsonl",
    "aggregate": "decisions.jsonl",
    "evaluate": "metrics.csv",
    "analyze": "analysis.json",
}


def _meta(stage: str, digest: str) -> dict[str, Any]:
    return {"stage": stage, "digest": digest, "version": __version__}


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: Path, stage: str, digest: str, rows: Iterable[dict[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"_meta": _meta(stage, digest)}) + "\n")
        for row in rows:
            fh.write(_dumps(row) + "\n")
            count += 1
    return count


def read_jsonl(path: Path) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    meta, rows = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "_meta" in obj:
                meta = obj["_meta"]
            else:
                rows.append(obj)
    return meta, rows


def artifact_digest(results: Path, stage: str) -> str | None:
    """Digest recorded in a stage's artifact, or None when absent/unlabelled."""
    path = results / ARTIFACTS[stage]
    if not path.exists():
        return None
    try:
        if path.suffix == ".jsonl":
            with open(path, encoding="utf-8") as fh:
                first = json.loads(fh.readline() or "{}")
            return first.get("_meta", {}).get("digest")
        if path.suffix == ".json":
            return json.loads(path.read_text(encoding="utf-8")).get("_meta", {}).get("digest")
        with open(path, encoding="utf-8", newline="") as fh:
            row = next(csv.DictReader(fh), None)
        return row.get("config_digest") if row else None
    except (ValueError, OSError):
        return None


# --- stages -----------------------------------------------------------------------


@dataclass
class Context:
    cfg: PipelineConfig
    force: bool = False
    transport_factory: Callable[[PipelineConfig], Any] | None = None

    def __post_init__(self) -> None:
        self.digests = self.cfg.digests()
        self.results = self.cfg.results_dir
        self._runs: dict[str, dict[str, list[RunOutput]]] | None = None

    def path(self, stage: str) -> Path:
        return self.results / ARTIFACTS[stage]

    def require(self, stage: str) -> None:
        """Check an upstream artifact exists and matches the current config."""
        found = artifact_digest(self.results, stage)
        if found is None:
            raise StageError(stage, f"missing artifact {self.path(stage)}; run that stage first")
        if found != self.digests[stage] and not self.force:
            raise ConfigError(
                f"artifact {self.path(stage)} was produced with a different configuration "
                f"(digest {found}, expected {self.digests[stage]}); rerun it or pass --force")


def stage_records(ctx: Context) -> list[PatientRecord]:
    cfg = ctx.cfg
    ctx.results.mkdir(parents=True, exist_ok=True)
    digest = ctx.digests["records"]
    if cfg.raw["source"] == "synth":
        try:
            notes = generate_corpus(cfg.synth_config())
        except ValueError as exc:
            raise StageError("records", str(exc)) from exc
        write_jsonl(ctx.path("records"), "records", digest, (n.to_record().to_dict() for n in notes))
        write_jsonl(ctx.results / "facts.jsonl", "records", digest,
                    ({"pseudonym": n.pseudonym, "label": n.label, "facts": n.facts.to_dict()} for n in notes))
        return [n.to_record() for n in notes]
    paths = cfg.raw["paths"]
    try:
        report = build_records(
            read_notes_csv(Path(paths["notes_csv"])),
            read_metadata_csv(Path(paths["metadata_csv"])),
            read_medication_csv(Path(paths["medication_csv"])) if paths.get("medication_csv") else [],
            read_virology_csv(Path(paths["virology_csv"])) if paths.get("virology_csv") else [],
        )
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("records", str(exc)) from exc
    write_jsonl(ctx.path("records"), "records", digest, (r.to_dict() for r in report.records))
    return report.records


def load_records(ctx: Context) -> list[PatientRecord]:
    ctx.require("records")
    _, rows = read_jsonl(ctx.path("records"))
    return [PatientRecord(r["pseudonym"], r["text"], int(r["label"])) for r in rows]


def stage_split(ctx: Context) -> DatasetSplit:
    records = load_records(ctx)
    fraction, seed = ctx.cfg.split_params()
    try:
        split = stratified_split(records, fraction, seed)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc
    doc = {"_meta": _meta("split", ctx.digests["split"]), **split.manifest()}
    ctx.path("split").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return split


def evaluation_records(ctx: Context) -> list[PatientRecord]:
    records = load_records(ctx)
    if ctx.cfg.raw["evaluate_on"] == "all":
        return records
    ctx.require("split")
    manifest = json.loads(ctx.path("split").read_text(encoding="utf-8"))
    held_out = set(manifest["test_pseudonyms"])
    return [r for r in records if r.pseudonym in held_out]


def make_transport(cfg: PipelineConfig):
    inf = cfg.raw["inference"]
    if inf["backend"] == "mock":
        return InProcessTransport(MockServer(cfg.mock_policy()).respond)
    return HttpTransport(inf["base_url"], int(inf["timeout_ms"]), os.environ.get(inf["api_key_env"] or ""))


def stage_run(ctx: Context) -> int:
    cfg = ctx.cfg
    records = evaluation_records(ctx)
    transport = (ctx.transport_factory or make_transport)(cfg)
    if isinstance(transport, HttpTransport) and not transport.healthy():
        raise ServerUnreachable(f"inference server {transport.base_url} is not reachable")
    inf = cfg.raw["inference"]
    client = InferenceClient(transport, cfg.inference_config(), make_dialect(inf["dialect"], inf["model"]))
    rows: list[dict[str, Any]] = []
    failed_records = 0
    for prompt in cfg.prompts:
        template = load_template(prompt)
        items = [(r.pseudonym, build_prompt(template, r.text)) for r in records]
        for runs in client.execute_batch(items):
            failed_records += all_failed(runs)
            rows.extend({"prompt": prompt, **run.to_dict()} for run in runs)
    write_jsonl(ctx.path("run"), "run", ctx.digests["run"], rows)
    ctx._runs = None
    total = len(records) * len(cfg.prompts)
    if total and failed_records == total:
        raise ServerUnreachable(f"every run failed for all {total} record(s)")
    if failed_records:
        logger.warning("%d record(s) had all runs fail and will aggregate as Unparsed", failed_records)
    return len(rows)


def load_runs(ctx: Context) -> dict[str, dict[str, list[RunOutput]]]:
    """runs.jsonl grouped as prompt -> record -> runs, in file order (cached per context)."""
    ctx.require("run")
    if ctx._runs is None:
        _, rows = read_jsonl(ctx.path("run"))
        grouped: dict[str, dict[str, list[RunOutput]]] = defaultdict(dict)
        for row in rows:
            grouped[row["prompt"]].setdefault(row["record"], []).append(RunOutput.from_dict(row))
        ctx._runs = grouped
    return ctx._runs


def stage_aggregate(ctx: Context) -> int:
    grouped = load_runs(ctx)
    rows = []
    for prompt in ctx.cfg.prompts:
        if prompt not in grouped:
            raise StageError("aggregate", f"runs.jsonl has no runs for prompt {prompt}")
        for strategy in ctx.cfg.strategies:
            for record, runs in grouped[prompt].items():
                rows.append({"prompt": prompt, **decision_row(record, strategy, runs)})
    return write_jsonl(ctx.path("aggregate"), "aggregate", ctx.digests["aggregate"], rows)


def load_decisions(ctx: Context) -> dict[tuple[str, str], list[dict[str, Any]]]:
    ctx.require("aggregate")
    _, rows = read_jsonl(ctx.path("aggregate"))
    grouped: dict[tuple[str, str], list[dict[str, Any]]] = defaultdict(list)
    for row in rows:
        grouped[row["prompt"], row["strategy"]].append(row)
    return grouped


def _labels(ctx: Context) -> dict[str, int]:
    return {r.pseudonym: r.label for r in load_records(ctx)}


def stage_evaluate(ctx: Context) -> list[dict[str, str]]:
    labels = _labels(ctx)
    grouped = load_decisions(ctx)
    digest = ctx.digests["evaluate"]
    rows, confusions = [], []
    for (prompt, strategy), items in grouped.items():
        decisions = [AggregateDecision.from_dict(d) for d in items]
        try:
            report = evaluate_strategy(decisions, [labels[d["record"]] for d in items])
        except (MetricsError, KeyError) as exc:
            raise StageError("evaluate", f"{prompt}/{strategy}: {exc}") from exc
        rows.append(metrics_row(prompt, strategy, report, digest))
        confusions.append((prompt, strategy, report.confusion))
    ctx.path("evaluate").write_text(write_metrics_csv(rows), encoding="utf-8")
    (ctx.results / "confusion.csv").write_text(write_confusion_csv(confusions), encoding="utf-8")
    return rows


def stage_analyze(ctx: Context) -> dict[str, Any]:
    labels = _labels(ctx)
    runs = load_runs(ctx)
    grouped = load_decisions(ctx)
    strategy = ctx.cfg.raw["stats"]["strategy"]
    out: dict[str, Any] = {"_meta": _meta("analyze", ctx.digests["analyze"]), "strategy": strategy, "prompts": {}}
    for prompt in ctx.cfg.prompts:
        decisions = grouped.get((prompt, strategy))
        if decisions is None:
            raise StageError("analyze", f"no {strategy} decisions for prompt {prompt}")
        records = []
        for d in decisions:
            if d["label"] == "Abstain":
                continue
            record_runs = runs[prompt][d["record"]]
            ok = [r for r in record_runs if r.ok]
            if not ok:
                continue
            records.append(LengthRecord(
                record=d["record"],
                input_tokens=ok[0].prompt_token_count,
                avg_output_tokens=sum(r.completion_token_count for r in ok) / len(ok),
                correct=(d["label"] == "Inclusion") == (labels[d["record"]] == 1),
            ))
        (ctx.results / f"scatter_{prompt}.csv").write_text(scatter_csv(records), encoding="utf-8")
        try:
            out["prompts"][prompt] = run_length_analysis(records, ctx.cfg.stats_config())
        except StatsError as exc:
            out["prompts"][prompt] = {"n_records": len(records), "error": str(exc)}
    ctx.path("analyze").write_text(json.dumps(out, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


STAGE_FUNCS: dict[str, Callable[[Context], Any]] = {
    "records": stage_records,
    "split": stage_split,
    "run": stage_run,
    "aggregate": stage_aggregate,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
}


def run_pipeline(ctx: Context) -> list[str]:
    """Run every stage, skipping those whose artifact already matches the config.

    Returns the names of the stages actually executed.
    """
    executed = []
    ctx.results.mkdir(parents=True, exist_ok=True)
    for stage in STAGES:
        found = artifact_digest(ctx.results, stage)
        if found == ctx.digests[stage] and not ctx.force:
            logger.info("stage %s up to date; skipping", stage)
            continue
        if found is not None and found != ctx.digests[stage] and not ctx.force:
            raise ConfigError(
                f"existing {ctx.path(stage)} has digest {found} but the config expects "
                f"{ctx.digests[stage]}; use a fresh results directory or --force")
        STAGE_FUNCS[stage](ctx)
        executed.append(stage)
    return executed
