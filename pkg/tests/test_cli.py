import csv
import json
import subprocess
import sys

import pytest

from hivscreen.cli import main
from hivscreen.pipeline import ConfigError, Context, PipelineConfig, env_overrides, flag_overrides, run_pipeline

SMALL = ["--set", "synth.n=60", "--set", "synth.inclusion_fraction=0.3", "--set", "evaluate_on=all"]


def _cli(tmp_path, *args):
    return main([*args, "--results-dir", str(tmp_path / "res"), *SMALL])


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1, "synth": {"n": 10}, "mock": {"p_flip": 0.1}}))
    env = {"HIVSCREEN_SYNTH__N": "20", "HIVSCREEN_MOCK__P_FLIP": "0.2", "UNRELATED": "x"}
    cfg = PipelineConfig.load(path, environ=env, flags=flag_overrides(["mock.p_flip=0.3"]))
    assert cfg.seed == 1 and cfg.raw["synth"]["n"] == 20 and cfg.raw["mock"]["p_flip"] == 0.3
    assert env_overrides({"HIVSCREEN_INFERENCE__TOP_K": "32"}) == {"inference": {"top_k": 32}}


def test_section_seeds_default_to_global():
    cfg = PipelineConfig.from_dict({"seed": 9})
    assert cfg.synth_config().seed == 9 and cfg.inference_config().base_seed == 9
    assert PipelineConfig.from_dict({"seed": 9, "synth": {"seed": 2}}).synth_config().seed == 2


@pytest.mark.parametrize("override", [
    {"bogus": 1},
    {"strategies": ["first", "random"]},
    {"inference": {"top_p": 2.0}},
    {"split": {"fraction": 1.0}},
    {"source": "ingest"},
    {"mock": {"p_flip": 3}},
])
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(override)


def test_bad_config_file_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "-c", str(bad)]) == 2
    assert main(["pipeline", "--set", "nonsense"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_missing_upstream_exit_3(tmp_path, capsys):
    assert _cli(tmp_path, "aggregate") == 3
    assert "run" in capsys.readouterr().err


def test_unreachable_server_exit_4(tmp_path):
    code = _cli(tmp_path, "pipeline", "--set", "inference.backend=http",
                "--set", "inference.base_url=http://127.0.0.1:9", "--set", "inference.max_retries=0")
    assert code == 4
    assert (tmp_path / "res" / "split.json").exists()  # partial artifacts retained


def test_stage_by_stage_then_report(tmp_path, capsys):
    for cmd in ("synth", "split", "run", "aggregate", "evaluate", "analyze"):
        assert _cli(tmp_path, cmd) == 0, cmd
    res = tmp_path / "res"
    for name in ("records.jsonl", "facts.jsonl", "split.json", "runs.jsonl", "decisions.jsonl", "metrics.csv",
                 "confusion.csv", "analysis.json", "scatter_SP.csv", "scatter_CP.csv"):
        assert (res / name).exists(), name
    rows = list(csv.DictReader(open(res / "metrics.csv", encoding="utf-8")))
    assert len(rows) == 12 and {r["accuracy"] for r in rows} == {"100.00"}
    capsys.readouterr()
    assert _cli(tmp_path, "report") == 0
    out = capsys.readouterr().out
    assert "self_consistency" in out and "analysis unavailable" in out


def test_every_artifact_embeds_digest(tmp_path):
    assert _cli(tmp_path, "pipeline") == 0
    res = tmp_path / "res"
    for name in ("records.jsonl", "runs.jsonl", "decisions.jsonl"):
        assert "digest" in json.loads(open(res / name, encoding="utf-8").readline())["_meta"]
    assert "digest" in json.loads((res / "split.json").read_text())["_meta"]
    assert "digest" in json.loads((res / "analysis.json").read_text())["_meta"]
    assert all(r["config_digest"] for r in csv.DictReader(open(res / "metrics.csv", encoding="utf-8")))


def test_resume_skips_up_to_date_and_refuses_mismatch(tmp_path, capsys):
    assert _cli(tmp_path, "pipeline") == 0
    capsys.readouterr()
    assert _cli(tmp_path, "pipeline") == 0
    assert "none (all up to date)" in capsys.readouterr().out
    # Changing the aggregation strategies invalidates only downstream of runs.
    cfg = PipelineConfig.from_dict({"paths": {"results_dir": str(tmp_path / "res")}, "synth": {"n": 60,
                                    "inclusion_fraction": 0.3}, "evaluate_on": "all"})
    changed = PipelineConfig.from_dict({**cfg.raw, "strategies": ["first"]})
    assert cfg.digests()["run"] == changed.digests()["run"]
    assert cfg.digests()["aggregate"] != changed.digests()["aggregate"]
    assert _cli(tmp_path, "pipeline", "--set", "mock.p_flip=0.3") == 2
    assert "digest" in capsys.readouterr().err
    assert _cli(tmp_path, "aggregate", "--set", "mock.p_flip=0.3") == 2
    assert _cli(tmp_path, "pipeline", "--set", "mock.p_flip=0.3", "--force") == 0


def test_partial_rerun_only_downstream(tmp_path):
    res = tmp_path / "res"
    base = {"paths": {"results_dir": str(res)}, "synth": {"n": 40, "inclusion_fraction": 0.3}, "evaluate_on": "all"}
    assert run_pipeline(Context(PipelineConfig.from_dict(base))) == list(
        ("records", "split", "run", "aggregate", "evaluate", "analyze"))
    (res / "metrics.csv").unlink()
    assert run_pipeline(Context(PipelineConfig.from_dict(base))) == ["evaluate"]


def test_ingest_subcommand(tmp_path):
    (tmp_path / "notes.csv").write_text(
        "Pseudoniem,authored,section_text\nP1,2021-01-01,hoest\nP2,2021-01-01,koorts\n", encoding="utf-8")
    (tmp_path / "meta.csv").write_text(
        "Pseudoniem,start_date,icd10_code,specialism,HIV_indicator_HIVteam\n"
        "P1,2022-01-01,A15,INT,1\nP2,2022-01-01,R50,INT,0\n", encoding="utf-8")
    code = main(["ingest", "--notes", str(tmp_path / "notes.csv"), "--metadata", str(tmp_path / "meta.csv"),
                 "--results-dir", str(tmp_path / "res")])
    assert code == 0
    lines = (tmp_path / "res" / "records.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(x)["label"] for x in lines[1:]] == [1, 0]
    assert main(["ingest", "--notes", str(tmp_path / "missing.csv"), "--metadata", str(tmp_path / "meta.csv"),
                 "--results-dir", str(tmp_path / "res2")]) == 2


def test_http_backend_against_mock_server(tmp_path):
    from hivscreen.mockserver import BackgroundServer, MockPolicy

    with BackgroundServer(MockPolicy(verbosity={"SP": 40, "CP": 40})) as server:
        code = _cli(tmp_path, "pipeline", "--set", "inference.backend=http", "--set", f"inference.base_url={server.url}",
                    "--set", "inference.parallelism=4", "--set", "synth.n=20")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "res" / "metrics.csv", encoding="utf-8")))
    assert {r["accuracy"] for r in rows} == {"100.00"}


def test_console_entry_help():
    out = subprocess.run([sys.executable, "-m", "hivscreen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "ingest", "split", "run", "aggregate", "evaluate", "analyze", "mock-serve", "report"):
        assert cmd in out.stdout
