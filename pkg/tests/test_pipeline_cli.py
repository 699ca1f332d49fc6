import json

import numpy as np
import pytest

from moedm import cli
from moedm import pipeline as pl
from moedm.config import load_config

TINY = [
    "corpus.n_conversations=20", "corpus.n_heldout=4", "primitive.steps=5", "primitive.batch=8",
    "experts.steps=2", "experts.n_contexts=10", "experts.batch=4", "collect.n_episodes=6",
    "rl.steps=2", "rl.batch=8", "rl.algos=['iql','moevrl']", "user_model.steps=2", "user_model.batch=8",
    "eval.n=3", "eval.n_diversity=2", "run.workers=1",
]


def _args(root, *extra):
    out = []
    for s in TINY + [f'run.root="{root}"', *extra]:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    for cmd in pl.STAGES:
        assert cli.main([cmd, *_args(root)]) == 0, cmd
    return root


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in (*pl.STAGES, "report", "verify"):
        assert cmd in out


def test_missing_prerequisite_exit_code(tmp_path, capsys):
    assert cli.main(["train-primitive", *_args(tmp_path)]) == 3
    assert "moedm gen-data" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["gen-data", *_args(tmp_path, "rl.gamma=2.0")]) == 4
    assert "config error" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.toml")]) == 4


def test_runs_env_var_sets_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MOEDM_RUNS", str(tmp_path))
    args = [x for s in TINY for x in ("--set", s)]
    assert cli.main(["gen-data", *args]) == 0
    assert (tmp_path / "default" / "data" / "corpus.jsonl").exists()


def test_manifest_records_every_artifact(tiny_root):
    man = json.loads((tiny_root / "default" / "manifest.json").read_text())
    for key in ("corpus", "primitive", "experts", "dataset", "rl_iql", "rl_moevrl", "eval_iql_mf", "eval_moevrl_mb"):
        ent = man[key]
        assert {"stage_hash", "config_hash", "revision", "seed", "outputs"} <= set(ent)
        assert ent["revision"] == pl.source_revision()


def test_rerun_is_skipped_and_files_unchanged(tiny_root):
    f = tiny_root / "default" / "data" / "behavior.jsonl"
    before = (f.read_bytes(), f.stat().st_mtime_ns)
    assert cli.main(["collect", *_args(tiny_root)]) == 0
    assert (f.read_bytes(), f.stat().st_mtime_ns) == before
    assert "dataset: up to date" in (tiny_root / "default" / "run.log").read_text()


def test_force_rebuilds_identically(tiny_root):
    f = tiny_root / "default" / "data" / "corpus.jsonl"
    before = f.read_bytes()
    assert cli.main(["gen-data", "--force", *_args(tiny_root)]) == 0
    assert f.read_bytes() == before


def test_stage_mismatch_is_config_error(tiny_root, capsys):
    # primitive now differs, so the experts stage must refuse its stale input
    assert cli.main(["train-experts", *_args(tiny_root, "primitive.steps=6")]) == 4
    assert "stage mismatch" in capsys.readouterr().err


def test_report_writes_tables(tiny_root, capsys):
    assert cli.main(["report", *_args(tiny_root)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("method,mode,n,mean_return")
    reports = tiny_root / "default" / "reports"
    assert (reports / "table.csv").read_text().startswith("method,mf_mean,mf_stderr,mb_mean,mb_stderr")
    doc = json.loads((reports / "results.json").read_text())
    assert doc["header"]["oracle"]["optimal_return"] == pytest.approx(0.27328)
    assert [h["method"] for h in doc["histograms"]] == ["iql", "iql", "moevrl", "moevrl"]


def test_report_refuses_mismatched_shapes(tiny_root, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(tiny_root, root)
    p = root / "default" / "reports" / "eval_iql_mb.json"
    doc = json.loads(p.read_text())
    doc["d"] += 1
    p.write_text(json.dumps(doc))
    cfg = load_config(None, TINY + [f'run.root="{root}"'])
    with pytest.raises(pl.StageMismatch):
        pl.report(pl.Run(cfg))


def test_report_without_evaluations(tmp_path):
    assert cli.main(["report", *_args(tmp_path)]) == 3


def test_curves_are_stamped(tiny_root):
    text = (tiny_root / "default" / "models" / "rl_iql.curve.csv").read_text().splitlines()
    assert text[0].endswith("seed,config_hash,revision")
    assert "wall" not in text[0]


def test_stage_rng_depends_on_stage_and_seed():
    cfg = load_config()
    a = pl.stage_rng(cfg, "collect").integers(1 << 30)
    assert a == pl.stage_rng(cfg, "collect").integers(1 << 30)
    assert a != pl.stage_rng(cfg, "evaluate").integers(1 << 30)
    assert pl.stage_hash(cfg, "gen-data") == pl.stage_hash(load_config(None, ["rl.steps=1"]), "gen-data")
    assert pl.stage_hash(cfg, "train-rl") != pl.stage_hash(load_config(None, ["rl.steps=1"]), "train-rl")


def test_verify_writes_fixtures(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "verify", lambda run, quick, planning: True)
    assert cli.main(["verify", "--write-fixtures", *_args(tmp_path)]) == 0
    doc = json.loads((tmp_path / "default" / "fixtures" / "oracle.json").read_text())
    assert np.isclose(doc["optimal_return"], 0.27328)


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "verify", lambda run, quick, planning: False)
    assert cli.main(["verify", *_args(tmp_path)]) == 2
