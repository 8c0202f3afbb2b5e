import json
import shutil

import pytest

from propsample.cli import bundled_config, main, sha256_file

TINY = {
    "seed": 5,
    "universe": {"num_geos": 4, "hotels_per_geo": 60, "feature_dimension": 5},
    "log": {"train_sessions": 800, "heldout_sessions": 150},
    "modes": ["control", "fixed:0.8", "truncate", "propensity"],
    "ranker": {"num_trees": 4, "min_examples_per_leaf": 10},
    "embedding": {"dim": 8, "epochs": 1},
    "abtest": {"sessions": 300, "arms": ["control", "fixed:0.8", "propensity"], "bootstrap_samples": 50},
}

ARTIFACTS = ["universe.json", "train_log.jsonl", "heldout_log.jsonl", "ground_truth.json", "curves.csv",
             "propensity.json", "embeddings.json", "evaluation.json", "abtest.json", "plot_data.csv"]


def write_config(path, **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(changes)
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "cfg.json")
    assert run("pipeline", "--config", cfg, "--out", d / "out") == 0
    return d, cfg


def test_pipeline_produces_every_artifact(finished):
    d, _ = finished
    out = d / "out"
    names = set(ARTIFACTS)
    for m in ("control", "fixed-0.8", "truncate", "propensity"):
        names |= {f"dataset_{m}.jsonl", f"dataset_{m}.manifest.json", f"model_{m}.json", f"metrics_{m}.json"}
    assert names <= {p.name for p in out.iterdir()}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["complete"] and manifest["seed"] == 5
    assert set(manifest["artifacts"]) == names
    for name, entry in manifest["artifacts"].items():
        assert entry["sha256"] == sha256_file(out / name)
        assert entry["config_hash"] == manifest["config_hash"]
    assert set(manifest["artifacts"]["model_propensity.json"]["inputs"]) == {"dataset_propensity.jsonl"}


def test_pipeline_rerun_is_a_no_op(finished, capsys):
    d, cfg = finished
    before = {p.name: p.stat().st_mtime_ns for p in (d / "out").iterdir()}
    assert run("pipeline", "--config", cfg, "--out", d / "out") == 0
    assert "up to date" in capsys.readouterr().out
    assert before == {p.name: p.stat().st_mtime_ns for p in (d / "out").iterdir()}


def test_changed_config_does_not_silently_overwrite(finished, capsys, tmp_path):
    d, _ = finished
    out = tmp_path / "out"
    shutil.copytree(d / "out", out)
    cfg = write_config(tmp_path / "cfg.json", seed=6)
    assert run("pipeline", "--config", cfg, "--out", out) == 1
    err = error_of(capsys)
    assert err["module"] == "cli" and "--force" in err["cause"]
    assert sha256_file(out / "train_log.jsonl") == sha256_file(d / "out" / "train_log.jsonl")


def test_estimate_without_simulate_names_the_log(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("estimate", "--config", cfg, "--out", tmp_path / "empty") == 1
    assert "train_log.jsonl" in error_of(capsys)["cause"]


def test_prepare_fixed_manifest(finished, tmp_path):
    d, cfg = finished
    out = tmp_path / "out"
    shutil.copytree(d / "out", out)
    assert run("prepare", "--config", cfg, "--out", out, "--mode", "fixed:0.8", "--force") == 0
    manifest = json.loads((out / "dataset_fixed-0.8.manifest.json").read_text())
    assert manifest["mode"] == "fixed" and manifest["rate"] == 0.8
    assert sha256_file(out / "dataset_fixed-0.8.jsonl") == sha256_file(d / "out" / "dataset_fixed-0.8.jsonl")


def test_thread_count_leaves_models_unchanged(finished, tmp_path):
    d, cfg = finished
    out = tmp_path / "out"
    shutil.copytree(d / "out", out)
    assert run("train", "--config", cfg, "--out", out, "--mode", "control", "--threads", "4", "--force") == 0
    assert (out / "model_control.json").read_bytes() == (d / "out" / "model_control.json").read_bytes()


def test_seed_is_mandatory(tmp_path, capsys):
    cfg = dict(TINY)
    del cfg["seed"]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
    assert "seed" in error_of(capsys)["cause"]
    assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o", "--seed", "3") == 0


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", ranker={"num_trees": 3, "depth": 4})
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "ranker.depth" in error_of(capsys)["cause"]


def test_bad_mode_names_module(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert run("prepare", "--config", cfg, "--out", tmp_path / "o", "--mode", "fixed:2") == 1
    err = error_of(capsys)
    assert err["module"] == "debias" and err["type"] == "ConfigError"


def test_strict_and_lenient_log_reading(finished, tmp_path, capsys):
    d, cfg = finished
    out = tmp_path / "out"
    out.mkdir()
    for name in ("universe.json", "train_log.jsonl"):
        shutil.copy(d / "out" / name, out / name)
    lines = (out / "train_log.jsonl").read_text().splitlines()
    first = json.loads(lines[1])
    first["client"] = "mobile"
    lines[1] = json.dumps(first)
    (out / "train_log.jsonl").write_text("\n".join(lines) + "\n")
    assert run("estimate", "--config", cfg, "--out", out) == 1
    err = error_of(capsys)
    assert err["module"] == "core" and "train_log.jsonl:2" in err["cause"]
    assert run("estimate", "--config", cfg, "--out", out, "--lenient") == 0


def test_abtest_prints_table(finished, tmp_path, capsys):
    d, cfg = finished
    out = tmp_path / "out"
    shutil.copytree(d / "out", out)
    assert run("abtest", "--config", cfg, "--out", out, "--force") == 0
    text = capsys.readouterr().out
    assert "propensity" in text and "click lift" in text
    assert (out / "abtest.json").read_bytes() == (d / "out" / "abtest.json").read_bytes()


def test_bundled_config_is_valid():
    cfg = json.loads(bundled_config().read_text())
    assert isinstance(cfg["seed"], int)
