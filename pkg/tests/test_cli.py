import json

import numpy as np
import pandas as pd
import pytest

from resonance_hunt import cli, datagen, ingest


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def blackbox(tmp_path_factory):
    d = tmp_path_factory.mktemp("bb")
    data, key = d / "bb.csv", d / "bb.key.json"
    assert _run("blackbox", "--preset", "small", "--seed", 3, "--out", data, "--key", key) == 0
    return data, key


def test_missing_input_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert _run("anode", "--input", missing, "--out", tmp_path / "s.csv", "--m0", 3.5) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_error_exit_code(blackbox, tmp_path):
    data, _ = blackbox
    # neither --m0 nor --scan
    assert _run("anode", "--input", data, "--out", tmp_path / "s.csv") == 1
    assert _run("--threads", 0, "anode", "--input", data, "--out", tmp_path / "s.csv", "--m0", 3.5) == 1


def test_gen_default_preset_row_count(tmp_path):
    out = tmp_path / "toy.csv"
    assert _run("gen", "--out", out) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 1_000_834
    assert int(frame["label"].sum()) == 834
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["gen"]["toy"]["n_background"] == 1_000_000


def _report(data, key, out):
    return _run("report", "--input", data, "--key", key, "--out-dir", out, "--method", "anode",
                "--domain", "2.5,5.5", "--scan-step", 0.3, "--seed", 1)


def test_report_end_to_end_and_reproducible(blackbox, tmp_path):
    data, key = blackbox
    a, b = tmp_path / "a", tmp_path / "b"
    assert _report(data, key, a) == 0
    assert _report(data, key, b) == 0
    assert (a / "hunt.json").read_bytes() == (b / "hunt.json").read_bytes()
    assert (a / "scores.csv").read_bytes() == (b / "scores.csv").read_bytes()
    for name in ("scores.csv", "hunt.json", "metrics.json", "manifest.json", "scan.svg", "background_fit.svg", "roc.svg", "sic.svg"):
        assert (a / name).is_file(), name
    assert (a / "scan.svg").read_bytes() == (b / "scan.svg").read_bytes()
    hunt = json.loads((a / "hunt.json").read_text())
    assert 0 < hunt["global_p"] <= 1
    metrics = json.loads((a / "metrics.json").read_text())
    assert metrics["key_comparison"]["truth"] == 834
    scored = [r for r in metrics["metrics"] if "auc" in r]
    assert scored and all(0 <= r["auc"] <= 1 for r in scored)
    # windows far from the injected resonance hold no signal in their SR
    assert all("both classes" in r["error"] for r in metrics["metrics"] if "auc" not in r)
    assert any("scoring failed" in f["error"] for f in hunt["invalid"])
    stage = json.loads((a / "manifest.json").read_text())["stages"]["report"]
    assert stage["inputs"][str(data)] == datagen.file_digest(data)
    assert "scores.csv" in " ".join(stage["outputs"])


def test_stage_by_stage(blackbox, tmp_path):
    data, key = blackbox
    scores = tmp_path / "scores.csv"
    assert _run("anode", "--input", data, "--out", scores, "--m0", 3.5, "--domain", "2.5,5.5") == 0
    tables = ingest.read_scores(scores)
    assert len(tables) == 1 and tables[0].labels is None and tables[0].hunt is not None
    assert _run("bump", "--scores", scores, "--out", tmp_path / "hunt.json", "--plots", tmp_path / "plots") == 0
    assert (tmp_path / "plots" / "scan.svg").is_file()
    assert _run("eval", "--scores", scores, "--key", key, "--data", data, "--hunt", tmp_path / "hunt.json",
                "--out", tmp_path / "metrics.json", "--plots", tmp_path / "plots") == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["key_comparison"]["localized"] in (True, False)
    assert (tmp_path / "plots" / "roc.svg").is_file()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {"anode", "bump", "eval"} <= set(manifest["stages"])


def test_eval_rejects_tampered_data(blackbox, tmp_path):
    data, key = blackbox
    copy = tmp_path / "bb.csv"
    copy.write_bytes(data.read_bytes() + b"3.5,0,0,0,0\n")
    scores = tmp_path / "scores.csv"
    assert _run("anode", "--input", data, "--out", scores, "--m0", 3.5, "--domain", "2.5,5.5") == 0
    assert _run("eval", "--scores", scores, "--key", key, "--data", copy, "--out", tmp_path / "m.json") == 2


def test_cwola_and_supervised_subcommands(tmp_path):
    train, data = tmp_path / "train.csv", tmp_path / "data.csv"
    assert _run("gen", "--preset", "small", "--n-background", 20_000, "--seed", 4, "--out", train) == 0
    assert _run("gen", "--preset", "small", "--n-background", 20_000, "--seed", 5, "--out", data) == 0
    fast = ["--hidden", "8", "--epochs", 3, "--patience", 2, "--m0", 3.5, "--domain", "2.5,5.5"]
    assert _run("cwola", "--input", data, "--out", tmp_path / "c.csv", *fast) == 0
    assert _run("supervised", "--train", train, "--input", data, "--out", tmp_path / "s.csv", *fast) == 0
    c = ingest.read_scores(tmp_path / "c.csv")[0]
    s = ingest.read_scores(tmp_path / "s.csv")[0]
    assert np.all((c.score >= 0) & (c.score <= 1)) and c.meta["scheme"] == "holdout"
    assert s.hunt is None
    assert _run("eval", "--scores", tmp_path / "s.csv", "--truth", data, "--out", tmp_path / "m.json") == 0
    rows = json.loads((tmp_path / "m.json").read_text())["metrics"]
    assert rows[0]["auc"] > 0.9
