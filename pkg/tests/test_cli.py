import json

import numpy as np
import pytest

from conftest import LOW_RATES
from sensorperf import cli
from sensorperf.errors import ConfigError
from sensorperf.evaluation import prepare_player, score_player
from sensorperf.ingest import load_session
from sensorperf.model import ModelBundle
from sensorperf.stream import bundle_calibration

FAST_TRAIN = ["--max-epochs", "2", "--batches-per-epoch", "2", "--warmup-steps", "2", "--patience", "1"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps({"n_players": 21, "duration_ms": 240000.0, "rates": LOW_RATES}))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "gru"
    argv = ["train", "--sessions", dataset / "sessions", "--model", "gru-att", "--dt", "20", "--tau", "60",
            "--out", out, *FAST_TRAIN]
    assert cli.main([str(a) for a in argv]) == 0
    return out


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--sessions", "x", "--out", "y", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_error_is_single_json_line(tmp_path, capsys):
    code, out, err = run(["train", "--sessions", tmp_path / "nothing", "--out", tmp_path / "o"], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    msg = json.loads(lines[0])
    assert msg["error"] == ConfigError.code and "nothing" in msg["message"]
    assert not (tmp_path / "o").exists()


def test_config_file_then_flags(tmp_path, dataset, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dt": 10.0, "tau": 30.0}))
    assert run(["preprocess", "--sessions", dataset / "sessions", "--config", cfg, "--out", tmp_path / "a"],
               capsys)[0] == 0
    echoed = json.loads((tmp_path / "a" / "config.json").read_text())
    assert echoed["dt"] == 10.0 and echoed["tau"] == 30.0 and echoed["command"] == "preprocess"
    assert run(["preprocess", "--sessions", dataset / "sessions", "--config", cfg, "--dt", "20",
                "--out", tmp_path / "b"], capsys)[0] == 0
    echoed = json.loads((tmp_path / "b" / "config.json").read_text())
    assert echoed["dt"] == 20.0 and echoed["tau"] == 30.0
    # the echoed config reproduces the run on its own
    assert run(["preprocess", "--sessions", dataset / "sessions", "--config", tmp_path / "b" / "config.json",
                "--out", tmp_path / "c"], capsys)[0] == 0
    for name in ("player_00_features.csv", "player_00_targets.csv", "config.json"):
        assert (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_unknown_config_key(tmp_path, dataset, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"delta": 1}))
    code, _, err = run(["preprocess", "--sessions", dataset / "sessions", "--config", cfg, "--out", tmp_path / "o"],
                       capsys)
    assert code == 1 and "delta" in err


def test_refuses_non_empty_output(tmp_path, dataset, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    code, _, err = run(["preprocess", "--sessions", dataset / "sessions", "--out", out], capsys)
    assert code == 1 and "--force" in err and (out / "keep.txt").exists()
    assert run(["preprocess", "--sessions", dataset / "sessions", "--out", out, "--force"], capsys)[0] == 0
    assert not (out / "keep.txt").exists() and (out / "config.json").exists()


def test_failure_leaves_no_partial_output(tmp_path, capsys, monkeypatch):
    def boom(cfg, out):
        (out / "half.csv").write_text("partial")
        raise ConfigError("disk full")

    monkeypatch.setattr(cli, "write_dataset", boom)
    code, _, err = run(["synth", "--n-players", "1", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "disk full" in err
    assert list(tmp_path.iterdir()) == []


def test_invalid_values_rejected_before_work(tmp_path, dataset, capsys):
    for argv in (["synth", "--coupling", "2", "--out", tmp_path / "s"],
                 ["preprocess", "--sessions", dataset / "sessions", "--dt", "-1", "--out", tmp_path / "p"],
                 ["eval", "--sessions", dataset / "sessions", "--model", "gru", "--workers", "0",
                  "--out", tmp_path / "e"],
                 ["train", "--sessions", dataset / "sessions", "--lr-base", "0", "--out", tmp_path / "t"]):
        code, _, err = run(argv, capsys)
        assert code == 1 and json.loads(err)["error"]
    assert list(tmp_path.iterdir()) == []


def test_train_then_eval_reproduces_validation_auc(trained, dataset, tmp_path, capsys):
    bundle = ModelBundle.load(trained / "bundle.json")
    assert {"split", "calibration", "best_epoch", "val_auc"} <= set(bundle.extra)
    log = (trained / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,") and len(log) >= 2
    code, out, _ = run(["eval", "--sessions", dataset / "sessions", "--bundle", trained / "bundle.json",
                        "--out", tmp_path / "e"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["validation_mean_auc"] == bundle.extra["val_auc"]
    assert len(report["repeats"][0]["aucs"]) + len(report["repeats"][0]["excluded"]) == 5


def test_infer_matches_batch(trained, dataset, capsys):
    manifest = dataset / "sessions" / "player_04" / "manifest.json"
    code, out, err = run(["infer", "--bundle", trained / "bundle.json", "--session", manifest], capsys)
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "bin_index,timestamp_ms,probability"
    probs = np.array([float(r.split(",")[2]) for r in rows[1:]])
    bundle = ModelBundle.load(trained / "bundle.json")
    player = prepare_player(load_session(manifest), [bundle.dt_s], bundle_calibration(bundle))
    _, _, ref, _ = score_player(bundle, player, bundle.dt_s, bundle.tau_s)
    assert probs.tobytes() == ref.tobytes()
    lat = json.loads(err)["latency"]
    assert lat["bins"] == ref.size and {"median_ms", "p99_ms"} <= set(lat)


def test_infer_snapshot_resume(trained, dataset, tmp_path, capsys):
    manifest = dataset / "sessions" / "player_07" / "manifest.json"
    bundle = trained / "bundle.json"
    _, full, _ = run(["infer", "--bundle", bundle, "--session", manifest], capsys)
    snap = tmp_path / "snap.json"
    _, head, _ = run(["infer", "--bundle", bundle, "--session", manifest, "--stop-after", 4, "--snapshot", snap],
                     capsys)
    _, tail, _ = run(["infer", "--bundle", bundle, "--session", manifest, "--resume", snap], capsys)
    full_rows = full.splitlines()
    assert head.splitlines() == full_rows[:6]
    assert tail.splitlines()[1:] == full_rows[6:]


def test_infer_rejects_mismatched_clock(trained, dataset, capsys):
    manifest = dataset / "sessions" / "player_00" / "manifest.json"
    code, out, err = run(["infer", "--bundle", trained / "bundle.json", "--session", manifest, "--dt", "5"], capsys)
    assert code == 1 and out == "" and "dt" in json.loads(err)["message"]


def test_trace_and_importance(trained, dataset, tmp_path, capsys):
    manifest = dataset / "sessions" / "player_01" / "manifest.json"
    assert run(["trace", "--bundle", trained / "bundle.json", "--session", manifest, "--out", tmp_path / "t"],
               capsys)[0] == 0
    rows = (tmp_path / "t" / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 12
    code, out, _ = run(["importance", "--bundles", trained / "bundle.json", "--sessions", dataset / "sessions",
                        "--out", tmp_path / "i"], capsys)
    assert code == 0 and out.startswith("Feature group")
    alpha = json.loads((tmp_path / "i" / "importance.json").read_text())["mean_attention"]
    assert set(alpha) == {"physical", "chair", "environment"}
