import csv

import numpy as np
import pytest

from conftest import small_config
from sensorperf.errors import ConfigError
from sensorperf.evaluation import (
    EvalReport,
    RepeatResult,
    SplitPlan,
    export_trace,
    prepare_player,
    feature_importance,
    run_experiment,
    sweep,
    trace_rows,
)
from sensorperf.model import NormStats, init_model, network_bundle, network_forward
from sensorperf.synth import generate
from sensorperf.train import TrainConfig

FAST = TrainConfig(max_epochs=2, batches_per_epoch=2, patience=1, warmup_steps=2)


def ids(players):
    return [p.player_id for p in players]


# -- splits -------------------------------------------------------------------------


@pytest.mark.parametrize("mode,sizes", [("network", (11, 5, 5)), ("classical", (16, 0, 5))])
def test_split_partitions(mode, sizes):
    roster = tuple(f"p{i:02d}" for i in range(21))
    plan = SplitPlan(mode, 7, roster, repeats=30)
    seen_test = set()
    for r in range(plan.n_repeats):
        sp = plan.split(r)
        assert (len(sp.train), len(sp.val), len(sp.test)) == sizes
        parts = set(sp.train) | set(sp.val) | set(sp.test)
        assert len(parts) == sum(sizes) and parts <= set(roster)
        seen_test |= set(sp.test)
        assert plan.split(r) == sp
    assert len(seen_test) > 5
    assert plan.split(0) != plan.split(1)
    assert SplitPlan(mode, 8, roster).split(0) != plan.split(0)


def test_split_plan_errors():
    with pytest.raises(ConfigError):
        SplitPlan("network", 0, tuple(f"p{i}" for i in range(20)))
    with pytest.raises(ConfigError):
        SplitPlan("network", 0, ("a",) * 21)
    with pytest.raises(ConfigError):
        SplitPlan("other", 0, tuple(f"p{i}" for i in range(21)))
    assert SplitPlan.for_model("gru-att", 0, [f"p{i}" for i in range(21)]).n_repeats == 15
    assert SplitPlan.for_model("logreg", 0, [f"p{i}" for i in range(21)]).n_repeats == 100


def test_split_independent_of_roster_order():
    roster = [f"p{i:02d}" for i in range(21)]
    a = SplitPlan.for_model("gru", 3, roster).split(2)
    b = SplitPlan.for_model("gru", 3, roster[::-1]).split(2)
    assert a == b


# -- reports ------------------------------------------------------------------------


def test_report_mean_is_mean_of_player_aucs():
    rep = EvalReport("logreg", 20.0, 180.0, [
        RepeatResult(0, {"a": 0.6, "b": 0.8}, [], 0.7),
        RepeatResult(1, {"a": 0.5, "c": 0.9, "d": 0.4}, ["b"], 0.55),
    ])
    assert rep.mean_auc == pytest.approx(np.mean([0.6, 0.8, 0.5, 0.9, 0.4]))
    assert rep.repeat_means == pytest.approx([0.7, 0.6])
    assert rep.pooled == pytest.approx(0.625)
    assert rep.n_excluded == 1
    s = rep.summary()
    assert s["n_repeats"] == 2 and s["mean_attention"] is None
    assert "per-player mean  0.6400" in rep.to_text()


def test_report_json_has_no_nan():
    rep = EvalReport("gru", 1.0, 1.0, [RepeatResult(0, {}, ["a"], float("nan"))])
    text = rep.to_json()
    assert "NaN" not in text and '"pooled_auc": null' in text


# -- experiments --------------------------------------------------------------------


def test_run_experiment_deterministic(roster_players):
    plan = SplitPlan.for_model("gru-att", 0, ids(roster_players), repeats=2)
    a = run_experiment(roster_players, "gru-att", 20.0, 60.0, plan, FAST)
    b = run_experiment(roster_players[::-1], "gru-att", 20.0, 60.0, plan, FAST)
    assert a.to_json() == b.to_json()
    assert len(a.repeats) == 2 and all(len(r.aucs) + len(r.excluded) == 5 for r in a.repeats)
    assert a.mean_attention is not None and len(a.mean_attention) == 3


def test_workers_do_not_change_results(roster_players):
    plan = SplitPlan.for_model("logreg", 1, ids(roster_players), repeats=3)
    a = run_experiment(roster_players, "logreg", 20.0, 60.0, plan, FAST, workers=1)
    b = run_experiment(roster_players, "logreg", 20.0, 60.0, plan, FAST, workers=2)
    assert a.to_json() == b.to_json()


def test_test_players_cannot_influence_training(roster_players):
    from sensorperf.evaluation import PlayerData, run_repeat

    plan = SplitPlan.for_model("gru", 2, ids(roster_players), repeats=1)
    by_id = {p.player_id: p for p in roster_players}
    _, clean = run_repeat(by_id, "gru", 20.0, 60.0, plan, FAST, 0)
    poisoned = dict(by_id)
    for pid in plan.split(0).test:
        p = by_id[pid]
        feats = {}
        for dt, fs in p.features.items():
            bad = fs.__class__(**{**fs.__dict__, "frames": fs.frames * -50.0 + 3.0})
            feats[dt] = bad
        poisoned[pid] = PlayerData(p.player_id, p.duration_ms, p.events, feats, p.calibration)
    _, dirty = run_repeat(poisoned, "gru", 20.0, 60.0, plan, FAST, 0)
    assert clean.to_json() == dirty.to_json()


@pytest.mark.xfail(strict=True, reason="the label's past mean shares events with the trailing window, so the "
                                       "baseline ranks below chance on null data; see the acceptance suite")
def test_baseline_null_example():
    sessions = generate(small_config(n_players=21, duration_ms=32 * 60 * 1000.0, coupling=0.0))
    players = [prepare_player(s.record, [20.0]) for s in sessions]
    plan = SplitPlan.for_model("baseline", 0, ids(players))
    report = run_experiment(players, "baseline", 20.0, 180.0, plan, FAST)
    assert abs(report.mean_auc - 0.5) <= 0.07


def test_missing_roster_player(roster_players):
    plan = SplitPlan.for_model("baseline", 0, ids(roster_players), repeats=1)
    with pytest.raises(ConfigError):
        run_experiment(roster_players[1:], "baseline", 20.0, 60.0, plan, FAST)


def test_sweep_cells_match_single_runs(roster_players):
    res = sweep(roster_players, ["baseline", "logreg"], [10.0, 20.0], [30.0, 60.0], 4, FAST, repeats=2)
    assert res.matrix("logreg").shape == (2, 2)
    for m in ("baseline", "logreg"):
        plan = SplitPlan.for_model(m, 4, ids(roster_players), repeats=2)
        one = run_experiment(roster_players, m, 10.0, 60.0, plan, FAST)
        assert res.reports[(m, 10.0, 60.0)].to_json() == one.to_json()
        assert res.matrix(m)[1, 0] == one.mean_auc
    # cell order does not matter
    flipped = sweep(roster_players, ["logreg", "baseline"], [20.0, 10.0], [60.0, 30.0], 4, FAST, repeats=2)
    for key, rep in res.reports.items():
        assert flipped.reports[key].to_json() == rep.to_json()


def test_sweep_outputs(roster_players, tmp_path):
    res = sweep(roster_players, ["baseline"], [10.0, 20.0], [60.0], 0, FAST, repeats=1)
    res.write_csv("baseline", tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["tau_s\\dt_s", "10", "20"] and rows[1][0] == "60"
    sl = res.slices(fixed_tau=60.0, fixed_dt=20.0)
    assert set(sl["baseline"]["vs_dt"]) == {"10", "20"}
    assert "[baseline]" in res.to_text("baseline")
    with pytest.raises(ConfigError):
        sweep(roster_players, [], [1.0], [1.0], 0, FAST)


# -- importance and traces ----------------------------------------------------------


def zero_attention_bundle(dt=20.0, tau=60.0):
    m = init_model(seed=0)
    m.params["attn_W"][:] = 0.0
    m.params["attn_b"][:] = 0.0
    return network_bundle(m, NormStats.identity(), dt, tau, seed=0)


def test_zero_attention_importance_is_half(roster_players):
    alpha = feature_importance([zero_attention_bundle()] * 2, [roster_players[:2], roster_players[2:4]])
    np.testing.assert_array_equal(alpha, [0.5, 0.5, 0.5])


def test_importance_rejects_plain_gru(roster_players):
    b = network_bundle(init_model(seed=0, use_attention=False), NormStats.identity(), 20.0, 60.0, seed=0)
    with pytest.raises(ConfigError):
        feature_importance([b], [roster_players[:1]])
    with pytest.raises(ConfigError):
        feature_importance([zero_attention_bundle()], [])


def test_trace_rows(roster_players, tmp_path):
    b = network_bundle(init_model(seed=5), NormStats.identity(), 20.0, 60.0, seed=5)
    p = roster_players[0]
    rows = trace_rows(b, p, 20.0, 60.0)
    assert len(rows) == p.feature(20.0).n_bins
    assert all(0.0 < r["y_hat"] < 1.0 for r in rows)
    assert rows[0]["timestamp_ms"] == 20_000.0
    n = export_trace(b, p, 20.0, 60.0, tmp_path / "a.csv")
    export_trace(b, p, 20.0, 60.0, tmp_path / "b.csv")
    assert n == len(rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    y_hat, _, _ = network_forward(b.network(), b.norm_stats.apply(p.feature(20.0).frames))
    assert [r["y_hat"] for r in rows] == y_hat.tolist()
    header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["bin_index", "timestamp_ms", "alpha_physical", "alpha_chair", "alpha_environment"]
