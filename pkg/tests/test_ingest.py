import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sensorperf.channels import CHANNELS
from sensorperf.errors import StructuralError
from sensorperf.ingest import (
    CleanStream,
    EventLog,
    RawStream,
    clip_percentiles,
    interpolate_missing,
    load_session,
    preprocess_session,
    reparametrize,
    smooth_moving_window,
    write_session,
)


def raw(values, t=None, name="heart_rate"):
    values = np.asarray(values, dtype=float)
    if t is None:
        t = np.arange(values.shape[0]) * 10.0
    return RawStream(name, t, values)


# -- clipping -------------------------------------------------------------------


def test_clip_uniform_interior_unchanged():
    v = np.arange(1.0, 201.0)
    out, lo, hi = clip_percentiles(raw(v))
    assert lo[0] == pytest.approx(oracles.quantile(v.tolist(), 0.005))
    assert hi[0] == pytest.approx(oracles.quantile(v.tolist(), 0.995))
    o = out.values[:, 0]
    assert o.min() >= lo[0] and o.max() <= hi[0]
    inner = (v > lo[0]) & (v < hi[0])
    np.testing.assert_array_equal(o[inner], v[inner])


def test_clip_constant_stream_unchanged():
    out, _, _ = clip_percentiles(raw([5.0, 5.0, 5.0]), 0.1, 0.9)
    np.testing.assert_array_equal(out.values[:, 0], [5.0, 5.0, 5.0])


def test_clip_single_outlier_among_zeros():
    v = np.zeros(1001)
    v[-1] = 1e9
    out, _, hi = clip_percentiles(raw(v))
    assert hi[0] == oracles.quantile(v.tolist(), 0.995) == 0.0
    assert out.values[-1, 0] == 0.0


def test_clip_matches_quantile_oracle(rng):
    for _ in range(50):
        v = rng.normal(size=rng.integers(2, 60))
        lo, hi = sorted(rng.random(2))
        _, lb, hb = clip_percentiles(raw(v), lo, hi)
        assert lb[0] == pytest.approx(oracles.quantile(v.tolist(), lo), abs=1e-12)
        assert hb[0] == pytest.approx(oracles.quantile(v.tolist(), hi), abs=1e-12)


def test_clip_ignores_missing_and_keeps_them_missing():
    v = np.array([1.0, np.nan, 3.0, 100.0])
    out, lo, hi = clip_percentiles(raw(v), 0.0, 0.5)
    assert np.isnan(out.values[1, 0])
    assert hi[0] == 3.0


def test_clip_errors():
    with pytest.raises(StructuralError):
        clip_percentiles(raw([np.nan, np.nan]))
    with pytest.raises(StructuralError):
        clip_percentiles(raw([1.0, 2.0]), 0.6, 0.4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=80), st.floats(0, 0.49), st.floats(0.51, 1))
def test_clip_idempotent(values, lo, hi):
    once, lb, hb = clip_percentiles(raw(values), lo, hi)
    twice, _, _ = clip_percentiles(once, lo, hi)
    # clipping a clipped stream with the original bounds changes nothing
    from sensorperf.ingest import apply_clip

    np.testing.assert_array_equal(apply_clip(once, lb, hb).values, once.values)
    assert np.all(twice.values >= lb[0]) and np.all(twice.values <= hb[0])


# -- smoothing -----------------------------------------------------------------


def test_smooth_examples():
    s = smooth_moving_window(raw([1.0, 3.0], t=[0.0, 50.0]), 100.0)
    np.testing.assert_array_equal(s.values[:, 0], [1.0, 2.0])
    one = smooth_moving_window(raw([7.5], t=[3.0]), 100.0)
    assert one.values[0, 0] == 7.5


def test_smooth_window_is_half_open():
    # the sample exactly window_ms earlier is outside (t - w, t]
    s = smooth_moving_window(raw([2.0, 4.0], t=[0.0, 100.0]), 100.0)
    np.testing.assert_array_equal(s.values[:, 0], [2.0, 4.0])


def test_smooth_matches_bruteforce_exactly(rng):
    t = np.cumsum(rng.integers(1, 40, size=1000)).astype(float)
    v = rng.normal(size=1000)
    s = smooth_moving_window(raw(v, t=t), 100.0)
    assert s.values[:, 0].tolist() == oracles.trailing_mean(t.tolist(), v.tolist(), 100.0)


def test_smooth_skips_missing_samples():
    s = smooth_moving_window(raw([1.0, np.nan, 5.0], t=[0.0, 10.0, 20.0]), 100.0)
    assert np.isnan(s.values[1, 0])
    assert s.values[2, 0] == 3.0


def test_smooth_keeps_clean_stream_type():
    cs = CleanStream("co2", np.array([0.0, 10.0]), np.array([1.0, 2.0]), ((0.0,), (3.0,)))
    out = smooth_moving_window(cs, 50.0)
    assert isinstance(out, CleanStream) and out.clip_bounds == ((0.0,), (3.0,))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.floats(-1e3, 1e3), st.floats(1, 500))
def test_smooth_preserves_constant(n, c, w):
    t = np.arange(n) * 7.0
    s = smooth_moving_window(raw(np.full(n, c), t=t), w)
    np.testing.assert_array_equal(s.values[:, 0], np.full(n, c))


def test_smooth_rejects_bad_window():
    with pytest.raises(StructuralError):
        smooth_moving_window(raw([1.0]), 0.0)


# -- reparametrization ---------------------------------------------------------


def test_reparametrize_examples():
    m = reparametrize(RawStream("mouse_movement", [0.0], [[3.0, 4.0]]), "mouse_distance")
    assert m.values[0, 0] == 5.0
    g = reparametrize(RawStream("gaze_movement", [0.0, 1.0], [[0.0, 0.0], [0.0, 0.0]]), "gaze_distance")
    np.testing.assert_array_equal(g.values[:, 0], [0.0, 0.0])
    e = reparametrize(raw([1.0, 2.0, 9.0], name="muscle_activity"), "emg_l1_reference")
    np.testing.assert_array_equal(e.values[:, 0], [1.0, 0.0, 7.0])


def test_gaze_distance_bridges_missing_positions():
    xy = [[0.0, 0.0], [np.nan, np.nan], [3.0, 4.0], [3.0, 5.0]]
    g = reparametrize(RawStream("gaze_movement", [0.0, 1.0, 2.0, 3.0], xy), "gaze_distance")
    v = g.values[:, 0]
    assert v[0] == 0.0 and np.isnan(v[1]) and v[2] == 5.0 and v[3] == 1.0


def test_reparametrize_component_errors():
    with pytest.raises(StructuralError):
        reparametrize(raw([1.0], name="mouse_movement"), "mouse_distance")
    with pytest.raises(StructuralError):
        reparametrize(RawStream("muscle_activity", [0.0], [[1.0, 2.0]]), "emg_l1_reference")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=50),
       st.sampled_from(["mouse_distance", "gaze_distance"]))
def test_reparametrized_distances_nonnegative(pts, mode):
    s = RawStream("mouse_movement", np.arange(len(pts), dtype=float), np.array(pts))
    assert np.all(reparametrize(s, mode).values >= 0)


# -- interpolation -------------------------------------------------------------


def test_interpolate_examples():
    c = interpolate_missing(raw([1.0, np.nan, 3.0], t=[0.0, 10.0, 20.0]))
    assert c.values[1] == 2.0
    c = interpolate_missing(raw([np.nan, 7.0, 9.0], t=[0.0, 10.0, 20.0]))
    assert c.values[0] == 7.0
    c = interpolate_missing(raw([7.0, 9.0, np.nan], t=[0.0, 10.0, 20.0]))
    assert c.values[2] == 9.0


def test_interpolate_line_exact(rng):
    t = np.cumsum(rng.integers(1, 20, size=5000)).astype(float)
    v = t.copy()
    miss = rng.random(t.size) < 0.037
    miss[0] = miss[-1] = False
    v[miss] = np.nan
    c = interpolate_missing(raw(v, t=t))
    assert np.max(np.abs(c.values - t)) <= 1e-12 * t.max()


def test_interpolate_matches_bruteforce(rng):
    for _ in range(100):
        n = int(rng.integers(2, 30))
        t = np.cumsum(rng.integers(1, 9, size=n)).astype(float)
        v = rng.normal(size=n)
        v[rng.random(n) < 0.3] = np.nan
        if np.count_nonzero(~np.isnan(v)) < 2:
            continue
        ref = oracles.interpolate(t.tolist(), [None if np.isnan(x) else x for x in v])
        np.testing.assert_allclose(interpolate_missing(raw(v, t=t)).values, ref, rtol=0, atol=1e-12)


def test_interpolate_needs_two_valid():
    with pytest.raises(StructuralError):
        interpolate_missing(raw([np.nan, 1.0, np.nan]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-1e3, 1e3)), min_size=2, max_size=60))
def test_interpolation_fills_and_preserves(vals):
    v = np.array([np.nan if x is None else x for x in vals])
    if np.count_nonzero(~np.isnan(v)) < 2:
        return
    c = interpolate_missing(raw(v))
    assert not np.isnan(c.values).any()
    ok = ~np.isnan(v)
    np.testing.assert_array_equal(c.values[ok], v[ok])


# -- stream invariants ---------------------------------------------------------


def test_rawstream_rejects_bad_timestamps():
    with pytest.raises(StructuralError):
        RawStream("co2", [0.0, 0.0], [1.0, 2.0])
    with pytest.raises(StructuralError):
        RawStream("co2", [-1.0, 2.0], [1.0, 2.0])


def test_preprocess_deterministic_and_clean(small_sessions):
    rec = small_sessions[0].record
    a, cal_a = preprocess_session(rec)
    b, cal_b = preprocess_session(rec)
    assert cal_a == cal_b
    for name in CHANNELS:
        assert a[name].values.tobytes() == b[name].values.tobytes()
        assert not np.isnan(a[name].values).any()


def test_preprocess_reuses_calibration(small_sessions):
    rec = small_sessions[0].record
    _, cal = preprocess_session(rec)
    again, cal2 = preprocess_session(rec, cal)
    assert cal2.bounds == cal.bounds and cal2.emg_reference == cal.emg_reference


# -- files -----------------------------------------------------------------------


@pytest.fixture
def session_dir(tmp_path, small_sessions):
    rec = small_sessions[0].record
    write_session(rec, tmp_path / "s")
    return tmp_path / "s"


def test_load_session_roundtrip(session_dir, small_sessions):
    rec = load_session(session_dir / "manifest.json")
    orig = small_sessions[0].record
    assert rec.player_id == orig.player_id and len(rec.streams) == 15 and len(rec.events) >= 1
    for name in CHANNELS:
        np.testing.assert_array_equal(rec.streams[name].timestamps, orig.streams[name].timestamps)
        np.testing.assert_array_equal(rec.streams[name].values, orig.streams[name].values)
    np.testing.assert_array_equal(rec.events.kills, orig.events.kills)


def test_load_session_missing_channel_file(session_dir):
    (session_dir / "co2.csv").unlink()
    with pytest.raises(StructuralError, match="co2"):
        load_session(session_dir / "manifest.json")


def test_load_session_missing_channel_entry(session_dir):
    m = json.loads((session_dir / "manifest.json").read_text())
    del m["channels"]["co2"]
    (session_dir / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(StructuralError, match="co2"):
        load_session(session_dir / "manifest.json")


def test_load_session_event_out_of_bounds(session_dir):
    m = json.loads((session_dir / "manifest.json").read_text())
    with open(session_dir / "events.csv", "a") as fh:
        fh.write(f"{m['duration_ms'] + 1},kill\n")
    with pytest.raises(StructuralError, match="outside"):
        load_session(session_dir / "manifest.json")


def test_load_session_non_monotone_reports_line(session_dir):
    lines = (session_dir / "humidity.csv").read_text().splitlines()
    lines[3], lines[4] = lines[4], lines[3]
    (session_dir / "humidity.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(StructuralError, match=r"humidity.csv:5"):
        load_session(session_dir / "manifest.json")


def test_load_session_malformed_cell(session_dir):
    lines = (session_dir / "temperature.csv").read_text().splitlines()
    lines[2] = lines[2].split(",")[0] + ",abc"
    (session_dir / "temperature.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(StructuralError, match=r"temperature.csv:3"):
        load_session(session_dir / "manifest.json")


def test_load_session_unknown_channel(session_dir):
    m = json.loads((session_dir / "manifest.json").read_text())
    m["channels"]["pulse_ox"] = "co2.csv"
    (session_dir / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(StructuralError, match="pulse_ox"):
        load_session(session_dir / "manifest.json")


def test_load_session_bad_json(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{nope")
    with pytest.raises(StructuralError):
        load_session(p)


def test_eventlog_pairs_roundtrip():
    ev = EventLog.from_pairs([(5.0, "death"), (1.0, "kill"), (5.0, "kill")])
    assert ev.pairs() == [(1.0, "kill"), (5.0, "kill"), (5.0, "death")]
