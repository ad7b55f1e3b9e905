"""Session loading and per-channel cleaning at native sampling rates.

Raw values are float64 arrays with ``NaN`` marking a missing sample.  The
cleaning pipeline runs clip -> reparametrize -> smooth -> interpolate so that
percentiles are estimated before any derived quantity exists and nothing
missing ever reaches resampling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .channels import CHANNELS, COMPONENTS, REPARAM_MODES
from .errors import StructuralError

CLIP_LO = 0.005
CLIP_HI = 0.995
SMOOTH_WINDOW_MS = 100.0


@dataclass(frozen=True)
class RawStream:
    """One sensor channel at its native rate.

    ``values`` has shape ``(n, components)``; a row containing any ``NaN``
    is a missing sample.
    """

    sensor_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.timestamps, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", v)
        if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.shape[0]:
            raise StructuralError(f"{self.sensor_id}: timestamps/values shape mismatch")
        if t.size and not np.all(np.isfinite(t)):
            raise StructuralError(f"{self.sensor_id}: non-finite timestamp")
        if t.size and t[0] < 0:
            raise StructuralError(f"{self.sensor_id}: negative timestamp")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise StructuralError(f"{self.sensor_id}: timestamps not strictly increasing")

    @property
    def components(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values).any(axis=1)


@dataclass(frozen=True)
class CleanStream:
    """Scalar channel with no missing entries.

    ``clip_bounds`` are the per-component raw bounds applied before any
    reparametrization.
    """

    sensor_id: str
    timestamps: np.ndarray
    values: np.ndarray
    clip_bounds: tuple[tuple[float, ...], tuple[float, ...]] = ((), ())

    def __post_init__(self) -> None:
        if np.isnan(self.values).any():
            raise StructuralError(f"{self.sensor_id}: clean stream has missing values")


@dataclass(frozen=True)
class EventLog:
    """Kill and death timestamps (ms), each sorted ascending."""

    kills: np.ndarray
    deaths: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> "EventLog":
        kills = sorted(float(t) for t, kind in pairs if kind == "kill")
        deaths = sorted(float(t) for t, kind in pairs if kind == "death")
        return cls(np.asarray(kills, dtype=np.float64), np.asarray(deaths, dtype=np.float64))

    def pairs(self) -> list[tuple[float, str]]:
        merged = [(t, "kill") for t in self.kills.tolist()]
        merged += [(t, "death") for t in self.deaths.tolist()]
        # kills before deaths at equal timestamps keeps the file order stable
        merged.sort(key=lambda p: (p[0], p[1] != "kill"))
        return merged

    def __len__(self) -> int:
        return len(self.kills) + len(self.deaths)


@dataclass(frozen=True)
class SessionRecord:
    player_id: str
    duration_ms: float
    streams: dict[str, RawStream]
    events: EventLog

    def validate(self) -> None:
        missing = [c for c in CHANNELS if c not in self.streams]
        if missing:
            raise StructuralError(f"{self.player_id}: missing channel(s) {', '.join(missing)}")
        unknown = sorted(set(self.streams) - set(CHANNELS))
        if unknown:
            raise StructuralError(f"{self.player_id}: unknown channel(s) {', '.join(unknown)}")
        for name in CHANNELS:
            s = self.streams[name]
            if s.components != COMPONENTS[name]:
                raise StructuralError(
                    f"{self.player_id}/{name}: expected {COMPONENTS[name]} component(s), got {s.components}"
                )
        for arr in (self.events.kills, self.events.deaths):
            if arr.size and (arr[0] < 0 or arr[-1] > self.duration_ms):
                raise StructuralError(f"{self.player_id}: event outside [0, {self.duration_ms}] ms")


@dataclass(frozen=True)
class Calibration:
    """Per-channel clip bounds and the EMG reference level.

    Produced by a batch preprocess and reused verbatim in streaming replay.
    """

    bounds: dict[str, tuple[tuple[float, ...], tuple[float, ...]]]
    emg_reference: float
    window_ms: float = SMOOTH_WINDOW_MS

    def to_dict(self) -> dict:
        return {
            "bounds": {k: [list(lo), list(hi)] for k, (lo, hi) in self.bounds.items()},
            "emg_reference": self.emg_reference,
            "window_ms": self.window_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        bounds = {k: (tuple(v[0]), tuple(v[1])) for k, v in d["bounds"].items()}
        return cls(bounds=bounds, emg_reference=float(d["emg_reference"]), window_ms=float(d["window_ms"]))


# ---------------------------------------------------------------------------
# per-channel operations
# ---------------------------------------------------------------------------


def clip_percentiles(stream: RawStream, lo: float = CLIP_LO, hi: float = CLIP_HI):
    """Clip every component to its ``[lo, hi]`` quantiles.

    Returns ``(clipped_stream, lo_bounds, hi_bounds)``; bounds are tuples with
    one entry per component.  Quantiles use linear interpolation between
    order statistics and ignore missing samples.
    """
    if not 0.0 <= lo < hi <= 1.0:
        raise StructuralError(f"invalid quantile pair ({lo}, {hi})")
    ok = ~stream.missing
    if not ok.any():
        raise StructuralError(f"{stream.sensor_id}: no valid samples to clip")
    valid = stream.values[ok]
    lo_b = tuple(float(np.quantile(valid[:, c], lo)) for c in range(stream.components))
    hi_b = tuple(float(np.quantile(valid[:, c], hi)) for c in range(stream.components))
    return apply_clip(stream, lo_b, hi_b), lo_b, hi_b


def apply_clip(stream: RawStream, lo_b, hi_b) -> RawStream:
    lo_a = np.asarray(lo_b, dtype=np.float64)
    hi_a = np.asarray(hi_b, dtype=np.float64)
    # NaN propagates through minimum/maximum, so missing stays missing
    clipped = np.minimum(np.maximum(stream.values, lo_a), hi_a)
    return RawStream(stream.sensor_id, stream.timestamps, clipped)


def reparametrize(stream: RawStream, mode: str, reference: float | None = None) -> RawStream:
    """Turn a multi-component or biased signal into a non-negative scalar.

    ``mouse_distance``: per-sample ``hypot(dx, dy)`` of increments.
    ``gaze_distance``: distance from the previous valid position (0 for the
    first one).  ``emg_l1_reference``: ``|v - ref|`` with ``ref`` the
    median of valid samples unless supplied.
    """
    v = stream.values
    if mode in ("mouse_distance", "gaze_distance"):
        if stream.components != 2:
            raise StructuralError(f"{stream.sensor_id}: {mode} needs 2 components, got {stream.components}")
        if mode == "mouse_distance":
            out = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1])
        else:
            out = gaze_distances(v)
    elif mode == "emg_l1_reference":
        if stream.components != 1:
            raise StructuralError(f"{stream.sensor_id}: {mode} needs 1 component, got {stream.components}")
        if reference is None:
            reference = emg_reference(stream)
        out = np.abs(v[:, 0] - reference)
    else:
        raise StructuralError(f"unknown reparametrization mode {mode!r}")
    return RawStream(stream.sensor_id, stream.timestamps, out[:, None])


def gaze_distances(xy: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(xy).any(axis=1)
    out = np.full(xy.shape[0], np.nan)
    idx = np.flatnonzero(ok)
    if idx.size:
        pts = xy[idx]
        d = np.empty(idx.size)
        d[0] = 0.0
        dx = pts[1:, 0] - pts[:-1, 0]
        dy = pts[1:, 1] - pts[:-1, 1]
        d[1:] = np.sqrt(dx * dx + dy * dy)
        out[idx] = d
    return out


def emg_reference(stream: RawStream) -> float:
    valid = stream.values[~stream.missing, 0]
    if valid.size == 0:
        raise StructuralError(f"{stream.sensor_id}: no valid samples for reference level")
    return float(np.median(valid))


def smooth_moving_window(stream: RawStream | CleanStream, window_ms: float = SMOOTH_WINDOW_MS):
    """Trailing mean over ``(t - window_ms, t]`` of the valid samples.

    Missing samples stay missing.  Offsets from the oldest sample in the
    window are accumulated oldest first, which is what the streaming replay
    does too.
    """
    if window_ms <= 0:
        raise StructuralError(f"window_ms must be positive, got {window_ms}")
    t = stream.timestamps
    v = stream.values[:, 0] if stream.values.ndim == 2 else stream.values
    ok = ~np.isnan(v)
    out = np.full(v.shape[0], np.nan)
    tv = t[ok]
    vv = v[ok]
    if tv.size:
        out[ok] = _trailing_mean(tv, vv, window_ms)
    if isinstance(stream, CleanStream):
        return CleanStream(stream.sensor_id, t, out, stream.clip_bounds)
    return RawStream(stream.sensor_id, t, out[:, None])


def _trailing_mean(t: np.ndarray, v: np.ndarray, window_ms: float) -> np.ndarray:
    # mean = oldest + mean of offsets from it, so a constant window is returned exactly
    n = t.size
    pos = np.arange(n)
    start = np.searchsorted(t, t - window_ms, side="right")
    count = pos - start + 1
    base = v[start]
    acc = np.zeros(n)
    for j in range(1, int(count.max())):
        idx = start + j
        sel = idx <= pos
        acc[sel] += v[idx[sel]] - base[sel]
    return base + acc / count


def interpolate_missing(stream: RawStream, clip_bounds=((), ())) -> CleanStream:
    """Fill missing samples linearly in time between valid neighbours.

    Leading and trailing gaps copy the nearest valid value.
    """
    t = stream.timestamps
    v = stream.values[:, 0].copy()
    ok = ~np.isnan(v)
    idx = np.flatnonzero(ok)
    if idx.size < 2:
        raise StructuralError(f"{stream.sensor_id}: need at least 2 valid samples, got {idx.size}")
    miss = np.flatnonzero(~ok)
    if miss.size:
        tv, vv = t[idx], v[idx]
        j = np.searchsorted(tv, t[miss])
        head = j == 0
        tail = j == tv.size
        mid = ~(head | tail)
        v[miss[head]] = vv[0]
        v[miss[tail]] = vv[-1]
        jm = j[mid]
        t0, t1 = tv[jm - 1], tv[jm]
        v0, v1 = vv[jm - 1], vv[jm]
        v[miss[mid]] = v0 + (v1 - v0) * (t[miss[mid]] - t0) / (t1 - t0)
    return CleanStream(stream.sensor_id, t, v, clip_bounds)


def preprocess_channel(
    stream: RawStream,
    calibration: Calibration | None = None,
    lo: float = CLIP_LO,
    hi: float = CLIP_HI,
    window_ms: float = SMOOTH_WINDOW_MS,
) -> tuple[CleanStream, tuple, float | None]:
    name = stream.sensor_id
    if calibration is None:
        clipped, lo_b, hi_b = clip_percentiles(stream, lo, hi)
    else:
        lo_b, hi_b = calibration.bounds[name]
        clipped = apply_clip(stream, lo_b, hi_b)
    ref = None
    mode = REPARAM_MODES.get(name)
    if mode == "emg_l1_reference":
        ref = emg_reference(clipped) if calibration is None else calibration.emg_reference
        scalar = reparametrize(clipped, mode, ref)
    elif mode is not None:
        scalar = reparametrize(clipped, mode)
    elif name == "mouse_scroll":
        scalar = RawStream(name, clipped.timestamps, np.abs(clipped.values))
    else:
        scalar = clipped
    smoothed = smooth_moving_window(scalar, window_ms)
    return interpolate_missing(smoothed, (lo_b, hi_b)), (lo_b, hi_b), ref


def preprocess_session(
    session: SessionRecord,
    calibration: Calibration | None = None,
    lo: float = CLIP_LO,
    hi: float = CLIP_HI,
    window_ms: float = SMOOTH_WINDOW_MS,
) -> tuple[dict[str, CleanStream], Calibration]:
    """Clean all 15 channels; returns the streams and the calibration used."""
    session.validate()
    if calibration is not None:
        window_ms = calibration.window_ms
    clean: dict[str, CleanStream] = {}
    bounds = {}
    emg_ref = float("nan")
    for name in CHANNELS:
        cs, b, ref = preprocess_channel(session.streams[name], calibration, lo, hi, window_ms)
        clean[name] = cs
        bounds[name] = b
        if ref is not None:
            emg_ref = ref
    return clean, Calibration(bounds=bounds, emg_reference=emg_ref, window_ms=window_ms)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_sensor_csv(path: Path, name: str) -> RawStream:
    ncomp = COMPONENTS[name]
    expected = ["timestamp_ms"] + [f"v{i + 1}" for i in range(ncomp)]
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            header = next(csv.reader(fh), None)
    except FileNotFoundError:
        raise StructuralError(f"{path}: file for channel {name} not found") from None
    if header != expected:
        raise StructuralError(f"{path}:1: expected header {','.join(expected)}, got {header}")
    try:
        df = pd.read_csv(
            path, dtype=np.float64, keep_default_na=False, na_values=[""], engine="c"
        )
    except (ValueError, pd.errors.ParserError):
        raise StructuralError(_locate_bad_row(path, ncomp + 1)) from None
    t = df["timestamp_ms"].to_numpy()
    if np.isnan(t).any():
        line = int(np.flatnonzero(np.isnan(t))[0]) + 2
        raise StructuralError(f"{path}:{line}: missing timestamp")
    if t.size and t[0] < 0:
        raise StructuralError(f"{path}:2: negative timestamp")
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        raise StructuralError(f"{path}:{int(bad[0]) + 3}: timestamps not strictly increasing")
    vals = df[expected[1:]].to_numpy()
    return RawStream(name, t, vals)


def _locate_bad_row(path: Path, nfields: int) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                continue
            if len(row) != nfields:
                return f"{path}:{lineno}: expected {nfields} fields, got {len(row)}"
            for cell in row:
                if cell == "":
                    continue
                try:
                    float(cell)
                except ValueError:
                    return f"{path}:{lineno}: not a number: {cell!r}"
    return f"{path}: malformed CSV"


def _read_events(path: Path, duration_ms: float) -> EventLog:
    pairs = []
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise StructuralError(f"{path}: event file not found") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp_ms", "event"]:
            raise StructuralError(f"{path}:1: expected header timestamp_ms,event, got {header}")
        prev = -np.inf
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise StructuralError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = float(row[0])
            except ValueError:
                raise StructuralError(f"{path}:{lineno}: not a number: {row[0]!r}") from None
            kind = row[1]
            if kind not in ("kill", "death"):
                raise StructuralError(f"{path}:{lineno}: unknown event {kind!r}")
            if not 0 <= ts <= duration_ms:
                raise StructuralError(f"{path}:{lineno}: event at {ts} ms outside [0, {duration_ms}]")
            if ts < prev:
                raise StructuralError(f"{path}:{lineno}: events out of order")
            prev = ts
            pairs.append((ts, kind))
    return EventLog.from_pairs(pairs)


def load_session(manifest_path) -> SessionRecord:
    """Parse a session manifest and every file it references."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StructuralError(f"{manifest_path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    for key in ("player_id", "duration_ms", "events", "channels"):
        if key not in manifest:
            raise StructuralError(f"{manifest_path}: manifest lacks {key!r}")
    channels = manifest["channels"]
    unknown = sorted(set(channels) - set(CHANNELS))
    if unknown:
        raise StructuralError(f"{manifest_path}: unknown channel {unknown[0]!r}")
    for name in CHANNELS:
        if name not in channels:
            raise StructuralError(f"{manifest_path}: channel {name!r} missing from manifest")
    base = manifest_path.parent
    duration = float(manifest["duration_ms"])
    streams = {name: _read_sensor_csv(base / channels[name], name) for name in CHANNELS}
    events = _read_events(base / manifest["events"], duration)
    record = SessionRecord(str(manifest["player_id"]), duration, streams, events)
    record.validate()
    return record


def write_session(record: SessionRecord, directory) -> Path:
    """Write ``record`` in the manifest + CSV layout; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    channels = {}
    for name in CHANNELS:
        s = record.streams[name]
        cols = {"timestamp_ms": s.timestamps}
        for i in range(s.components):
            cols[f"v{i + 1}"] = s.values[:, i]
        fname = f"{name}.csv"
        pd.DataFrame(cols).to_csv(
            directory / fname, index=False, float_format="%.6f", na_rep="", lineterminator="\n"
        )
        channels[name] = fname
    with open(directory / "events.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp_ms,event\n")
        for ts, kind in record.events.pairs():
            fh.write(f"{ts:.6f},{kind}\n")
    manifest = {
        "player_id": record.player_id,
        "duration_ms": record.duration_ms,
        "events": "events.csv",
        "channels": channels,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path
