"""Causal replay of a recorded session through a trained bundle.

Each channel is fed in chunks that end at bin boundaries and is cleaned with
the bundle's calibration using the same arithmetic as the batch pipeline:
elementwise clip and reparametrization, trailing-window sums accumulated
oldest first, the same interpolation formula, and one sequential sum per
bin.  A bin is emitted once every channel has resolved all samples before
its end (a trailing missing sample waits for the next valid one, an empty
mean bin waits for the next non-empty bin), so replayed predictions equal
the batch ones bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .channels import CHANNELS, COLUMN_KINDS, N_FEATURES, REPARAM_MODES
from .errors import ConfigError, StructuralError
from .ingest import Calibration, RawStream, SessionRecord, _trailing_mean
from .model import ModelBundle, baseline_predict, network_step


class _Channel:
    """Incremental clip -> reparametrize -> smooth -> interpolate -> bin."""

    def __init__(self, name: str, kind: str, calibration: Calibration, edges: np.ndarray) -> None:
        self.name = name
        self.kind = kind
        self.mode = REPARAM_MODES.get(name)
        lo, hi = calibration.bounds[name]
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.ref = calibration.emg_reference
        self.window = calibration.window_ms
        self.edges = edges
        self.n_bins = edges.size - 1
        self.prev_pos: np.ndarray | None = None  # last valid gaze position
        self.tail_t = np.empty(0)  # valid scalar samples still inside the window
        self.tail_v = np.empty(0)
        self.anchor: tuple[float, float] | None = None  # last valid (t, smoothed v)
        self.pending = np.empty(0)  # missing timestamps after the last valid sample
        self.buf_t = np.empty(0)  # resolved, not yet binned
        self.buf_v = np.empty(0)
        self.fed_until = -np.inf
        self.finished = False
        self.n_valid = 0
        self.bins: list[float | None] = []  # per-bin aggregate, None for an empty mean bin

    # -- cleaning ---------------------------------------------------------

    def _scalar(self, raw: np.ndarray) -> np.ndarray:
        v = np.minimum(np.maximum(raw, self.lo), self.hi)
        if self.mode == "mouse_distance":
            return np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1])
        if self.mode == "gaze_distance":
            ok = ~np.isnan(v).any(axis=1)
            out = np.full(v.shape[0], np.nan)
            idx = np.flatnonzero(ok)
            if idx.size:
                pts = v[idx]
                d = np.empty(idx.size)
                if self.prev_pos is None:
                    d[0] = 0.0
                    dx = pts[1:, 0] - pts[:-1, 0]
                    dy = pts[1:, 1] - pts[:-1, 1]
                    d[1:] = np.sqrt(dx * dx + dy * dy)
                else:
                    full = np.vstack([self.prev_pos[None, :], pts])
                    dx = full[1:, 0] - full[:-1, 0]
                    dy = full[1:, 1] - full[:-1, 1]
                    d[:] = np.sqrt(dx * dx + dy * dy)
                self.prev_pos = pts[-1].copy()
                out[idx] = d
            return out
        if self.mode == "emg_l1_reference":
            return np.abs(v[:, 0] - self.ref)
        if self.name == "mouse_scroll":
            return np.abs(v[:, 0])
        return v[:, 0].copy()

    def _smooth(self, t: np.ndarray, s: np.ndarray) -> np.ndarray:
        ok = ~np.isnan(s)
        out = np.full(s.shape, np.nan)
        if ok.any():
            tv, vv = t[ok], s[ok]
            all_t = np.concatenate([self.tail_t, tv])
            all_v = np.concatenate([self.tail_v, vv])
            out[ok] = _trailing_mean(all_t, all_v, self.window)[self.tail_t.size:]
            keep = all_t > all_t[-1] - self.window
            self.tail_t, self.tail_v = all_t[keep], all_v[keep]
        return out

    def _interpolate(self, t: np.ndarray, v: np.ndarray) -> None:
        all_t = np.concatenate([self.pending, t])
        all_v = np.concatenate([np.full(self.pending.size, np.nan), v])
        ok = ~np.isnan(all_v)
        self.n_valid += int(ok.sum())
        tv, vv = all_t[ok], all_v[ok]
        if self.anchor is not None:
            tv = np.concatenate([[self.anchor[0]], tv])
            vv = np.concatenate([[self.anchor[1]], vv])
        if tv.size == 0:
            self.pending = all_t
            return
        miss = np.flatnonzero(~ok)
        j = np.searchsorted(tv, all_t[miss])
        head = j == 0
        tail = j == tv.size
        mid = ~(head | tail)
        all_v[miss[head]] = vv[0]
        jm = j[mid]
        t0, t1 = tv[jm - 1], tv[jm]
        v0, v1 = vv[jm - 1], vv[jm]
        all_v[miss[mid]] = v0 + (v1 - v0) * (all_t[miss[mid]] - t0) / (t1 - t0)
        cut = all_t.size - int(tail.sum())  # trailing missing samples stay pending
        self.pending = all_t[cut:]
        self.anchor = (float(tv[-1]), float(vv[-1]))
        self.buf_t = np.concatenate([self.buf_t, all_t[:cut]])
        self.buf_v = np.concatenate([self.buf_v, all_v[:cut]])

    def feed(self, t: np.ndarray, raw: np.ndarray, until: float) -> None:
        """Consume every sample with timestamp ``< until`` not seen yet."""
        if t.size:
            self._interpolate(t, self._smooth(t, self._scalar(raw)))
        self.fed_until = until
        self._close_bins()

    def finish(self) -> None:
        if self.n_valid < 2:
            raise StructuralError(f"{self.name}: need at least 2 valid samples, got {self.n_valid}")
        if self.pending.size:
            self.buf_t = np.concatenate([self.buf_t, self.pending])
            self.buf_v = np.concatenate([self.buf_v, np.full(self.pending.size, self.anchor[1])])
            self.pending = np.empty(0)
        self.finished = True
        self._close_bins()

    # -- binning ----------------------------------------------------------

    def _resolved_until(self) -> float:
        if self.finished:
            return np.inf
        return float(self.pending[0]) if self.pending.size else self.fed_until

    def _close_bins(self) -> None:
        limit = self._resolved_until()
        while len(self.bins) < self.n_bins and self.edges[len(self.bins) + 1] <= limit:
            k = len(self.bins)
            n_in = int(np.searchsorted(self.buf_t, self.edges[k + 1], side="left"))
            vals = self.buf_v[:n_in]  # timestamps are >= 0, so these all fall in bin k
            total = np.bincount(np.zeros(vals.size, dtype=np.intp), weights=vals, minlength=1)
            if self.kind == "sum":
                self.bins.append(total[0])
            elif vals.size:
                self.bins.append((total / np.bincount(np.zeros(vals.size, dtype=np.intp), minlength=1))[0])
            else:
                self.bins.append(None)
            self.buf_t, self.buf_v = self.buf_t[n_in:], self.buf_v[n_in:]

    def value(self, k: int):
        """Aggregate for bin ``k`` once it is determined, else ``None``."""
        if k >= len(self.bins):
            return None
        v = self.bins[k]
        if v is not None:
            return v
        nxt = next((i for i in range(k + 1, len(self.bins)) if self.bins[i] is not None), None)
        prv = next((i for i in range(k - 1, -1, -1) if self.bins[i] is not None), None)
        if nxt is None and not (self.finished and len(self.bins) == self.n_bins):
            return None
        if nxt is None and prv is None:
            raise StructuralError(f"{self.name}: channel has no samples inside the session span")
        if prv is None:
            return self.bins[nxt]
        if nxt is None:
            return self.bins[prv]
        v0, v1 = self.bins[prv], self.bins[nxt]
        return v0 + (v1 - v0) * (k - prv) / (nxt - prv)


@dataclass
class ReplayStats:
    """Wall time per emitted bin.

    ``latencies_ms`` is the compute from the arrival of the boundary that
    released the bin to its prediction (cleaning, binning and scoring);
    ``model_ms`` is the scoring step alone.
    """

    latencies_ms: list[float] = field(default_factory=list)
    model_ms: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        if not self.latencies_ms:
            return {"bins": 0, "median_ms": float("nan"), "p99_ms": float("nan"), "model_median_ms": float("nan")}
        a = np.asarray(self.latencies_ms)
        return {
            "bins": int(a.size),
            "median_ms": float(np.median(a)),
            "p99_ms": float(np.percentile(a, 99)),
            "model_median_ms": float(np.median(self.model_ms)),
        }


@dataclass(frozen=True)
class Prediction:
    bin_index: int
    timestamp_ms: float
    probability: float
    hidden: tuple[float, ...] = ()


def check_compatible(bundle: ModelBundle, session: SessionRecord, dt_s: float | None, tau_s: float | None) -> None:
    """Reject a bundle that does not match the session or the requested clock."""
    if dt_s is not None and float(dt_s) != bundle.dt_s:
        raise ConfigError(f"bundle was trained at dt={bundle.dt_s:g} s, requested dt={dt_s:g} s")
    if tau_s is not None and float(tau_s) != bundle.tau_s:
        raise ConfigError(f"bundle was trained at tau={bundle.tau_s:g} s, requested tau={tau_s:g} s")
    missing = [c for c in CHANNELS if c not in session.streams]
    if missing:
        raise ConfigError(f"session lacks channel(s) required by the bundle: {', '.join(missing)}")
    extra = sorted(set(session.streams) - set(CHANNELS))
    if extra:
        raise ConfigError(f"session has channel(s) unknown to the bundle: {', '.join(extra)}")
    if bundle.norm_stats is not None and bundle.norm_stats.mean.size != N_FEATURES:
        raise ConfigError(f"bundle expects {bundle.norm_stats.mean.size} features, sessions have {N_FEATURES}")
    if bundle.model_type != "baseline":
        if "calibration" not in bundle.extra:
            raise ConfigError("bundle carries no calibration for streaming")


def bundle_calibration(bundle: ModelBundle) -> Calibration:
    try:
        return Calibration.from_dict(bundle.extra["calibration"])
    except KeyError:
        raise ConfigError("bundle carries no calibration for streaming") from None


def replay(
    bundle: ModelBundle,
    session: SessionRecord,
    calibration: Calibration | None = None,
    resume: dict | None = None,
    stats: ReplayStats | None = None,
) -> Iterator[Prediction]:
    """Yield one prediction per bin in order, as soon as the bin is determined.

    ``resume`` is a snapshot ``{"bin_index": k, "hidden": [...]}``; bins up
    to ``k`` are cleaned but not scored and the network restarts from the
    stored hidden state.
    """
    session.validate()
    dt_ms = bundle.dt_s * 1000.0
    n_bins = int(np.floor(session.duration_ms / dt_ms))
    edges = np.arange(n_bins + 1) * dt_ms
    kind = bundle.model_type
    net = bundle.network() if kind in ("gru", "gru-att") else None
    logit = bundle.logistic() if kind == "logreg" else None
    h = np.zeros(net.hidden) if net is not None else None
    start = 0
    if resume is not None:
        start = int(resume["bin_index"]) + 1
        if net is not None:
            h = np.asarray(resume["hidden"], dtype=np.float64)
            if h.shape != (net.hidden,):
                raise ConfigError(f"snapshot hidden state has shape {h.shape}, expected ({net.hidden},)")

    if kind == "baseline":
        for k in range(start, n_bins):
            t0 = time.perf_counter()
            p = baseline_predict(session.events, (k + 1) * bundle.dt_s, bundle.tau_s)
            if stats is not None:
                stats.latencies_ms.append((time.perf_counter() - t0) * 1000.0)
                stats.model_ms.append(stats.latencies_ms[-1])
            yield Prediction(k, float(edges[k + 1]), float(p))
        return

    if calibration is None:
        calibration = bundle_calibration(bundle)
    chans = [_Channel(name, kind_, calibration, edges) for name, kind_ in zip(CHANNELS, COLUMN_KINDS)]
    streams: list[RawStream] = [session.streams[name] for name in CHANNELS]
    cursors = [0] * len(chans)
    mean, std = bundle.norm_stats.mean, bundle.norm_stats.std
    next_bin = 0

    def emit():
        nonlocal next_bin, h
        while next_bin < n_bins:
            row = [c.value(next_bin) for c in chans]
            if any(v is None for v in row):
                return
            k = next_bin
            next_bin += 1
            if k < start:
                continue
            t0 = time.perf_counter()
            x = (np.array(row, dtype=np.float64) - mean) / std
            if net is not None:
                p, h, _ = network_step(net, x, h)
                pred = Prediction(k, float(edges[k + 1]), float(p), tuple(h.tolist()))
            else:
                pred = Prediction(k, float(edges[k + 1]), float(logit.predict(x[None, :])[0]))
            if stats is not None:
                stats.model_ms.append((time.perf_counter() - t0) * 1000.0)
            yield pred

    for b in range(1, n_bins + 2):
        t_start = time.perf_counter()
        until = edges[b] if b <= n_bins else np.inf
        for i, (c, s) in enumerate(zip(chans, streams)):
            stop = s.timestamps.size if b > n_bins else int(np.searchsorted(s.timestamps, until, side="left"))
            c.feed(s.timestamps[cursors[i]:stop], s.values[cursors[i]:stop], until)
            cursors[i] = stop
            if b > n_bins:
                c.finish()
        out = list(emit())
        if stats is not None:
            spent = (time.perf_counter() - t_start) * 1000.0
            stats.latencies_ms.extend([spent] * len(out))
        yield from out


def snapshot_bundle(bundle: ModelBundle, pred: Prediction, session_id: str) -> ModelBundle:
    """Copy of ``bundle`` carrying the replay state after ``pred``."""
    extra = dict(bundle.extra)
    extra["snapshot"] = {"bin_index": pred.bin_index, "hidden": list(pred.hidden), "player_id": session_id}
    return ModelBundle(bundle.model_type, dict(bundle.hyperparameters), bundle.norm_stats,
                       dict(bundle.parameters), bundle.seed, extra)
