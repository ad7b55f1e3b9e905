"""Kills-proportion targets and their binarization against the past mean.

Bin ``k`` is labelled at its closing time ``t_k = (k + 1) * dt``: the
features of bin ``k`` only use data before ``t_k`` and the target window
``[t_k, t_k + tau)`` starts there, so nothing from the future leaks in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import EventLog


@dataclass(frozen=True)
class TargetSeries:
    player_id: str
    dt_s: float
    tau_s: float
    p: np.ndarray  # NaN where undefined
    past_mean: np.ndarray  # NaN where undefined
    y: np.ndarray  # 0.0 / 1.0, NaN where undefined
    valid: np.ndarray  # bool

    @property
    def n_bins(self) -> int:
        return self.p.shape[0]

    def positive_fraction(self) -> float:
        return float(self.y[self.valid].mean()) if self.valid.any() else float("nan")


def _count_in(times: np.ndarray, start_ms, end_ms):
    """Number of events with ``start <= t < end``."""
    return np.searchsorted(times, end_ms, side="left") - np.searchsorted(times, start_ms, side="left")


def window_proportion(events: EventLog, start_ms, tau_ms):
    """Vectorised ``k / (k + d)`` over ``[start, start + tau)``; NaN when empty."""
    start_ms = np.asarray(start_ms, dtype=np.float64)
    end_ms = start_ms + tau_ms
    k = _count_in(events.kills, start_ms, end_ms)
    d = _count_in(events.deaths, start_ms, end_ms)
    total = k + d
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(total > 0, k / np.maximum(total, 1), np.nan)
    return p


def kills_proportion(events: EventLog, t_s: float, tau_s: float) -> float:
    """Share of kills among kill/death events in ``[t, t + tau)``; NaN if none."""
    return float(window_proportion(events, t_s * 1000.0, tau_s * 1000.0))


def trailing_proportion(events: EventLog, t_s: float, tau_s: float) -> float:
    """Same as :func:`kills_proportion` over the trailing window ``[t - tau, t)``."""
    if t_s < tau_s:
        return float("nan")
    return kills_proportion(events, t_s - tau_s, tau_s)


def label_times_s(n_bins: int, dt_s: float) -> np.ndarray:
    return (np.arange(n_bins) + 1) * dt_s


def binarize(p: np.ndarray, fits: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(past_mean, y, valid)`` for a per-bin proportion series.

    ``past_mean[k]`` averages the defined ``p`` at bins ``< k``;
    ``y[k] = p[k] > past_mean[k]`` (strict).
    """
    p = np.asarray(p, dtype=np.float64)
    defined = ~np.isnan(p)
    csum = np.cumsum(np.where(defined, p, 0.0))
    ccount = np.cumsum(defined)
    past_sum = np.concatenate(([0.0], csum[:-1]))
    past_cnt = np.concatenate(([0], ccount[:-1]))
    with np.errstate(invalid="ignore", divide="ignore"):
        past_mean = np.where(past_cnt > 0, past_sum / np.maximum(past_cnt, 1), np.nan)
    valid = defined & (past_cnt > 0)
    if fits is not None:
        valid &= fits
    y = np.full(p.shape, np.nan)
    y[valid] = (p[valid] > past_mean[valid]).astype(np.float64)
    return past_mean, y, valid


def build_targets(
    events: EventLog,
    duration_ms: float,
    n_bins: int,
    dt_s: float,
    tau_s: float,
    player_id: str = "",
) -> TargetSeries:
    t_ms = label_times_s(n_bins, dt_s) * 1000.0
    tau_ms = tau_s * 1000.0
    fits = t_ms + tau_ms <= duration_ms
    p = window_proportion(events, t_ms, tau_ms)
    p = np.where(fits, p, np.nan)
    past_mean, y, valid = binarize(p, fits)
    return TargetSeries(player_id, float(dt_s), float(tau_s), p, past_mean, y, valid)


def trailing_series(events: EventLog, n_bins: int, dt_s: float, tau_s: float) -> np.ndarray:
    """Trailing proportion at every label time (NaN where undefined)."""
    t_s = label_times_s(n_bins, dt_s)
    start_ms = (t_s - tau_s) * 1000.0
    p = window_proportion(events, start_ms, tau_s * 1000.0)
    return np.where(t_s >= tau_s, p, np.nan)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(v)


def write_targets(ts: TargetSeries, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_index", "p", "past_mean", "y", "valid"])
        for k in range(ts.n_bins):
            y = "" if math.isnan(ts.y[k]) else str(int(ts.y[k]))
            w.writerow([k, _fmt(float(ts.p[k])), _fmt(float(ts.past_mean[k])), y, int(ts.valid[k])])
