"""Common-clock resampling of cleaned channels into a feature matrix."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .channels import CHANNELS, COLUMN_KINDS, GROUP_NAMES, GROUP_SIZES
from .errors import ConfigError, StructuralError
from .ingest import CleanStream


@dataclass(frozen=True)
class FeatureSeries:
    player_id: str
    dt_s: float
    frames: np.ndarray  # (N, 15), columns in CHANNELS order
    t0: float = 0.0
    column_kinds: tuple[str, ...] = COLUMN_KINDS

    @property
    def n_bins(self) -> int:
        return self.frames.shape[0]

    def bin_end_ms(self) -> np.ndarray:
        """Timestamp (ms) at which each bin closes; predictions are issued here."""
        return (np.arange(self.n_bins) + 1) * (self.dt_s * 1000.0) + self.t0


def group_slices(group_sizes: Iterable[int] = GROUP_SIZES) -> dict[str, slice]:
    """Fixed column partition used by the grouped encoders and attention."""
    out = {}
    start = 0
    for name, size in zip(GROUP_NAMES, group_sizes):
        out[name] = slice(start, start + size)
        start += size
    return out


def n_bins_for(duration_ms: float, dt_s: float) -> int:
    return int(np.floor(duration_ms / (dt_s * 1000.0)))


def bin_edges(n_bins: int, dt_s: float) -> np.ndarray:
    return np.arange(n_bins + 1) * (dt_s * 1000.0)


def aggregate_channel(
    timestamps: np.ndarray, values: np.ndarray, kind: str, n_bins: int, dt_s: float
) -> np.ndarray:
    """Per-bin sum or mean over half-open bins ``[k dt, (k+1) dt)``.

    Sums accumulate in sample order.  Empty mean bins are filled linearly
    between non-empty neighbour bins (copying at the edges); empty sum bins
    are 0.
    """
    edges = bin_edges(n_bins, dt_s)
    idx = np.searchsorted(edges, timestamps, side="right") - 1
    keep = (idx >= 0) & (idx < n_bins)
    idx = idx[keep]
    sums = np.bincount(idx, weights=values[keep], minlength=n_bins)
    if kind == "sum":
        return sums
    counts = np.bincount(idx, minlength=n_bins)
    full = counts > 0
    if not full.any():
        raise StructuralError("channel has no samples inside the session span")
    out = np.zeros(n_bins)
    out[full] = sums[full] / counts[full]
    return fill_empty_bins(out, full)


def fill_empty_bins(out: np.ndarray, full: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(full)
    empty = np.flatnonzero(~full)
    if empty.size == 0:
        return out
    j = np.searchsorted(nz, empty)
    head = j == 0
    tail = j == nz.size
    mid = ~(head | tail)
    out[empty[head]] = out[nz[0]]
    out[empty[tail]] = out[nz[-1]]
    jm = j[mid]
    k0, k1 = nz[jm - 1], nz[jm]
    v0, v1 = out[k0], out[k1]
    out[empty[mid]] = v0 + (v1 - v0) * (empty[mid] - k0) / (k1 - k0)
    return out


def resample(
    streams: Mapping[str, CleanStream] | Iterable[CleanStream],
    dt_s: float,
    duration_ms: float,
    player_id: str = "",
) -> FeatureSeries:
    if not dt_s > 0:
        raise ConfigError(f"dt_s must be positive, got {dt_s}")
    by_name = dict(streams) if isinstance(streams, Mapping) else {s.sensor_id: s for s in streams}
    missing = [c for c in CHANNELS if c not in by_name]
    if missing:
        raise StructuralError(f"resample: missing channel(s) {', '.join(missing)}")
    n = n_bins_for(duration_ms, dt_s)
    frames = np.empty((n, len(CHANNELS)))
    for col, (name, kind) in enumerate(zip(CHANNELS, COLUMN_KINDS)):
        s = by_name[name]
        try:
            frames[:, col] = aggregate_channel(s.timestamps, s.values, kind, n, dt_s)
        except StructuralError as exc:
            raise StructuralError(f"{player_id}/{name}: {exc}") from None
    return FeatureSeries(player_id=player_id, dt_s=float(dt_s), frames=frames)


def write_features(fs: FeatureSeries, csv_path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_index", *CHANNELS])
        for k, row in enumerate(fs.frames.tolist()):
            w.writerow([k, *(repr(v) for v in row)])
    sidecar = {
        "player_id": fs.player_id,
        "dt_s": fs.dt_s,
        "t0": fs.t0,
        "column_kinds": list(fs.column_kinds),
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def read_features(csv_path) -> FeatureSeries:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
    with open(csv_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["bin_index", *CHANNELS]:
        raise StructuralError(f"{csv_path}:1: unexpected feature header")
    frames = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    frames = frames.reshape(len(rows) - 1, len(CHANNELS))
    return FeatureSeries(
        player_id=meta["player_id"],
        dt_s=float(meta["dt_s"]),
        frames=frames,
        t0=float(meta["t0"]),
        column_kinds=tuple(meta["column_kinds"]),
    )
