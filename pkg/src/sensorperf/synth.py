"""Seeded synthetic sessions with a planted latent "form" signal.

Each player gets a mean-reverting latent ``f(t)`` (Ornstein-Uhlenbeck on a
1 s grid).  Kill and death intensities are ``base * exp(+c f)`` and
``base * exp(-c f)``; every sensor channel carries ``loading * f`` on top of
a per-player baseline and white noise at its native rate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

from .channels import CHANNELS
from .errors import ConfigError
from .ingest import EventLog, RawStream, SessionRecord, write_session
from .label import build_targets, label_times_s
from .metrics import per_player_mean_auc
from .resample import n_bins_for

# Native rates of the recording rig, Hz.  Only defaults for the generator.
DEFAULT_RATES: dict[str, float] = {
    "heart_rate": 3.0,
    "muscle_activity": 70.0,
    "skin_resistance": 70.0,
    "gaze_movement": 90.0,
    "mouse_movement": 250.0,
    "mouse_scroll": 250.0,
    "chair_accel_x": 100.0,
    "chair_accel_y": 100.0,
    "chair_accel_z": 100.0,
    "chair_gyro_x": 100.0,
    "chair_gyro_y": 100.0,
    "chair_gyro_z": 100.0,
    "co2": 0.2,
    "temperature": 5.0,
    "humidity": 5.0,
}

# (baseline, between-player sd, loading per unit latent, noise sd, drift per hour)
LEVEL_CHANNELS: dict[str, tuple[float, float, float, float, float]] = {
    "heart_rate": (75.0, 8.0, 4.0, 2.0, 0.0),
    "skin_resistance": (250.0, 40.0, -12.0, 4.0, -20.0),
    "chair_accel_x": (0.0, 0.02, 0.03, 0.08, 0.0),
    "chair_accel_y": (0.0, 0.02, -0.03, 0.08, 0.0),
    "chair_accel_z": (9.81, 0.02, 0.02, 0.08, 0.0),
    "chair_gyro_x": (0.0, 0.3, 0.6, 2.0, 0.0),
    "chair_gyro_y": (0.0, 0.3, -0.6, 2.0, 0.0),
    "chair_gyro_z": (0.0, 0.3, 0.8, 2.5, 0.0),
    "co2": (650.0, 120.0, 12.0, 10.0, 150.0),
    "temperature": (23.0, 1.0, 0.08, 0.05, 0.6),
    "humidity": (40.0, 5.0, 0.3, 0.3, 2.0),
}


@dataclass
class SynthConfig:
    n_players: int = 21
    duration_ms: float = 32 * 60 * 1000.0
    coupling: float = 1.0
    kill_rate: float = 3.0  # events per minute
    death_rate: float = 3.0
    latent_reversion: float = 0.1  # per minute
    latent_volatility: float = 0.8  # per sqrt(minute)
    noise_scale: float = 1.0
    missing_fraction: float = 0.037
    rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATES))
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError(f"coupling must be in [0, 1], got {self.coupling}")
        for key in ("kill_rate", "death_rate", "latent_reversion", "duration_ms"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.latent_volatility < 0 or self.noise_scale < 0:
            raise ConfigError("latent_volatility and noise_scale must be non-negative")
        if not 0.0 <= self.missing_fraction < 0.5:
            raise ConfigError("missing_fraction must be in [0, 0.5)")
        if self.n_players < 1:
            raise ConfigError("n_players must be >= 1")
        unknown = set(self.rates) - set(CHANNELS)
        if unknown:
            raise ConfigError(f"unknown channel in rates: {sorted(unknown)}")
        if any(not r > 0 for r in self.rates.values()):
            raise ConfigError("sampling rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthSession:
    record: SessionRecord
    latent: np.ndarray  # f on a 1 s grid, latent[i] = f(i seconds)

    @property
    def player_id(self) -> str:
        return self.record.player_id

    def latent_at(self, t_s) -> np.ndarray:
        i = np.clip(np.floor(np.asarray(t_s, dtype=np.float64)).astype(int), 0, self.latent.size - 1)
        return self.latent[i]


def _latent(rng: np.random.Generator, n_sec: int, cfg: SynthConfig) -> np.ndarray:
    theta = cfg.latent_reversion / 60.0
    sigma = cfg.latent_volatility / np.sqrt(60.0)
    decay = np.exp(-theta)
    step_sd = sigma * np.sqrt((1.0 - decay * decay) / (2.0 * theta))
    stat_sd = sigma / np.sqrt(2.0 * theta)
    shocks = rng.standard_normal(n_sec)
    f = np.empty(n_sec)
    f[0] = stat_sd * shocks[0]
    for i in range(1, n_sec):
        f[i] = decay * f[i - 1] + step_sd * shocks[i]
    return f


def _events(rng: np.random.Generator, f: np.ndarray, cfg: SynthConfig) -> EventLog:
    n_sec = f.size
    out = []
    for base, sign in ((cfg.kill_rate, 1.0), (cfg.death_rate, -1.0)):
        lam = base / 60.0 * np.exp(sign * cfg.coupling * f)
        counts = rng.poisson(lam)
        secs = np.repeat(np.arange(n_sec), counts)
        ms = np.floor((secs + rng.random(secs.size)) * 1000.0)
        ms = np.sort(np.minimum(ms, cfg.duration_ms))
        out.append(ms)
    return EventLog(out[0], out[1])


def _sample_times(rate: float, duration_ms: float) -> np.ndarray:
    n = int(np.floor(duration_ms / 1000.0 * rate))
    return np.round(np.arange(n) * (1000.0 / rate), 3)


def _channel_values(name: str, rng, t_ms: np.ndarray, f_t: np.ndarray, cfg: SynthConfig, player: dict):
    ns = cfg.noise_scale
    n = t_ms.size
    if name in LEVEL_CHANNELS:
        base, spread, loading, noise, drift = LEVEL_CHANNELS[name]
        level = player[name] + loading * f_t + drift * (t_ms / 3.6e6)
        return (level + ns * noise * rng.standard_normal(n))[:, None]
    if name == "muscle_activity":
        amp = 20.0 * np.exp(0.4 * f_t)
        return (player[name] + amp * ns * rng.standard_normal(n))[:, None]
    if name == "mouse_movement":
        speed = player[name] * np.exp(0.4 * f_t)
        return speed[:, None] * rng.standard_normal((n, 2)) * max(ns, 1e-12)
    if name == "mouse_scroll":
        lam = 0.006 * np.exp(0.3 * f_t)
        return rng.poisson(lam).astype(np.float64)[:, None]
    if name == "gaze_movement":
        step = player[name] * np.exp(0.35 * f_t)
        kicks = step[:, None] * rng.standard_normal((n, 2))
        centre = np.array([960.0, 540.0])
        keep = 1.0 - 0.02  # pull towards the screen centre
        drive = kicks + (1.0 - keep) * centre
        pos = np.empty((n, 2))
        for c in range(2):
            pos[:, c], _ = lfilter([1.0], [1.0, -keep], drive[:, c], zi=[keep * centre[c]])
        return pos
    raise ConfigError(f"no generator for channel {name}")


def _player_levels(rng: np.random.Generator) -> dict:
    levels = {name: spec[0] + spec[1] * rng.standard_normal() for name, spec in LEVEL_CHANNELS.items()}
    levels["muscle_activity"] = 500.0 + 50.0 * rng.standard_normal()
    levels["mouse_movement"] = 3.0 * np.exp(0.2 * rng.standard_normal())
    levels["gaze_movement"] = 6.0 * np.exp(0.2 * rng.standard_normal())
    return levels


def generate_player(cfg: SynthConfig, index: int, seed_seq: np.random.SeedSequence) -> SynthSession:
    rng = np.random.default_rng(seed_seq)
    n_sec = int(np.ceil(cfg.duration_ms / 1000.0)) + 1
    f = _latent(rng, n_sec, cfg)
    events = _events(rng, f, cfg)
    levels = _player_levels(rng)
    streams = {}
    for name in CHANNELS:
        t_ms = _sample_times(cfg.rates.get(name, DEFAULT_RATES[name]), cfg.duration_ms)
        f_t = f[np.minimum((t_ms // 1000.0).astype(int), n_sec - 1)]
        vals = _channel_values(name, rng, t_ms, f_t, cfg, levels)
        vals = np.round(vals, 6)
        if cfg.missing_fraction > 0 and t_ms.size > 2:
            miss = rng.random(t_ms.size) < cfg.missing_fraction
            vals[miss] = np.nan
        streams[name] = RawStream(name, t_ms, vals)
    record = SessionRecord(f"player_{index:02d}", float(cfg.duration_ms), streams, events)
    return SynthSession(record, f)


def iter_generate(cfg: SynthConfig) -> Iterator[SynthSession]:
    """Yield players one at a time; player ``i`` depends only on ``(seed, i)``."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_players)
    for i, ss in enumerate(children):
        yield generate_player(cfg, i, ss)


def generate(cfg: SynthConfig) -> list[SynthSession]:
    return list(iter_generate(cfg))


def oracle_scores(session: SynthSession, n_bins: int, dt_s: float) -> np.ndarray:
    """Latent form at each label time relative to its running mean over earlier label times.

    The target compares future performance with the player's own past, so
    the informative quantity is how far the current form sits above the
    form that produced that past.
    """
    f = session.latent_at(label_times_s(n_bins, dt_s))
    past = np.concatenate(([0.0], np.cumsum(f)[:-1])) / np.maximum(np.arange(n_bins), 1)
    return f - past


def oracle_auc(sessions, dt_s: float, tau_s: float) -> float:
    """Mean per-player AUC of :func:`oracle_scores` against the real labels."""
    groups = {}
    for s in sessions:
        rec = s.record
        n = n_bins_for(rec.duration_ms, dt_s)
        ts = build_targets(rec.events, rec.duration_ms, n, dt_s, tau_s, rec.player_id)
        groups[rec.player_id] = (ts.y[ts.valid], oracle_scores(s, n, dt_s)[ts.valid])
    return per_player_mean_auc(groups)


def write_dataset(cfg: SynthConfig, out_dir) -> list[Path]:
    """Write sessions under ``out_dir/sessions`` and latents under ``out_dir/private``."""
    out_dir = Path(out_dir)
    manifests = []
    private = out_dir / "private"
    private.mkdir(parents=True, exist_ok=True)
    for s in iter_generate(cfg):
        manifests.append(write_session(s.record, out_dir / "sessions" / s.player_id))
        with open(private / f"{s.player_id}_latent.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("t_s,latent\n")
            for i, v in enumerate(s.latent.tolist()):
                fh.write(f"{i},{v!r}\n")
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifests


def read_latent(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])
