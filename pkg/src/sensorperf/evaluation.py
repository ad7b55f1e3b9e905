"""Repeated cross-validation, sweep grids, attention importance and traces."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .channels import GROUP_LABELS, GROUP_NAMES
from .errors import ConfigError, MetricUndefined
from .ingest import Calibration, EventLog, SessionRecord, preprocess_session
from .label import build_targets, label_times_s, trailing_series
from .metrics import per_player_aucs, pooled_auc
from .model import MODEL_TYPES, ModelBundle, network_forward
from .resample import FeatureSeries, resample
from .train import PlayerSequence, TrainConfig, train_logistic, train_network

# grid of the published sweep table
TABLE_TAUS = (60.0, 120.0, 180.0, 240.0, 300.0)
TABLE_DTS = (5.0, 10.0, 15.0, 20.0, 24.0, 30.0)


# ---------------------------------------------------------------------------
# prepared data
# ---------------------------------------------------------------------------


@dataclass
class PlayerData:
    """A session reduced to what the experiments need: features and events."""

    player_id: str
    duration_ms: float
    events: EventLog
    features: dict[float, FeatureSeries]
    calibration: Calibration | None = None

    def sequence(self, dt_s: float, tau_s: float) -> PlayerSequence:
        fs = self.feature(dt_s)
        ts = build_targets(self.events, self.duration_ms, fs.n_bins, dt_s, tau_s, self.player_id)
        return PlayerSequence(self.player_id, fs.frames, ts.y, ts.valid)

    def feature(self, dt_s: float) -> FeatureSeries:
        try:
            return self.features[float(dt_s)]
        except KeyError:
            raise ConfigError(f"{self.player_id}: no features prepared at dt={dt_s}") from None


def prepare_player(session: SessionRecord, dt_list: Iterable[float], calibration: Calibration | None = None) -> PlayerData:
    """Preprocess once, resample at every requested step, drop the raw samples."""
    clean, calib = preprocess_session(session, calibration)
    feats = {float(dt): resample(clean, dt, session.duration_ms, session.player_id) for dt in dt_list}
    return PlayerData(session.player_id, session.duration_ms, session.events, feats, calib)


def population_calibration(players: Sequence[PlayerData]) -> Calibration:
    """Median over players of per-session clip bounds and EMG reference."""
    cals = [p.calibration for p in players if p.calibration is not None]
    if not cals:
        raise ConfigError("no calibrations available")
    bounds = {}
    for name in cals[0].bounds:
        lo = np.median([c.bounds[name][0] for c in cals], axis=0)
        hi = np.median([c.bounds[name][1] for c in cals], axis=0)
        bounds[name] = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
    ref = float(np.median([c.emg_reference for c in cals]))
    return Calibration(bounds, ref, cals[0].window_ms)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

SPLIT_SIZES = {"classical": (16, 5), "network": (11, 5, 5)}
DEFAULT_REPEATS = {"classical": 100, "network": 15}


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    mode: str
    seed: int
    roster: tuple[str, ...]
    repeats: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in SPLIT_SIZES:
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if len(set(self.roster)) != len(self.roster):
            raise ConfigError("roster has duplicate player ids")
        if len(self.roster) < sum(SPLIT_SIZES[self.mode]):
            raise ConfigError(
                f"{self.mode} split needs {sum(SPLIT_SIZES[self.mode])} players, roster has {len(self.roster)}"
            )
        if self.repeats is not None and self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    @classmethod
    def for_model(cls, model_type: str, seed: int, roster: Iterable[str], repeats: int | None = None) -> "SplitPlan":
        mode = "network" if model_type in ("gru", "gru-att") else "classical"
        return cls(mode, seed, tuple(sorted(roster)), repeats)

    @property
    def n_repeats(self) -> int:
        return self.repeats if self.repeats is not None else DEFAULT_REPEATS[self.mode]

    def split(self, repeat: int) -> Split:
        rng = np.random.default_rng([self.seed, repeat])
        order = [self.roster[i] for i in rng.permutation(len(self.roster))]
        sizes = SPLIT_SIZES[self.mode]
        if self.mode == "classical":
            tr, te = sizes
            return Split(tuple(order[:tr]), (), tuple(order[tr:tr + te]))
        tr, va, te = sizes
        return Split(tuple(order[:tr]), tuple(order[tr:tr + va]), tuple(order[tr + va:tr + va + te]))


def repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def score_player(bundle: ModelBundle, player: PlayerData, dt_s: float, tau_s: float):
    """Return ``(y, valid, scores, alpha)``; ``alpha`` is None for non-attention models."""
    seq = player.sequence(dt_s, tau_s)
    alpha = None
    if bundle.model_type == "baseline":
        trail = trailing_series(player.events, seq.y.size, dt_s, tau_s)
        scores = np.where(np.isnan(trail), 0.5, trail)
    elif bundle.model_type == "logreg":
        scores = bundle.logistic().predict(bundle.norm_stats.apply(seq.X))
    else:
        y_hat, _, A = network_forward(bundle.network(), bundle.norm_stats.apply(seq.X))
        scores = y_hat
        if bundle.model_type == "gru-att":
            alpha = A
    return seq.y, seq.valid, scores, alpha


def baseline_bundle(dt_s: float, tau_s: float) -> ModelBundle:
    return ModelBundle("baseline", {"dt_s": float(dt_s), "tau_s": float(tau_s)})


def fit_model(model_type: str, train: Sequence[PlayerData], val: Sequence[PlayerData], dt_s: float, tau_s: float,
              cfg: TrainConfig):
    """Train one predictor; returns ``(bundle, log or None)``."""
    if model_type not in MODEL_TYPES:
        raise ConfigError(f"unknown model type {model_type!r}")
    if model_type == "baseline":
        return baseline_bundle(dt_s, tau_s), None
    train_seq = [p.sequence(dt_s, tau_s) for p in train]
    if model_type == "logreg":
        return train_logistic(train_seq, cfg, dt_s, tau_s), None
    val_seq = [p.sequence(dt_s, tau_s) for p in val]
    return train_network(train_seq, val_seq, cfg, dt_s, tau_s, use_attention=model_type == "gru-att")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class RepeatResult:
    repeat: int
    aucs: dict[str, float]
    excluded: list[str]
    pooled_auc: float
    alpha_sum: list[float] | None = None  # summed alpha over valid test bins
    alpha_count: int = 0
    best_epoch: int | None = None
    val_auc: float | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.aucs.values()))) if self.aucs else float("nan")


@dataclass
class EvalReport:
    model_type: str
    dt_s: float
    tau_s: float
    repeats: list[RepeatResult] = field(default_factory=list)

    @property
    def per_player(self) -> list[tuple[int, str, float]]:
        return [(r.repeat, pid, auc) for r in self.repeats for pid, auc in sorted(r.aucs.items())]

    @property
    def mean_auc(self) -> float:
        """Arithmetic mean of all per-player test AUCs across repeats."""
        vals = [a for _, _, a in self.per_player]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def repeat_means(self) -> list[float]:
        return [r.mean for r in self.repeats]

    @property
    def mean_of_repeats(self) -> float:
        return _nanstat(np.mean, self.repeat_means)

    @property
    def std_of_repeats(self) -> float:
        return _nanstat(np.std, self.repeat_means)

    @property
    def best_repeat(self) -> float:
        return _nanstat(np.max, self.repeat_means)

    @property
    def pooled(self) -> float:
        """Mean over repeats of the AUC over all test bins pooled across players."""
        vals = [r.pooled_auc for r in self.repeats if not math.isnan(r.pooled_auc)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def n_excluded(self) -> int:
        return sum(len(r.excluded) for r in self.repeats)

    @property
    def mean_attention(self) -> list[float] | None:
        """Mean alpha per group over valid test bins of each repeat, then over repeats."""
        per = [np.asarray(r.alpha_sum) / r.alpha_count for r in self.repeats if r.alpha_sum and r.alpha_count]
        return np.mean(per, axis=0).tolist() if per else None

    def summary(self) -> dict:
        return {
            "model_type": self.model_type,
            "dt_s": self.dt_s,
            "tau_s": self.tau_s,
            "n_repeats": len(self.repeats),
            "mean_auc": self.mean_auc,
            "mean_of_repeat_means": self.mean_of_repeats,
            "std_of_repeat_means": self.std_of_repeats,
            "best_repeat_mean": self.best_repeat,
            "pooled_auc": self.pooled,
            "excluded_players": self.n_excluded,
            "mean_attention": None if self.mean_attention is None else dict(zip(GROUP_NAMES, self.mean_attention)),
        }

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "repeats": [asdict(r) for r in self.repeats]}

    def to_json(self) -> str:
        return json.dumps(nan_to_none(self.to_dict()), indent=1, sort_keys=True, allow_nan=False)

    def to_text(self) -> str:
        s = self.summary()
        lines = [
            f"model            {s['model_type']}",
            f"dt_s / tau_s     {s['dt_s']:g} / {s['tau_s']:g}",
            f"repeats          {s['n_repeats']}",
            f"per-player mean  {s['mean_auc']:.4f}",
            f"repeat mean/std  {s['mean_of_repeat_means']:.4f} / {s['std_of_repeat_means']:.4f}",
            f"best repeat      {s['best_repeat_mean']:.4f}",
            f"pooled AUC       {s['pooled_auc']:.4f}",
            f"excluded         {s['excluded_players']}",
        ]
        if self.mean_attention is not None:
            lines.append(importance_table(self.mean_attention).rstrip("\n"))
        return "\n".join(lines) + "\n"


def _nanstat(fn, values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(fn(v)) if v else float("nan")


def nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def evaluate_bundle(bundle: ModelBundle, players: Sequence[PlayerData], dt_s: float, tau_s: float):
    """Per-player AUCs, exclusions, pooled AUC and alpha sums on ``players``."""
    groups = {}
    alpha_sum, alpha_count = None, 0
    for p in players:
        y, valid, scores, alpha = score_player(bundle, p, dt_s, tau_s)
        groups[p.player_id] = (y[valid], scores[valid])
        if alpha is not None:
            a = alpha[valid].sum(axis=0)
            alpha_sum = a if alpha_sum is None else alpha_sum + a
            alpha_count += int(valid.sum())
    aucs, excluded = per_player_aucs(groups)
    try:
        pooled = pooled_auc(groups)
    except MetricUndefined:
        pooled = float("nan")
    return aucs, excluded, pooled, (None if alpha_sum is None else alpha_sum.tolist()), alpha_count


def run_repeat(players: Mapping[str, PlayerData], model_type: str, dt_s: float, tau_s: float, plan: SplitPlan,
               cfg: TrainConfig, repeat: int) -> tuple[RepeatResult, ModelBundle]:
    sp = plan.split(repeat)
    rcfg = replace(cfg, seed=repeat_seed(cfg.seed, repeat))
    bundle, log = fit_model(model_type, [players[i] for i in sp.train], [players[i] for i in sp.val], dt_s, tau_s,
                            rcfg)
    bundle.extra["split"] = {"train": list(sp.train), "val": list(sp.val), "test": list(sp.test)}
    bundle.extra["repeat"] = repeat
    aucs, excluded, pooled, a_sum, a_cnt = evaluate_bundle(bundle, [players[i] for i in sp.test], dt_s, tau_s)
    res = RepeatResult(repeat, aucs, excluded, pooled, a_sum, a_cnt)
    if log is not None:
        res.best_epoch = log.best_epoch
        res.val_auc = log.val_auc[log.best_epoch - 1]
    return res, bundle


def _repeat_task(args):
    res, _ = run_repeat(*args)
    return res


def _map(fn, tasks: list, workers: int | None):
    n = workers if workers is not None else (os.cpu_count() or 1)
    if n <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def run_experiment(players: Sequence[PlayerData] | Mapping[str, PlayerData], model_type: str, dt_s: float,
                   tau_s: float, plan: SplitPlan, cfg: TrainConfig, workers: int | None = 1) -> EvalReport:
    """Repeated train/test evaluation of one model at one (dt, tau) cell."""
    by_id = dict(players) if isinstance(players, Mapping) else {p.player_id: p for p in players}
    missing = set(plan.roster) - set(by_id)
    if missing:
        raise ConfigError(f"roster players without data: {sorted(missing)}")
    tasks = [(by_id, model_type, dt_s, tau_s, plan, cfg, r) for r in range(plan.n_repeats)]
    results = _map(_repeat_task, tasks, workers)
    return EvalReport(model_type, float(dt_s), float(tau_s), results)


@dataclass
class SweepResult:
    dt_list: tuple[float, ...]
    tau_list: tuple[float, ...]
    reports: dict[tuple[str, float, float], EvalReport]

    @property
    def model_types(self) -> list[str]:
        return sorted({m for m, _, _ in self.reports}, key=MODEL_TYPES.index)

    def matrix(self, model_type: str, stat: str = "mean_auc") -> np.ndarray:
        """Rows follow ``tau_list``, columns ``dt_list``."""
        out = np.full((len(self.tau_list), len(self.dt_list)), np.nan)
        for i, tau in enumerate(self.tau_list):
            for j, dt in enumerate(self.dt_list):
                rep = self.reports.get((model_type, dt, tau))
                if rep is not None:
                    out[i, j] = getattr(rep, stat)
        return out

    def write_csv(self, model_type: str, path, stat: str = "mean_auc") -> None:
        m = self.matrix(model_type, stat)
        with open(Path(path), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau_s\\dt_s", *(f"{dt:g}" for dt in self.dt_list)])
            for tau, row in zip(self.tau_list, m):
                w.writerow([f"{tau:g}", *(f"{v:.6f}" for v in row)])

    def slices(self, fixed_tau: float = 180.0, fixed_dt: float = 20.0) -> dict:
        """AUC against dt at a fixed tau and against tau at a fixed dt, per model."""
        out = {}
        for m in self.model_types:
            mat = self.matrix(m)
            entry = {}
            if fixed_tau in self.tau_list:
                i = self.tau_list.index(fixed_tau)
                entry["vs_dt"] = {f"{dt:g}": nan_to_none(float(v)) for dt, v in zip(self.dt_list, mat[i])}
            if fixed_dt in self.dt_list:
                j = self.dt_list.index(fixed_dt)
                entry["vs_tau"] = {f"{tau:g}": nan_to_none(float(v)) for tau, v in zip(self.tau_list, mat[:, j])}
            out[m] = entry
        return out

    def to_text(self, model_type: str) -> str:
        m = self.matrix(model_type)
        head = "tau\\dt " + "".join(f"{dt:>8g}" for dt in self.dt_list)
        rows = [f"{tau:>6g} " + "".join(f"{v:>8.3f}" for v in row) for tau, row in zip(self.tau_list, m)]
        return "\n".join([f"[{model_type}]", head, *rows]) + "\n"


def sweep(players: Sequence[PlayerData], model_types: Sequence[str], dt_list: Sequence[float],
          tau_list: Sequence[float], seed: int, cfg: TrainConfig, repeats: int | None = None,
          workers: int | None = 1) -> SweepResult:
    """One :func:`run_experiment` per (model, dt, tau) cell; cells are independent."""
    if not model_types or not dt_list or not tau_list:
        raise ConfigError("sweep needs non-empty model, dt and tau lists")
    dts = tuple(float(v) for v in dt_list)
    taus = tuple(float(v) for v in tau_list)
    roster = [p.player_id for p in players]
    by_id = {p.player_id: p for p in players}
    tasks, keys = [], []
    for m in model_types:
        plan = SplitPlan.for_model(m, seed, roster, repeats)
        for tau in taus:
            for dt in dts:
                keys.append((m, dt, tau))
                tasks.extend((by_id, m, dt, tau, plan, cfg, r) for r in range(plan.n_repeats))
    results = _map(_repeat_task, tasks, workers)
    reports = {}
    pos = 0
    for m, dt, tau in keys:
        n = SplitPlan.for_model(m, seed, roster, repeats).n_repeats
        reports[(m, dt, tau)] = EvalReport(m, dt, tau, results[pos:pos + n])
        pos += n
    return SweepResult(dts, taus, reports)


# ---------------------------------------------------------------------------
# attention importance and traces
# ---------------------------------------------------------------------------


def feature_importance(bundles: Sequence[ModelBundle], test_sets: Sequence[Sequence[PlayerData]]) -> list[float]:
    """Mean alpha per group over valid test bins of each bundle, then over bundles."""
    if len(bundles) != len(test_sets) or not bundles:
        raise ConfigError("need one non-empty test set per bundle")
    per = []
    for b, players in zip(bundles, test_sets):
        if b.model_type != "gru-att":
            raise ConfigError(f"feature importance needs an attention network, got {b.model_type}")
        a_sum, a_cnt = attention_sums(b, players)
        if a_cnt == 0:
            raise ConfigError("no valid test bins to average attention over")
        per.append(np.asarray(a_sum) / a_cnt)
    return np.mean(per, axis=0).tolist()


def attention_sums(bundle: ModelBundle, players: Sequence[PlayerData]) -> tuple[np.ndarray, int]:
    a_sum, a_cnt = np.zeros(len(GROUP_NAMES)), 0
    for p in players:
        _, valid, _, alpha = score_player(bundle, p, bundle.dt_s, bundle.tau_s)
        a_sum += alpha[valid].sum(axis=0)
        a_cnt += int(valid.sum())
    return a_sum, a_cnt


def importance_table(alpha: Sequence[float]) -> str:
    width = max(len(s) for s in GROUP_LABELS)
    lines = [f"{'Feature group':<{width}}  Mean attention"]
    lines += [f"{label:<{width}}  {v:.3f}" for label, v in zip(GROUP_LABELS, alpha)]
    return "\n".join(lines) + "\n"


def trace_rows(bundle: ModelBundle, player: PlayerData, dt_s: float, tau_s: float) -> list[dict]:
    """Per-bin alpha, hidden state, p, y and prediction of a recurrent bundle."""
    if bundle.model_type not in ("gru", "gru-att"):
        raise ConfigError("trace export needs a recurrent network bundle")
    fs = player.feature(dt_s)
    ts = build_targets(player.events, player.duration_ms, fs.n_bins, dt_s, tau_s, player.player_id)
    y_hat, H, A = network_forward(bundle.network(), bundle.norm_stats.apply(fs.frames))
    t_end = label_times_s(fs.n_bins, dt_s) * 1000.0
    rows = []
    for k in range(fs.n_bins):
        row = {"bin_index": k, "timestamp_ms": float(t_end[k])}
        row.update({f"alpha_{g}": float(A[k, i]) for i, g in enumerate(GROUP_NAMES)})
        row.update({f"h_{i}": float(H[k, i]) for i in range(H.shape[1])})
        row.update({"p": float(ts.p[k]), "y": float(ts.y[k]), "valid": int(ts.valid[k]), "y_hat": float(y_hat[k])})
        rows.append(row)
    return rows


def export_trace(bundle: ModelBundle, player: PlayerData, dt_s: float, tau_s: float, path) -> int:
    rows = trace_rows(bundle, player, dt_s, tau_s)
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0]) if rows else ["bin_index"]
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v)
                        for v in r.values()])
    return len(rows)
