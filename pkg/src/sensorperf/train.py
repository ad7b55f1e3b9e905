"""Optimisation: Adam with linear warmup, truncated BPTT, early stopping."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, MetricUndefined, NumericalError
from .metrics import per_player_mean_auc
from .model import (
    GruAttentionModel,
    ModelBundle,
    NormStats,
    init_model,
    logistic_loss_grad,
    network_backward,
    network_bundle,
    network_forward,
    sigmoid,
)


@dataclass
class TrainConfig:
    lr_base: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trunc_len: int = 32
    batches_per_epoch: int = 20
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    l2: float = 1e-4
    enc_width: int = 4
    hidden: int = 8
    head_hidden: int = 8

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seed":
                continue
            if f.name in ("beta1", "beta2"):
                if not 0.0 <= v < 1.0:
                    raise ConfigError(f"{f.name} must be in [0, 1), got {v}")
            elif not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class PlayerSequence:
    """One player's feature matrix (not normalised) with targets."""

    player_id: str
    X: np.ndarray
    y: np.ndarray
    valid: np.ndarray


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)  # learning rate at the end of each epoch
    best_epoch: int = 0  # 1-based

    def write_csv(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_auc", "lr", "best"])
            for i, (loss, auc, lr) in enumerate(zip(self.train_loss, self.val_auc, self.lr), start=1):
                w.writerow([i, repr(loss), repr(auc), repr(lr), int(i == self.best_epoch)])

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def warmup_lr(step_index: int, cfg: TrainConfig) -> float:
    return cfg.lr_base * min(1.0, step_index / cfg.warmup_steps)


def adam_step(params: dict, grads: dict, state: AdamState, step_index: int, cfg: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_params, state)``."""
    if step_index < 1:
        raise ConfigError("step_index starts at 1")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k} at step {step_index}")
    lr = warmup_lr(step_index, cfg)
    c1 = 1.0 - cfg.beta1**step_index
    c2 = 1.0 - cfg.beta2**step_index
    new = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        new[k] = p - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.eps)
    return new, state


# ---------------------------------------------------------------------------
# recurrent network
# ---------------------------------------------------------------------------


def validation_auc(model: GruAttentionModel, seqs: Sequence[PlayerSequence], norm: NormStats) -> float:
    groups = {}
    for s in seqs:
        y_hat, _, _ = network_forward(model, norm.apply(s.X))
        groups[s.player_id] = (s.y[s.valid], y_hat[s.valid])
    try:
        return per_player_mean_auc(groups)
    except MetricUndefined:
        return float("nan")


def early_stopping(
    run_epoch: Callable[[int], float],
    evaluate: Callable[[int], float],
    snapshot: Callable[[], object],
    patience: int,
    max_epochs: int,
):
    """Generic loop; returns ``(best_snapshot, best_epoch, losses, scores)``.

    A score improves only when strictly larger than the best so far; NaN
    never improves.  Epoch 1 is the fallback best.
    """
    best = None
    best_score = -np.inf
    best_epoch = 0
    losses, scores = [], []
    for epoch in range(1, max_epochs + 1):
        losses.append(run_epoch(epoch))
        score = evaluate(epoch)
        scores.append(score)
        if best is None or score > best_score:
            best, best_epoch = snapshot(), epoch
            best_score = score if not np.isnan(score) else -np.inf
        elif epoch - best_epoch >= patience:
            break
    return best, best_epoch, losses, scores


def train_network(
    train: Sequence[PlayerSequence],
    val: Sequence[PlayerSequence],
    cfg: TrainConfig,
    dt_s: float,
    tau_s: float,
    use_attention: bool = True,
    model: GruAttentionModel | None = None,
):
    """Train on ``train`` players, early-stop on ``val``; returns ``(bundle, log)``.

    Normalisation statistics come from the training matrices only.
    """
    cfg.validate()
    if not train or not val:
        raise ConfigError("train and validation sets must be non-empty")
    norm = NormStats.fit([s.X for s in train])
    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    if model is None:
        model = init_model(
            seed=int(init_seed),
            enc_width=cfg.enc_width,
            hidden=cfg.hidden,
            head_hidden=cfg.head_hidden,
            use_attention=use_attention,
        )
    rng = np.random.default_rng(int(sample_seed))
    train_X = [norm.apply(s.X) for s in train]
    state = AdamState.zeros_like(model.params)
    current = {"model": model, "step": 0}
    lr_trace: list[float] = []

    def run_epoch(epoch: int) -> float:
        picks = rng.integers(0, len(train), size=cfg.batches_per_epoch)
        losses = []
        for i in picks:
            s = train[int(i)]
            loss, grads = network_backward(current["model"], train_X[i], s.y, s.valid, cfg.trunc_len)
            current["step"] += 1
            new, _ = adam_step(current["model"].params, grads, state, current["step"], cfg)
            m = current["model"]
            current["model"] = GruAttentionModel(new, m.group_sizes, m.enc_width, m.hidden, m.head_hidden,
                                                 m.use_attention)
            losses.append(loss)
        lr_trace.append(warmup_lr(current["step"], cfg))
        return float(np.mean(losses))

    def evaluate(epoch: int) -> float:
        return validation_auc(current["model"], val, norm)

    best, best_epoch, losses, scores = early_stopping(
        run_epoch, evaluate, lambda: current["model"].copy(), cfg.patience, cfg.max_epochs
    )
    log = TrainLog(losses, scores, lr_trace, best_epoch)
    bundle = network_bundle(best, norm, dt_s, tau_s, cfg.seed, train_config=cfg.to_dict())
    return bundle, log


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float, tol: float = 1e-6, max_iter: int = 10_000):
    """Newton iterations with backtracking on the L2-regularised mean cross-entropy.

    The bias is not penalised.  Returns ``(w, b, grad_norm, iterations)``.
    """
    n, k = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    reg = np.full(k + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(k + 1)

    def objective(th):
        loss, dw, db = logistic_loss_grad(th[:-1], th[-1], X, y, l2)
        return loss, np.append(dw, db)

    loss, grad = objective(theta)
    it = 0
    while it < max_iter and np.linalg.norm(grad) >= tol:
        it += 1
        s = sigmoid(Xa @ theta)
        H = (Xa * (s * (1.0 - s))[:, None]).T @ Xa / n + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        try:
            direction = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            direction = -grad
        step = 1.0
        while True:
            cand = theta + step * direction
            c_loss, c_grad = objective(cand)
            if c_loss <= loss + 1e-4 * step * float(grad @ direction) or step < 1e-12:
                break
            step *= 0.5
        theta, loss, grad = cand, c_loss, c_grad
    return theta[:-1], float(theta[-1]), float(np.linalg.norm(grad)), it


def train_logistic(train: Sequence[PlayerSequence], cfg: TrainConfig, dt_s: float, tau_s: float) -> ModelBundle:
    """Pool valid bins of all training players and fit the regularised optimum."""
    if not train:
        raise ConfigError("training set is empty")
    norm = NormStats.fit([s.X for s in train])
    X = np.concatenate([norm.apply(s.X)[s.valid] for s in train])
    y = np.concatenate([s.y[s.valid] for s in train])
    if y.size == 0:
        raise ConfigError("no valid labelled bins to fit")
    w, b, gnorm, iters = fit_logistic(X, y, cfg.l2)
    hp = {"dt_s": float(dt_s), "tau_s": float(tau_s), "l2": cfg.l2}
    return ModelBundle("logreg", hp, norm, {"w": w, "b": np.array([b])}, cfg.seed,
                       {"grad_norm": gnorm, "iterations": iters})


def load_train_config(path) -> TrainConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config not found") from None
    return TrainConfig.from_dict(d)
