"""Predictors: trailing baseline, logistic regression and the grouped GRU.

The recurrent network processes one step as

    x -> grouped dense + ReLU -> (x') -> input attention (alpha per group)
      -> GRU cell -> two-layer head -> sigmoid

All arrays are float64.  The stage functions below are the single source
of truth for inference; ``network_forward`` and the streaming replay both
call them step by step, so their outputs agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .channels import GROUP_NAMES, GROUP_SIZES, N_FEATURES
from .errors import ConfigError, NumericalError
from .label import trailing_proportion


sigmoid = expit  # overflow-safe for large |u|


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: list[np.ndarray]) -> "NormStats":
        """Column statistics over all bins of the given (training) matrices."""
        X = np.concatenate([np.asarray(f, dtype=np.float64) for f in frames], axis=0)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant columns pass through as zeros
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, n: int = N_FEATURES) -> "NormStats":
        return cls(np.zeros(n), np.ones(n))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def baseline_predict(events, t_s: float, tau_s: float) -> float:
    """Trailing kills proportion over the last ``tau``; 0.5 when undefined."""
    p = trailing_proportion(events, t_s, tau_s)
    return 0.5 if np.isnan(p) else p


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass
class LogisticModel:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = float(self.b)

    def predict(self, X: np.ndarray) -> np.ndarray:
        # row-wise reduction rather than BLAS so one row scores the same alone or in a batch
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return sigmoid((X * self.w).sum(axis=1) + self.b)


def logistic_forward(model: LogisticModel, x: np.ndarray) -> float:
    return float(model.predict(x)[0])


def logistic_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy plus ``l2/2 |w|^2``; returns ``(loss, dw, db)``."""
    u = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, u) - y * u)) + 0.5 * l2 * float(w @ w)
    r = (sigmoid(u) - y) / y.size
    return loss, X.T @ r + l2 * w, float(r.sum())


# ---------------------------------------------------------------------------
# grouped GRU with input attention
# ---------------------------------------------------------------------------

GATES = ("z", "r", "h")


@dataclass
class GruAttentionModel:
    """Parameter set of the recurrent network.

    ``params`` maps names to arrays:
    ``enc_W_<group>`` (d, n_g), ``enc_b_<group>`` (d,), ``attn_W`` (3, m + n),
    ``attn_b`` (3,), ``W_<gate>`` (m, 3d), ``U_<gate>`` (m, m), ``b_<gate>`` (m,),
    ``head_W1`` (k, m), ``head_b1`` (k,), ``head_W2`` (1, k), ``head_b2`` (1,).
    Attention parameters are absent when ``use_attention`` is off.
    """

    params: dict[str, np.ndarray]
    group_sizes: tuple[int, ...] = GROUP_SIZES
    enc_width: int = 4
    hidden: int = 8
    head_hidden: int = 8
    use_attention: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.group_sizes = tuple(int(g) for g in self.group_sizes)
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}
        expected = param_shapes(self.group_sizes, self.enc_width, self.hidden, self.head_hidden, self.use_attention)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")
        self._cache = {}

    @property
    def n_inputs(self) -> int:
        return sum(self.group_sizes)

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def encoded_width(self) -> int:
        return self.enc_width * self.n_groups

    def group_bounds(self) -> list[tuple[int, int]]:
        out, s = [], 0
        for g in self.group_sizes:
            out.append((s, s + g))
            s += g
        return out

    def compiled(self) -> dict:
        """Stacked views used by the step functions (built once per model)."""
        if not self._cache:
            p = self.params
            m = self.hidden
            c = {
                "W_zr": np.ascontiguousarray(np.vstack([p["W_z"], p["W_r"]])),
                "U_zr": np.ascontiguousarray(np.vstack([p["U_z"], p["U_r"]])),
                "b_zr": np.concatenate([p["b_z"], p["b_r"]]),
                "m": m,
            }
            if self.use_attention:
                c["group_index"] = np.repeat(np.arange(self.n_groups), self.enc_width)
            self._cache.update(c)
        return self._cache

    def copy(self) -> "GruAttentionModel":
        return GruAttentionModel(
            {k: v.copy() for k, v in self.params.items()},
            self.group_sizes,
            self.enc_width,
            self.hidden,
            self.head_hidden,
            self.use_attention,
        )

    def hyperparameters(self) -> dict:
        return {
            "group_sizes": list(self.group_sizes),
            "enc_width": self.enc_width,
            "hidden": self.hidden,
            "head_hidden": self.head_hidden,
            "use_attention": self.use_attention,
        }


def param_shapes(group_sizes, enc_width, hidden, head_hidden, use_attention) -> dict[str, tuple]:
    n = sum(group_sizes)
    D = enc_width * len(group_sizes)
    shapes: dict[str, tuple] = {}
    for name, size in zip(GROUP_NAMES, group_sizes):
        shapes[f"enc_W_{name}"] = (enc_width, size)
        shapes[f"enc_b_{name}"] = (enc_width,)
    if use_attention:
        shapes["attn_W"] = (len(group_sizes), hidden + n)
        shapes["attn_b"] = (len(group_sizes),)
    for g in GATES:
        shapes[f"W_{g}"] = (hidden, D)
        shapes[f"U_{g}"] = (hidden, hidden)
        shapes[f"b_{g}"] = (hidden,)
    shapes["head_W1"] = (head_hidden, hidden)
    shapes["head_b1"] = (head_hidden,)
    shapes["head_W2"] = (1, head_hidden)
    shapes["head_b2"] = (1,)
    return shapes


def init_model(
    seed: int = 0,
    group_sizes=GROUP_SIZES,
    enc_width: int = 4,
    hidden: int = 8,
    head_hidden: int = 8,
    use_attention: bool = True,
) -> GruAttentionModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if len(group_sizes) > len(GROUP_NAMES):
        raise ConfigError(f"at most {len(GROUP_NAMES)} feature groups supported")
    if min(enc_width, hidden, head_hidden) < 1:
        raise ConfigError("layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(group_sizes, enc_width, hidden, head_hidden, use_attention).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return GruAttentionModel(params, tuple(group_sizes), enc_width, hidden, head_hidden, use_attention)


# -- stage functions (one time step) -----------------------------------------


def encode_groups(model: GruAttentionModel, x: np.ndarray) -> np.ndarray:
    """Per-group ``ReLU(A_g x_g + c_g)``, concatenated; no cross-group mixing."""
    p = model.params
    parts = []
    for name, (s, e) in zip(GROUP_NAMES, model.group_bounds()):
        parts.append(np.maximum(p[f"enc_W_{name}"] @ x[s:e] + p[f"enc_b_{name}"], 0.0))
    return np.concatenate(parts)


def attention_forward(model: GruAttentionModel, h_prev: np.ndarray, x: np.ndarray, xp: np.ndarray):
    """Returns ``(x_tilde, alpha)`` with one sigmoid weight per feature group."""
    p = model.params
    alpha = sigmoid(p["attn_W"] @ np.concatenate([h_prev, x]) + p["attn_b"])
    return xp * alpha[model.compiled()["group_index"]], alpha


def gru_step(model: GruAttentionModel, xt: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    p = model.params
    c = model.compiled()
    m = c["m"]
    zr = sigmoid(c["W_zr"] @ xt + c["U_zr"] @ h_prev + c["b_zr"])
    z, r = zr[:m], zr[m:]
    h_cand = np.tanh(p["W_h"] @ xt + p["U_h"] @ (r * h_prev) + p["b_h"])
    return (1.0 - z) * h_prev + z * h_cand


def head_forward(model: GruAttentionModel, h: np.ndarray) -> float:
    p = model.params
    a = np.maximum(p["head_W1"] @ h + p["head_b1"], 0.0)
    return float(sigmoid(p["head_W2"] @ a + p["head_b2"])[0])


def network_step(model: GruAttentionModel, x: np.ndarray, h_prev: np.ndarray):
    """One full step; returns ``(y_hat, h, alpha)``.  ``alpha`` is all ones without attention."""
    xp = encode_groups(model, x)
    if model.use_attention:
        xt, alpha = attention_forward(model, h_prev, x, xp)
    else:
        xt, alpha = xp, np.ones(model.n_groups)
    h = gru_step(model, xt, h_prev)
    return head_forward(model, h), h, alpha


def network_forward(model: GruAttentionModel, X: np.ndarray, h0: np.ndarray | None = None):
    """Run a normalised ``(T, n)`` sequence; returns ``(y_hat, H, A)``.

    ``H`` has shape ``(T, m)``, ``A`` has shape ``(T, n_groups)``.
    """
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    h = np.zeros(model.hidden) if h0 is None else np.array(h0, dtype=np.float64)
    y_hat = np.empty(T)
    H = np.empty((T, model.hidden))
    A = np.empty((T, model.n_groups))
    for t in range(T):
        y_hat[t], h, A[t] = network_step(model, np.ascontiguousarray(X[t]), h)
        H[t] = h
    return y_hat, H, A


# -- training path ------------------------------------------------------------


def _forward_cached(model: GruAttentionModel, X: np.ndarray, h0: np.ndarray | None = None):
    """Forward pass keeping what backprop needs.  Returns ``(logits, cache)``."""
    p = model.params
    m = model.hidden
    T = X.shape[0]
    G = model.n_groups
    d = model.enc_width
    W_all = np.vstack([p["W_z"], p["W_r"], p["W_h"]])  # (3m, D)

    pre_enc = np.empty((T, model.encoded_width))
    for gi, (name, (s, e)) in enumerate(zip(GROUP_NAMES, model.group_bounds())):
        pre_enc[:, gi * d:(gi + 1) * d] = X[:, s:e] @ p[f"enc_W_{name}"].T + p[f"enc_b_{name}"]
    XP = np.maximum(pre_enc, 0.0)
    # input-side gate projections per group: P[t, :, g] = W_all[:, g cols] @ xp_g(t)
    P = np.empty((T, 3 * m, G))
    for gi in range(G):
        P[:, :, gi] = XP[:, gi * d:(gi + 1) * d] @ W_all[:, gi * d:(gi + 1) * d].T

    if model.use_attention:
        Wa_h = p["attn_W"][:, :m]
        AX = X @ p["attn_W"][:, m:].T + p["attn_b"]
    U_zr = np.vstack([p["U_z"], p["U_r"]])
    b_zr = np.concatenate([p["b_z"], p["b_r"]])
    U_h, b_h = p["U_h"], p["b_h"]

    Hprev = np.empty((T, m))
    H = np.empty((T, m))
    Z = np.empty((T, m))
    R = np.empty((T, m))
    HC = np.empty((T, m))
    ALPHA = np.ones((T, G))
    h = np.zeros(m) if h0 is None else np.asarray(h0, dtype=np.float64)
    ones = np.ones(G)
    for t in range(T):
        Hprev[t] = h
        if model.use_attention:
            alpha = sigmoid(Wa_h @ h + AX[t])
            ALPHA[t] = alpha
        else:
            alpha = ones
        gin = P[t] @ alpha
        zr = sigmoid(gin[:2 * m] + U_zr @ h + b_zr)
        z, r = zr[:m], zr[m:]
        hc = np.tanh(gin[2 * m:] + U_h @ (r * h) + b_h)
        h = (1.0 - z) * h + z * hc
        Z[t], R[t], HC[t], H[t] = z, r, hc, h

    A1pre = H @ p["head_W1"].T + p["head_b1"]
    A1 = np.maximum(A1pre, 0.0)
    logits = A1 @ p["head_W2"][0] + p["head_b2"][0]
    cache = dict(X=X, pre_enc=pre_enc, XP=XP, P=P, W_all=W_all, U_zr=U_zr, Hprev=Hprev, H=H,
                 Z=Z, R=R, HC=HC, ALPHA=ALPHA, A1pre=A1pre, A1=A1)
    return logits, cache


def sequence_loss(model: GruAttentionModel, X, y, valid) -> float:
    """Mean binary cross-entropy over valid bins (0 if none)."""
    logits, _ = _forward_cached(model, np.asarray(X, dtype=np.float64))
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return 0.0
    yv = np.asarray(y, dtype=np.float64)[valid]
    return float(np.mean(np.logaddexp(0.0, logits[valid]) - yv * logits[valid]))


def network_backward(model: GruAttentionModel, X, y, valid, trunc_len: int):
    """Loss and gradients with backprop through time cut every ``trunc_len`` steps.

    The forward state flows across cuts; only the backward recursion through
    ``h`` stops at each segment start.
    """
    if trunc_len < 1:
        raise ConfigError("trunc_len must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    yv = np.where(valid, np.nan_to_num(np.asarray(y, dtype=np.float64)), 0.0)
    if X.shape[0] != valid.shape[0] or yv.shape[0] != valid.shape[0]:
        raise ConfigError("X, y and valid must have equal length")
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grads

    p = model.params
    m = model.hidden
    G = model.n_groups
    d = model.enc_width
    T = X.shape[0]
    logits, c = _forward_cached(model, X)
    per_bin = np.logaddexp(0.0, logits) - yv * logits
    if not np.all(np.isfinite(per_bin[valid])):
        step = int(np.flatnonzero(valid & ~np.isfinite(per_bin))[0])
        raise NumericalError(f"non-finite loss at step {step}")
    loss = float(per_bin[valid].sum() / n_valid)

    dlogit = np.where(valid, (sigmoid(logits) - yv) / n_valid, 0.0)
    # head
    grads["head_W2"][0] = dlogit @ c["A1"]
    grads["head_b2"][0] = dlogit.sum()
    dA1 = np.outer(dlogit, p["head_W2"][0]) * (c["A1pre"] > 0)
    grads["head_W1"] = dA1.T @ c["H"]
    grads["head_b1"] = dA1.sum(axis=0)
    dH_head = dA1 @ p["head_W1"]

    Hprev, Z, R, HC, ALPHA, P = c["Hprev"], c["Z"], c["R"], c["HC"], c["ALPHA"], c["P"]
    W_all, U_zr, U_h = c["W_all"], c["U_zr"], p["U_h"]
    Wa_h = p["attn_W"][:, :m] if model.use_attention else None
    A_gate = np.zeros((T, 3 * m))
    DU = np.zeros((T, G))
    dh_next = np.zeros(m)
    for t in range(T - 1, -1, -1):
        dh = dH_head[t] + dh_next
        z, r, hc, hp = Z[t], R[t], HC[t], Hprev[t]
        dz = dh * (hc - hp)
        a_h = dh * z * (1.0 - hc * hc)
        drh = U_h.T @ a_h
        a_z = dz * z * (1.0 - z)
        a_r = drh * hp * r * (1.0 - r)
        a_zr = np.concatenate([a_z, a_r])
        dh_prev = dh * (1.0 - z) + drh * r + U_zr.T @ a_zr
        a_gate = np.concatenate([a_zr, a_h])
        A_gate[t] = a_gate
        if model.use_attention:
            # d gin / d alpha_g = P[t, :, g]
            dalpha = a_gate @ P[t]
            du = dalpha * ALPHA[t] * (1.0 - ALPHA[t])
            DU[t] = du
            dh_prev = dh_prev + Wa_h.T @ du
        dh_next = dh_prev if t % trunc_len != 0 else np.zeros(m)

    # weight gradients from the stored per-step signals
    alpha_exp = np.repeat(ALPHA, d, axis=1)
    XT = c["XP"] * alpha_exp
    gW = A_gate.T @ XT
    grads["W_z"], grads["W_r"], grads["W_h"] = gW[:m], gW[m:2 * m], gW[2 * m:]
    grads["b_z"] = A_gate[:, :m].sum(axis=0)
    grads["b_r"] = A_gate[:, m:2 * m].sum(axis=0)
    grads["b_h"] = A_gate[:, 2 * m:].sum(axis=0)
    grads["U_z"] = A_gate[:, :m].T @ Hprev
    grads["U_r"] = A_gate[:, m:2 * m].T @ Hprev
    grads["U_h"] = A_gate[:, 2 * m:].T @ (R * Hprev)
    if model.use_attention:
        grads["attn_W"] = DU.T @ np.hstack([Hprev, X])
        grads["attn_b"] = DU.sum(axis=0)
    dXT = A_gate @ W_all
    dXP = dXT * alpha_exp
    dpre = dXP * (c["pre_enc"] > 0)
    for gi, (name, (s, e)) in enumerate(zip(GROUP_NAMES, model.group_bounds())):
        blk = dpre[:, gi * d:(gi + 1) * d]
        grads[f"enc_W_{name}"] = blk.T @ X[:, s:e]
        grads[f"enc_b_{name}"] = blk.sum(axis=0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, grads


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

MODEL_TYPES = ("baseline", "logreg", "gru", "gru-att")


@dataclass
class ModelBundle:
    """Everything needed to score sessions with one trained predictor."""

    model_type: str
    hyperparameters: dict
    norm_stats: NormStats | None = None
    parameters: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model_type not in MODEL_TYPES:
            raise ConfigError(f"unknown model type {self.model_type!r}")

    @property
    def dt_s(self) -> float:
        return float(self.hyperparameters["dt_s"])

    @property
    def tau_s(self) -> float:
        return float(self.hyperparameters["tau_s"])

    def network(self) -> GruAttentionModel:
        if self.model_type not in ("gru", "gru-att"):
            raise ConfigError(f"{self.model_type} bundle has no recurrent network")
        h = self.hyperparameters
        return GruAttentionModel(
            self.parameters,
            tuple(h["group_sizes"]),
            int(h["enc_width"]),
            int(h["hidden"]),
            int(h["head_hidden"]),
            bool(h["use_attention"]),
        )

    def logistic(self) -> LogisticModel:
        if self.model_type != "logreg":
            raise ConfigError(f"{self.model_type} bundle is not a logistic model")
        return LogisticModel(self.parameters["w"], float(self.parameters["b"][0]))

    def to_dict(self) -> dict:
        return {
            "model_type": self.model_type,
            "hyperparameters": self.hyperparameters,
            "norm_stats": None if self.norm_stats is None else self.norm_stats.to_dict(),
            "parameters": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(self.parameters.items())
            },
            "seed": self.seed,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        try:
            params = {
                k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["parameters"].items()
            }
            ns = None if d.get("norm_stats") is None else NormStats.from_dict(d["norm_stats"])
            return cls(d["model_type"], dict(d["hyperparameters"]), ns, params, int(d.get("seed", 0)),
                       dict(d.get("extra", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model bundle: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelBundle":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bundle is not valid JSON: {exc.msg}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"{path}: bundle not found") from None
        return cls.from_json(text)


def network_bundle(model: GruAttentionModel, norm: NormStats, dt_s: float, tau_s: float, seed: int, **extra) -> ModelBundle:
    hp = {"dt_s": float(dt_s), "tau_s": float(tau_s), **model.hyperparameters()}
    mtype = "gru-att" if model.use_attention else "gru"
    return ModelBundle(mtype, hp, norm, {k: v.copy() for k, v in model.params.items()}, seed, dict(extra))
