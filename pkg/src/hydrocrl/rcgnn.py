"""Recurrent graph-convolutional GRU with a two-layer regression head.

Per month ``t`` and node-feature matrix ``X`` (n x m)::

    AH  = A @ H_prev
    r   = sigmoid(X W_r + AH U_r + b_r)
    z   = sigmoid(X W_z + AH U_z + b_z)
    c   = tanh(X W_h + (r * AH) U_h + b_h)
    H   = z * H_prev + (1 - z) * c

``A`` is the row-normalized adjacency.  The outlet's hidden row is the latent
``z_t``; the head is ``relu(leaky(z_t V1 + c1) V2 + c2)`` scaled back to mm.
Gradients are computed by hand (backpropagation through time) and are exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import constraints
from .dataio import GraphSpec, WatershedSeries, annual_budget, is_water_year_aligned
from .iwtrain import IWConfig, group_samples, iw_train_epoch_hook, residual_loss
from .metrics import safe_nnse

GRU_NAMES = ("W_r", "W_z", "W_h", "U_r", "U_z", "U_h", "b_r", "b_z", "b_h")
HEAD_NAMES = ("V1", "c1", "V2", "c2")
PARAM_NAMES = GRU_NAMES + HEAD_NAMES
CHECKPOINT_VERSION = 1


@dataclass
class ModelParameters:
    """Trainable weights plus the fixed input/output scaling fitted on training data.

    ``x_mean``/``x_std`` standardize each feature channel and ``y_scale``
    maps the head output (model units) to mm.
    """

    W_r: np.ndarray
    W_z: np.ndarray
    W_h: np.ndarray
    U_r: np.ndarray
    U_z: np.ndarray
    U_h: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    b_h: np.ndarray
    V1: np.ndarray
    c1: np.ndarray
    V2: np.ndarray
    c2: np.ndarray
    alpha: float = 0.01
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_scale: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        m, h = self.W_r.shape
        if self.x_mean is None:
            self.x_mean = np.zeros(m)
        if self.x_std is None:
            self.x_std = np.ones(m)
        self.x_mean = np.array(self.x_mean, dtype=np.float64)
        self.x_std = np.array(self.x_std, dtype=np.float64)
        self.y_scale = float(self.y_scale)
        self.alpha = float(self.alpha)
        self.validate()

    @property
    def m(self) -> int:
        return self.W_r.shape[0]

    @property
    def h(self) -> int:
        return self.W_r.shape[1]

    @property
    def h_mid(self) -> int:
        return self.V1.shape[1]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        m, h, hm = self.m, self.h, self.h_mid
        return {
            "W_r": (m, h), "W_z": (m, h), "W_h": (m, h),
            "U_r": (h, h), "U_z": (h, h), "U_h": (h, h),
            "b_r": (h,), "b_z": (h,), "b_h": (h,),
            "V1": (h, hm), "c1": (hm,), "V2": (hm,), "c2": (1,),
        }

    def validate(self) -> None:
        for name, shape in self.expected_shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if not 0 < self.alpha < 1:
            raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {self.alpha}")
        if self.x_mean.shape != (self.m,) or self.x_std.shape != (self.m,):
            raise ValueError("feature scaling vectors must have length m")
        if np.any(self.x_std <= 0) or not self.y_scale > 0:
            raise ValueError("scales must be positive")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> ModelParameters:
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()},
                       x_mean=self.x_mean.copy(), x_std=self.x_std.copy())

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> ModelParameters:
        return replace(self, **{k: np.array(v, dtype=float) for k, v in arrays.items()})


def init_params(m: int, h: int, h_mid: int | None = None, seed: int = 0, alpha: float = 0.01) -> ModelParameters:
    """Uniform ``[-1/sqrt(fan), 1/sqrt(fan)]`` initialization (fan = h for the cell)."""
    h_mid = h if h_mid is None else h_mid
    rng = np.random.default_rng(int(seed) % 2**64)
    k = 1.0 / math.sqrt(h)
    k_mid = 1.0 / math.sqrt(h_mid)
    u = lambda bound, *shape: rng.uniform(-bound, bound, shape)
    return ModelParameters(
        W_r=u(k, m, h), W_z=u(k, m, h), W_h=u(k, m, h),
        U_r=u(k, h, h), U_z=u(k, h, h), U_h=u(k, h, h),
        b_r=u(k, h), b_z=u(k, h), b_h=u(k, h),
        V1=u(k, h, h_mid), c1=u(k, h_mid), V2=u(k_mid, h_mid), c2=u(k_mid, 1),
        alpha=alpha,
    )


def zero_params(m: int, h: int, h_mid: int | None = None) -> ModelParameters:
    h_mid = h if h_mid is None else h_mid
    z = np.zeros
    return ModelParameters(z((m, h)), z((m, h)), z((m, h)), z((h, h)), z((h, h)), z((h, h)),
                           z(h), z(h), z(h), z((h, h_mid)), z(h_mid), z(h_mid), z(1))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_step_inputs(params: ModelParameters, A, X_t, H_prev):
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if X_t.shape != (n, params.m):
        raise ValueError(f"X_t has shape {X_t.shape}, expected {(n, params.m)}")
    if H_prev.shape != (n, params.h):
        raise ValueError(f"H_prev has shape {H_prev.shape}, expected {(n, params.h)}")
    for name, arr in (("A", A), ("X_t", X_t), ("H_prev", H_prev)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")


def gru_step(params: ModelParameters, A, X_t, H_prev, *, return_gates: bool = False):
    """One graph-GRU update.  ``A`` is row-normalized internally; ``X_t`` is
    used as given (no feature standardization)."""
    A = np.asarray(A, dtype=float)
    X_t = np.asarray(X_t, dtype=float)
    H_prev = np.asarray(H_prev, dtype=float)
    _check_step_inputs(params, A, X_t, H_prev)
    A_norm = GraphSpec(A, 0).normalized()
    AH = A_norm @ H_prev
    r = _sigmoid(X_t @ params.W_r + AH @ params.U_r + params.b_r)
    z = _sigmoid(X_t @ params.W_z + AH @ params.U_z + params.b_z)
    c = np.tanh(X_t @ params.W_h + (r * AH) @ params.U_h + params.b_h)
    H = z * H_prev + (1.0 - z) * c
    if return_gates:
        return H, (r, z, c)
    return H


# ---------------------------------------------------------------------------
# unrolled forward / backward


@dataclass
class _Trace:
    A: np.ndarray
    X: np.ndarray
    H: np.ndarray  # (T+1, n, h); H[0] is the zero initial state
    AH: np.ndarray
    r: np.ndarray
    z: np.ndarray
    c: np.ndarray


def _standardize(params: ModelParameters, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim != 3 or X.shape[2] != params.m:
        raise ValueError(f"features must be (T, n, {params.m}), got {X.shape}")
    return (X - params.x_mean) / params.x_std


def _unroll(params: ModelParameters, A: np.ndarray, X: np.ndarray) -> _Trace:
    T, n, _ = X.shape
    h = params.h
    Wx = X @ np.concatenate([params.W_r, params.W_z, params.W_h], axis=1)
    Wx += np.concatenate([params.b_r, params.b_z, params.b_h])
    U_rz = np.concatenate([params.U_r, params.U_z], axis=1)
    U_h = params.U_h
    H = np.zeros((T + 1, n, h))
    AH = np.empty((T, n, h))
    r = np.empty((T, n, h))
    z = np.empty((T, n, h))
    c = np.empty((T, n, h))
    for t in range(T):
        ah = A @ H[t]
        rz = _sigmoid(Wx[t, :, : 2 * h] + ah @ U_rz)
        rt, zt = rz[:, :h], rz[:, h:]
        ct = np.tanh(Wx[t, :, 2 * h:] + (rt * ah) @ U_h)
        H[t + 1] = zt * H[t] + (1.0 - zt) * ct
        AH[t], r[t], z[t], c[t] = ah, rt, zt, ct
    return _Trace(A, X, H, AH, r, z, c)


@dataclass
class _HeadCache:
    Zd: np.ndarray
    a1: np.ndarray
    gd: np.ndarray
    o: np.ndarray
    masks: tuple | None


def _head(params: ModelParameters, Z: np.ndarray, masks=None) -> _HeadCache:
    Zd = Z * masks[0] if masks is not None else Z
    a1 = Zd @ params.V1 + params.c1
    g = np.where(a1 > 0, a1, params.alpha * a1)
    gd = g * masks[1] if masks is not None else g
    o = gd @ params.V2 + params.c2[0]
    return _HeadCache(Zd, a1, gd, o, masks)


def _head_backward(params: ModelParameters, cache: _HeadCache, d_out: np.ndarray):
    """Gradients of the head given ``dL/d(model-unit prediction)``."""
    do = d_out * (cache.o > 0)
    grads = {
        "V2": cache.gd.T @ do,
        "c2": np.array([do.sum()]),
    }
    dg = np.outer(do, params.V2)
    if cache.masks is not None:
        dg = dg * cache.masks[1]
    da1 = dg * np.where(cache.a1 > 0, 1.0, params.alpha)
    grads["V1"] = cache.Zd.T @ da1
    grads["c1"] = da1.sum(axis=0)
    dZ = da1 @ params.V1.T
    if cache.masks is not None:
        dZ = dZ * cache.masks[0]
    return grads, dZ


def _unroll_backward(params: ModelParameters, tr: _Trace, dH_out: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagation through time; ``dH_out[t]`` is ``dL/dH[t+1]`` from outside the cell."""
    T, n, h = dH_out.shape
    A_T = tr.A.T
    U_rz_T = np.concatenate([params.U_r, params.U_z], axis=1).T
    U_h_T = params.U_h.T
    d_pre = np.empty((T, n, 3 * h))  # pre-activations for r, z, candidate
    d_rAH = np.empty((T, n, h))
    dH = np.zeros((n, h))
    for t in range(T - 1, -1, -1):
        dH = dH + dH_out[t]
        rt, zt, ct, ah = tr.r[t], tr.z[t], tr.c[t], tr.AH[t]
        dc_pre = dH * (1.0 - zt) * (1.0 - ct * ct)
        dz_pre = dH * (tr.H[t] - ct) * zt * (1.0 - zt)
        drah = dc_pre @ U_h_T
        dr_pre = drah * ah * rt * (1.0 - rt)
        d_rz = np.concatenate([dr_pre, dz_pre], axis=1)
        dAH = drah * rt + d_rz @ U_rz_T
        d_pre[t, :, : 2 * h] = d_rz
        d_pre[t, :, 2 * h:] = dc_pre
        d_rAH[t] = rt * ah
        dH = dH * zt + A_T @ dAH
    Xf = tr.X.reshape(T * n, -1)
    dP = d_pre.reshape(T * n, 3 * h)
    dW = Xf.T @ dP
    db = dP.sum(axis=0)
    AHf = tr.AH.reshape(T * n, h)
    dU_rz = AHf.T @ dP[:, : 2 * h]
    dU_h = d_rAH.reshape(T * n, h).T @ dP[:, 2 * h:]
    return {
        "W_r": dW[:, :h], "W_z": dW[:, h: 2 * h], "W_h": dW[:, 2 * h:],
        "U_r": dU_rz[:, :h], "U_z": dU_rz[:, h:], "U_h": dU_h,
        "b_r": db[:h], "b_z": db[h: 2 * h], "b_h": db[2 * h:],
    }


def forward(params: ModelParameters, graph: GraphSpec, features, masks=None):
    """Unroll over all months from a zero state.

    Returns ``(latents, predictions)``: the outlet hidden rows ``(T, h)`` and
    non-negative streamflow predictions in mm ``(T,)``.
    """
    X = _standardize(params, features)
    if X.shape[1] != graph.n:
        raise ValueError(f"features have {X.shape[1]} nodes, graph has {graph.n}")
    tr = _unroll(params, graph.normalized(), X)
    Z = tr.H[1:, graph.outlet, :]
    cache = _head(params, Z, masks)
    return Z, params.y_scale * np.maximum(cache.o, 0.0)


@dataclass(frozen=True)
class Objective:
    """Training objective beyond the weighted data term.

    ``budgets`` are per-water-year limits in mm; they enable the projection
    layer (``project=True``) and/or the hinge penalty (``pg_lambda > 0``).
    ``loss`` is ``"mse"`` (squared residual) or ``"abs"``.
    """

    loss: str = "mse"
    project: bool = False
    budgets: np.ndarray | None = None
    pg_lambda: float = 0.0

    def __post_init__(self):
        if self.loss not in ("mse", "abs"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if (self.project or self.pg_lambda) and self.budgets is None:
            raise ValueError("projection and penalty need per-year budgets")


def _output_and_loss(params, o, targets, weights, objective: Objective):
    """Returns (loss, prediction_mm, dL/do)."""
    s = params.y_scale
    T = o.shape[0]
    raw = s * np.maximum(o, 0.0)
    pred = raw
    if objective.project:
        pred = constraints.project_series(raw, objective.budgets)
    resid = (pred - targets) / s
    if objective.loss == "mse":
        loss = float(np.dot(weights, resid * resid) / T)
        d_pred = weights * 2.0 * resid / (T * s)
    else:
        loss = float(np.dot(weights, np.abs(resid)) / T)
        d_pred = weights * np.sign(resid) / (T * s)
    d_raw = d_pred
    if objective.project:
        d_raw = constraints.project_series_vjp(raw, objective.budgets, d_pred)
    if objective.pg_lambda:
        excess = (raw.reshape(-1, 12).sum(axis=1) - objective.budgets) / s
        n_years = excess.size
        loss += objective.pg_lambda * float(np.maximum(excess, 0.0).sum() / n_years)
        d_raw = d_raw + np.repeat(objective.pg_lambda * (excess > 0) / (n_years * s), 12)
    # d raw / d o = s on the active side of the clamp; the clamp is applied in _head_backward
    return loss, pred, d_raw * s


def loss_and_grad(params: ModelParameters, graph: GraphSpec, features, targets, weights,
                  objective: Objective = Objective(), masks=None):
    """Weighted training loss and its exact gradient with respect to every parameter."""
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    X = _standardize(params, features)
    T = X.shape[0]
    if targets.shape != (T,) or weights.shape != (T,):
        raise ValueError("targets and weights must have one entry per month")
    tr = _unroll(params, graph.normalized(), X)
    Z = tr.H[1:, graph.outlet, :]
    cache = _head(params, Z, masks)
    loss, _, d_o = _output_and_loss(params, cache.o, targets, weights, objective)
    head_grads, dZ = _head_backward(params, cache, d_o)
    dH_out = np.zeros_like(tr.H[1:])
    dH_out[:, graph.outlet, :] = dZ
    grads = _unroll_backward(params, tr, dH_out)
    grads.update(head_grads)
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return loss, grads


def backward(params: ModelParameters, graph: GraphSpec, features, loss_weights, targets,
             objective: Objective = Objective(), masks=None) -> dict[str, np.ndarray]:
    """Gradient record (same names and shapes as the parameters)."""
    return loss_and_grad(params, graph, features, targets, loss_weights, objective, masks)[1]


def head_loss_and_grad(params: ModelParameters, latents, targets, weights,
                       objective: Objective = Objective(), masks=None):
    """Loss and head-only gradients with the latents held fixed."""
    cache = _head(params, np.asarray(latents, dtype=float), masks)
    loss, pred, d_o = _output_and_loss(params, cache.o, np.asarray(targets, float),
                                       np.asarray(weights, float), objective)
    grads, _ = _head_backward(params, cache, d_o)
    return loss, grads, pred


def gradient_check(params: ModelParameters, graph: GraphSpec, features, targets, weights,
                   objective: Objective = Objective(), eps: float = 1e-5, masks=None) -> dict[str, float]:
    """Relative deviation ``|g - g_fd| / max(|g|, |g_fd|)`` (2-norms) per parameter array,
    with ``g_fd`` from central differences of step ``eps``."""
    _, grads = loss_and_grad(params, graph, features, targets, weights, objective, masks)
    out = {}
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_and_grad(params, graph, features, targets, weights, objective, masks)[0]
            arr[idx] = old - eps
            down = loss_and_grad(params, graph, features, targets, weights, objective, masks)[0]
            arr[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(grads[name]), np.linalg.norm(fd))
        out[name] = float(np.linalg.norm(grads[name] - fd) / denom) if denom > 0 else 0.0
    return out


def predict(params: ModelParameters, data: WatershedSeries, project: bool = False) -> np.ndarray:
    """Predictions in mm, projected onto the annual budgets when ``project``."""
    _, pred = forward(params, data.graph, data.features)
    if project and is_water_year_aligned(data):
        pred = constraints.project_series(pred, annual_budget(data))
    return pred


# ---------------------------------------------------------------------------
# training


MODES = ("plain", "pg", "crl")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0005
    epochs: int = 200
    seed: int = 0
    mode: str = "plain"
    hidden: int = 256
    head_hidden: int | None = None
    alpha: float = 0.01
    dropout: float = 0.2
    pg_lambda: float = constraints.DEFAULT_PG_LAMBDA
    iw: IWConfig = field(default_factory=IWConfig)
    iw_epochs: int = 100
    loss: str = "mse"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def name(self) -> str:
        return self.mode + ("-iw" if self.iw.enabled else "")


class Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            p = arrays[name]
            g = g + self.wd * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[dict] = field(default_factory=list)
    best_val_nnse: float = float("nan")

    def write_log(self, path) -> Path:
        path = Path(path)
        cols = ["stage", "epoch", "loss", "val_nnse", "iw_K", "iw_nonempty", "iw_max_weight"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.log:
                w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                            for c in cols])
        return path


def fit_scaling(params: ModelParameters, data: WatershedSeries) -> ModelParameters:
    X = data.features.reshape(-1, data.m)
    std = X.std(axis=0)
    y_std = float(data.target.std())
    return replace(params, x_mean=X.mean(axis=0), x_std=np.where(std > 0, std, 1.0),
                   y_scale=y_std if y_std > 0 else 1.0)


def objective_for(data: WatershedSeries, config: TrainConfig) -> Objective:
    aligned = is_water_year_aligned(data)
    budgets = annual_budget(data) if aligned else None
    return Objective(
        loss=config.loss,
        project=config.mode == "crl" and aligned,
        budgets=budgets,
        pg_lambda=config.pg_lambda if (config.mode == "pg" and aligned) else 0.0,
    )


def _val_score(params, val_data, config) -> float:
    if val_data is None or val_data.T == 0:
        return float("nan")
    pred = predict(params, val_data, project=config.mode == "crl")
    return safe_nnse(val_data.target, pred)


def _dropout_masks(rng, T, h, h_mid, rate):
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return (rng.binomial(1, keep, (T, h)) / keep, rng.binomial(1, keep, (T, h_mid)) / keep)


def _better(score, best) -> bool:
    if math.isnan(score):
        return math.isnan(best)
    return math.isnan(best) or score > best


def train(params_init: ModelParameters | None, train_data: WatershedSeries,
          val_data: WatershedSeries | None, config: TrainConfig) -> TrainResult:
    """Full-batch Adam on the whole training window.

    Stage 1 trains every parameter under the selected mode.  With importance
    weighting enabled, stage 2 refits the head on the frozen latents of the
    stage-1 model, refreshing the weights from the current residuals every
    ``config.iw.refresh`` epochs.  The parameters with the best validation
    NNSE seen in either stage are returned.
    """
    if params_init is None:
        params_init = init_params(train_data.m, config.hidden, config.head_hidden, config.seed, config.alpha)
        params_init = fit_scaling(params_init, train_data)
    params = params_init.copy()
    arrays = params.arrays()
    objective = objective_for(train_data, config)
    y = train_data.target
    T = train_data.T
    ones = np.ones(T)
    mask_rng = np.random.default_rng([int(config.seed) % 2**64, 1])
    opt = Adam(config.lr, config.weight_decay)
    result = TrainResult(params.copy())
    best = float("nan")

    for epoch in range(config.epochs):
        masks = _dropout_masks(mask_rng, T, params.h, params.h_mid, config.dropout)
        loss, grads = loss_and_grad(params, train_data.graph, train_data.features, y, ones, objective, masks)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        opt.step(arrays, grads)
        score = _val_score(params, val_data, config)
        result.log.append({"stage": "model", "epoch": epoch, "loss": loss, "val_nnse": score})
        if _better(score, best) or epoch == 0:
            best = score
            result.params = params.copy()

    if config.iw.enabled:
        params = result.params.copy()
        arrays = params.arrays()
        head_opt = Adam(config.lr, config.weight_decay)
        Z, _ = forward(params, train_data.graph, train_data.features)
        weights = ones
        for epoch in range(config.iw_epochs):
            if epoch % max(1, config.iw.refresh) == 0:
                _, _, pred = head_loss_and_grad(params, Z, y, ones, objective)
                losses = residual_loss(pred, y)
                weights = iw_train_epoch_hook({"epoch": epoch, "params": params}, losses, config.iw)
                grouping = group_samples(losses, config.iw.K)
            masks = _dropout_masks(mask_rng, T, params.h, params.h_mid, config.dropout)
            loss, grads, _ = head_loss_and_grad(params, Z, y, weights, objective, masks)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at importance-weighted epoch {epoch}")
            head_opt.step(arrays, grads)
            score = _val_score(params, val_data, config)
            result.log.append({"stage": "iw_head", "epoch": epoch, "loss": loss, "val_nnse": score,
                               "iw_K": grouping.K, "iw_nonempty": grouping.nonempty,
                               "iw_max_weight": float(weights.max())})
            if _better(score, best):
                best = score
                result.params = params.copy()

    result.best_val_nnse = best
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParameters, path, meta: dict | None = None) -> Path:
    """Text checkpoint: ``key,value`` header lines, then one block per array.

    Each block starts with ``array,<name>,<rows>,<cols>`` and lists the rows
    as comma-separated ``repr`` floats, which round-trip exactly.
    """
    path = Path(path)
    header = {"format_version": CHECKPOINT_VERSION, "n": "n/a", "m": params.m, "h": params.h,
              "h_mid": params.h_mid, "alpha": repr(params.alpha), "y_scale": repr(params.y_scale)}
    for k, v in (meta or {}).items():
        header[f"meta.{k}"] = v
    blocks = dict(params.arrays(), x_mean=params.x_mean, x_std=params.x_std)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for k, v in header.items():
            w.writerow([k, v])
        for name, arr in blocks.items():
            mat = np.atleast_2d(arr) if arr.ndim == 1 else arr
            w.writerow(["array", name, mat.shape[0], mat.shape[1]])
            for row in mat:
                w.writerow([repr(float(v)) for v in row])
    return path


def load_checkpoint(path) -> tuple[ModelParameters, dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header, blocks = {}, {}
    i = 0
    while i < len(rows) and rows[i][0] != "array":
        header[rows[i][0]] = rows[i][1]
        i += 1
    if int(header.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
    while i < len(rows):
        _, name, nr, nc = rows[i]
        nr, nc = int(nr), int(nc)
        blocks[name] = np.array([[float(v) for v in r] for r in rows[i + 1: i + 1 + nr]]).reshape(nr, nc)
        i += 1 + nr
    arrays = {}
    for name in PARAM_NAMES + ("x_mean", "x_std"):
        arr = blocks[name]
        arrays[name] = arr if name in ("W_r", "W_z", "W_h", "U_r", "U_z", "U_h", "V1") else arr.reshape(-1)
    params = ModelParameters(**arrays, alpha=float(header["alpha"]), y_scale=float(header["y_scale"]))
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return params, meta
