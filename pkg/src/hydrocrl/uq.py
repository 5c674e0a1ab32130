"""Prediction intervals: a Gaussian process on the learned latents and an
MC-dropout baseline on the regression head.

The GP kernel is ``k(z, z') = sigma_f * exp(-|z - z'|^2 / (2 gamma^2))``
(``sigma_f`` multiplies directly, so it is a variance).  Observations are
treated as noiseless apart from a small diagonal jitter.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist, pdist

from .constraints import project_series
from .dataio import GraphSpec
from .rcgnn import ModelParameters, _head, _standardize, _unroll


class GPFitError(RuntimeError):
    pass


def rbf_kernel(Z1, Z2, gamma: float, sigma_f: float) -> np.ndarray:
    d2 = cdist(np.atleast_2d(Z1), np.atleast_2d(Z2), "sqeuclidean")
    return sigma_f * np.exp(-d2 / (2.0 * gamma * gamma))


@dataclass(frozen=True)
class GPConfig:
    n_gamma: int = 17
    n_sigma: int = 9
    rounds: int = 3
    jitter: float = 1e-6  # relative to sigma_f
    max_jitter: float = 1e-1
    center: bool = True


@dataclass(frozen=True)
class GPState:
    latents: np.ndarray
    targets: np.ndarray
    mean: float
    gamma: float
    sigma_f: float
    jitter: float
    chol: np.ndarray  # lower Cholesky factor of K + jitter * I
    weights: np.ndarray  # (K + jitter I)^{-1} (y - mean)
    log_likelihood: float

    @property
    def kernel_matrix(self) -> np.ndarray:
        K = rbf_kernel(self.latents, self.latents, self.gamma, self.sigma_f)
        return K + self.jitter * np.eye(K.shape[0])


def _factor(Z, gamma, sigma_f, cfg: GPConfig):
    """Cholesky with jitter escalation; returns (L, jitter) or None."""
    K = rbf_kernel(Z, Z, gamma, sigma_f)
    jitter = cfg.jitter * sigma_f
    limit = cfg.max_jitter * sigma_f
    while True:
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except LinAlgError:
            if jitter >= limit:
                return None
            jitter = min(10.0 * jitter, limit) if jitter > 0 else limit


def log_marginal_likelihood(Z, y_centered, gamma, sigma_f, cfg: GPConfig = GPConfig()) -> float:
    f = _factor(Z, gamma, sigma_f, cfg)
    if f is None:
        return -math.inf
    L, _ = f
    a = cho_solve((L, True), y_centered)
    return float(-0.5 * y_centered @ a - np.log(np.diag(L)).sum() - 0.5 * len(y_centered) * math.log(2 * math.pi))


def gp_fit(latents, targets, config: GPConfig = GPConfig()) -> GPState:
    """Maximize the log marginal likelihood over ``(gamma, sigma_f)``.

    A log-spaced grid (gamma around the median pairwise latent distance,
    sigma_f around the target variance) is followed by ``rounds`` passes of
    coordinate refinement with halving log-steps.  Only improvements are
    accepted, so the result is at least as good as every grid point.
    """
    Z = np.atleast_2d(np.asarray(latents, dtype=float))
    y = np.asarray(targets, dtype=float)
    if Z.shape[0] != y.shape[0] or Z.shape[0] < 2:
        raise ValueError("need at least two aligned training points")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    mean = float(y.mean()) if config.center else 0.0
    yc = y - mean
    dists = pdist(Z)
    dists = dists[dists > 0]
    d_med = float(np.median(dists)) if dists.size else 1.0
    var = float(np.mean(yc * yc)) or 1.0

    log_g = np.log(d_med) + np.linspace(math.log(1e-2), math.log(1e2), config.n_gamma)
    log_s = np.log(var) + np.linspace(math.log(1e-2), math.log(1e2), config.n_sigma)
    lml = lambda lg, ls: log_marginal_likelihood(Z, yc, math.exp(lg), math.exp(ls), config)
    best = (-math.inf, log_g[0], log_s[0])
    for lg in log_g:
        for ls in log_s:
            v = lml(lg, ls)
            if v > best[0]:
                best = (v, lg, ls)
    if not math.isfinite(best[0]):
        raise GPFitError("kernel matrix could not be factorized at any grid point")

    step_g = (log_g[1] - log_g[0]) if config.n_gamma > 1 else 1.0
    step_s = (log_s[1] - log_s[0]) if config.n_sigma > 1 else 1.0
    for r in range(config.rounds):
        sg, ss = step_g / 2 ** (r + 1), step_s / 2 ** (r + 1)
        for dg, ds in ((sg, 0.0), (-sg, 0.0), (0.0, ss), (0.0, -ss)):
            lg, ls = best[1] + dg, best[2] + ds
            v = lml(lg, ls)
            if v > best[0]:
                best = (v, lg, ls)

    gamma, sigma_f = math.exp(best[1]), math.exp(best[2])
    L, jitter = _factor(Z, gamma, sigma_f, config)
    return GPState(
        latents=Z.copy(), targets=y.copy(), mean=mean, gamma=gamma, sigma_f=sigma_f,
        jitter=jitter, chol=L, weights=cho_solve((L, True), yc), log_likelihood=best[0],
    )


def gp_condition(latents, targets, gamma, sigma_f, jitter=None, mean: float = 0.0) -> GPState:
    """Build a GP state at fixed hyperparameters (no search)."""
    Z = np.atleast_2d(np.asarray(latents, dtype=float))
    y = np.asarray(targets, dtype=float)
    jitter = 1e-6 * sigma_f if jitter is None else jitter
    K = rbf_kernel(Z, Z, gamma, sigma_f) + jitter * np.eye(Z.shape[0])
    L = cholesky(K, lower=True)
    yc = y - mean
    a = cho_solve((L, True), yc)
    lml = float(-0.5 * yc @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))
    return GPState(Z.copy(), y.copy(), mean, float(gamma), float(sigma_f), float(jitter), L, a, lml)


def gp_predict(state: GPState, z) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at query latents ``z`` (one per row)."""
    Zq = np.atleast_2d(np.asarray(z, dtype=float))
    if Zq.shape[1] != state.latents.shape[1]:
        raise ValueError(f"query dimension {Zq.shape[1]} != latent dimension {state.latents.shape[1]}")
    k_star = rbf_kernel(state.latents, Zq, state.gamma, state.sigma_f)  # (T, q)
    mu = state.mean + k_star.T @ state.weights
    v = solve_triangular(state.chol, k_star, lower=True)
    var = state.sigma_f - np.sum(v * v, axis=0)
    return mu, var


@dataclass(frozen=True)
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray

    @classmethod
    def two_sigma(cls, center, sigma) -> PredictionInterval:
        """``center +/- 2 sigma`` with everything clamped at zero streamflow."""
        center = np.asarray(center, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        return cls(
            lower=np.maximum(center - 2 * sigma, 0.0),
            upper=np.maximum(center + 2 * sigma, 0.0),
            center=np.maximum(center, 0.0),
        )

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def gp_interval(state: GPState, z) -> PredictionInterval:
    mu, var = gp_predict(state, z)
    return PredictionInterval.two_sigma(mu, np.sqrt(np.maximum(var, 0.0)))


def dropout_samples(params: ModelParameters, graph: GraphSpec, features, rate: float = 0.2,
                    n_iter: int = 30, seed: int = 0, budgets=None) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic predictions ``(T,)`` and ``n_iter`` stochastic passes ``(n_iter, T)``.

    Each pass draws fresh inverted-dropout masks on the latent and on the
    hidden head layer.  With per-water-year ``budgets`` every pass goes
    through the projection layer, as the constrained model's output does.
    """
    if not 0 < rate < 1:
        raise ValueError(f"dropout rate must be in (0, 1), got {rate}")
    if int(n_iter) < 2:
        raise ValueError("n_iter must be >= 2")
    X = _standardize(params, features)
    Z = _unroll(params, graph.normalized(), X).H[1:, graph.outlet, :]
    T = Z.shape[0]
    s = params.y_scale
    out = lambda o: s * np.maximum(o, 0.0) if budgets is None else project_series(s * np.maximum(o, 0.0), budgets)
    base = out(_head(params, Z).o)
    rng = np.random.default_rng(int(seed) % 2**64)
    keep = 1.0 - rate
    draws = np.empty((int(n_iter), T))
    for i in range(int(n_iter)):
        masks = (rng.binomial(1, keep, Z.shape) / keep, rng.binomial(1, keep, (T, params.h_mid)) / keep)
        draws[i] = out(_head(params, Z, masks).o)
    return base, draws


def dropout_interval(params: ModelParameters, graph: GraphSpec, features, t=None, rate: float = 0.2,
                     n_iter: int = 30, seed: int = 0, budgets=None) -> PredictionInterval:
    """``y_hat +/- 2 sigma`` with sigma the sample std over stochastic passes.

    ``t`` selects month indices (int, array, or ``None`` for all months).
    """
    base, draws = dropout_samples(params, graph, features, rate, n_iter, seed, budgets)
    sigma = draws.std(axis=0, ddof=1)
    if t is not None:
        base, sigma = base[t], sigma[t]
    return PredictionInterval.two_sigma(base, sigma)


def write_intervals_csv(path, y_true, y_pred, interval: PredictionInterval, method: str, t=None) -> Path:
    path = Path(path)
    y_true = np.asarray(y_true, dtype=float)
    t = np.arange(y_true.size) if t is None else np.asarray(t)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y_true", "y_pred", "lb", "ub", "method"])
        for i in range(y_true.size):
            w.writerow([int(t[i]), repr(float(y_true[i])), repr(float(y_pred[i])),
                        repr(float(interval.lower[i])), repr(float(interval.upper[i])), method])
    return path
