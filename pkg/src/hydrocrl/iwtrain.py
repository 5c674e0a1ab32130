"""Importance-weighted empirical risk with loss-range groups.

Samples are binned into ``K`` uniform loss ranges over ``[0, L]`` and group
``k`` receives weight ``omega_k = k**a / (K**(b+1) * P_k)``, so that
``P_k * omega_k`` grows like ``k**a``.  The bound calculator evaluates the
generalization bounds for plain and weighted risk and checks every step of
the inequality chain that shows ``d2 <= 1/(a+1)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

DEFAULT_K = 10
DEFAULT_A = 1.0
_REL = 1e-12


def default_b(a: float, K: int, extra: float = 0.5) -> float:
    """``b = a + 1/ln K + extra``; ``extra >= 0`` satisfies ``a <= b - 1/ln K``."""
    return a + 1.0 / math.log(K) + extra


def residual_loss(prediction, target):
    """Absolute residual ``|F(z) - y|`` (elementwise for arrays)."""
    return np.abs(np.asarray(prediction, dtype=float) - np.asarray(target, dtype=float))


@dataclass(frozen=True)
class GroupWeighting:
    """Loss-range grouping and its weights.

    ``sample_bins`` holds the 0-based bin of every sample, so sample ``i``
    belongs to group ``k = sample_bins[i] + 1``.  ``omega`` are the exact
    analysis weights; ``sample_weights`` are the same group weights rescaled
    to mean 1 for training.
    """

    K: int
    L: float
    bin_edges: np.ndarray
    counts: np.ndarray
    P: np.ndarray
    sample_bins: np.ndarray
    a: float | None = None
    b: float | None = None
    omega: np.ndarray | None = None
    sample_weights: np.ndarray | None = None

    @property
    def M(self) -> float:
        return float(np.max(self.omega))

    @property
    def nonempty(self) -> int:
        return int(np.count_nonzero(self.counts))


def group_samples(losses, K: int = DEFAULT_K) -> GroupWeighting:
    """Assign losses to ``K`` uniform bins over ``[0, max(losses)]``.

    A loss on an interior edge goes to the lower bin; the maximum loss lands
    in bin ``K``.  With all losses zero everything sits in bin 1.
    """
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("group_samples needs a non-empty 1-d loss list")
    if int(K) < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    K = int(K)
    L = float(losses.max())
    if L > 0:
        k = np.ceil(losses * K / L).astype(int)
        bins = np.clip(k, 1, K) - 1
    else:
        bins = np.zeros(losses.size, dtype=int)
    counts = np.bincount(bins, minlength=K)
    return GroupWeighting(
        K=K,
        L=L,
        bin_edges=np.linspace(0.0, L, K + 1),
        counts=counts,
        P=counts / losses.size,
        sample_bins=bins,
    )


def assign_weights(grouping: GroupWeighting, a: float = DEFAULT_A, b: float | None = None) -> GroupWeighting:
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    K = grouping.K
    if b is None:
        b = default_b(a, K)
    if grouping.L == 0:
        omega = np.ones(K)
        sample = np.ones(grouping.sample_bins.size)
    else:
        k = np.arange(1, K + 1, dtype=float)
        omega = np.zeros(K)
        full = grouping.counts > 0
        omega[full] = k[full] ** a / (K ** (b + 1) * grouping.P[full])
        sample = omega[grouping.sample_bins]
        sample = sample / sample.mean()
    return replace(grouping, a=float(a), b=float(b), omega=omega, sample_weights=sample)


def iw_risk(losses, weights) -> float:
    """Weighted empirical risk ``(1/T) sum_i w_i * l_i``."""
    losses = np.asarray(losses, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if losses.shape != weights.shape:
        raise ValueError(f"length mismatch: {losses.shape} losses vs {weights.shape} weights")
    return float(np.dot(weights, losses) / losses.size)


def renyi_d2(grouping: GroupWeighting) -> float:
    """``sum_k P_k * omega_k``; empty bins contribute nothing."""
    full = grouping.counts > 0
    return float(np.sum(grouping.P[full] * grouping.omega[full]))


def reference_grouping(K: int, a: float, b: float, P=None) -> GroupWeighting:
    """A complete grouping over a given bin distribution (uniform by default)."""
    K = int(K)
    P = np.full(K, 1.0 / K) if P is None else np.asarray(P, dtype=float)
    if P.shape != (K,) or abs(P.sum() - 1) > 1e-12 or np.any(P < 0):
        raise ValueError("P must be a probability vector of length K")
    k = np.arange(1, K + 1, dtype=float)
    full = P > 0
    omega = np.zeros(K)
    omega[full] = k[full] ** a / (K ** (b + 1) * P[full])
    return GroupWeighting(
        K=K, L=1.0, bin_edges=np.linspace(0, 1, K + 1), counts=(P > 0).astype(int),
        P=P, sample_bins=np.zeros(0, dtype=int), a=float(a), b=float(b), omega=omega,
        sample_weights=np.zeros(0),
    )


def _le(x: float, y: float) -> bool:
    return x <= y + _REL * max(1.0, abs(y))


@dataclass(frozen=True)
class BoundReport:
    a: float
    b: float
    K: int
    delta: float
    T: int
    d2: float
    M: float
    bound_first: float
    bound_second: float
    bound_rhs: float
    B_hat: float
    B_hat_omega: float
    B_hat_proof: float
    B_hat_omega_proof: float
    chain: tuple[float, ...]
    chain_ok: tuple[bool, ...]
    conditions_ok: Mapping[str, bool] = field(default_factory=dict)

    @property
    def d2_bound(self) -> float:
        return 1.0 / (self.a + 1.0)

    @property
    def d2_ok(self) -> bool:
        return _le(self.d2, self.d2_bound)

    @property
    def ratio(self) -> float:
        return self.B_hat_omega / self.B_hat

    @property
    def tighter(self) -> bool:
        return self.B_hat_omega < self.B_hat

    @property
    def all_conditions(self) -> bool:
        return all(self.conditions_ok.values())

    @property
    def flagged(self) -> bool:
        """Hypotheses hold yet some step of the argument fails numerically."""
        return self.all_conditions and not (all(self.chain_ok) and self.d2_ok and self.tighter)


CHAIN_STEPS = (
    "sum_Pw",
    "riemann_sum",
    "integral",
    "integral_upper",
    "exp_form",
    "e_form",
    "inv_a1",
)


def bound_report(grouping: GroupWeighting, delta: float, T: int) -> BoundReport:
    """Evaluate the weighted-risk generalization bound for one configuration."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if int(T) < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if grouping.omega is None:
        raise ValueError("grouping has no weights; call assign_weights first")
    a, b, K, T = float(grouping.a), float(grouping.b), grouping.K, int(T)
    log_term = math.log(1.0 / delta)
    d2 = renyi_d2(grouping)
    M = grouping.M

    k = np.arange(1, K + 1, dtype=float)
    chain = (
        d2,
        float(np.sum(k**a)) / K ** (b + 1),
        ((K + 1) ** (a + 1) - 1) / ((a + 1) * K ** (b + 1)),
        (K + 1) ** (a + 1) / ((a + 1) * K ** (b + 1)),
        math.exp((a + 1) / K) * K ** (a - b) / (a + 1),
        math.e * K ** (a - b) / (a + 1),
        1.0 / (a + 1),
    )
    chain_ok = tuple(_le(x, y) for x, y in zip(chain[:-1], chain[1:]))

    first = 2 * M * log_term / (3 * T)
    second = math.sqrt(2 * d2 * log_term / T)
    conditions = {
        "a_positive": a > 0,
        "a_le_K_minus_1": _le(a, K - 1),
        "a_le_b_minus_inv_lnK": _le(a, b - 1 / math.log(K)),
        "K_ge_2": K >= 2,
        "bound_first_le_second": _le(first, second),
    }
    B_hat = math.sqrt(2 * log_term / T)
    B_hat_omega = math.sqrt(2 * log_term / ((a + 1) * T))
    return BoundReport(
        a=a, b=b, K=K, delta=float(delta), T=T, d2=d2, M=M,
        bound_first=first, bound_second=second, bound_rhs=first + second,
        B_hat=B_hat, B_hat_omega=B_hat_omega,
        B_hat_proof=2 * B_hat, B_hat_omega_proof=2 * math.sqrt(2 * d2 * log_term / T),
        chain=chain, chain_ok=chain_ok, conditions_ok=conditions,
    )


def bound_grid(a_values, K_values, deltas, Ts, b_extra: float = 1.0, P=None) -> list[BoundReport]:
    """Bound reports over a grid with ``b = a + 1/ln K + b_extra``."""
    rows = []
    for a in a_values:
        for K in K_values:
            g = reference_grouping(K, a, a + 1 / math.log(K) + b_extra, P)
            for delta in deltas:
                for T in Ts:
                    rows.append(bound_report(g, delta, T))
    if not rows:
        raise ValueError("empty bound grid")
    return rows


BOUND_COLUMNS = (
    "a", "b", "K", "delta", "T", "d2", "d2_bound", "d2_ok", "M",
    "bound_first", "bound_second", "bound_rhs", "B_hat", "B_hat_omega", "ratio",
    "B_hat_proof", "B_hat_omega_proof", "tighter",
    *(f"cond_{c}" for c in ("a_positive", "a_le_K_minus_1", "a_le_b_minus_inv_lnK", "K_ge_2", "bound_first_le_second")),
    "conditions_ok", *(f"chain_{s}_le_next" for s in CHAIN_STEPS[:-1]), "flagged",
)


def _row(r: BoundReport) -> list:
    vals = [r.a, r.b, r.K, r.delta, r.T, r.d2, r.d2_bound, r.d2_ok, r.M,
            r.bound_first, r.bound_second, r.bound_rhs, r.B_hat, r.B_hat_omega, r.ratio,
            r.B_hat_proof, r.B_hat_omega_proof, r.tighter,
            *r.conditions_ok.values(), r.all_conditions, *r.chain_ok, r.flagged]
    return [int(v) if isinstance(v, bool) else (repr(float(v)) if isinstance(v, float) else v) for v in vals]


def write_bounds_csv(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_COLUMNS)
        for r in reports:
            w.writerow(_row(r))
    return path


@dataclass(frozen=True)
class IWConfig:
    enabled: bool = False
    K: int = DEFAULT_K
    a: float = DEFAULT_A
    b: float | None = None
    refresh: int = 1


def iw_train_epoch_hook(model_state, train_losses, config: IWConfig) -> np.ndarray:
    """Per-sample training weights from the current residuals.

    ``model_state`` is whatever the trainer passes along (epoch bookkeeping);
    the weights depend only on the losses.
    """
    losses = np.asarray(train_losses, dtype=float)
    if not config.enabled:
        return np.ones(losses.size)
    g = assign_weights(group_samples(losses, config.K), config.a, config.b)
    return g.sample_weights
