"""Annual water-balance knowledge: P >= ET + S on water-year aggregates.

Two ways of using it are provided: a hinge penalty for physics-guided
training, and an exact projection that rescales a water year's monthly
predictions so their total never exceeds the year's budget.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import WatershedSeries, annual_budget, annual_totals

DEFAULT_PG_LAMBDA = 0.1
DEFAULT_TOL = 1e-9


def pg_penalty(pred_total: float, P_total: float, ET_total: float) -> float:
    """Hinge on the balance residual: ``max(0, pred + ET - P)``."""
    return max(0.0, float(pred_total) + float(ET_total) - float(P_total))


def pg_penalty_grad(pred_total: float, P_total: float, ET_total: float) -> float:
    """Derivative of :func:`pg_penalty` in ``pred_total`` (0 at the kink)."""
    return 1.0 if float(pred_total) + float(ET_total) - float(P_total) > 0 else 0.0


def _check_year(predictions) -> np.ndarray:
    x = np.asarray(predictions, dtype=float)
    if x.shape != (12,):
        raise ValueError(f"projection needs one water year of 12 months, got shape {x.shape}")
    if np.any(x < 0):
        raise ValueError(f"negative prediction at month index {int(np.argmax(x < 0))}")
    return x


def project(predictions, budget: float) -> np.ndarray:
    """Rescale one water year of monthly predictions onto ``sum <= budget``.

    Identity when the budget already holds; all zeros for a non-positive
    budget; otherwise a uniform factor ``budget / sum`` which keeps the
    monthly shape.  The returned total is guaranteed not to exceed the
    budget in floating point.
    """
    x = _check_year(predictions)
    budget = float(budget)
    total = x.sum()
    if total <= budget:
        return x.copy()
    if budget <= 0:
        return np.zeros_like(x)
    rho = budget / total
    out = x * rho
    while out.sum() > budget:
        rho = np.nextafter(rho, 0.0)
        out = x * rho
    return out


def project_vjp(predictions, budget: float, grad_out) -> np.ndarray:
    """Vector-Jacobian product of :func:`project` (identity branch on the boundary)."""
    x = _check_year(predictions)
    g = np.asarray(grad_out, dtype=float)
    budget = float(budget)
    total = x.sum()
    if total <= budget:
        return g.copy()
    if budget <= 0:
        return np.zeros_like(x)
    return (budget / total) * g - (budget / total**2) * np.dot(g, x)


def project_series(predictions, budgets) -> np.ndarray:
    """Apply :func:`project` to each consecutive 12-month block."""
    x = np.asarray(predictions, dtype=float).reshape(-1, 12)
    b = np.asarray(budgets, dtype=float)
    if b.shape != (x.shape[0],):
        raise ValueError(f"{b.shape[0]} budgets for {x.shape[0]} water years")
    return np.concatenate([project(row, bud) for row, bud in zip(x, b)])


def project_series_vjp(predictions, budgets, grad_out) -> np.ndarray:
    x = np.asarray(predictions, dtype=float).reshape(-1, 12)
    g = np.asarray(grad_out, dtype=float).reshape(-1, 12)
    return np.concatenate([project_vjp(r, b, gr) for r, b, gr in zip(x, budgets, g)])


@dataclass(frozen=True)
class AnnualBudget:
    budget: np.ndarray
    predicted_total: np.ndarray
    observed_total: np.ndarray


def annual_balance(predictions, data: WatershedSeries) -> AnnualBudget:
    pred = np.asarray(predictions, dtype=float)
    if pred.shape != (data.T,):
        raise ValueError(f"{pred.shape[0]} predictions for {data.T} months")
    return AnnualBudget(
        budget=annual_budget(data),
        predicted_total=annual_totals(pred, data.start_month),
        observed_total=annual_totals(data.target, data.start_month),
    )


@dataclass(frozen=True)
class ViolationReport:
    fraction: float
    magnitude: float
    balance: AnnualBudget
    tol: float = DEFAULT_TOL

    @property
    def excess(self) -> np.ndarray:
        return self.balance.predicted_total - self.balance.budget

    def to_csv(self, path) -> Path:
        """One row per water year, then a ``summary`` row."""
        path = Path(path)
        b = self.balance
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["water_year", "budget_mm", "predicted_mm", "observed_mm", "excess_mm", "violated"])
            for k, ex in enumerate(self.excess):
                w.writerow([k, repr(float(b.budget[k])), repr(float(b.predicted_total[k])),
                            repr(float(b.observed_total[k])), repr(float(ex)), int(ex > self.tol)])
            w.writerow(["summary", "fraction", repr(self.fraction), "magnitude", repr(self.magnitude), ""])
        return path


def violation_report(predictions, data: WatershedSeries, tol: float = DEFAULT_TOL) -> ViolationReport:
    """Fraction of water years whose predicted total exceeds the budget,
    and the mean excess (mm) over the violating years only."""
    bal = annual_balance(predictions, data)
    excess = bal.predicted_total - bal.budget
    violated = excess > tol
    n_years = len(excess)
    fraction = float(violated.sum() / n_years) if n_years else 0.0
    magnitude = float(excess[violated].mean()) if violated.any() else 0.0
    return ViolationReport(fraction, magnitude, bal, tol)
