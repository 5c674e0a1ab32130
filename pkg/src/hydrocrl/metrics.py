"""Forecast-skill and interval metrics, month filtering and relative
performance profiles."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import HIGH_FLOW_MONTHS


class UndefinedMetric(ValueError):
    """NSE is undefined when the observations have zero variance."""


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, y_hat


def nse(y, y_hat) -> float:
    """Nash-Sutcliffe efficiency ``1 - SSE / SS_tot``.

    Raises:
        UndefinedMetric: if all observations are identical.
    """
    y, y_hat = _pair(y, y_hat)
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        raise UndefinedMetric("NSE undefined: observations are constant")
    return float(1.0 - np.sum((y - y_hat) ** 2) / denom)


def nnse(nse_value: float) -> float:
    if nse_value > 1:
        raise ValueError(f"NSE cannot exceed 1, got {nse_value}")
    return 1.0 / (2.0 - nse_value)


def safe_nnse(y, y_hat) -> float:
    """NNSE, or NaN as the sentinel for constant observations."""
    try:
        return nnse(nse(y, y_hat))
    except UndefinedMetric:
        return float("nan")


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def coverage_and_width(y, lower, upper) -> tuple[float, float]:
    """Percent of points inside ``[lower, upper]`` and the mean width."""
    y = np.asarray(y, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (y.shape == lower.shape == upper.shape) or y.ndim != 1:
        raise ValueError("y and interval bounds must be aligned 1-d arrays")
    if y.size == 0:
        raise ValueError("empty input")
    inside = (lower <= y) & (y <= upper)
    return 100.0 * float(inside.mean()), float(np.mean(upper - lower))


def month_filter(months, *arrays, keep: Sequence[int] = HIGH_FLOW_MONTHS):
    """Restrict aligned arrays to the steps whose calendar month is in ``keep``.

    Returns the boolean mask followed by the filtered arrays.
    """
    keep = set(int(k) for k in keep)
    if not keep:
        raise ValueError("empty month set")
    if not keep <= set(range(1, 13)):
        raise ValueError(f"months must lie in 1..12, got {sorted(keep)}")
    months = np.asarray(months)
    mask = np.isin(months, sorted(keep))
    return (mask, *(np.asarray(a)[mask] for a in arrays))


def relative_performance_profile(errors: Mapping[str, Sequence[float]]) -> dict[str, np.ndarray]:
    """Per-model step curve of the fraction of cases within ``x`` of the best.

    ``errors[model][j]`` is the model's error on case ``j`` (one month-year).
    For each model the result is an array of ``(x, fraction)`` rows at the
    distinct gaps to the per-case minimum, so the curve is right-continuous
    and ends at fraction 1.
    """
    if not errors:
        raise ValueError("no models given")
    names = list(errors)
    E = np.array([np.asarray(errors[k], dtype=float) for k in names])
    if E.ndim != 2 or E.shape[1] == 0:
        raise ValueError("every model needs the same non-empty list of cases")
    gaps = E - E.min(axis=0)
    out = {}
    for name, g in zip(names, gaps):
        xs = np.unique(g)
        frac = np.searchsorted(np.sort(g), xs, side="right") / g.size
        out[name] = np.column_stack([xs, frac])
    return out


def write_profile_csv(curve: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mae_gap", "fraction"])
        for x, f in curve:
            w.writerow([repr(float(x)), repr(float(f))])
    return path
