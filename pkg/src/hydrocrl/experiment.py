"""End-to-end pieces: train a variant, evaluate a set of models on the test
years, and compute GP / dropout prediction intervals."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .constraints import ViolationReport, violation_report
from .dataio import HIGH_FLOW_MONTHS, WatershedSeries, annual_budget, is_water_year_aligned
from .rcgnn import ModelParameters, forward, predict
from .uq import GPConfig, PredictionInterval, dropout_interval, gp_fit, gp_interval

SUBSETS = {"high_flow": HIGH_FLOW_MONTHS, "all": tuple(range(1, 13))}


def model_mode(name: str) -> str:
    return name.split("-")[0]


@dataclass
class EvaluationReport:
    months: np.ndarray
    y: np.ndarray
    predictions: dict[str, np.ndarray]
    scores: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    violations: dict[str, ViolationReport] = field(default_factory=dict)
    profiles: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def nnse(self, model: str, subset: str = "high_flow") -> float:
        return self.scores[(model, subset)]["nnse"]

    def write(self, outdir) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        names = list(self.predictions)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "subset", "n_months", "nse", "nnse", "mae",
                        "violation_fraction", "violation_magnitude_mm"])
            for name in names:
                v = self.violations.get(name)
                for subset in SUBSETS:
                    s = self.scores[(name, subset)]
                    w.writerow([name, subset, s["n"], repr(s["nse"]), repr(s["nnse"]), repr(s["mae"]),
                                "" if v is None else repr(v.fraction), "" if v is None else repr(v.magnitude)])
        with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "month", "y_true", *names])
            for t in range(self.y.size):
                w.writerow([t, int(self.months[t]), repr(float(self.y[t])),
                            *(repr(float(self.predictions[k][t])) for k in names)])
        for name in names:
            with open(out / f"profile_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["subset", "mae_gap", "fraction"])
                for subset, curves in self.profiles.items():
                    for x, f in curves[name]:
                        w.writerow([subset, repr(float(x)), repr(float(f))])
            if name in self.violations:
                self.violations[name].to_csv(out / f"violations_{name}.csv")
        return out


def evaluate_models(models: dict[str, ModelParameters], test: WatershedSeries) -> EvaluationReport:
    """Score every model on the test window; ``crl`` models are projected."""
    preds = {name: predict(p, test, project=model_mode(name) == "crl") for name, p in models.items()}
    rep = EvaluationReport(test.months, np.asarray(test.target), preds)
    for name, pred in preds.items():
        for subset, months in SUBSETS.items():
            _, y, yh = metrics.month_filter(test.months, test.target, pred, keep=months)
            try:
                nse = metrics.nse(y, yh)
                nnse = metrics.nnse(nse)
            except metrics.UndefinedMetric:
                nse = nnse = float("nan")
            rep.scores[(name, subset)] = {"n": int(y.size), "nse": nse, "nnse": nnse, "mae": metrics.mae(y, yh)}
        if is_water_year_aligned(test):
            rep.violations[name] = violation_report(pred, test)
    for subset, months in SUBSETS.items():
        mask = np.isin(test.months, months)
        errors = {name: np.abs(test.target[mask] - p[mask]) for name, p in preds.items()}
        rep.profiles[subset] = metrics.relative_performance_profile(errors)
    return rep


SUMMARY_COLUMNS = ("method", "subset", "n_months", "coverage_pct", "mean_width_mm", "point_nnse", "point_mae")


@dataclass
class UQResult:
    """Intervals per method; each interval's center is that method's point forecast
    (GP posterior mean or the network head)."""

    months: np.ndarray
    y: np.ndarray
    point: np.ndarray
    intervals: dict[str, PredictionInterval]

    def summary(self) -> list[dict]:
        rows = []
        for method, iv in self.intervals.items():
            for subset, months in SUBSETS.items():
                mask = np.isin(self.months, months)
                if not mask.any():
                    continue
                cov, width = metrics.coverage_and_width(self.y[mask], iv.lower[mask], iv.upper[mask])
                rows.append({"method": method, "subset": subset, "n_months": int(mask.sum()),
                             "coverage_pct": cov, "mean_width_mm": width,
                             "point_nnse": metrics.safe_nnse(self.y[mask], iv.center[mask]),
                             "point_mae": metrics.mae(self.y[mask], iv.center[mask])})
        return rows

    def write(self, outdir) -> Path:
        from .uq import write_intervals_csv

        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for method, iv in self.intervals.items():
            write_intervals_csv(out / f"intervals_{method}.csv", self.y, iv.center, iv, method)
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in self.summary():
                w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(r[c]) for c in SUMMARY_COLUMNS])
        return out


def run_uq(params: ModelParameters, train: WatershedSeries, test: WatershedSeries, *, project: bool,
           methods=("gp", "dropout"), gp_config: GPConfig = GPConfig(), dropout_rate: float = 0.2,
           n_iter: int = 30, seed: int = 0) -> UQResult:
    """GP on training latents and MC dropout, both evaluated on ``test``."""
    point = predict(params, test, project=project)
    intervals = {}
    if "gp" in methods:
        Z_train, _ = forward(params, train.graph, train.features)
        Z_test, _ = forward(params, test.graph, test.features)
        intervals["gp"] = gp_interval(gp_fit(Z_train, train.target, gp_config), Z_test)
    if "dropout" in methods:
        budgets = annual_budget(test) if project and is_water_year_aligned(test) else None
        intervals["dropout"] = dropout_interval(params, test.graph, test.features, rate=dropout_rate,
                                                n_iter=n_iter, seed=seed, budgets=budgets)
    unknown = set(methods) - {"gp", "dropout"}
    if unknown:
        raise ValueError(f"unknown UQ methods {sorted(unknown)}")
    return UQResult(test.months, np.asarray(test.target), point, intervals)
