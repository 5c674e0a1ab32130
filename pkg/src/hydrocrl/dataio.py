"""Watershed datasets: in-memory model, CSV bundle I/O, water-year splits and
a synthetic generator whose streamflow respects the annual water balance.

All quantities are monthly depths in mm over the watershed.  Precipitation and
evapotranspiration are aggregated to watershed scale by the unweighted node
mean (uniform grid areas).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WATER_YEAR_START = 10  # October
HIGH_FLOW_MONTHS = (3, 4, 5, 6, 7)
REQUIRED_FEATURES = ("precipitation", "evapotranspiration")


class DatasetError(ValueError):
    """Raised for malformed or invariant-violating watershed data."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GraphSpec:
    """River network: ``adjacency[i, j] > 0`` means node ``j`` drains into ``i``."""

    adjacency: np.ndarray
    outlet: int

    def __post_init__(self):
        A = _frozen(self.adjacency)
        object.__setattr__(self, "adjacency", A)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise DatasetError(f"adjacency must be a non-empty square matrix, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise DatasetError("adjacency has non-finite entries")
        if np.any(A < 0):
            i, j = np.argwhere(A < 0)[0]
            raise DatasetError(f"negative adjacency entry at row {i}, column {j}")
        if not 0 <= int(self.outlet) < A.shape[0]:
            raise DatasetError(f"outlet {self.outlet} out of range for n={A.shape[0]}")
        object.__setattr__(self, "outlet", int(self.outlet))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def normalized(self) -> np.ndarray:
        """Row-normalized adjacency; all-zero rows stay zero."""
        rows = self.adjacency.sum(axis=1, keepdims=True)
        return np.divide(self.adjacency, rows, out=np.zeros_like(self.adjacency), where=rows > 0)


@dataclass(frozen=True)
class WatershedSeries:
    graph: GraphSpec
    features: np.ndarray  # (T, n, m)
    feature_names: tuple[str, ...]
    target: np.ndarray  # (T,)
    start_month: int = WATER_YEAR_START

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.target)
        names = tuple(str(s) for s in self.feature_names)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "target", y)
        object.__setattr__(self, "feature_names", names)
        if X.ndim != 3:
            raise DatasetError(f"features must be (T, n, m), got shape {X.shape}")
        T, n, m = X.shape
        if n != self.graph.n:
            raise DatasetError(f"features have {n} nodes but graph has {self.graph.n}")
        if len(names) != m:
            raise DatasetError(f"{len(names)} feature names for {m} feature columns")
        if len(set(names)) != m:
            raise DatasetError("duplicate feature names")
        for req in REQUIRED_FEATURES:
            if req not in names:
                raise DatasetError(f"missing required feature channel '{req}'")
        if y.shape != (T,):
            raise DatasetError(f"target length {y.shape} does not match T={T}")
        if not (1 <= int(self.start_month) <= 12):
            raise DatasetError(f"start_month must be in 1..12, got {self.start_month}")
        object.__setattr__(self, "start_month", int(self.start_month))
        if not np.all(np.isfinite(X)):
            t, i, k = np.argwhere(~np.isfinite(X))[0]
            raise DatasetError(f"non-finite {names[k]} at t={t}, node={i}")
        if not np.all(np.isfinite(y)):
            raise DatasetError(f"non-finite streamflow at t={int(np.argmax(~np.isfinite(y)))}")
        if np.any(y < 0):
            raise DatasetError(f"negative streamflow at t={int(np.argmax(y < 0))}")
        for req in REQUIRED_FEATURES:
            k = names.index(req)
            bad = X[:, :, k] < 0
            if bad.any():
                t, i = np.argwhere(bad)[0]
                raise DatasetError(f"negative {req} at t={t}, node={i}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return self.features.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.features[:, :, self.feature_names.index(name)]

    @property
    def months(self) -> np.ndarray:
        """Calendar month (1..12) of every step."""
        return (self.start_month - 1 + np.arange(self.T)) % 12 + 1

    def precip_mean(self) -> np.ndarray:
        return self.channel("precipitation").mean(axis=1)

    def et_mean(self) -> np.ndarray:
        return self.channel("evapotranspiration").mean(axis=1)

    def slice(self, start: int, stop: int) -> WatershedSeries:
        return WatershedSeries(
            graph=self.graph,
            features=self.features[start:stop],
            feature_names=self.feature_names,
            target=self.target[start:stop],
            start_month=(self.start_month - 1 + start) % 12 + 1,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_years: int = 20
    val_years: int = 6
    test_years: int = 9

    def __post_init__(self):
        for name in ("train_years", "val_years", "test_years"):
            if int(getattr(self, name)) < 0:
                raise DatasetError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.train_years + self.val_years + self.test_years


def water_year_offset(start_month: int) -> int:
    """Number of leading months before the first October."""
    return (WATER_YEAR_START - start_month) % 12


def complete_water_years(data: WatershedSeries) -> int:
    return max(0, (data.T - water_year_offset(data.start_month)) // 12)


def is_water_year_aligned(data: WatershedSeries) -> bool:
    return data.start_month == WATER_YEAR_START and data.T % 12 == 0


def split(data: WatershedSeries, spec: SplitSpec) -> tuple[WatershedSeries, WatershedSeries, WatershedSeries]:
    """Chronological train/val/test partition on water-year boundaries.

    Leading months before the first October are trimmed.  The three pieces
    are contiguous and start at the first complete water year; any trailing
    years beyond ``spec.total`` are left out.
    """
    offset = water_year_offset(data.start_month)
    available = complete_water_years(data)
    if spec.total > available:
        raise DatasetError(
            f"insufficient years: split needs {spec.total} water years, data has {available}"
        )
    bounds = np.cumsum([0, spec.train_years, spec.val_years, spec.test_years]) * 12 + offset
    parts = tuple(data.slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    for p in parts:
        if p.T and p.start_month != WATER_YEAR_START:
            raise DatasetError("split is not aligned to a water-year boundary")
    return parts


# ---------------------------------------------------------------------------
# CSV bundle

def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(data: WatershedSeries, path) -> Path:
    """Write the four-file CSV bundle into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "graph.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "outlet"])
        w.writerow([data.n, data.graph.outlet])
        for row in data.graph.adjacency:
            w.writerow([_fmt(v) for v in row])
    with open(out / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node", *data.feature_names])
        for t in range(data.T):
            for i in range(data.n):
                w.writerow([t, i, *(_fmt(v) for v in data.features[t, i])])
    with open(out / "target.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "streamflow_mm"])
        for t, v in enumerate(data.target):
            w.writerow([t, _fmt(v)])
    with open(out / "meta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start_month", "units"])
        w.writerow([data.start_month, "mm"])
    return out


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DatasetError(f"missing file {path.name}")
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh) if row]


def _num(text: str, where: str, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise DatasetError(f"{where}: cannot parse {text!r}") from None


def load_dataset(path) -> WatershedSeries:
    """Read and validate a CSV bundle directory written by :func:`save_dataset`."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")

    rows = _read_rows(root / "graph.csv")
    if len(rows) < 2 or rows[0][:2] != ["n", "outlet"]:
        raise DatasetError("graph.csv: expected header 'n,outlet'")
    n = _num(rows[1][0], "graph.csv row 2 column 1", int)
    outlet = _num(rows[1][1], "graph.csv row 2 column 2", int)
    if n < 1:
        raise DatasetError("graph.csv: n must be positive")
    adj_rows = rows[2:]
    if len(adj_rows) != n:
        raise DatasetError(f"graph.csv: expected {n} adjacency rows, found {len(adj_rows)}")
    A = np.empty((n, n))
    for i, row in enumerate(adj_rows):
        if len(row) != n:
            raise DatasetError(f"graph.csv row {i + 3}: expected {n} columns, found {len(row)}")
        for j, cell in enumerate(row):
            A[i, j] = _num(cell, f"graph.csv row {i + 3} column {j + 1}")
    graph = GraphSpec(A, outlet)

    rows = _read_rows(root / "meta.csv")
    if len(rows) < 2 or rows[0][0] != "start_month":
        raise DatasetError("meta.csv: expected header 'start_month,units'")
    start_month = _num(rows[1][0], "meta.csv row 2 column 1", int)

    rows = _read_rows(root / "features.csv")
    if not rows or rows[0][:2] != ["t", "node"] or len(rows[0]) < 3:
        raise DatasetError("features.csv: expected header 't,node,<feature names>'")
    names = tuple(rows[0][2:])
    m = len(names)
    body = rows[1:]
    if len(body) % n:
        raise DatasetError(f"features.csv: {len(body)} data rows is not a multiple of n={n}")
    T = len(body) // n
    X = np.empty((T, n, m))
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != m + 2:
            raise DatasetError(f"features.csv row {line}: expected {m + 2} columns, found {len(row)}")
        t = _num(row[0], f"features.csv row {line} column t", int)
        i = _num(row[1], f"features.csv row {line} column node", int)
        if (t, i) != divmod(r, n):
            raise DatasetError(f"features.csv row {line}: expected (t, node) = {divmod(r, n)}, found {(t, i)}")
        for k in range(m):
            v = _num(row[k + 2], f"features.csv row {line} column {names[k]}")
            if names[k] in REQUIRED_FEATURES and v < 0:
                raise DatasetError(f"features.csv row {line} column {names[k]}: negative {names[k]} at t={t}")
            X[t, i, k] = v

    rows = _read_rows(root / "target.csv")
    if not rows or rows[0] != ["t", "streamflow_mm"]:
        raise DatasetError("target.csv: expected header 't,streamflow_mm'")
    if len(rows) - 1 != T:
        raise DatasetError(f"target.csv: {len(rows) - 1} rows but features have T={T}")
    y = np.empty(T)
    for r, row in enumerate(rows[1:]):
        line = r + 2
        if len(row) != 2:
            raise DatasetError(f"target.csv row {line}: expected 2 columns")
        t = _num(row[0], f"target.csv row {line} column t", int)
        if t != r:
            raise DatasetError(f"target.csv row {line}: expected t={r}, found {t}")
        y[r] = _num(row[1], f"target.csv row {line} column streamflow_mm")
        if y[r] < 0:
            raise DatasetError(f"negative streamflow at t={t}")

    return WatershedSeries(graph, X, names, y, start_month)


# ---------------------------------------------------------------------------
# Synthetic generator

FEATURE_NAMES = ("precipitation", "temperature", "evapotranspiration")
# fraction of the remaining snowpack released per calendar month
_MELT_FRACTION = {3: 0.15, 4: 0.35, 5: 0.6, 6: 0.8, 7: 1.0}


def _river_tree(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random tree draining to node 0, with self loops; returns (A, depth)."""
    A = np.eye(n)
    depth = np.zeros(n, dtype=int)
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        A[parent, i] = 1.0
        depth[i] = depth[parent] + 1
    return A, depth


def generate_synthetic(n_nodes: int, n_years: int, seed: int) -> WatershedSeries:
    """Mountain-watershed toy with snow storage and a closed annual budget.

    Precipitation falls as snow below 0 degC and melts March through July;
    a linear reservoir shapes the monthly hydrograph, and each water year's
    runoff volume is set to a random fraction (0.80 to 0.97) of that year's
    node-mean P - ET, so the annual balance holds with a tight margin.
    """
    if int(n_nodes) < 1:
        raise DatasetError("n_nodes must be >= 1")
    if int(n_years) < 3:
        raise DatasetError("n_years must be >= 3")
    n, years = int(n_nodes), int(n_years)
    rng = np.random.default_rng(int(seed) % 2**64)
    T = 12 * years
    months = (WATER_YEAR_START - 1 + np.arange(T)) % 12 + 1
    year = np.arange(T) // 12

    A, depth = _river_tree(n, rng)
    elev = depth.astype(float)[None, :]

    temp_anom = rng.normal(0.0, 1.0, years)[year][:, None]
    seasonal = np.cos(2 * np.pi * (months - 7) / 12)[:, None]  # +1 July, -1 January
    temp = 6.0 + 11.0 * seasonal - 2.0 * elev + temp_anom + rng.normal(0.0, 1.5, (T, n))

    wet = 1.0 + 0.6 * np.cos(2 * np.pi * (months - 12) / 12)[:, None]  # wettest in December
    year_factor = rng.lognormal(0.0, 0.25, years)[year][:, None]
    precip = 70.0 * wet * year_factor * (1.0 + 0.15 * elev) * rng.lognormal(0.0, 0.35, (T, n))

    et = 4.0 * np.clip(temp, 0.0, None) * rng.lognormal(0.0, 0.1, (T, n))
    for yr in range(years):
        rows = slice(12 * yr, 12 * yr + 12)
        p_tot = precip[rows].mean(axis=1).sum()
        e_tot = et[rows].mean(axis=1).sum()
        if e_tot > 0.7 * p_tot:
            et[rows] *= 0.7 * p_tot / e_tot

    snow = np.zeros(n)
    available = np.empty((T, n))
    for t in range(T):
        is_snow = temp[t] < 0.0
        snow = snow + np.where(is_snow, precip[t], 0.0)
        rain = np.where(is_snow, 0.0, precip[t])
        frac = 1.0 if months[t] == 9 else _MELT_FRACTION.get(int(months[t]), 0.0)
        melt = snow * frac
        snow = snow - melt
        available[t] = rain + melt

    store, raw = 0.0, np.empty(T)
    for t in range(T):
        store += available[t].mean()
        raw[t] = 0.55 * store
        store -= raw[t]

    budget = precip.mean(axis=1) - et.mean(axis=1)
    efficiency = rng.uniform(0.80, 0.97, years)
    flow = np.empty(T)
    for yr in range(years):
        rows = slice(12 * yr, 12 * yr + 12)
        flow[rows] = raw[rows] * efficiency[yr] * budget[rows].sum() / raw[rows].sum()

    X = np.stack([precip, temp, et], axis=-1)
    return WatershedSeries(GraphSpec(A, 0), X, FEATURE_NAMES, flow, WATER_YEAR_START)


def annual_totals(values, start_month: int = WATER_YEAR_START) -> np.ndarray:
    """Sum a monthly series per complete water year (requires alignment)."""
    v = np.asarray(values, dtype=float)
    if start_month != WATER_YEAR_START or v.shape[0] % 12:
        raise DatasetError("annual totals need whole water years starting in October")
    return v.reshape(-1, 12).sum(axis=1)


def annual_budget(data: WatershedSeries) -> np.ndarray:
    """Per-water-year budget sum(P_mean - ET_mean) in mm."""
    return annual_totals(data.precip_mean() - data.et_mean(), data.start_month)
