"""``hydrocrl`` command line: generate, train, evaluate, uq, bounds, report.

All artifacts of one run live under a single directory::

    config.ini
    data/{graph,features,target,meta}.csv
    models/<name>/{checkpoint.csv,train_log.csv,train_violations.csv}
    eval/{report,predictions}.csv, eval/profile_<name>.csv, eval/violations_<name>.csv
    uq/intervals_<method>.csv, uq/summary.csv
    bounds/bounds.csv
    report.txt
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .constraints import violation_report
from .dataio import (DatasetError, WatershedSeries, annual_budget, annual_totals, generate_synthetic,
                     load_dataset, save_dataset, split)
from .experiment import evaluate_models, model_mode, run_uq
from .iwtrain import bound_grid, write_bounds_csv
from .rcgnn import load_checkpoint, predict, save_checkpoint, train
from .uq import GPConfig

CANONICAL_ORDER = ("plain", "plain-iw", "pg", "pg-iw", "crl", "crl-iw")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.out_dir is not None:
        out = cfg.out_dir
    else:
        out = Path("runs") / _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {str(out)!r}: {exc.strerror}") from None
    return out


def _resolve(args) -> tuple[RunConfig, Path]:
    """Load the config, pick the run directory and pin the resolved config there.

    Without ``--config`` and ``--seed`` an existing run directory's own
    ``config.ini`` is reused, so later commands need only ``--out``.
    """
    existing = Path(args.out) / "config.ini" if args.out else None
    if args.config is None and args.seed is None and existing is not None and existing.is_file():
        cfg = load_config(existing)
    else:
        cfg = load_config(args.config, args.seed)
    out = _run_dir(args, cfg)
    text = cfg.to_text()
    pinned = out / "config.ini"
    if pinned.is_file() and pinned.read_text(encoding="utf-8") != text:
        raise CommandError(f"{pinned} was written by a different configuration; use a fresh --out")
    pinned.write_text(text, encoding="utf-8")
    return cfg, out


def _dataset(cfg: RunConfig, out: Path) -> WatershedSeries:
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    if (out / "data" / "graph.csv").is_file():
        return load_dataset(out / "data")
    return generate_synthetic(cfg.n_nodes, cfg.n_years, cfg.data_seed)


def _fingerprint(data: WatershedSeries) -> str:
    h = hashlib.sha256()
    for arr in (data.graph.adjacency, data.features, data.target):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _model_order(names) -> list[str]:
    rank = {n: i for i, n in enumerate(CANONICAL_ORDER)}
    return sorted(names, key=lambda n: (rank.get(n, len(rank)), n))


def _load_model(out: Path, name: str, train_data: WatershedSeries):
    path = out / "models" / name / "checkpoint.csv"
    if not path.is_file():
        raise CommandError(f"no checkpoint for model {name!r} at {path}")
    params, meta = load_checkpoint(path)
    if meta.get("train_fingerprint") != _fingerprint(train_data):
        raise CommandError(f"checkpoint {path} was trained on different data than the configured dataset")
    if meta.get("feature_names") != ";".join(train_data.feature_names) or params.m != train_data.m:
        raise CommandError(f"checkpoint {path} expects features {meta.get('feature_names')!r}")
    return params, meta


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg, out = _resolve(args)
    data = generate_synthetic(cfg.n_nodes, cfg.n_years, cfg.data_seed)
    save_dataset(data, out / "data")
    budget = annual_budget(data)
    flow = annual_totals(data.target, data.start_month)
    slack = budget - flow
    print(f"n={data.n} T={data.T} water_years={budget.size} data={out / 'data'}")
    print(_table(["year", "budget_mm", "flow_mm", "slack_mm"],
                 [[i, float(b), float(f), float(s)] for i, (b, f, s) in enumerate(zip(budget, flow, slack))]))
    print(f"min_slack_mm={float(slack.min()):.4f}")
    return 0


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    mode = args.mode or cfg.train.mode
    iw = cfg.train.iw.enabled if args.iw is None else args.iw
    tcfg = cfg.with_train(mode=mode, iw=iw).train
    data = _dataset(cfg, out)
    tr, va, _ = split(data, cfg.split)
    result = train(None, tr, va, tcfg)
    name = tcfg.name
    mdir = out / "models" / name
    mdir.mkdir(parents=True, exist_ok=True)
    meta = {"model": name, "mode": tcfg.mode, "iw": int(tcfg.iw.enabled), "seed": tcfg.seed,
            "feature_names": ";".join(tr.feature_names), "train_fingerprint": _fingerprint(tr),
            "best_val_nnse": repr(result.best_val_nnse)}
    save_checkpoint(result.params, mdir / "checkpoint.csv", meta)
    result.write_log(mdir / "train_log.csv")
    rep = violation_report(predict(result.params, tr, project=tcfg.mode == "crl"), tr)
    rep.to_csv(mdir / "train_violations.csv")
    if tcfg.mode == "crl" and rep.fraction != 0:
        raise CommandError(f"projected training predictions violate the budget in {rep.fraction:.3f} of years")
    print(f"model={name} epochs={tcfg.epochs} best_val_nnse={result.best_val_nnse:.4f} "
          f"train_violation_fraction={rep.fraction} checkpoint={mdir / 'checkpoint.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out = _resolve(args)
    data = _dataset(cfg, out)
    tr, _, te = split(data, cfg.split)
    if args.models:
        names = [n.strip() for n in args.models.split(",") if n.strip()]
    else:
        names = [p.parent.name for p in (out / "models").glob("*/checkpoint.csv")]
    if not names:
        raise CommandError(f"no trained models under {out / 'models'}; run 'train' first")
    models = {n: _load_model(out, n, tr)[0] for n in _model_order(names)}
    report = evaluate_models(models, te)
    report.write(out / "eval")
    rows = []
    for n in models:
        v = report.violations.get(n)
        rows.append([n, report.nnse(n, "high_flow"), report.nnse(n, "all"),
                     report.scores[(n, "high_flow")]["mae"], "" if v is None else v.fraction])
    print(_table(["model", "nnse_high_flow", "nnse_all", "mae_high_flow", "violation_fraction"], rows))
    return 0


def cmd_uq(args) -> int:
    cfg, out = _resolve(args)
    name = args.model or cfg.uq.model
    data = _dataset(cfg, out)
    tr, _, te = split(data, cfg.split)
    params, _ = _load_model(out, name, tr)
    res = run_uq(params, tr, te, project=model_mode(name) == "crl", methods=cfg.uq.methods,
                 gp_config=GPConfig(), dropout_rate=cfg.uq.dropout_rate, n_iter=cfg.uq.n_iter,
                 seed=cfg.uq.seed)
    res.write(out / "uq")
    print(f"model={name}")
    cols = ["method", "subset", "n_months", "coverage_pct", "mean_width_mm", "point_nnse"]
    print(_table(cols, [[r[c] for c in cols] for r in res.summary()]))
    return 0


def cmd_bounds(args) -> int:
    cfg, out = _resolve(args)
    g = cfg.bounds
    reports = bound_grid(g.a, g.K, g.delta, g.T, b_extra=g.b_extra)
    (out / "bounds").mkdir(exist_ok=True)
    write_bounds_csv(reports, out / "bounds" / "bounds.csv")
    flagged = sum(r.flagged for r in reports)
    outside = sum(not r.all_conditions for r in reports)
    print(f"rows={len(reports)} flagged={flagged} hypotheses_not_met={outside} csv={out / 'bounds' / 'bounds.csv'}")
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    cfg, out = _resolve(args)
    parts = []
    ev, uq, bd = out / "eval" / "report.csv", out / "uq" / "summary.csv", out / "bounds" / "bounds.csv"
    if ev.is_file():
        rows = _read_csv(ev)
        parts.append("Test-year skill\n" + _table(
            ["model", "subset", "nnse", "nse", "mae", "violation_fraction"],
            [[r["model"], r["subset"], float(r["nnse"]), float(r["nse"]), float(r["mae"]), r["violation_fraction"]]
             for r in rows]))
    if uq.is_file():
        rows = _read_csv(uq)
        parts.append("Prediction intervals\n" + _table(
            ["method", "subset", "coverage_pct", "mean_width_mm", "point_nnse"],
            [[r["method"], r["subset"], float(r["coverage_pct"]), float(r["mean_width_mm"]), float(r["point_nnse"])]
             for r in rows]))
    if bd.is_file():
        rows = _read_csv(bd)
        parts.append("Bound grid\n" + _table(
            ["a", "K", "delta", "T", "d2", "ratio", "conditions_ok", "flagged"],
            [[float(r["a"]), r["K"], float(r["delta"]), r["T"], float(r["d2"]), float(r["ratio"]),
              r["conditions_ok"], r["flagged"]] for r in rows]))
    if not parts:
        raise CommandError(f"nothing to report under {out}; run evaluate, uq or bounds first")
    text = "\n\n".join(parts) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(" ".join(message.split()))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI-style run configuration")
    common.add_argument("--out", default=argparse.SUPPRESS, help="run directory (default runs/<timestamp>)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed in the config")

    p = _Parser(prog="hydrocrl", description="Constrained streamflow forecasting on watershed graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", parents=[common], help="write a synthetic watershed dataset")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--mode", choices=("plain", "pg", "crl"))
    t.add_argument("--iw", dest="iw", action="store_true", default=None, help="enable importance weighting")
    t.add_argument("--no-iw", dest="iw", action="store_false")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("evaluate", parents=[common], help="score trained models on the test years")
    e.add_argument("--models", help="comma-separated model names (default: every trained model)")
    e.set_defaults(func=cmd_evaluate)
    u = sub.add_parser("uq", parents=[common], help="GP and MC-dropout prediction intervals")
    u.add_argument("--model", help="model name (default from [uq] model)")
    u.set_defaults(func=cmd_uq)
    b = sub.add_parser("bounds", parents=[common], help="evaluate the generalization-bound grid")
    b.set_defaults(func=cmd_bounds)
    r = sub.add_parser("report", parents=[common], help="summarize a run directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CommandError, ConfigError, DatasetError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
