"""Run configuration read from an INI-style ``key = value`` file.

Every section and key is optional; anything not listed in ``DEFAULTS`` is
rejected so that a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SplitSpec
from .iwtrain import IWConfig
from .rcgnn import MODES, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "data": {"path": "", "n_nodes": "8", "n_years": "35", "seed": "0"},
    "split": {"train_years": "20", "val_years": "6", "test_years": "9"},
    "model": {"hidden": "32", "head_hidden": "", "alpha": "0.01", "lr": "0.01",
              "weight_decay": "0.0005", "epochs": "300", "dropout": "0.2", "loss": "mse"},
    "train": {"mode": "crl", "iw": "false", "pg_lambda": "0.1", "seed": "0"},
    "iw": {"K": "10", "a": "1.0", "b": "", "refresh": "1", "epochs": "100"},
    "uq": {"methods": "gp, dropout", "model": "crl", "dropout_rate": "0.2", "n_iter": "30", "seed": "0"},
    "bounds": {"a": "0.5, 1, 2, 5, 100", "K": "2, 5, 10", "b_extra": "1.0",
               "delta": "0.05, 0.1", "T": "125, 1000"},
    "output": {"dir": ""},
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


@dataclass(frozen=True)
class BoundsGrid:
    a: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 100.0)
    K: tuple[int, ...] = (2, 5, 10)
    b_extra: float = 1.0
    delta: tuple[float, ...] = (0.05, 0.1)
    T: tuple[int, ...] = (125, 1000)


@dataclass(frozen=True)
class UQSettings:
    methods: tuple[str, ...] = ("gp", "dropout")
    model: str = "crl"
    dropout_rate: float = 0.2
    n_iter: int = 30
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data_path: Path | None
    n_nodes: int
    n_years: int
    data_seed: int
    split: SplitSpec
    train: TrainConfig
    uq: UQSettings
    bounds: BoundsGrid
    out_dir: Path | None
    raw: dict[str, dict[str, str]] = field(repr=False, default_factory=dict)

    @property
    def model_name(self) -> str:
        return self.train.name

    def with_train(self, **changes) -> RunConfig:
        from dataclasses import replace

        raw = {s: dict(kv) for s, kv in self.raw.items()}
        keys = {"mode": ("train", "mode"), "iw": ("train", "iw"), "seed": ("train", "seed")}
        for k, v in changes.items():
            sec, key = keys[k]
            if k == "iw":
                raw[sec][key] = "true" if v else "false"
                changes[k] = replace(self.train.iw, enabled=bool(v))
            else:
                raw[sec][key] = str(v)
        return replace(self, train=replace(self.train, **changes), raw=raw)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, kv in self.raw.items():
            cp[sec] = kv
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _parse(raw: dict[str, dict[str, str]], base: Path) -> RunConfig:
    d, s, m, t, w, u, b = (raw[k] for k in ("data", "split", "model", "train", "iw", "uq", "bounds"))
    try:
        iw = IWConfig(
            enabled=_bool(t["iw"]), K=int(w["K"]), a=float(w["a"]),
            b=float(w["b"]) if w["b"].strip() else None, refresh=int(w["refresh"]),
        )
        mode = t["mode"].strip()
        if mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {mode!r}")
        train = TrainConfig(
            lr=float(m["lr"]), weight_decay=float(m["weight_decay"]), epochs=int(m["epochs"]),
            seed=int(t["seed"]), mode=mode, hidden=int(m["hidden"]),
            head_hidden=int(m["head_hidden"]) if m["head_hidden"].strip() else None,
            alpha=float(m["alpha"]), dropout=float(m["dropout"]), pg_lambda=float(t["pg_lambda"]),
            iw=iw, iw_epochs=int(w["epochs"]), loss=m["loss"].strip(),
        )
        methods = tuple(x for x in u["methods"].replace(",", " ").split())
        bad = set(methods) - {"gp", "dropout"}
        if bad or not methods:
            raise ConfigError(f"uq.methods must be a non-empty subset of gp, dropout; got {u['methods']!r}")
        uq = UQSettings(methods, u["model"].strip(), float(u["dropout_rate"]), int(u["n_iter"]), int(u["seed"]))
        grid = BoundsGrid(_floats(b["a"]), _ints(b["K"]), float(b["b_extra"]), _floats(b["delta"]), _ints(b["T"]))
        split = SplitSpec(int(s["train_years"]), int(s["val_years"]), int(s["test_years"]))
        n_nodes, n_years, seed = int(d["n_nodes"]), int(d["n_years"]), int(d["seed"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if train.lr <= 0 or train.epochs < 0 or train.hidden < 1:
        raise ConfigError("model.lr must be > 0, model.epochs >= 0 and model.hidden >= 1")
    if not math.isfinite(train.pg_lambda) or train.pg_lambda < 0:
        raise ConfigError("train.pg_lambda must be a finite non-negative number")
    if train.loss not in ("mse", "abs"):
        raise ConfigError(f"model.loss must be mse or abs, got {train.loss!r}")
    if iw.K < 2 or iw.a <= 0 or iw.refresh < 1:
        raise ConfigError("iw.K must be >= 2, iw.a > 0 and iw.refresh >= 1")
    path = Path(d["path"]).expanduser() if d["path"].strip() else None
    if path is not None and not path.is_absolute():
        path = base / path
    if path is not None and not path.is_dir():
        raise ConfigError(f"data.path {str(path)!r} is not a directory")
    out = Path(raw["output"]["dir"]).expanduser() if raw["output"]["dir"].strip() else None
    return RunConfig(path, n_nodes, n_years, seed, split, train, uq, grid, out, raw)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read ``path`` (or only the defaults) and apply a global seed override.

    ``seed`` replaces the data, training and UQ seeds at once.
    """
    raw = {sec: dict(kv) for sec, kv in DEFAULTS.items()}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(" ".join(str(exc).split())) from None
        for sec in cp.sections():
            if sec not in DEFAULTS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, value in cp[sec].items():
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                raw[sec][key] = value
        base = path.resolve().parent
    if seed is not None:
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        for sec, key in (("data", "seed"), ("train", "seed"), ("uq", "seed")):
            raw[sec][key] = str(seed)
    return _parse(raw, base)
