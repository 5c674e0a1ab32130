import pytest

from hydrocrl.config import DEFAULTS, ConfigError, load_config


def _write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults():
    cfg = load_config()
    assert (cfg.n_nodes, cfg.n_years, cfg.data_seed) == (8, 35, 0)
    assert (cfg.split.train_years, cfg.split.val_years, cfg.split.test_years) == (20, 6, 9)
    assert cfg.train.mode == "crl" and not cfg.train.iw.enabled and cfg.train.pg_lambda == 0.1
    assert cfg.train.iw.K == 10 and cfg.train.iw.b is None
    assert cfg.uq.methods == ("gp", "dropout") and cfg.uq.n_iter == 30
    assert cfg.bounds.a == (0.5, 1.0, 2.0, 5.0, 100.0) and cfg.bounds.T == (125, 1000)
    assert cfg.data_path is None and cfg.out_dir is None


def test_overrides(tmp_path):
    cfg = load_config(_write(tmp_path, "[model]\nhidden = 16\n[train]\nmode = pg\niw = yes\n[iw]\nb = 3.5\n"))
    assert cfg.train.hidden == 16 and cfg.train.mode == "pg" and cfg.train.iw.enabled
    assert cfg.train.iw.b == 3.5 and cfg.model_name == "pg-iw"


@pytest.mark.parametrize("text, match", [
    ("[model]\nhiden = 3\n", "unknown key 'hiden'"),
    ("[modle]\nhidden = 3\n", r"unknown section \[modle\]"),
    ("[train]\nmode = fancy\n", "train.mode"),
    ("[train]\niw = maybe\n", "boolean"),
    ("[model]\nlr = fast\n", "fast"),
    ("[uq]\nmethods = gp, conformal\n", "uq.methods"),
    ("[iw]\nK = 1\n", "iw.K"),
    ("[data]\npath = nowhere\n", "not a directory"),
    ("no section header\n", "section"),
])
def test_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")


def test_seed_override():
    cfg = load_config(seed=2**64 - 1)
    assert cfg.data_seed == cfg.train.seed == cfg.uq.seed == 2**64 - 1
    with pytest.raises(ConfigError):
        load_config(seed=-1)


def test_text_round_trip(tmp_path):
    cfg = load_config(_write(tmp_path, "[model]\nepochs = 7\n"), seed=3)
    again = load_config(_write(tmp_path, cfg.to_text()))
    assert again.to_text() == cfg.to_text() and again.train == cfg.train


def test_with_train_updates_raw():
    cfg = load_config().with_train(mode="plain", iw=True)
    assert cfg.train.mode == "plain" and cfg.train.iw.enabled
    assert cfg.raw["train"]["mode"] == "plain" and cfg.raw["train"]["iw"] == "true"
    assert DEFAULTS["train"]["mode"] == "crl"
