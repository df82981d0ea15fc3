import json

import pytest

from drnd.cli import main, run, sha256_file
from drnd.config import SUBCOMMANDS, defaults, parse_config
from drnd.errors import ConfigurationError

TINY = {
    "verify-lemmas": "[verify-lemmas]\nmc_trials = 10000\nensemble_trials = 100000\nunbiased_ns = 1, 2\nenum_max_n = 2\n",
    "inconsistency": "[inconsistency]\nM = 6\ntrain_epochs = 2\nspread_ns = 1, 2\n[run]\nseeds = 0, 1\n",
    "heatmap": "[heatmap]\ndataset = point\npoints = 64\ngrid = 8\nepochs = 5\n",
    "train-online": "[train-online]\nsize = 4\nmax_episodes = 16\nn_envs = 4\n[run]\nseeds = 0, 1\n",
    "train-offline": "[train-offline]\ndataset_size = 1000\niterations = 5\ndrnd_epochs = 2\n",
}

# --- parsing ------------------------------------------------------------------


def test_empty_config_gives_defaults():
    for sub in ("train-online", "inconsistency", "heatmap", "train-offline"):
        s = parse_config("", sub).settings
        assert s["n_targets"] == 10 and s["alpha"] == 0.9
    s = parse_config("", "train-online").settings
    assert (s["gamma"], s["clip"], s["gae_lambda"]) == (0.99, 0.1, 0.95)


def test_values_override_defaults():
    cfg = parse_config("[train-online]\nsize = 6\nmethod = rnd\n[run]\nseeds = 3, 4\n", "train-online")
    assert cfg.settings["size"] == 6 and cfg.settings["method"] == "rnd" and cfg.seeds == (3, 4)


def test_other_sections_are_validated_but_ignored():
    cfg = parse_config("[heatmap]\ngrid = 9\n[train-online]\nsize = 5\n", "train-online")
    assert cfg.settings["size"] == 5 and "grid" not in cfg.settings


@pytest.mark.parametrize("text,fragment", [
    ("[train-online]\nalpha = 1.5\n", "train-online.alpha"),
    ("[train-online]\nsize = ten\n", "train-online.size"),
    ("[train-online]\nbogus = 1\n", "train-online.bogus"),
    ("[nope]\nx = 1\n", "nope"),
    ("[run]\nseeds =\n", "run.seeds"),
    ("[train-online]\nclip = 1\n", "train-online.clip"),
])
def test_errors_name_the_key(text, fragment):
    with pytest.raises(ConfigurationError, match=fragment.replace(".", r"\.")):
        parse_config(text, "train-online")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigurationError):
        parse_config("[train-online]\nalpha = 0.5\nalpha = 0.6\n", "train-online")


def test_unknown_subcommand():
    with pytest.raises(ConfigurationError):
        defaults("train-everything")


def test_digest_stable_and_sensitive():
    a = parse_config("[heatmap]\ngrid = 9\n", "heatmap")
    assert a.digest() == parse_config("[heatmap]\ngrid=9", "heatmap").digest()
    assert a.digest() != parse_config("[heatmap]\ngrid = 10\n", "heatmap").digest()


# --- CLI ------------------------------------------------------------------------


def test_invalid_subcommand_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    cfgf = tmp_path / "c.ini"
    cfgf.write_text("[train-online]\nalpha = 1.5\n")
    assert main(["train-online", "--config", str(cfgf), "--out", str(tmp_path)]) == 2
    assert "alpha" in capsys.readouterr().err


def test_verify_lemmas_small_run(tmp_path, monkeypatch):
    cfgf = tmp_path / "c.ini"
    cfgf.write_text(TINY["verify-lemmas"])
    monkeypatch.setenv("DRND_OUT", str(tmp_path / "env-root"))
    code = main(["verify-lemmas", "--config", str(cfgf)])
    root = tmp_path / "env-root" / "verify-lemmas"
    manifest = json.loads((root / "manifest.json").read_text())
    assert code == (0 if manifest["passed"] else 1)
    header = (root / "lemmas.csv").read_text().splitlines()[0]
    assert header == "lemma_id,config,analytic,estimate,stderr,trials,pass,seed"
    assert "k5_discrepancy.csv" in manifest["outputs"]


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_manifest_hashes_and_determinism(sub, tmp_path):
    cfg = parse_config(TINY[sub], sub)
    m1 = run(cfg, tmp_path / "a")
    m2 = run(cfg, tmp_path / "b")
    assert m1.outputs and m1.outputs == m2.outputs
    for name, digest in m1.outputs.items():
        assert sha256_file(tmp_path / "a" / sub / name) == digest
    assert not m1.errors


def test_workers_do_not_change_outputs(tmp_path):
    cfg = parse_config(TINY["train-online"], "train-online")
    assert run(cfg, tmp_path / "a").outputs == run(cfg, tmp_path / "b", workers=2).outputs
