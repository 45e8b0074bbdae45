from pathlib import Path

import pytest

from hijacklab.config import ConfigError, RunConfig, load_config, resolve

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.toml"


def _write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_empty_file_is_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, ""))
    assert cfg.weights.tau0 == 0.4
    assert cfg.weights.alpha == 0.05 and cfg.weights.beta == 0.05
    assert cfg.poison.rate == 0.10
    assert cfg.to_dict() == RunConfig().to_dict()


def test_example_documents_every_default():
    assert load_config(EXAMPLE).to_dict() == RunConfig().to_dict()
    text = EXAMPLE.read_text()
    for table, keys in RunConfig().to_dict().items():
        assert f"[{table}]" in text
        for k in keys:
            assert k in text, k


def test_alpha_beta_sum_rejected(tmp_path):
    with pytest.raises(ConfigError, match="alpha"):
        load_config(_write(tmp_path, "[weights]\nalpha = 0.5\nbeta = 0.6\n"))


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="weights.gamma"):
        load_config(_write(tmp_path, "[weights]\ngamma = 0.1\n"))


def test_unknown_table_rejected():
    with pytest.raises(ConfigError, match="optimizer"):
        resolve({"optimizer": {}})


def test_parse_error_has_line(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        load_config(_write(tmp_path, "[train]\nsteps = 5\nlr = = 1\n"))


@pytest.mark.parametrize("text,where", [
    ('[train]\nsteps = "many"\n', "train.steps"),
    ("[train]\nsteps = 0\n", "train.steps"),
    ("[train]\nbatch_size = 1.5\n", "train.batch_size"),
    ("[flow]\ntau_beta_params = 1.0\n", "flow.tau_beta_params"),
    ('[poison]\nstrategy = "flip"\n', "poison"),
    ("[poison]\ndelta = [[0.1]]\n", "poison.delta"),
    ('[trigger]\nfamily = "laser"\n', "trigger"),
    ("[weights]\ntau0 = 0.0\n", "weights"),
])
def test_bad_values(tmp_path, text, where):
    with pytest.raises(ConfigError, match=where):
        load_config(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_overrides_apply(tmp_path):
    cfg = load_config(_write(tmp_path, "[train]\nsteps = 7\nbetas = [0.8, 0.99]\n[flow]\nhidden_width = 9\n"))
    tc = cfg.train.train_config()
    assert tc.steps == 7 and tc.betas == (0.8, 0.99)
    assert cfg.flow.hidden_width == 9
    assert cfg.train.train_config(3, drop_bd=True).drop_bd
