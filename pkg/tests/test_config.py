import pytest

from rawflow import config
from rawflow.errors import ConfigError


def test_defaults_and_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("# toy\nmodel.d = 16\nmodel.heads = 2\ntrain.lr = 3e-4\n")
    run = config.load(tmp_path / "run.cfg", ["train.steps=10", "data.frequencies = 100, 200, 300, 400"])
    assert run.model.d == 16 and run.model.heads == 2
    assert run.train.lr == 3e-4 and run.train.steps == 10
    assert run.data.frequencies == (100.0, 200.0, 300.0, 400.0)


def test_dump_roundtrip():
    run = config.toy_config()
    again = config.load(None, config.dump(run).splitlines())
    assert again == run


def test_toy_acceptance_values():
    run = config.toy_config()
    assert (run.model.d, run.model.heads, run.model.L_joint, run.model.L_fused, run.model.D) == (32, 4, 1, 2, 8)
    assert run.data.num_samples // run.model.D == 32
    assert (run.train.steps, run.train.batch_size) == (2000, 16)


@pytest.mark.parametrize("line", [
    "train.loss_mode = huber",
    "model.d = abc",
    "nosuch.key = 1",
    "model.nosuch = 1",
    "model.d = 30",
    "train.ema_decay = 1.5",
    "model.rope_in_fused = maybe",
])
def test_invalid_values(line):
    with pytest.raises(ConfigError):
        config.load(None, [line])


def test_missing_equals():
    with pytest.raises(ConfigError):
        config.parse_pairs(["model.d 32"])


def test_bool_coercion():
    assert config.load(None, ["model.rope_in_fused = off"]).model.rope_in_fused is False
