import pytest

from tristream import config
from tristream.errors import ConfigError
from tristream.sampler import StrideTriple


def test_defaults_without_file():
    cfg = config.load()
    assert cfg == config.DEFAULTS


def test_file_parsing_types_and_comments(tmp_path):
    p = tmp_path / "run.txt"
    p.write_text("# experiment\nseed = 7\ntrain.lr = 0.01  # smaller\nmodel.head = bilstm\n\n"
                 "model.slow_channels = 4, 8, 8\nmodel.beta = 0.25\n")
    cfg = config.load(str(p))
    assert cfg["seed"] == 7 and cfg["train.lr"] == 0.01
    assert cfg["model.head"] == "bilstm"
    assert cfg["model.slow_channels"] == (4, 8, 8)
    assert isinstance(cfg["model.beta"], float)


def test_precedence_file_then_set_then_seed(tmp_path):
    p = tmp_path / "run.txt"
    p.write_text("seed = 1\ntrain.epochs = 3\n")
    cfg = config.load(str(p), ["train.epochs=9", "seed=2"], seed=5)
    assert cfg["train.epochs"] == 9
    assert cfg["seed"] == 5


@pytest.mark.parametrize("bad", [["nope.key=1"], ["seed=abc"], ["seed"]])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        config.load(None, bad)


def test_missing_file_and_bad_line(tmp_path):
    with pytest.raises(ConfigError):
        config.load(str(tmp_path / "absent.txt"))
    p = tmp_path / "bad.txt"
    p.write_text("seed 3\n")
    with pytest.raises(ConfigError, match=":1:"):
        config.load(str(p))


def test_dumps_round_trip(tmp_path):
    cfg = config.load(None, ["model.pathways=single,slow", "train.lr=0.02"])
    p = tmp_path / "c.txt"
    p.write_text(config.dumps(cfg))
    assert config.load(str(p)) == cfg


def test_builders_follow_config():
    cfg = config.load(None, ["model.theta2=2", "model.theta3=1", "train.epochs=2"])
    net = config.network_config(cfg)
    assert net.strides == StrideTriple(8, 2, 1)
    assert net.clip_len == cfg["data.frames"]
    assert config.train_config(cfg).epochs == 2
    assert config.synthetic_spec(cfg).size == cfg["data.size"]
