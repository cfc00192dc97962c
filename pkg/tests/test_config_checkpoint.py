import numpy as np
import pytest

from gridcast.checkpoint import load_checkpoint, save_checkpoint
from gridcast.config import RunConfig
from gridcast.errors import ConfigError, ShapeError, TensorFileError
from gridcast.dataio import write_tensor_file


def test_defaults_and_parse():
    cfg = RunConfig("unet")
    assert cfg["eta_max"] == 3e-4 and cfg["epochs_per_cycle"] == 7 and cfg["batch_size"] == 4
    assert cfg["top_snapshots"] == 3 and cfg["depth"] == 4
    text = "# comment\ndepth = 2   # inline\nhidden_loss = yes\nhidden_loss_weights = 0.5, 0.25,0.25\n\n"
    cfg = RunConfig.parse("unet", text)
    assert cfg["depth"] == 2 and cfg["hidden_loss"] is True
    assert cfg["hidden_loss_weights"] == (0.5, 0.25, 0.25)


def test_dumps_round_trip():
    cfg = RunConfig("gnn", {"arch": "resnet", "hidden": 8})
    assert RunConfig.parse("gnn", cfg.dumps()) == cfg


@pytest.mark.parametrize("kind,text", [
    ("unet", "bogus = 1"),
    ("gnn", "depth = 2"),
    ("unet", "depth"),
    ("unet", "depth = 2\ndepth = 3"),
    ("unet", "batch_size = 0"),
    ("unet", "eta_min = 1e-3"),
    ("unet", "hidden_loss = maybe"),
    ("gnn", "arch = transformer"),
    ("gnn", "hidden = wide"),
])
def test_rejects_bad_config(kind, text):
    with pytest.raises(ConfigError):
        RunConfig.parse(kind, text)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        RunConfig("cnn")


def test_missing_config_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        RunConfig.load("unet", tmp_path / "nope.txt")
    assert RunConfig.load("unet", None) == RunConfig("unet")


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"enc0.a.w": rng.standard_normal((2, 3, 3, 3)).astype(np.float32), "head.b": np.zeros(4, np.float32)}
    save_checkpoint(tmp_path / "ck", "unet", {"depth": 2, "base_channels": 2}, params)
    kind, cfg, back = load_checkpoint(tmp_path / "ck")
    assert kind == "unet" and cfg == {"depth": "2", "base_channels": "2"}
    for k, v in params.items():
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(TensorFileError):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path / "ck", "gnn", {}, {"w": np.zeros((2, 2), np.float32)})
    write_tensor_file(tmp_path / "ck" / "params" / "w.gct", np.zeros((3,), np.float32))
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "ck")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.txt").write_text("depth = 2\n")
    with pytest.raises(TensorFileError):
        load_checkpoint(tmp_path / "bad")
