import io
import json
import zipfile
from pathlib import Path

import numpy as np
import pytest

from topicsuggest import checkpoint
from topicsuggest import models as M
from topicsuggest.config import ConfigError, RunConfig, model_config_from_dict
from topicsuggest.evaluation import evaluate

TINY = M.NeuralConfig(emb_dim=8, n_filters=4, rnn_hidden=5, lstm_hidden=6, dense=8, max_epochs=1, batch_size=64)
REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def train_data(small_split):
    return M.TrainingData(small_split[0])


def rewrite_manifest(blob: bytes, **changes) -> bytes:
    src = zipfile.ZipFile(io.BytesIO(blob))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as dst:
        for info in src.infolist():
            data = src.read(info.filename)
            if info.filename == "manifest.json":
                m = json.loads(data)
                m.update(changes)
                data = json.dumps(m).encode()
            dst.writestr(info, data)
    return out.getvalue()


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_round_trip_every_variant(variant, train_data, small_split, tmp_path):
    model = M.train(M.ModelConfig(variant=variant, neural=TINY), train_data)
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    back = checkpoint.load(path, expected_variant=variant)
    assert checkpoint.to_bytes(back) == path.read_bytes()
    assert evaluate(back, small_split[1]).to_json() == evaluate(model, small_split[1]).to_json()


def test_checkpoint_bytes_deterministic(train_data):
    cfg = M.ModelConfig(variant="cts-cnn-cf", neural=TINY)
    a = checkpoint.to_bytes(M.train(cfg, train_data))
    b = checkpoint.to_bytes(M.train(cfg, train_data))
    assert a == b
    names = zipfile.ZipFile(io.BytesIO(a)).namelist()
    assert names[0] == "manifest.json" and names[1:] == sorted(names[1:])


def test_popularity_checkpoint_has_no_arrays(train_data, tmp_path):
    path = checkpoint.save(M.train(M.ModelConfig(variant="popularity"), train_data), tmp_path / "p.ckpt")
    m = checkpoint.read_manifest(path)
    assert m["arrays"] == [] and m["components"] == {}
    assert m["train_corpus_hash"] == train_data.digest


def test_layout_mismatch_refused(train_data, tmp_path):
    blob = checkpoint.to_bytes(M.train(M.ModelConfig(variant="popularity"), train_data))
    path = tmp_path / "old.ckpt"
    path.write_bytes(rewrite_manifest(blob, fv_layout_version="fv-0"))
    with pytest.raises(checkpoint.CheckpointError, match="layout"):
        checkpoint.load(path)


def test_bad_checkpoints(train_data, tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.ckpt")
    junk = tmp_path / "junk.ckpt"
    junk.write_text("not a zip")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(junk)
    blob = checkpoint.to_bytes(M.train(M.ModelConfig(variant="cf"), train_data))
    good = tmp_path / "cf.ckpt"
    good.write_bytes(blob)
    with pytest.raises(checkpoint.CheckpointError, match="holds cf"):
        checkpoint.load(good, expected_variant="cts-crf")
    stripped = tmp_path / "stripped.ckpt"
    stripped.write_bytes(rewrite_manifest(blob, components={"knn": checkpoint.read_manifest(good)["components"]["knn"]}))
    with pytest.raises(checkpoint.CheckpointError, match="lacks"):
        checkpoint.load(stripped)
    tampered = tmp_path / "tampered.ckpt"
    tampered.write_bytes(rewrite_manifest(blob, config_hash="0" * 16))
    with pytest.raises(checkpoint.CheckpointError, match="hash"):
        checkpoint.load(tampered)


def test_run_config_round_trip():
    cfg = RunConfig(seed=7)
    assert cfg.simulator.master_seed == 7 and cfg.model.seed == 7
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="unknown key bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="unknown key model.neural.depth"):
        RunConfig.from_dict({"model": {"neural": {"depth": 3}}})
    with pytest.raises(ConfigError, match="unknown key simulator.foo"):
        RunConfig.from_dict({"simulator": {"foo": 1}})
    with pytest.raises(ConfigError):
        model_config_from_dict({"variant": "cts-crf", "extra": True})


def test_invalid_json_and_values(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.json")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train_days": 0})


def test_partial_config_keeps_defaults():
    cfg = RunConfig.from_dict({"model": {"variant": "cts-rnn", "neural": {"emb_dim": 50}}})
    assert cfg.model.variant == "cts-rnn" and cfg.model.neural.emb_dim == 50
    assert cfg.model.neural.n_filters == M.NeuralConfig().n_filters
    assert isinstance(cfg.model.neural.widths, tuple)


def test_shipped_configs_load():
    default = RunConfig.load(REPO / "configs" / "default.json")
    assert default.to_json() == RunConfig().to_json()
    small = RunConfig.load(REPO / "configs" / "small.json")
    assert small.simulator.n_conversations < default.simulator.n_conversations
    assert np.isclose(sum(default.simulator.target_topic_distribution.values()), 1.0)
