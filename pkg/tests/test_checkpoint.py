import json

import numpy as np
import pytest

from tabml import checkpoint
from tabml.base_model import Model, ModelConfig
from tabml.episodes import EpisodeSpec, SynthConfig, generate_synthetic
from tabml.trainer import TrainConfig, meta_train

MODEL = Model.default(ModelConfig(vocab_size=60, embed_dim=4, lstm_hidden=3, clue_lstm_hidden=3, source_count=8,
                                  source_embed_dim=2, mlp_hidden=5, dropout_rate=0.3))
TASKS = generate_synthetic(SynthConfig(vocab_size=60, tasks=3, shots_per_task=14, clues_per_shot=3,
                                       statement_len=5, clue_len=3, seed=4))
SPEC = EpisodeSpec(shots_per_class=3, clues_per_shot=3, query_per_class=3)
CFG = TrainConfig(k_min=1, k_max=2, outer_iters=1, mc_eval=2)


@pytest.fixture(scope="module")
def ckpt():
    return meta_train(TASKS, CFG, SPEC, MODEL)


def test_equal_runs_give_equal_bytes(ckpt, tmp_path):
    again = meta_train(TASKS, CFG, SPEC, MODEL)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    checkpoint.save(ckpt, a)
    checkpoint.save(again, b)
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_is_exact(ckpt, tmp_path):
    path = tmp_path / "c.json"
    checkpoint.save(ckpt, path)
    back = checkpoint.load(path)
    assert back.theta.equals(ckpt.theta)
    assert back.model.layout == ckpt.model.layout and back.model.cfg == ckpt.model.cfg
    np.testing.assert_array_equal(back.model.table.rows, ckpt.model.table.rows)
    np.testing.assert_array_equal(back.meta_profile.embedding, ckpt.meta_profile.embedding)
    assert back.train_config == ckpt.train_config and back.train_tasks == ckpt.train_tasks
    assert checkpoint.dumps(back) == path.read_text()


def test_version_gate(ckpt, tmp_path):
    doc = checkpoint.to_document(ckpt)
    doc["format_version"] = 99
    path = tmp_path / "v.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(checkpoint.CheckpointError, match="format_version 99"):
        checkpoint.load(path)


def test_damaged_documents(ckpt, tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.json")
    path = tmp_path / "bad.json"
    path.write_text("{oops")
    with pytest.raises(checkpoint.CheckpointError, match="not valid JSON"):
        checkpoint.load(path)
    doc = checkpoint.to_document(ckpt)
    doc["mu"] = doc["mu"][:-1]
    doc["log_var"] = doc["log_var"][:-1]
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_document(doc)
    doc = checkpoint.to_document(ckpt)
    del doc["meta_profile"]
    with pytest.raises(checkpoint.CheckpointError, match="missing field"):
        checkpoint.from_document(doc)
    # a checkpoint error is still a ValueError for callers that only know that
    assert issubclass(checkpoint.CheckpointError, ValueError)
