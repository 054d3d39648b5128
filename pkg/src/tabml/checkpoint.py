"""JSON persistence for trained global parameters.

A checkpoint is one JSON document holding the parameter layout, ``mu`` and
``log_var`` as full-precision decimals, the model and embedding config, the
meta-train topic profile and the training config.  Keys are sorted and floats
use Python's shortest round-trip repr, so equal checkpoints are equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .base_model import EmbeddingTable, Model, ModelConfig, ParamLayout
from .bayes import GaussianParamVector
from .topic import MetaTrainProfile
from .trainer import Checkpoint, TrainConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one written by an incompatible format version."""


def gaussian_to_json(q: GaussianParamVector, layout: ParamLayout, config: dict) -> dict:
    if len(q) != layout.total_len:
        raise ValueError(f"parameter vector of length {len(q)} does not match layout ({layout.total_len})")
    return {
        "format_version": FORMAT_VERSION,
        "layout": layout.to_json(),
        "mu": [float(x) for x in q.mu],
        "log_var": [float(x) for x in q.log_var],
        "config": config,
    }


def gaussian_from_json(doc: dict) -> tuple[GaussianParamVector, ParamLayout]:
    _check_version(doc)
    layout = ParamLayout.from_json(doc["layout"])
    q = GaussianParamVector(np.asarray(doc["mu"], dtype=np.float64), np.asarray(doc["log_var"], dtype=np.float64))
    if len(q) != layout.total_len:
        raise CheckpointError(f"mu has {len(q)} entries but the layout needs {layout.total_len}")
    return q, layout


def _check_version(doc):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})")


def to_document(ckpt: Checkpoint) -> dict:
    config = {"model": ckpt.model.cfg.to_dict(), "embedding": ckpt.model.table.to_json()}
    doc = gaussian_to_json(ckpt.theta, ckpt.model.layout, config)
    doc["meta_profile"] = ckpt.meta_profile.to_json()
    doc["train_config"] = ckpt.train_config.to_dict()
    doc["train_tasks"] = list(ckpt.train_tasks)
    return doc


def dumps(ckpt: Checkpoint) -> str:
    return json.dumps(to_document(ckpt), sort_keys=True, allow_nan=False) + "\n"


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def from_document(doc: dict) -> Checkpoint:
    theta, layout = gaussian_from_json(doc)
    try:
        cfg = ModelConfig(**doc["config"]["model"])
        table = EmbeddingTable.from_json(doc["config"]["embedding"])
        model = Model(cfg, table, layout)
        meta = MetaTrainProfile.from_json(doc["meta_profile"])
        train_cfg = TrainConfig.from_dict(doc["train_config"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from None
    if model.layout != ParamLayout.for_config(cfg):
        raise CheckpointError("stored layout disagrees with the stored model config")
    return Checkpoint(theta, model, meta, train_cfg, list(doc.get("train_tasks", [])))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    return from_document(doc)
