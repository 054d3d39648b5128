"""Finite-difference checks of the three differentiable objectives.

Each check draws a small random model configuration so a full central
difference sweep over every coordinate stays cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import finite_diff_check
from .base_model import EmbeddingTable, Model, ModelConfig, init_params, shot_log_likelihood
from .bayes import GlobalPriorConfig, neg_log_prior
from .episodes import Clue, Shot
from .rng import stream
from .trainer import task_loss

TOLERANCE = 1e-4
OBJECTIVES = ("base_model", "meta_trainer", "bayes")


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_err: dict  # objective -> worst error over all configurations
    configs: int

    @property
    def ok(self) -> bool:
        return all(v < TOLERANCE for v in self.max_rel_err.values())


def random_model(rng: np.random.Generator) -> Model:
    cfg = ModelConfig(
        vocab_size=30,
        embed_dim=int(rng.integers(2, 4)),
        lstm_hidden=int(rng.integers(2, 4)),
        clue_lstm_hidden=int(rng.integers(2, 4)),
        source_count=3,
        source_embed_dim=2,
        mlp_hidden=int(rng.integers(2, 5)),
        dropout_rate=0.5,
    )
    return Model(cfg, EmbeddingTable.hashed(cfg.vocab_size, cfg.embed_dim, int(rng.integers(1000))))


def random_shot(rng: np.random.Generator, cfg: ModelConfig, min_clues: int = 0) -> Shot:
    statement = rng.integers(0, cfg.vocab_size, int(rng.integers(2, 6))).tolist()
    clues = [
        Clue(rng.integers(0, cfg.vocab_size, int(rng.integers(1, 4))).tolist(), int(rng.integers(cfg.source_count)), float(k))
        for k in range(int(rng.integers(min_clues, 4)))
    ]
    return Shot(statement, clues, int(rng.integers(2)))


def check_config(seed: int, index: int, step: float = 1e-4) -> dict:
    """Worst relative error per objective for configuration ``index``."""
    rng = stream(seed, "gradcheck", index)
    model = random_model(rng)
    layout, n = model.layout, model.layout.total_len
    phi = init_params(layout, rng) + rng.normal(0.0, 0.3, n)

    shot = random_shot(rng, model.cfg, min_clues=1)
    errs = {"base_model": finite_diff_check(
        lambda tape, p: shot_log_likelihood(shot, p, layout, model.table, tape), phi, step)}

    batch = model.batch([random_shot(rng, model.cfg) for _ in range(3)])
    packed = np.concatenate([
        phi, rng.uniform(-3.0, -1.0, n), phi + rng.normal(0.0, 0.1, n), rng.uniform(-3.0, -1.0, n),
    ])
    noise_seed = int(rng.integers(2**31))

    def objective(tape, p):
        mu_l, lv_l, mu_t, lv_t = (tape.slice(p, k * n, (n,)) for k in range(4))
        return task_loss(tape, (mu_l, lv_l), (mu_t, lv_t), batch, model, 1, (noise_seed,)).loss

    errs["meta_trainer"] = finite_diff_check(objective, packed, step)

    prior = GlobalPriorConfig(float(rng.uniform(1.0, 3.0)), float(rng.uniform(0.0, 1.0)))
    theta = np.concatenate([rng.normal(0.0, 1.0, n), rng.uniform(-2.0, 1.0, n)])
    errs["bayes"] = finite_diff_check(
        lambda tape, p: neg_log_prior(tape, (tape.slice(p, 0, (n,)), tape.slice(p, n, (n,))), prior), theta, step)
    return errs


def run(seed: int = 0, configs: int = 10, step: float = 1e-4) -> GradcheckReport:
    worst = dict.fromkeys(OBJECTIVES, 0.0)
    for i in range(configs):
        for name, err in check_config(seed, i, step).items():
            worst[name] = max(worst[name], float(err))
    return GradcheckReport(worst, configs)
