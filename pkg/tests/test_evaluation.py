import csv
from dataclasses import replace

import numpy as np
import pytest

from tabml.base_model import Model, ModelConfig
from tabml.episodes import EpisodeSpec, SynthConfig, generate_synthetic, split_tasks
from tabml.evaluation import (
    METRIC_NAMES,
    MetricTriple,
    SweepResult,
    ablate_z,
    aggregate,
    evaluate_tasks,
    metrics,
    sweep_clues,
    sweep_shots,
)
from tabml.trainer import EpisodeResult, TrainConfig, meta_train

MODEL = Model.default(ModelConfig(vocab_size=60, embed_dim=4, lstm_hidden=3, clue_lstm_hidden=3, source_count=8,
                                  source_embed_dim=2, mlp_hidden=5, dropout_rate=0.3))
CORPUS = generate_synthetic(SynthConfig(vocab_size=60, tasks=5, shots_per_task=20, clues_per_shot=4,
                                        statement_len=5, clue_len=3, seed=2))
SPEC = EpisodeSpec(shots_per_class=3, clues_per_shot=4, query_per_class=3)
CFG = TrainConfig(k_min=1, k_max=3, outer_iters=2, mc_eval=3)


def test_metrics_worked_example():
    m = metrics([1, 0, 1, 1], [1, 1, 0, 1])
    assert (m.recall, m.precision, m.accuracy, m.degenerate) == (2 / 3, 2 / 3, 0.5, False)


def test_metrics_all_positive_predictions():
    m = metrics([1, 1, 1, 1], [1, 0, 1, 0])
    assert (m.recall, m.precision, m.accuracy) == (1.0, 0.5, 0.5)


def test_metrics_degenerate_and_errors():
    m = metrics([0, 0, 0], [1, 0, 1])
    assert m.precision == 0.0 and m.recall == 0.0 and m.degenerate
    assert metrics([0, 0], [0, 0]).accuracy == 1.0 and metrics([0, 0], [0, 0]).degenerate
    with pytest.raises(ValueError):
        metrics([1, 0], [1])
    with pytest.raises(ValueError):
        metrics([], [])


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
    perm = rng.permutation(50)
    assert metrics(p, t) == metrics(p[perm], t[perm])


def fake(task_id, per_sample):
    per = np.asarray(per_sample, dtype=float)
    return EpisodeResult(task_id, 1.0, 1, 0.0, 0.0, per, np.zeros(2), np.zeros((len(per), 2)), np.arange(2))


def test_aggregate_means_tasks_then_samples():
    a = fake("a", [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    b = fake("b", [[0.0, 0.5, 0.5], [1.0, 0.5, 0.5]])
    tri = aggregate([a, b])
    # per-sample task means: [0.5, 0.75, 0.75] and [0.5, 0.25, 0.25]
    assert tri.mean == {"recall": 0.5, "precision": 0.5, "accuracy": 0.5}
    assert tri.std == {"recall": 0.0, "precision": 0.25, "accuracy": 0.25}
    assert tri.n_tasks == 2 and tri.accuracy == 0.5
    with pytest.raises(ValueError):
        aggregate([])


def triple(x):
    return MetricTriple({m: x for m in METRIC_NAMES}, {m: 0.0 for m in METRIC_NAMES}, 3)


def test_sweep_result_rows_and_csv(tmp_path):
    res = SweepResult("clues-per-shot", [(1, triple(0.5)), (5, triple(0.75))], seed=4)
    rows = list(res.rows())
    assert [r["axis_value"] for r in rows] == [1, 5]
    assert rows[1]["accuracy_mean"] == 0.75 and rows[0]["seed"] == 4
    path = tmp_path / "s.csv"
    res.to_csv(path)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == 2 and float(back[1]["recall_mean"]) == 0.75 and back[0]["n_tasks"] == "3"
    with pytest.raises(ValueError):
        SweepResult("x", [(5, triple(0.5)), (5, triple(0.5))])


@pytest.fixture(scope="module")
def trained():
    train, test = split_tasks(CORPUS, 0.8, CFG.seed)
    return meta_train(train, CFG, SPEC, MODEL), test


def test_evaluate_tasks_is_sorted_and_repeatable(trained):
    ckpt, test = trained
    a = evaluate_tasks(ckpt, test, SPEC, CFG)
    b = evaluate_tasks(ckpt, test[::-1], SPEC, CFG)
    assert [r.task_id for r in a] == sorted(t.task_id for t in test)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.per_sample, y.per_sample)


def test_clue_sweep_at_full_length_equals_untruncated(trained):
    ckpt, test = trained
    full = aggregate(evaluate_tasks(ckpt, test, SPEC, CFG))
    res = sweep_clues(ckpt, test, CFG, SPEC, [2, 4, 9])
    assert [p[0] for p in res.points] == [2, 4, 9]
    assert res.points[1][1].mean == full.mean == res.points[2][1].mean
    with pytest.raises(ValueError):
        sweep_clues(ckpt, test, CFG, SPEC, [4, 2])
    with pytest.raises(ValueError):
        sweep_clues(ckpt, test, CFG, SPEC, [0, 2])


def test_shot_sweep_checks_episode_fit():
    with pytest.raises(ValueError, match="episodes need"):
        sweep_shots(CORPUS, replace(CFG, outer_iters=0), SPEC, MODEL, [0.3])
    res = sweep_shots(CORPUS, replace(CFG, outer_iters=0), SPEC, MODEL, [0.6, 1.0])
    assert res.axis == "shots-percentage" and len(res.points) == 2


def test_ablation_arms_share_tasks_and_seeds(tmp_path):
    res = ablate_z(CORPUS, CFG, SPEC, MODEL)
    assert [r.task_id for r in res.adaptive_results] == [r.task_id for r in res.fixed_results]
    assert all(r.z == 1.0 and r.K == CFG.k_min for r in res.fixed_results)
    again = ablate_z(CORPUS, CFG, SPEC, MODEL)
    assert again.adaptive.mean == res.adaptive.mean and again.fixed.mean == res.fixed.mean
    path = tmp_path / "a.csv"
    res.to_csv(path, seed=CFG.seed)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and {r["arm"] for r in rows} == {"adaptive_z", "z_one"}
