"""Metrics and the experiment protocols: shot sweep, clue sweep, z ablation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .episodes import EpisodeSpec, split_tasks, subsample_task
from .trainer import Checkpoint, TrainConfig, adapt_and_eval, meta_train

METRIC_NAMES = ("recall", "precision", "accuracy")


@dataclass(frozen=True)
class PointMetrics:
    recall: float
    precision: float
    accuracy: float
    degenerate: bool = False


def metrics(predictions, truths) -> PointMetrics:
    """Recall/precision/accuracy with label 1 as the positive class.

    A zero denominator yields 0 for that metric and sets ``degenerate``.
    """
    p = np.asarray(predictions).astype(np.int64)
    t = np.asarray(truths).astype(np.int64)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truths {t.shape} differ in length")
    if p.size < 1:
        raise ValueError("need at least one prediction")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    degenerate = (tp + fp) == 0 or (tp + fn) == 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PointMetrics(recall, precision, float(np.mean(p == t)), degenerate)


@dataclass(frozen=True)
class MetricTriple:
    """Mean and std over posterior weight samples for each metric."""

    mean: dict
    std: dict
    n_tasks: int

    @property
    def accuracy(self) -> float:
        return self.mean["accuracy"]


def aggregate(results) -> MetricTriple:
    """Unweighted mean over tasks per posterior sample, then mean/std over samples."""
    if not results:
        raise ValueError("no results to aggregate")
    stacked = np.stack([r.per_sample for r in results])  # tasks x samples x 3
    per_sample = stacked.mean(axis=0)
    mean = {m: float(per_sample[:, k].mean()) for k, m in enumerate(METRIC_NAMES)}
    std = {m: float(per_sample[:, k].std()) for k, m in enumerate(METRIC_NAMES)}
    return MetricTriple(mean, std, len(results))


def evaluate_tasks(ckpt: Checkpoint, tasks, spec: EpisodeSpec, cfg: TrainConfig | None = None,
                   init_z=None, jobs: int = 1):
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(adapt_and_eval, ckpt, t, spec, cfg, init_z) for t in tasks]
            results = [f.result() for f in futs]
    else:
        results = [adapt_and_eval(ckpt, t, spec, cfg, init_z) for t in tasks]
    return sorted(results, key=lambda r: r.task_id)


@dataclass
class SweepResult:
    axis: str
    points: list  # (axis_value, MetricTriple)
    seed: int = 0

    def __post_init__(self):
        vals = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"sweep axis values must increase strictly: {vals}")

    def rows(self):
        """One row per sweep point with mean and std of every metric."""
        for value, triple in self.points:
            row = {"axis_value": value}
            for m in METRIC_NAMES:
                row[f"{m}_mean"] = triple.mean[m]
                row[f"{m}_std"] = triple.std[m]
            yield {**row, "n_tasks": triple.n_tasks, "seed": self.seed}

    def to_csv(self, path):
        cols = ["axis_value", *(f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")), "n_tasks", "seed"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def sweep_shots(corpus, cfg: TrainConfig, spec: EpisodeSpec, model, fractions, train_fraction=0.8,
                jobs: int = 1) -> SweepResult:
    """Retrain on a fraction of every meta-train task's shots; evaluate the held-out tasks."""
    fractions = list(fractions)
    if fractions != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    train, test = split_tasks(corpus, train_fraction, cfg.seed)
    points = []
    for f in fractions:
        sub = [subsample_task(t, f, cfg.seed) for t in train] if f < 1.0 else train
        need = spec.shots_per_class + spec.query_per_class
        for t in sub:
            for label in (0, 1):
                if t.label_indices(label).size < need:
                    raise ValueError(
                        f"fraction {f} leaves task {t.task_id} with {t.label_indices(label).size} "
                        f"shots of label {label}; episodes need {need}"
                    )
        ckpt = meta_train(sub, cfg, spec, model)
        points.append((f, aggregate(evaluate_tasks(ckpt, test, spec, cfg, jobs=jobs))))
    return SweepResult("shots-percentage", points, cfg.seed)


def sweep_clues(ckpt: Checkpoint, test_tasks, cfg: TrainConfig, spec: EpisodeSpec, clue_counts,
                jobs: int = 1) -> SweepResult:
    """Adapt and evaluate with every shot cut to its earliest ``x`` clues."""
    counts = list(clue_counts)
    if counts != sorted(counts):
        raise ValueError("clue counts must be ascending")
    if counts and counts[0] < 1:
        raise ValueError("clue counts must be >= 1")
    points = []
    for x in counts:
        res = evaluate_tasks(ckpt, test_tasks, replace(spec, clues_per_shot=int(x)), cfg, jobs=jobs)
        points.append((int(x), aggregate(res)))
    return SweepResult("clues-per-shot", points, cfg.seed)


@dataclass
class AblationResult:
    adaptive: MetricTriple
    fixed: MetricTriple
    adaptive_results: list
    fixed_results: list

    def rows(self):
        for arm, triple in (("adaptive_z", self.adaptive), ("z_one", self.fixed)):
            for m in METRIC_NAMES:
                yield {"arm": arm, "metric": m, "mean": triple.mean[m], "std": triple.std[m],
                       "n_tasks": triple.n_tasks}

    def to_csv(self, path, seed=0):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["arm", "metric", "mean", "std", "n_tasks", "seed"], lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({**{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}, "seed": seed})


def ablate_z(corpus, cfg: TrainConfig, spec: EpisodeSpec, model, train_fraction=0.8, jobs: int = 1):
    """Two full runs sharing every seed; the second forces z = 1 (init and step count)."""
    train, test = split_tasks(corpus, train_fraction, cfg.seed)
    arms = []
    for mode in ("adaptive", "one"):
        c = replace(cfg, z_mode=mode)
        ckpt = meta_train(train, c, spec, model)
        arms.append(evaluate_tasks(ckpt, test, spec, c, jobs=jobs))
    return AblationResult(aggregate(arms[0]), aggregate(arms[1]), arms[0], arms[1])
