"""Task-aware amortised variational meta-training.

Per task: blend ``theta`` with a random draw according to topic similarity,
take ``K`` plain gradient steps on the local Gaussian ``lambda`` (support
shots), then move ``theta`` one step against the task loss evaluated at the
adapted ``lambda`` plus ``1/T`` of the prior penalty.

The outer gradient is first order: the displacement produced by the inner
steps is held fixed, so ``theta`` reaches the loss through the initial blend
and through the KL term only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .autodiff import Tape
from .base_model import Model, ShotBatch, batch_logits, bernoulli_loglik, init_params
from .bayes import (
    GaussianParamVector,
    GlobalPriorConfig,
    kl_gaussians,
    kl_value,
    neg_log_prior,
    sample,
    sample_on_tape,
)
from .episodes import EpisodeSpec, TaskDataset, episode_indices
from .rng import stream
from .topic import (
    MetaTrainProfile,
    TopicProfile,
    adaptive_init,
    adaptive_init_on_tape,
    adaptive_steps,
    adaptive_z,
    meta_train_profile,
    random_init,
    topic_embedding,
)

LOSS_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite or exceeded the divergence guard."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 2e-3
    beta: float = 1e-3
    k_min: int = 2
    k_max: int = 8
    outer_iters: int = 300
    mc_train: int = 1
    mc_eval: int = 10
    prior: GlobalPriorConfig = field(default_factory=GlobalPriorConfig)
    seed: int = 0
    inner_on: str = "support"
    outer_on: str = "query"
    init_log_var: float = -5.0
    top_k: int = 10
    z_mode: str = "adaptive"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got k_min={self.k_min}, k_max={self.k_max}")
        if self.mc_train < 1 or self.mc_eval < 1:
            raise ValueError("Monte Carlo sample counts must be >= 1")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.inner_on != "support":
            raise ValueError("inner_on must be 'support'")
        if self.outer_on not in ("support", "query"):
            raise ValueError("outer_on must be 'support' or 'query'")
        if self.z_mode not in ("adaptive", "one"):
            raise ValueError("z_mode must be 'adaptive' or 'one'")

    def to_dict(self):
        d = asdict(self)
        d["prior"] = asdict(self.prior)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["prior"] = GlobalPriorConfig(**d["prior"])
        return cls(**d)


@dataclass
class TrainLogRow:
    outer_iter: int
    task_id: str
    z: float
    K: int
    expected_loglik: float
    kl_local: float
    neg_log_prior_term: float
    support_acc: float
    query_acc: float


LOG_COLUMNS = [f.name for f in fields(TrainLogRow)]


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def read_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(
                TrainLogRow(
                    int(rec["outer_iter"]),
                    rec["task_id"],
                    float(rec["z"]),
                    int(rec["K"]),
                    *(float(rec[c]) for c in LOG_COLUMNS[4:]),
                )
            )
        return rows


@dataclass
class Checkpoint:
    theta: GaussianParamVector
    model: Model
    meta_profile: MetaTrainProfile
    train_config: TrainConfig
    train_tasks: list
    log: list = field(default_factory=list)


def _guard(name: str, value: float):
    if not math.isfinite(value) or abs(value) > LOSS_LIMIT:
        raise TrainingDiverged(f"{name} = {value!r} (limit {LOSS_LIMIT:g})")


class TaskLoss(NamedTuple):
    """Tape nodes of one task objective; ``logits`` belong to the last draw."""

    loss: int
    expected_loglik: int
    kl: int
    logits: int


def task_loss(tape: Tape, lam, theta, batch: ShotBatch, model: Model, mc: int, seed, dropout: bool = True):
    """Record ``-E_q[log p(Y|S,C,phi)] + KL(q(phi; lam) || p(phi | theta))``.

    ``lam`` and ``theta`` are ``(mu, log_var)`` node pairs or
    :class:`GaussianParamVector`.  Noise and dropout masks come from
    ``stream(seed)`` so a fixed seed gives a deterministic objective.
    """
    if isinstance(lam, GaussianParamVector):
        lam = (tape.leaf(lam.mu), tape.leaf(lam.log_var))
    if isinstance(theta, GaussianParamVector):
        theta = (tape.leaf(theta.mu), tape.leaf(theta.log_var))
    rng = stream(*seed) if isinstance(seed, tuple) else stream(seed, "task-loss")
    n = tape.value(lam[0]).size
    ll = logits = None
    for _ in range(mc):
        phi = sample_on_tape(tape, lam, rng.standard_normal(n))
        logits = batch_logits(tape, phi, model.layout, batch, model.cfg, rng if dropout else None)
        term = bernoulli_loglik(tape, logits, batch.labels)
        ll = term if ll is None else tape.add(ll, term)
    ell = tape.scale(ll, 1.0 / mc)
    kl = kl_gaussians(tape, lam, theta)
    return TaskLoss(tape.sub(kl, ell), ell, kl, logits)


def _hit_rate(logits: np.ndarray, batch: ShotBatch) -> float:
    return float(np.mean((logits[:, 0] >= 0.0) == (batch.labels[:, 0] == 1)))


def adapt(theta: GaussianParamVector, lam0: GaussianParamVector, batch: ShotBatch, model: Model,
          cfg: TrainConfig, K: int, seed_keys: tuple):
    """K plain gradient steps on ``(mu, log_var)`` of the local Gaussian; ``theta`` is read-only.

    Returns ``(lambda_K, acc)`` where ``acc`` is the support accuracy of the
    sampled weights at the last step (``nan`` when ``K == 0``).
    """
    lam = lam0.copy()
    acc = float("nan")
    for k in range(K):
        tape = Tape()
        mu, lv = tape.leaf(lam.mu), tape.leaf(lam.log_var)
        out = task_loss(tape, (mu, lv), theta, batch, model, cfg.mc_train, (*seed_keys, k))
        _guard("inner loss", float(tape.value(out.loss)))
        acc = _hit_rate(tape.value(out.logits), batch)
        grads = tape.backward(out.loss)
        lam = GaussianParamVector(lam.mu - cfg.alpha * grads[mu], lam.log_var - cfg.alpha * grads[lv])
    return lam, acc


def _z_and_steps(cfg: TrainConfig, profile: TopicProfile, meta: MetaTrainProfile):
    z = 1.0 if cfg.z_mode == "one" else adaptive_z(profile, meta)
    return z, adaptive_steps(z, cfg.k_min, cfg.k_max)


def init_seed(cfg: TrainConfig, task_id: str) -> int:
    """Seed of the per-task random initialisation component (fixed across passes)."""
    return int(stream(cfg.seed, "init", task_id).integers(2**62))


class BatchCache:
    """Embedded arrays for every shot of a task, built once per clue budget."""

    def __init__(self, model: Model):
        self.model = model
        self._full = {}

    def episode(self, task: TaskDataset, spec: EpisodeSpec):
        key = (task.task_id, spec.clues_per_shot)
        if key not in self._full:
            self._full[key] = self.model.batch([s.truncated(spec.clues_per_shot) for s in task.shots])
        full = self._full[key]
        sup, qry = episode_indices(task, spec)
        return full.take(sup), full.take(qry), qry


def inner_adapt(theta, task: TaskDataset, spec: EpisodeSpec, cfg: TrainConfig, profiles, model: Model,
                k_override: int | None = None):
    """Adapt to ``task``'s support episode; returns ``(lambda_K, z, K)``."""
    profile, meta = profiles
    z, K = _z_and_steps(cfg, profile, meta)
    if k_override is not None:
        K = k_override
    sup_batch, _, _ = BatchCache(model).episode(task, spec)
    lam0 = adaptive_init(theta, z, init_seed(cfg, task.task_id))
    lam, _ = adapt(theta, lam0, sup_batch, model, cfg, K, (cfg.seed, "inner", task.task_id, spec.seed))
    return lam, z, K


def outer_step(theta: GaussianParamVector, task: TaskDataset, cfg: TrainConfig, T: int, profiles,
               spec: EpisodeSpec, model: Model, outer_iter: int = 0, batches: BatchCache | None = None):
    """One meta-update of ``theta`` from ``task``; returns ``(theta_new, TrainLogRow)``.

    The logged accuracies come from the sampled, dropout-perturbed weights of
    the passes already run for training, so they are noisy by design.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    profile, meta = profiles
    z, K = _z_and_steps(cfg, profile, meta)
    sup_batch, qry_batch, _ = (batches or BatchCache(model)).episode(task, spec)
    rand = random_init(len(theta), init_seed(cfg, task.task_id))
    lam0 = adaptive_init(theta, z, init_seed(cfg, task.task_id))
    keys = (cfg.seed, "inner", task.task_id, spec.seed, outer_iter)
    lam_k, sup_acc = adapt(theta, lam0, sup_batch, model, cfg, K, keys)

    tape = Tape()
    mu_t, lv_t = tape.leaf(theta.mu), tape.leaf(theta.log_var)
    mu0, lv0 = adaptive_init_on_tape(tape, mu_t, lv_t, z, rand)
    # inner displacement is a constant: first-order outer gradient
    mu_k = tape.add(mu0, tape.const(lam_k.mu - lam0.mu))
    lv_k = tape.add(lv0, tape.const(lam_k.log_var - lam0.log_var))
    outer_batch = qry_batch if cfg.outer_on == "query" else sup_batch
    out = task_loss(
        tape, (mu_k, lv_k), (mu_t, lv_t), outer_batch, model, cfg.mc_train,
        (cfg.seed, "outer", task.task_id, spec.seed, outer_iter),
    )
    prior = tape.scale(neg_log_prior(tape, (mu_t, lv_t), cfg.prior), 1.0 / T)
    total = tape.add(out.loss, prior)
    _guard("expected log-likelihood", float(tape.value(out.expected_loglik)))
    _guard("local KL", float(tape.value(out.kl)))
    _guard("prior term", float(tape.value(prior)))
    grads = tape.backward(total)
    new_theta = GaussianParamVector(theta.mu - cfg.beta * grads[mu_t], theta.log_var - cfg.beta * grads[lv_t])
    row = TrainLogRow(
        outer_iter,
        task.task_id,
        float(z),
        int(K),
        float(tape.value(out.expected_loglik)),
        max(0.0, kl_value(lam_k, theta)),
        float(tape.value(prior)),
        sup_acc,
        _hit_rate(tape.value(out.logits), outer_batch),
    )
    return new_theta, row


def initial_theta(model: Model, cfg: TrainConfig) -> GaussianParamVector:
    mu = init_params(model.layout, stream(cfg.seed, "theta-init"))
    return GaussianParamVector(mu, np.full(mu.size, cfg.init_log_var))


def build_profiles(tasks, model: Model, top_k: int):
    return {t.task_id: topic_embedding(t, model.table, top_k) for t in tasks}


def episode_seed(cfg: TrainConfig, outer_iter: int) -> int:
    return int(stream(cfg.seed, "episode-seed", outer_iter).integers(2**62))


def meta_train(corpus, cfg: TrainConfig, spec: EpisodeSpec, model: Model, progress=None) -> Checkpoint:
    """Run ``cfg.outer_iters`` shuffled passes over ``corpus`` (the meta-train tasks)."""
    if not corpus:
        raise ValueError("meta_train needs at least one task")
    profiles = build_profiles(corpus, model, cfg.top_k)
    meta = meta_train_profile(corpus, [profiles[t.task_id] for t in corpus])
    theta = initial_theta(model, cfg)
    T = len(corpus)
    batches = BatchCache(model)
    log = []
    for it in range(cfg.outer_iters):
        ep = replace(spec, seed=episode_seed(cfg, it))
        for j in stream(cfg.seed, "order", it).permutation(T):
            task = corpus[j]
            theta, row = outer_step(theta, task, cfg, T, (profiles[task.task_id], meta), ep, model, it, batches)
            log.append(row)
        if progress is not None:
            progress(it, log[-T:])
    return Checkpoint(theta, model, meta, cfg, [t.task_id for t in corpus], log)


# -- evaluation of one meta-test task ----------------------------------------


@dataclass
class EpisodeResult:
    task_id: str
    z: float
    K: int
    expected_loglik: float
    kl_local: float
    per_sample: np.ndarray  # (mc_eval, 3): recall, precision, accuracy
    labels: np.ndarray
    predictions: np.ndarray  # (mc_eval, n_query)
    query_ids: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.per_sample.std(axis=0)


def adapt_and_eval(ckpt: Checkpoint, task: TaskDataset, spec: EpisodeSpec, cfg: TrainConfig | None = None,
                   init_z: float | None = None) -> EpisodeResult:
    """Adapt on the support shots, score the query shots under ``mc_eval`` posterior draws.

    ``init_z`` overrides only the blend weight of the initialisation (the step
    count still follows the task's similarity); ``init_z=0`` is the
    random-initialisation baseline.
    """
    from .evaluation import metrics

    cfg = cfg or ckpt.train_config
    model = ckpt.model
    if task.task_id in ckpt.train_tasks:
        raise ValueError(f"task {task.task_id} was used for meta-training")
    profile = topic_embedding(task, model.table, cfg.top_k)
    z, K = _z_and_steps(cfg, profile, ckpt.meta_profile)
    blend = z if init_z is None else init_z
    sup_batch, qry_batch, qry = BatchCache(model).episode(task, spec)
    theta = ckpt.theta
    lam0 = adaptive_init(theta, blend, init_seed(cfg, task.task_id))
    lam, _ = adapt(theta, lam0, sup_batch, model, cfg, K, (cfg.seed, "eval", task.task_id, spec.seed))

    truths = qry_batch.labels[:, 0].astype(np.int64)
    preds, per, ll = [], [], []
    for s in range(cfg.mc_eval):
        draw = sample(lam, int(stream(cfg.seed, "eval-draw", task.task_id, spec.seed, s).integers(2**62)))
        tape = Tape()
        logits = tape.value(batch_logits(tape, tape.leaf(draw.phi), model.layout, qry_batch, model.cfg))
        ll.append(float(np.sum(truths[:, None] * logits - np.logaddexp(0.0, logits))))
        yhat = (logits[:, 0] >= 0.0).astype(np.int64)
        m = metrics(yhat, truths)
        preds.append(yhat)
        per.append([m.recall, m.precision, m.accuracy])
    return EpisodeResult(task.task_id, float(z), int(K), float(np.mean(ll)), max(0.0, kl_value(lam, theta)),
                         np.asarray(per), truths, np.asarray(preds), np.asarray(qry))
