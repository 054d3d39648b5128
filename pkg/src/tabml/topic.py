"""Topic embeddings and the similarity-gated initialisation and step count."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .bayes import GaussianParamVector
from .rng import stream

RAND_MU_SCALE = 0.02
RAND_LOG_VAR = -5.0


@dataclass(frozen=True)
class TopicProfile:
    word_weights: dict
    embedding: np.ndarray


@dataclass(frozen=True)
class MetaTrainProfile:
    embedding: np.ndarray
    task_sizes: dict

    def to_json(self):
        return {"embedding": [float(x) for x in self.embedding], "task_sizes": dict(self.task_sizes)}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["embedding"], dtype=np.float64), {k: int(v) for k, v in d["task_sizes"].items()})


def topic_embedding(task, table, top_k: int = 10) -> TopicProfile:
    """Frequency-weighted mean of the ``top_k`` most frequent statement words."""
    if not task.shots:
        raise ValueError(f"task {task.task_id} has no shots")
    counts = Counter(t for shot in task.shots for t in shot.statement)
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    total = sum(c for _, c in kept)
    weights = {int(t): c / total for t, c in kept}
    ids = np.fromiter(weights.keys(), dtype=np.int64)
    w = np.fromiter(weights.values(), dtype=np.float64)
    return TopicProfile(weights, w @ table.rows[ids])


def meta_train_profile(tasks, profiles) -> MetaTrainProfile:
    sizes = {t.task_id: len(t.shots) for t in tasks}
    total = sum(sizes.values())
    emb = sum((sizes[t.task_id] / total) * p.embedding for t, p in zip(tasks, profiles))
    return MetaTrainProfile(np.asarray(emb, dtype=np.float64), sizes)


def adaptive_z(task_profile: TopicProfile, meta: MetaTrainProfile) -> float:
    """Cosine similarity clamped to [0, 1]; 0 if either embedding vanishes."""
    a, b = task_profile.embedding, meta.embedding
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, max(0.0, (a @ b) / (na * nb))))


def random_init(n: int, seed: int) -> GaussianParamVector:
    """The random component blended in for dissimilar topics."""
    mu = stream(seed, "init-rand").normal(0.0, RAND_MU_SCALE, n)
    return GaussianParamVector(mu, np.full(n, RAND_LOG_VAR))


def adaptive_init(theta: GaussianParamVector, z: float, seed: int) -> GaussianParamVector:
    """``z * theta + (1 - z) * theta_rand``; variances are blended in sigma^2 space."""
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"z must lie in [0, 1], got {z}")
    if z == 1.0:
        return theta.copy()
    rand = random_init(len(theta), seed)
    mu = z * theta.mu + (1.0 - z) * rand.mu
    var = z * theta.var + (1.0 - z) * rand.var
    return GaussianParamVector(mu, np.log(var))


def adaptive_init_on_tape(tape: Tape, mu: int, log_var: int, z: float, rand: GaussianParamVector):
    """Same blend as :func:`adaptive_init`, recorded so gradients reach ``theta``."""
    if z == 1.0:
        return mu, log_var
    mu0 = tape.add(tape.scale(mu, z), tape.const((1.0 - z) * rand.mu))
    var0 = tape.add(tape.scale(tape.exp(log_var), z), tape.const((1.0 - z) * rand.var))
    return mu0, tape.log(var0)


def adaptive_steps(z: float, k_min: int, k_max: int) -> int:
    if not 1 <= k_min <= k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got {k_min}, {k_max}")
    # rounding guards against 5.000000000000001-style ceilings
    k = math.ceil(round(z * k_min + (1.0 - z) * k_max, 9))
    return int(min(k_max, max(k_min, k)))
