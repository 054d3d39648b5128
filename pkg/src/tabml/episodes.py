"""Tasks, shots and clues; JSONL corpora; episode sampling; synthetic data.

The synthetic generator draws label-bearing tokens from two global stance
pools (``T+`` for true, ``T-`` for false) and everything else from a
task-specific background ``P_tau`` plus shared filler.  Because the stance
pools are disjoint from every background pool, the exact posterior of the
label depends only on the stance tokens, which makes :func:`bayes_oracle`
computable without knowing the task a shot came from.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import stream


@dataclass(frozen=True)
class Clue:
    tokens: tuple
    source: int
    time: float


@dataclass(frozen=True)
class Shot:
    statement: tuple
    clues: tuple
    label: int

    def truncated(self, n_clues: int) -> "Shot":
        """Keep the ``n_clues`` earliest clues."""
        if n_clues >= len(self.clues):
            return self
        return replace(self, clues=self.clues[:n_clues])


@dataclass
class TaskDataset:
    task_id: str
    shots: list
    support: tuple = ()
    query: tuple = ()

    def __post_init__(self):
        if set(self.support) & set(self.query):
            raise ValueError(f"task {self.task_id}: support and query overlap")

    def label_indices(self, label: int) -> np.ndarray:
        return np.array([k for k, s in enumerate(self.shots) if s.label == label], dtype=np.int64)

    def __len__(self):
        return len(self.shots)


@dataclass(frozen=True)
class EpisodeSpec:
    shots_per_class: int = 6
    clues_per_shot: int = 30
    query_per_class: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("shots_per_class", "clues_per_shot", "query_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


# -- JSONL ------------------------------------------------------------------


def _shot_from_json(obj, where):
    try:
        statement = obj["statement"]
        label = obj["label"]
        clues_raw = obj.get("clues", [])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{where}: missing field {exc}") from None
    if label not in (0, 1) or isinstance(label, bool):
        raise ValueError(f"{where}: field 'label' must be 0 or 1, got {label!r}")
    if not isinstance(statement, list) or not statement:
        raise ValueError(f"{where}: field 'statement' must be a non-empty list of token ids")
    if not all(isinstance(t, int) and t >= 0 for t in statement):
        raise ValueError(f"{where}: field 'statement' holds a non-token value")
    clues = []
    for j, c in enumerate(clues_raw):
        try:
            toks, src, time = c["tokens"], c["source"], c["time"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{where}, clue {j}: missing field {exc}") from None
        if not isinstance(toks, list) or not toks or not all(isinstance(t, int) and t >= 0 for t in toks):
            raise ValueError(f"{where}, clue {j}: field 'tokens' must be a non-empty list of token ids")
        if not isinstance(src, int) or src < 0:
            raise ValueError(f"{where}, clue {j}: field 'source' must be a non-negative int")
        if not isinstance(time, (int, float)) or time < 0 or not math.isfinite(time):
            raise ValueError(f"{where}, clue {j}: field 'time' must be a non-negative real")
        clues.append(Clue(tuple(toks), src, float(time)))
    times = [c.time for c in clues]
    if times != sorted(times):
        warnings.warn(f"{where}: clue times not ascending; re-sorted", stacklevel=3)
        clues.sort(key=lambda c: c.time)
    return Shot(tuple(statement), tuple(clues), int(label))


def load_corpus(path, vocab_size: int | None = None) -> list:
    """Read one task per line; raise ``ValueError`` naming the line and field."""
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "task_id" not in obj or "shots" not in obj:
                raise ValueError(f"{where}: field 'task_id' and 'shots' are required")
            if not isinstance(obj["shots"], list):
                raise ValueError(f"{where}: field 'shots' must be a list")
            shots = [_shot_from_json(s, f"{where}, shot {k}") for k, s in enumerate(obj["shots"])]
            if vocab_size is not None:
                for k, s in enumerate(shots):
                    top = max([*s.statement, *(t for c in s.clues for t in c.tokens)])
                    if top >= vocab_size:
                        raise ValueError(f"{where}, shot {k}: token {top} >= vocab_size {vocab_size}")
            tasks.append(TaskDataset(str(obj["task_id"]), shots))
    return tasks


def task_to_json(task: TaskDataset) -> dict:
    return {
        "task_id": task.task_id,
        "shots": [
            {
                "statement": list(s.statement),
                "label": s.label,
                "clues": [{"tokens": list(c.tokens), "source": c.source, "time": c.time} for c in s.clues],
            }
            for s in task.shots
        ],
    }


def save_corpus(tasks, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_json(t), separators=(",", ":")) + "\n")


# -- episodes ---------------------------------------------------------------


def episode_indices(task: TaskDataset, spec: EpisodeSpec):
    """Class-balanced, disjoint (support, query) shot indices."""
    rng = stream(spec.seed, "episode", task.task_id)
    need = spec.shots_per_class + spec.query_per_class
    sup, qry = [], []
    for label in (0, 1):
        idx = task.label_indices(label)
        if idx.size < need:
            raise ValueError(
                f"task {task.task_id}: label {label} has {idx.size} shots, episode needs {need}"
            )
        pick = rng.permutation(idx)[:need]
        sup.append(np.sort(pick[: spec.shots_per_class]))
        qry.append(np.sort(pick[spec.shots_per_class :]))
    return np.concatenate(sup), np.concatenate(qry)


def sample_episode(task: TaskDataset, spec: EpisodeSpec):
    """Return ``(support, query)`` shot lists with clues cut to the earliest ``clues_per_shot``."""
    sup, qry = episode_indices(task, spec)
    c = spec.clues_per_shot
    return [task.shots[k].truncated(c) for k in sup], [task.shots[k].truncated(c) for k in qry]


def split_tasks(tasks, train_fraction: float = 0.8, seed: int = 0):
    """Seeded split of whole tasks into (meta_train, meta_test)."""
    n = len(tasks)
    if n < 2:
        raise ValueError(f"need at least 2 tasks to split, got {n}")
    order = stream(seed, "split").permutation(n)
    n_train = min(max(int(math.floor(train_fraction * n)), 1), n - 1)
    return [tasks[k] for k in sorted(order[:n_train])], [tasks[k] for k in sorted(order[n_train:])]


def subsample_task(task: TaskDataset, fraction: float, seed: int) -> TaskDataset:
    """Keep ``round(fraction * count)`` shots of each label (seeded)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = stream(seed, "subsample", task.task_id)
    keep = []
    for label in (0, 1):
        idx = task.label_indices(label)
        n = int(round(fraction * idx.size))
        if n < 1:
            raise ValueError(f"task {task.task_id}: fraction {fraction} leaves no shot of label {label}")
        keep.append(rng.permutation(idx)[:n])
    keep = np.sort(np.concatenate(keep))
    return TaskDataset(task.task_id, [task.shots[k] for k in keep])


# -- synthetic corpus -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 200
    n_sources: int = 8
    source_credibility: tuple = field(default_factory=lambda: tuple(np.linspace(0.6, 0.95, 8).round(4)))
    p_signal: float = 0.35
    topic_word_count: int = 12
    tasks: int = 24
    shots_per_task: int = 48
    clues_per_shot: int = 30
    statement_len: int = 12
    clue_len: int = 6
    topic_drift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source_credibility", tuple(float(r) for r in self.source_credibility))
        if len(self.source_credibility) != self.n_sources:
            raise ValueError(
                f"source_credibility has {len(self.source_credibility)} entries for {self.n_sources} sources"
            )
        if not all(0.5 <= r <= 1.0 for r in self.source_credibility):
            raise ValueError("source credibilities must lie in [0.5, 1]")
        if not 0.0 <= self.p_signal <= 1.0:
            raise ValueError(f"p_signal must lie in [0, 1], got {self.p_signal}")
        if not 0.0 <= self.topic_drift <= 1.0:
            raise ValueError(f"topic_drift must lie in [0, 1], got {self.topic_drift}")
        for name in ("vocab_size", "n_sources", "topic_word_count", "tasks", "shots_per_task",
                     "statement_len", "clue_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clues_per_shot < 0:
            raise ValueError("clues_per_shot must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["source_credibility"] = list(self.source_credibility)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "source_credibility": tuple(d["source_credibility"])})


@dataclass(frozen=True)
class TokenPools:
    true_pool: np.ndarray
    false_pool: np.ndarray
    filler: np.ndarray
    topic_core: np.ndarray
    private: np.ndarray


def token_pools(cfg: SynthConfig) -> TokenPools:
    """Partition the vocabulary: stance pools, filler, shared topic core, private topic words."""
    V = cfg.vocab_size
    P = max(1, round(0.10 * V))
    F = max(1, round(0.08 * V))
    G = max(1, round(0.12 * V))
    if 2 * P + F + G >= V:
        raise ValueError(f"vocab_size {V} too small to hold stance, filler and topic pools")
    ids = np.arange(V)
    pools = TokenPools(
        ids[:P], ids[P : 2 * P], ids[2 * P : 2 * P + F], ids[2 * P + F : 2 * P + F + G], ids[2 * P + F + G :]
    )
    if cfg.topic_word_count > pools.topic_core.size + pools.private.size:
        raise ValueError(
            f"topic_word_count {cfg.topic_word_count} exceeds the {pools.topic_core.size + pools.private.size}"
            " available topic tokens"
        )
    return pools


def topic_pool(cfg: SynthConfig, pools: TokenPools, task_index: int) -> np.ndarray:
    """Topic words of one task; a ``topic_drift`` share comes from task-private tokens."""
    rng = stream(cfg.seed, "topic", task_index)
    n_private = int(round(cfg.topic_drift * cfg.topic_word_count))
    n_core = cfg.topic_word_count - n_private
    if n_core > pools.topic_core.size:
        n_private += n_core - pools.topic_core.size
        n_core = pools.topic_core.size
    if n_private > pools.private.size:
        n_core += n_private - pools.private.size
        n_private = pools.private.size
    core = rng.choice(pools.topic_core, n_core, replace=False)
    private = rng.choice(pools.private, n_private, replace=False)
    return np.sort(np.concatenate([core, private]))


def _draw_tokens(rng, n, stance_pool, background, p_signal):
    signal = rng.random(n) < p_signal
    out = np.where(signal, rng.choice(stance_pool, n), rng.choice(background, n))
    return tuple(int(t) for t in out)


def generate_synthetic(cfg: SynthConfig) -> list:
    pools = token_pools(cfg)
    tasks = []
    for ti in range(cfg.tasks):
        background = np.concatenate([topic_pool(cfg, pools, ti), pools.filler])
        rng = stream(cfg.seed, "shots", ti)
        n = cfg.shots_per_task
        labels = rng.permutation(np.array([0] * (n // 2) + [1] * (n - n // 2)))
        shots = []
        for y in labels:
            y = int(y)
            stance = pools.true_pool if y == 1 else pools.false_pool
            other = pools.false_pool if y == 1 else pools.true_pool
            statement = _draw_tokens(rng, cfg.statement_len, stance, background, cfg.p_signal)
            times = np.sort(rng.random(cfg.clues_per_shot))
            clues = []
            for t in times:
                s = int(rng.integers(cfg.n_sources))
                consistent = rng.random() < cfg.source_credibility[s]
                toks = _draw_tokens(rng, cfg.clue_len, stance if consistent else other, background, cfg.p_signal)
                clues.append(Clue(toks, s, float(t)))
            shots.append(Shot(statement, tuple(clues), y))
        tasks.append(TaskDataset(f"task{ti:03d}", shots))
    return tasks


def _stance_logliks(tokens, cfg: SynthConfig, pools: TokenPools):
    """log p(tokens | stance) for stance in (false, true), up to a stance-free factor."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise ValueError(f"token outside vocabulary of size {cfg.vocab_size}")
    in_true = np.isin(tok, pools.true_pool)
    in_false = np.isin(tok, pools.false_pool)
    # background tokens contribute (1 - p_signal) * bg(t) under both stances: dropped
    with np.errstate(divide="ignore"):
        lt = np.where(in_true, np.log(cfg.p_signal / pools.true_pool.size), 0.0)
        lt = np.where(in_false, -np.inf, lt)
        lf = np.where(in_false, np.log(cfg.p_signal / pools.false_pool.size), 0.0)
        lf = np.where(in_true, -np.inf, lf)
    if cfg.p_signal < 1.0:
        bg = np.log1p(-cfg.p_signal)
        lt = np.where(in_true | in_false, lt, bg)
        lf = np.where(in_true | in_false, lf, bg)
    else:
        lt = np.where(in_true | in_false, lt, -np.inf)
        lf = np.where(in_true | in_false, lf, -np.inf)
    return float(lf.sum()), float(lt.sum())


def bayes_oracle(shot: Shot, cfg: SynthConfig) -> float:
    """Exact p(y=1 | statement, clues) under the generative process of ``cfg``."""
    pools = token_pools(cfg)
    lf, lt = _stance_logliks(shot.statement, cfg, pools)
    log_odds_parts = [(lt, lf)]
    with np.errstate(divide="ignore"):
        for c in shot.clues:
            if not 0 <= c.source < cfg.n_sources:
                raise ValueError(f"unknown source {c.source}")
            rho = cfg.source_credibility[c.source]
            cf, ct = _stance_logliks(c.tokens, cfg, pools)
            lr, lw = np.log(rho), np.log1p(-rho) if rho < 1 else -np.inf
            like_true = np.logaddexp(lr + ct, lw + cf)
            like_false = np.logaddexp(lr + cf, lw + ct)
            log_odds_parts.append((like_true, like_false))
    l1 = sum(p[0] for p in log_odds_parts)
    l0 = sum(p[1] for p in log_odds_parts)
    if l1 == -np.inf and l0 == -np.inf:
        raise ValueError("shot has zero probability under both labels")
    if l1 == -np.inf:
        return 0.0
    if l0 == -np.inf:
        return 1.0
    d = l1 - l0
    return float(1.0 / (1.0 + math.exp(-d))) if d >= 0 else float(math.exp(d) / (1.0 + math.exp(d)))


def oracle_accuracy(shots, cfg: SynthConfig) -> float:
    correct = [(bayes_oracle(s, cfg) >= 0.5) == (s.label == 1) for s in shots]
    return float(np.mean(correct))


def save_vocab(path, vocab: dict) -> None:
    """Optional sidecar mapping token id -> display string."""
    Path(path).write_text(json.dumps({str(k): v for k, v in sorted(vocab.items())}, indent=1))
