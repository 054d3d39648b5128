"""Statement/clue encoders and the veracity head.

All trainable weights live in one flat vector ``phi`` described by a
:class:`ParamLayout`.  The shared BiLSTM reads statements and clues, each clue
state is extended with its source embedding, a unidirectional LSTM runs over
the clue states in time order, and a two-layer tanh MLP maps
``[h_s, h_C]`` to a logit.

Shots are encoded in batches (:class:`ShotBatch`); the single-shot functions
(`encode_statement`, `encode_clue`, ...) are thin wrappers kept for tests and
inspection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .kernels import _sigmoid

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    embed_dim: int = 16
    lstm_hidden: int = 16
    clue_lstm_hidden: int = 16
    source_count: int = 8
    source_embed_dim: int = 4
    mlp_hidden: int = 32
    dropout_rate: float = 0.6

    def __post_init__(self):
        for name in (
            "vocab_size",
            "embed_dim",
            "lstm_hidden",
            "clue_lstm_hidden",
            "source_count",
            "source_embed_dim",
            "mlp_hidden",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Ordered, contiguous segments of the flat parameter vector."""

    def __init__(self, segments):
        self.segments = list(segments)
        off = 0
        for seg in self.segments:
            if seg.offset != off:
                raise ValueError(f"segment {seg.name} starts at {seg.offset}, expected {off}")
            off += seg.size
        self.total_len = off
        self._by_name = {s.name: s for s in self.segments}

    @classmethod
    def from_shapes(cls, named_shapes):
        segs, off = [], 0
        for name, shape in named_shapes:
            seg = Segment(name, tuple(int(s) for s in shape), off)
            segs.append(seg)
            off += seg.size
        return cls(segs)

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "ParamLayout":
        d, H, Hc = cfg.embed_dim, cfg.lstm_hidden, cfg.clue_lstm_hidden
        clue_in = 2 * H + cfg.source_embed_dim
        shapes = []
        for direction in ("fwd", "bwd"):
            shapes += [
                (f"bilstm.{direction}.w_x", (d, 4 * H)),
                (f"bilstm.{direction}.w_h", (H, 4 * H)),
                (f"bilstm.{direction}.b", (4 * H,)),
            ]
        shapes += [
            ("source_emb", (cfg.source_count, cfg.source_embed_dim)),
            ("clue_lstm.w_x", (clue_in, 4 * Hc)),
            ("clue_lstm.w_h", (Hc, 4 * Hc)),
            ("clue_lstm.b", (4 * Hc,)),
            ("mlp.w1", (2 * H + Hc, cfg.mlp_hidden)),
            ("mlp.b1", (cfg.mlp_hidden,)),
            ("mlp.w2", (cfg.mlp_hidden, 1)),
            ("mlp.b2", (1,)),
        ]
        return cls.from_shapes(shapes)

    def __getitem__(self, name) -> Segment:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.segments)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        seg = self[name]
        return flat[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def to_json(self):
        return [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in self.segments]

    @classmethod
    def from_json(cls, items):
        return cls(Segment(it["name"], tuple(it["shape"]), int(it["offset"])) for it in items)

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.segments == other.segments


def init_params(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    """Draw initial weight means: uniform(+-1/sqrt(fan_in)) for matrices, zero biases."""
    flat = np.zeros(layout.total_len)
    for seg in layout:
        if seg.name.endswith(".b") or seg.name.startswith("mlp.b"):
            continue
        if seg.name == "source_emb":
            vals = rng.normal(0.0, 0.1, seg.shape)
        else:
            bound = 1.0 / np.sqrt(seg.shape[0])
            vals = rng.uniform(-bound, bound, seg.shape)
        flat[seg.offset : seg.offset + seg.size] = vals.ravel()
    return flat


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash_rows(tokens, dim: int, seed: int = 0) -> np.ndarray:
    """Unit vectors keyed by token id, reproducible without any file."""
    tok = np.asarray(tokens, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix64(_splitmix64(np.uint64(seed) * _GOLDEN) ^ tok)
        ks = np.arange(1, dim + 1, dtype=np.uint64) * _GOLDEN
        z = _splitmix64(base[:, None] + ks[None, :])
    u = (z >> np.uint64(11)).astype(np.float64) * (2.0**-53) * 2.0 - 1.0
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    return u / np.where(norms == 0, 1.0, norms)


class EmbeddingTable:
    """Frozen word vectors (not part of ``phi``)."""

    def __init__(self, rows: np.ndarray, source: str = "deterministic-hash", seed: int = 0, path=None):
        self.rows = np.asarray(rows, dtype=np.float64)
        self.rows.setflags(write=False)
        self.source = source
        self.seed = seed
        self.path = path

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def hashed(cls, vocab_size: int, dim: int, seed: int = 0) -> "EmbeddingTable":
        return cls(hash_rows(np.arange(vocab_size), dim, seed), "deterministic-hash", seed)

    @classmethod
    def load(cls, path, vocab_size: int, dim: int, vocab: dict | None = None, seed: int = 0):
        """Read ``token w_1 ... w_d`` lines.

        ``token`` is a token id, or a surface string when ``vocab`` (surface ->
        id) is supplied.  Ids missing from the file use the hash generator.
        """
        rows = hash_rows(np.arange(vocab_size), dim, seed)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                key = parts[0]
                if vocab is not None and key in vocab:
                    tid = vocab[key]
                else:
                    try:
                        tid = int(key)
                    except ValueError:
                        continue
                if 0 <= tid < vocab_size:
                    rows[tid] = [float(v) for v in parts[1:]]
        return cls(rows, "loaded-from-file", seed, str(Path(path)))

    def to_json(self):
        out = {"source": self.source, "seed": self.seed, "vocab_size": self.vocab_size, "dim": self.dim}
        if self.source != "deterministic-hash":
            # file-loaded rows travel inline so a checkpoint stands alone
            out["path"] = self.path
            out["rows"] = self.rows.tolist()
        return out

    @classmethod
    def from_json(cls, d):
        if "rows" in d:
            return cls(np.asarray(d["rows"], dtype=np.float64), d["source"], d["seed"], d.get("path"))
        return cls.hashed(d["vocab_size"], d["dim"], d["seed"])


class ShotBatch:
    """Padded arrays for a list of shots, ready for the batched encoders.

    Embedding lookups happen here because the table is frozen.
    """

    def __init__(self, shots, table: EmbeddingTable, source_count: int | None = None):
        if not shots:
            raise ValueError("ShotBatch needs at least one shot")
        self.n = len(shots)
        stmts = [np.asarray(s.statement, dtype=np.int64) for s in shots]
        for k, st in enumerate(stmts):
            if st.size == 0:
                raise ValueError(f"shot {k}: empty statement")
        self.stmt_x, self.stmt_len = _pad_embed(stmts, table)
        clue_tokens, clue_src, owner = [], [], []
        for k, s in enumerate(shots):
            for c in s.clues:
                if len(c.tokens) == 0:
                    raise ValueError(f"shot {k}: empty clue")
                clue_tokens.append(np.asarray(c.tokens, dtype=np.int64))
                clue_src.append(c.source)
                owner.append(k)
        self.n_clues = np.bincount(np.asarray(owner, dtype=np.int64), minlength=self.n).astype(np.int64)
        self.clue_src = np.asarray(clue_src, dtype=np.int64)
        if source_count is not None and self.clue_src.size and self.clue_src.max() >= source_count:
            raise ValueError(f"source id {int(self.clue_src.max())} >= source_count {source_count}")
        if self.clue_src.size and self.clue_src.min() < 0:
            raise ValueError("negative source id")
        if clue_tokens:
            self.clue_x, self.clue_len = _pad_embed(clue_tokens, table)
        else:
            self.clue_x = self.clue_len = None
        nmax = int(self.n_clues.max()) if self.n else 0
        self.clue_idx = np.zeros((self.n, max(nmax, 1)), dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(self.n_clues)[:-1]])
        for k in range(self.n):
            self.clue_idx[k, : self.n_clues[k]] = starts[k] + np.arange(self.n_clues[k])
        self.labels = np.asarray([s.label for s in shots], dtype=np.float64).reshape(-1, 1)

    def take(self, rows) -> "ShotBatch":
        """Batch of the shots at ``rows`` without redoing embedding lookups."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise ValueError("ShotBatch needs at least one shot")
        out = object.__new__(ShotBatch)
        out.n = rows.size
        out.stmt_x = self.stmt_x[rows]
        out.stmt_len = self.stmt_len[rows]
        out.n_clues = self.n_clues[rows]
        out.labels = self.labels[rows]
        nmax = int(out.n_clues.max())
        out.clue_idx = np.zeros((out.n, max(nmax, 1)), dtype=np.int64)
        if nmax == 0:
            out.clue_x = out.clue_len = None
            out.clue_src = np.zeros(0, dtype=np.int64)
            return out
        picked = np.concatenate([self.clue_idx[r, : self.n_clues[r]] for r in rows])
        out.clue_x = self.clue_x[picked]
        out.clue_len = self.clue_len[picked]
        out.clue_src = self.clue_src[picked]
        starts = np.concatenate([[0], np.cumsum(out.n_clues)[:-1]])
        for k in range(out.n):
            out.clue_idx[k, : out.n_clues[k]] = starts[k] + np.arange(out.n_clues[k])
        return out


def _pad_embed(seqs, table):
    lens = np.asarray([len(s) for s in seqs], dtype=np.int64)
    T = int(lens.max())
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    for k, s in enumerate(seqs):
        if s.size and (s.min() < 0 or s.max() >= table.vocab_size):
            raise ValueError(f"token id outside [0, {table.vocab_size})")
        ids[k, : s.size] = s
    x = table.rows[ids]
    x[np.arange(T)[None, :] >= lens[:, None]] = 0.0
    return x, lens


class Views:
    """Tape nodes for each parameter segment of one ``phi`` node."""

    def __init__(self, tape: Tape, phi: int, layout: ParamLayout):
        self.tape = tape
        self._nodes = {s.name: tape.slice(phi, s.offset, s.shape) for s in layout}

    def __getitem__(self, name):
        return self._nodes[name]


def _as_node(tape: Tape, params):
    if isinstance(params, (int, np.integer)):
        return int(params)
    return tape.leaf(params)


def _bilstm(tape, v, x_node, lengths):
    fwd = tape.lstm(x_node, v["bilstm.fwd.w_x"], v["bilstm.fwd.w_h"], v["bilstm.fwd.b"], lengths)
    bwd = tape.lstm(x_node, v["bilstm.bwd.w_x"], v["bilstm.bwd.w_h"], v["bilstm.bwd.b"], lengths, reverse=True)
    return tape.concat([fwd, bwd], axis=1)


def batch_logits(tape: Tape, phi: int, layout: ParamLayout, batch: ShotBatch, cfg: ModelConfig, rng=None):
    """Logit node of shape (n, 1) for every shot in ``batch``.

    When ``rng`` is given and ``cfg.dropout_rate > 0``, inverted dropout with
    freshly drawn masks is applied to the statement and clue encodings.
    """
    v = Views(tape, phi, layout)
    rate = cfg.dropout_rate if rng is not None else 0.0
    h_s = _bilstm(tape, v, tape.const(batch.stmt_x), batch.stmt_len)
    if rate > 0:
        h_s = tape.dropout(h_s, rng.random(tape.value(h_s).shape) >= rate, rate)
    Hc = cfg.clue_lstm_hidden
    if batch.clue_x is None:
        h_c = tape.const(np.zeros((batch.n, Hc)))
    else:
        enc = _bilstm(tape, v, tape.const(batch.clue_x), batch.clue_len)
        src = tape.gather(v["source_emb"], batch.clue_src)
        states = tape.concat([enc, src], axis=1)
        if rate > 0:
            states = tape.dropout(states, rng.random(tape.value(states).shape) >= rate, rate)
        seq = tape.gather(states, batch.clue_idx)
        h_c = tape.lstm(seq, v["clue_lstm.w_x"], v["clue_lstm.w_h"], v["clue_lstm.b"], batch.n_clues)
    return _mlp(tape, v, h_s, h_c)


def _mlp(tape, v, h_s, h_c):
    x = tape.concat([h_s, h_c], axis=1)
    hid = tape.tanh(tape.bias_add(tape.matmul(x, v["mlp.w1"]), v["mlp.b1"]))
    return tape.bias_add(tape.matmul(hid, v["mlp.w2"]), v["mlp.b2"])


def bernoulli_loglik(tape: Tape, logits: int, labels: np.ndarray) -> int:
    """Sum of ``y*l - softplus(l)``, the stable form of the Bernoulli log-likelihood."""
    y = tape.const(labels)
    return tape.sub(tape.sum(tape.mul(y, logits)), tape.sum(tape.softplus(logits)))


def batch_log_likelihood(tape, phi, layout, batch, cfg, rng=None):
    return bernoulli_loglik(tape, batch_logits(tape, phi, layout, batch, cfg, rng), batch.labels)


def predict_proba(phi: np.ndarray, layout: ParamLayout, batch: ShotBatch, cfg: ModelConfig) -> np.ndarray:
    """Probability of label 1 for every shot (no dropout)."""
    tape = Tape()
    logits = tape.value(batch_logits(tape, tape.leaf(phi), layout, batch, cfg))[:, 0]
    return _sigmoid(logits)


# -- single-shot API --------------------------------------------------------


def _check_tokens(tokens, table):
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.size == 0:
        raise ValueError("empty token sequence")
    if tok.min() < 0 or tok.max() >= table.vocab_size:
        raise ValueError(f"token id {int(tok.max())} outside vocabulary of size {table.vocab_size}")
    return tok


def _check_params(tape, params, layout):
    node = _as_node(tape, params)
    if tape.value(node).shape != (layout.total_len,):
        raise ValueError(f"params length {tape.value(node).size} != layout.total_len {layout.total_len}")
    return node


def encode_statement(tokens, params, layout: ParamLayout, table: EmbeddingTable, tape: Tape) -> int:
    """Concatenated final forward/backward BiLSTM states, shape (1, 2H)."""
    tok = _check_tokens(tokens, table)
    phi = _check_params(tape, params, layout)
    v = Views(tape, phi, layout)
    x = tape.const(table.rows[tok][None])
    return _bilstm(tape, v, x, np.array([tok.size]))


def encode_clue(tokens, source: int, params, layout: ParamLayout, table: EmbeddingTable, tape: Tape) -> int:
    """BiLSTM clue state with the source embedding appended, shape (1, 2H + E_s)."""
    n_src = layout["source_emb"].shape[0]
    if not 0 <= source < n_src:
        raise ValueError(f"unknown source id {source} (source_count={n_src})")
    tok = _check_tokens(tokens, table)
    phi = _check_params(tape, params, layout)
    v = Views(tape, phi, layout)
    enc = _bilstm(tape, v, tape.const(table.rows[tok][None]), np.array([tok.size]))
    return tape.concat([enc, tape.gather(v["source_emb"], np.array([source]))], axis=1)


def aggregate_clues(clue_states, params, layout: ParamLayout, tape: Tape) -> int:
    """Final state of the clue LSTM over ``clue_states`` (oldest first), shape (1, Hc)."""
    phi = _check_params(tape, params, layout)
    Hc = layout["clue_lstm.w_h"].shape[0]
    if not clue_states:
        return tape.const(np.zeros((1, Hc)))
    v = Views(tape, phi, layout)
    seq = tape.concat(list(clue_states), axis=0)
    seq = tape.gather(seq, np.arange(len(clue_states))[None, :])
    return tape.lstm(seq, v["clue_lstm.w_x"], v["clue_lstm.w_h"], v["clue_lstm.b"], np.array([len(clue_states)]))


def predict(h_s: int, h_c: int, params, layout: ParamLayout, tape: Tape) -> int:
    """Scalar logit (shape (1, 1)) from statement and clue summaries."""
    phi = _check_params(tape, params, layout)
    want = layout["mlp.w1"].shape[0]
    got = tape.value(h_s).shape[-1] + tape.value(h_c).shape[-1]
    if got != want:
        raise ValueError(f"MLP input extent {got} != {want}")
    return _mlp(tape, Views(tape, phi, layout), h_s, h_c)


def shot_log_likelihood(shot, params, layout: ParamLayout, table: EmbeddingTable, tape: Tape) -> int:
    """log p(y | statement, clues, phi) for one shot, no dropout."""
    phi = _check_params(tape, params, layout)
    h_s = encode_statement(shot.statement, phi, layout, table, tape)
    states = [encode_clue(c.tokens, c.source, phi, layout, table, tape) for c in shot.clues]
    h_c = aggregate_clues(states, phi, layout, tape)
    logit = predict(h_s, h_c, phi, layout, tape)
    return bernoulli_loglik(tape, logit, np.array([[float(shot.label)]]))


@dataclass
class Model:
    """Configuration, layout and frozen embeddings travelling together."""

    cfg: ModelConfig
    table: EmbeddingTable
    layout: ParamLayout | None = None

    def __post_init__(self):
        if self.layout is None:
            self.layout = ParamLayout.for_config(self.cfg)
        if self.table.vocab_size != self.cfg.vocab_size or self.table.dim != self.cfg.embed_dim:
            raise ValueError(
                f"embedding table {self.table.rows.shape} does not match "
                f"vocab_size={self.cfg.vocab_size}, embed_dim={self.cfg.embed_dim}"
            )

    @classmethod
    def default(cls, cfg: ModelConfig | None = None, embed_seed: int = 0) -> "Model":
        cfg = cfg or ModelConfig()
        return cls(cfg, EmbeddingTable.hashed(cfg.vocab_size, cfg.embed_dim, embed_seed))

    def batch(self, shots) -> ShotBatch:
        return ShotBatch(shots, self.table, self.cfg.source_count)
