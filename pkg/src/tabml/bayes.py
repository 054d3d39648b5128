"""Factorised Gaussians over the flat weight vector and the terms of the bound.

Variances are stored as log-variances throughout.  Tape-level functions take
either node ids or :class:`GaussianParamVector` instances (recorded as leaves).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .rng import stream


@dataclass
class GaussianParamVector:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} must be equal-length vectors")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def __len__(self):
        return self.mu.size

    def copy(self) -> "GaussianParamVector":
        return GaussianParamVector(self.mu.copy(), self.log_var.copy())

    def equals(self, other: "GaussianParamVector") -> bool:
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.log_var, other.log_var)


@dataclass(frozen=True)
class GlobalPriorConfig:
    a0: float = 2.0
    b0: float = 0.2

    def __post_init__(self):
        if self.a0 <= 0:
            raise ValueError(f"a0 must be positive, got {self.a0}")
        if self.b0 < 0:
            raise ValueError(f"b0 must be non-negative, got {self.b0}")


@dataclass(frozen=True)
class WeightSample:
    phi: np.ndarray
    epsilon: np.ndarray
    seed: int


def noise(n: int, seed: int) -> np.ndarray:
    return stream(seed, "noise").standard_normal(n)


def sample(q: GaussianParamVector, seed: int) -> WeightSample:
    """Reparameterised draw ``phi = mu + exp(log_var / 2) * eps``."""
    eps = noise(len(q), seed)
    return WeightSample(q.mu + np.exp(0.5 * q.log_var) * eps, eps, seed)


def _pair(tape: Tape, g):
    if isinstance(g, GaussianParamVector):
        return tape.leaf(g.mu), tape.leaf(g.log_var)
    return g


def sample_on_tape(tape: Tape, q, eps: np.ndarray) -> int:
    """Differentiable path from ``(mu, log_var)`` nodes to a weight draw."""
    mu, lv = _pair(tape, q)
    sd = tape.exp(tape.scale(lv, 0.5))
    return tape.add(mu, tape.mul(sd, tape.const(eps)))


def kl_gaussians(tape: Tape, q, p) -> int:
    """KL(q || p) for diagonal Gaussians, summed over coordinates."""
    q_mu, q_lv = _pair(tape, q)
    p_mu, p_lv = _pair(tape, p)
    n = tape.value(q_mu).size
    if tape.value(p_mu).size != n:
        raise ValueError(f"KL between vectors of length {n} and {tape.value(p_mu).size}")
    dlv = tape.sub(q_lv, p_lv)
    dm = tape.sub(q_mu, p_mu)
    ratio = tape.exp(dlv)
    maha = tape.mul(tape.mul(dm, dm), tape.exp(tape.scale(p_lv, -1.0)))
    total = tape.add(tape.scale(tape.sum(dlv), -0.5), tape.scale(tape.sum(tape.add(ratio, maha)), 0.5))
    return tape.add(total, tape.const(-0.5 * n))


def kl_value(q: GaussianParamVector, p: GaussianParamVector) -> float:
    dlv = q.log_var - p.log_var
    return float(0.5 * np.sum(-dlv + np.exp(dlv) + (q.mu - p.mu) ** 2 * np.exp(-p.log_var) - 1.0))


def neg_log_prior(tape: Tape, theta, cfg: GlobalPriorConfig) -> int:
    """-log p(theta) up to a constant: N(mu; 0, I) times Gamma(1/sigma^2; a0, b0)."""
    mu, lv = _pair(tape, theta)
    quad = tape.scale(tape.sum(tape.mul(mu, mu)), 0.5)
    gamma = tape.add(tape.scale(lv, cfg.a0 - 1.0), tape.scale(tape.exp(tape.scale(lv, -1.0)), cfg.b0))
    return tape.add(quad, tape.sum(gamma))


def neg_log_prior_value(theta: GaussianParamVector, cfg: GlobalPriorConfig) -> float:
    lv = theta.log_var
    return float(0.5 * np.sum(theta.mu**2) + np.sum((cfg.a0 - 1.0) * lv + cfg.b0 * np.exp(-lv)))
