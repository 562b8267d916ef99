"""Finite categorical distributions over a token vocabulary.

Everything downstream (divergences, losses, simulators) is built on the
three value types here: raw logits, normalized categoricals, and top-k
views with renormalized probabilities. All entropies and log-probabilities
are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PROB_FLOOR",
    "Categorical",
    "TopKView",
    "as_logits",
    "softmax_temp",
    "entropy",
    "top_k",
    "sample",
    "log_prob",
]

# Probabilities below this are clamped before taking logs so that losses on
# zero-mass tokens stay finite.
PROB_FLOOR = 1e-300

_SUM_TOL = 1e-12


def as_logits(values) -> np.ndarray:
    """Validate and return a float64 logit vector.

    Raises ValueError on empty input or non-finite entries.
    """
    z = np.asarray(values, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


@dataclass(frozen=True)
class Categorical:
    """Normalized probability vector over a finite vocabulary.

    Invariants checked on construction: entries nonnegative, sum within
    1e-12 of one. Instances are immutable and safe to share.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty 1-D vector")
        if np.any(p < 0.0) or not np.all(np.isfinite(p)):
            raise ValueError("probs must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > _SUM_TOL:
            raise ValueError(f"probs must sum to 1 within {_SUM_TOL}, got {p.sum()!r}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class TopKView:
    """The k most probable tokens of a Categorical, renormalized.

    ``indices`` are ordered by decreasing source probability with ties
    broken by lowest token index; ``mass`` is the cumulative source
    probability of the selected tokens before renormalization.
    """

    indices: np.ndarray
    renorm_probs: np.ndarray
    mass: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        rp = np.asarray(self.renorm_probs, dtype=np.float64)
        if idx.shape != rp.shape or idx.ndim != 1 or idx.size == 0:
            raise ValueError("indices and renorm_probs must be matching 1-D vectors")
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("top-k indices must be distinct")
        if not (0.0 < self.mass <= 1.0 + _SUM_TOL):
            raise ValueError("mass must lie in (0, 1]")
        idx.flags.writeable = False
        rp.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "renorm_probs", rp)

    @property
    def k(self) -> int:
        return self.indices.shape[0]


def softmax_temp(logits, temperature: float) -> Categorical:
    """Temperature softmax with max-subtraction for overflow safety.

    Parameters
    ----------
    logits:
        Finite 1-D logit vector.
    temperature:
        Positive scaling constant; lower values sharpen the distribution.
    """
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature!r}")
    z = as_logits(logits) / temperature
    z = z - z.max()
    e = np.exp(z)
    return Categorical(e / e.sum())


def entropy(dist: Categorical) -> float:
    """Shannon entropy in nats, with the convention 0*log(0) = 0."""
    p = dist.probs
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def top_k(dist: Categorical, k: int) -> TopKView:
    """Select the k most probable tokens and renormalize over them.

    Ties are broken by lowest token index so the selection is deterministic
    across platforms. ``k == vocab_size`` returns the full distribution with
    mass exactly 1.
    """
    v = dist.vocab_size
    if not 1 <= k <= v:
        raise ValueError(f"k must be in [1, {v}], got {k}")
    order = np.argsort(-dist.probs, kind="stable")
    idx = order[:k]
    selected = dist.probs[idx]
    if k == v:
        return TopKView(indices=idx, renorm_probs=selected, mass=1.0)
    mass = float(selected.sum())
    return TopKView(indices=idx, renorm_probs=selected / mass, mass=mass)


def sample(dist: Categorical, rng: np.random.Generator) -> int:
    """Draw one token id by inverse-CDF sampling; deterministic given rng state."""
    u = rng.random()
    cdf = np.cumsum(dist.probs)
    x = int(np.searchsorted(cdf, u, side="right"))
    # u may land beyond the last cumulative value through rounding
    return min(x, dist.vocab_size - 1)


def log_prob(dist: Categorical, x: int) -> float:
    """Natural log of P(x); probabilities below 1e-300 clamp to log(1e-300)."""
    if not 0 <= x < dist.vocab_size:
        raise ValueError(f"token {x} outside vocabulary of size {dist.vocab_size}")
    return float(np.log(max(float(dist.probs[x]), PROB_FLOOR)))
