"""Diagnostics over trained students, teachers, and saved rollout buffers:
token-entropy histograms, high-entropy retention, forward KL at uncertain
positions, and the top-k mass/memory tradeoff.

All analyses are pure given their seed: rerunning on the same model and
environment reproduces identical numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import truncated_forward_kl
from .synthenv import Env, RolloutBuffer, TabularStudent, TabularTeacher, _generate

__all__ = [
    "HistogramTable",
    "RetentionResult",
    "default_entropy_bins",
    "entropy_histogram",
    "high_entropy_retention",
    "fkl_at_high_entropy",
    "topk_tradeoff",
    "render_histogram_csv",
    "render_retention_csv",
    "render_tradeoff_csv",
]

# rng stream tag for evaluation rollouts (trainer uses 2-4)
STREAM_EVAL = 5

DEFAULT_RETENTION_THRESHOLD = 1.0
DEFAULT_N_ROLLOUTS = 64


def _behavior_view(model):
    """Models roll out through their cached-table view; a live student is
    snapshotted first."""
    if isinstance(model, TabularStudent):
        return model.snapshot()
    return model


def _eval_rollouts(model, env: Env, n_rollouts: int, seed: int) -> list:
    view = _behavior_view(model)
    pick = np.random.default_rng([seed, STREAM_EVAL])
    prompt_ids = pick.integers(0, len(env.prompt_pool), size=n_rollouts)
    trajs = []
    for j, pid in enumerate(prompt_ids):
        rng = np.random.default_rng([seed, STREAM_EVAL, j])
        trajs.append(
            _generate(view, env.teacher, env.prompt_pool[pid], int(pid), env.cfg, 1, rng, None, 0.0)
        )
    return trajs


@dataclass(frozen=True)
class HistogramTable:
    """Half-open bins [lo, hi) with the last bin closed; fractions sum to 1."""

    edges: np.ndarray
    counts: np.ndarray
    fractions: np.ndarray


def default_entropy_bins(vocab_size: int) -> np.ndarray:
    """An underflow bin below 1e-3 nats followed by 40 log-spaced bins up
    to the maximum possible entropy log(V)."""
    top = math.log(vocab_size) if vocab_size > 1 else 1e-3 * 2
    return np.concatenate(([0.0], np.geomspace(1e-3, top, 41)))


def _bin_values(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    counts = np.zeros(edges.shape[0] - 1, dtype=np.int64)
    last = edges.shape[0] - 2
    for v in values:
        if v < edges[0] or v > edges[-1]:
            raise ValueError(f"value {v} outside the binning range")
        i = int(np.searchsorted(edges, v, side="right")) - 1
        counts[min(i, last)] += 1
    return counts


def entropy_histogram(
    model,
    env: Env,
    n_rollouts: int = DEFAULT_N_ROLLOUTS,
    bins: np.ndarray | None = None,
    seed: int = 0,
) -> HistogramTable:
    """Histogram of the generating model's conditional entropy at every
    token of its own rollouts."""
    edges = default_entropy_bins(env.cfg.vocab_size) if bins is None else np.asarray(bins, float)
    ents = np.array(
        [rec.behavior_entropy for traj in _eval_rollouts(model, env, n_rollouts, seed) for rec in traj.records]
    )
    counts = _bin_values(ents, edges)
    return HistogramTable(edges=edges, counts=counts, fractions=counts / counts.sum())


@dataclass(frozen=True)
class RetentionResult:
    student_fraction: float
    teacher_fraction: float
    ratio: float


def high_entropy_retention(
    student,
    teacher: TabularTeacher,
    env: Env,
    threshold: float = DEFAULT_RETENTION_THRESHOLD,
    n_rollouts: int = DEFAULT_N_ROLLOUTS,
    seed: int = 0,
) -> RetentionResult:
    """Fraction of generated tokens whose generating-model entropy meets
    the threshold, for each model on its own rollouts."""
    if threshold < 0.0:
        raise ValueError("threshold must be nonnegative")

    def fraction(model) -> float:
        ents = [
            rec.behavior_entropy
            for traj in _eval_rollouts(model, env, n_rollouts, seed)
            for rec in traj.records
        ]
        return float(np.mean([e >= threshold for e in ents]))

    sf = fraction(student)
    tf = fraction(teacher)
    return RetentionResult(
        student_fraction=sf,
        teacher_fraction=tf,
        ratio=sf / tf if tf > 0.0 else math.nan,
    )


def fkl_at_high_entropy(student, source, tau: float = 0.8, k: int = 16) -> float | None:
    """Mean truncated forward KL at positions (or states) where the teacher
    entropy is at least ``tau``.

    ``source`` is either a saved RolloutBuffer, in which case positions and
    their frozen top-k views are taken from the records, or an Env, in
    which case the mean runs uniformly over qualifying states of the
    teacher table with fresh top-k views of size ``k``. Returns None when
    nothing qualifies.
    """
    student_dist = student.dist
    values = []
    if isinstance(source, RolloutBuffer):
        for rec in source.records():
            if rec.query.entropy >= tau:
                values.append(truncated_forward_kl(rec.query.topk, student_dist(rec.state)))
    elif isinstance(source, Env):
        teacher = source.teacher
        for s in np.flatnonzero(teacher.entropies >= tau):
            values.append(truncated_forward_kl(teacher.topk_view(int(s), k), student_dist(int(s))))
    else:
        raise ValueError("source must be a RolloutBuffer or an Env")
    return float(np.mean(values)) if values else None


BYTES_PER_PROB = 8
BYTES_PER_INDEX = 4


def topk_tradeoff(
    teacher: TabularTeacher,
    env: Env,
    k_values,
    n_rollouts: int = DEFAULT_N_ROLLOUTS,
    seed: int = 0,
) -> list[tuple[int, float, int]]:
    """Rows of (k, visit-weighted mean top-k mass, bytes per token) over
    states visited by teacher rollouts. Memory is 8 bytes per stored
    probability plus 4 per index."""
    ks = [int(k) for k in k_values]
    if ks != sorted(ks):
        raise ValueError("k_values must be sorted ascending")
    visits = np.zeros(env.cfg.n_states, dtype=np.int64)
    for traj in _eval_rollouts(teacher, env, n_rollouts, seed):
        for rec in traj.records:
            visits[rec.state] += 1
    visited = np.flatnonzero(visits)
    weights = visits[visited] / visits.sum()
    rows = []
    for k in ks:
        _, _, mass = teacher._topk_table(k)
        mean_mass = float(np.sum(weights * mass[visited]))
        rows.append((k, mean_mass, k * (BYTES_PER_PROB + BYTES_PER_INDEX)))
    return rows


def render_histogram_csv(table: HistogramTable) -> str:
    lines = ["bin_lo,bin_hi,count,fraction"]
    for i in range(table.counts.shape[0]):
        lines.append(
            f"{table.edges[i]!r},{table.edges[i + 1]!r},{table.counts[i]},{table.fractions[i]!r}"
        )
    return "\n".join(lines) + "\n"


def render_retention_csv(result: RetentionResult, threshold: float) -> str:
    lines = [
        "threshold,student_fraction,teacher_fraction,ratio",
        f"{threshold!r},{result.student_fraction!r},{result.teacher_fraction!r},{result.ratio!r}",
    ]
    return "\n".join(lines) + "\n"


def render_tradeoff_csv(rows) -> str:
    lines = ["k,mean_mass,bytes_per_token"]
    for k, mass, nbytes in rows:
        lines.append(f"{k},{mass!r},{nbytes}")
    return "\n".join(lines) + "\n"
