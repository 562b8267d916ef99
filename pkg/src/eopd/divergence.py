"""Exact and approximate KL divergences between finite categoricals.

Includes the single-sample Monte Carlo surrogate used as a per-token
reward and the top-k truncated forward KL computed from renormalized
teacher probabilities.
"""

from __future__ import annotations

import math

import numpy as np

from .probdist import PROB_FLOOR, Categorical, TopKView

__all__ = [
    "forward_kl",
    "reverse_kl",
    "truncated_forward_kl",
    "mc_reverse_kl_reward",
]


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    # Terms with p == 0 contribute nothing (0*log 0 = 0); zeros in q under
    # the support of p are floored rather than raised.
    nz = p > 0.0
    pn = p[nz]
    qn = np.maximum(q[nz], PROB_FLOOR)
    return float(np.sum(pn * (np.log(pn) - np.log(qn))))


def forward_kl(teacher: Categorical, student: Categorical) -> float:
    """KL(teacher || student): mode-covering, penalizes missing teacher support."""
    if teacher.vocab_size != student.vocab_size:
        raise ValueError("distributions must share a vocabulary")
    return _kl(teacher.probs, student.probs)


def reverse_kl(student: Categorical, teacher: Categorical) -> float:
    """KL(student || teacher): mode-seeking, penalizes mass the teacher rejects."""
    if teacher.vocab_size != student.vocab_size:
        raise ValueError("distributions must share a vocabulary")
    return _kl(student.probs, teacher.probs)


def truncated_forward_kl(teacher_topk: TopKView, student: Categorical) -> float:
    """Forward KL restricted to the teacher's top-k set.

    Uses the renormalized teacher probabilities on both sides of the log,
    while the student contributes its raw (unrenormalized) probabilities at
    the selected indices. Not a true divergence between the original
    distributions, but bounded below by -log(student mass on the set),
    hence nonnegative.
    """
    idx = teacher_topk.indices
    if idx.max(initial=-1) >= student.vocab_size or idx.min(initial=0) < 0:
        raise ValueError("top-k indices outside the student's vocabulary")
    p = teacher_topk.renorm_probs
    q = np.maximum(student.probs[idx], PROB_FLOOR)
    nz = p > 0.0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def mc_reverse_kl_reward(teacher_logp: float, behavior_logp: float) -> float:
    """Per-token advantage: log-probability edge of the teacher over the sampler.

    Averaging the negated value over tokens drawn from the behavior policy
    gives a single-sample Monte Carlo estimate of the exact reverse KL.
    """
    if not (math.isfinite(teacher_logp) and math.isfinite(behavior_logp)):
        raise ValueError("log-probabilities must be finite")
    return teacher_logp - behavior_logp
