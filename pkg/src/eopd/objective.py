"""Token-level training losses and their analytic logit gradients.

Each loss maps one recorded rollout position to a scalar loss and its exact
gradient with respect to the student's logit row for that context. The
clipped surrogate treats the advantage as a constant; the gated forward-KL
term uses the teacher's frozen top-k view from rollout time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .divergence import mc_reverse_kl_reward, truncated_forward_kl
from .probdist import PROB_FLOOR, Categorical, TopKView, as_logits, entropy, log_prob, softmax_temp
from .synthenv import TeacherQuery

__all__ = [
    "Method",
    "TokenLossInput",
    "TokenLossOutput",
    "clipped_rkl_loss",
    "fkl_term_loss",
    "eopd_token_loss",
    "entropy_bonus_loss",
    "advantage_shaping",
    "kd_offpolicy_loss",
    "token_loss",
]


class Method(str, Enum):
    """Training method tags. KD is a trainer-level method (teacher rollouts,
    off-policy loss) and is not accepted by the per-token dispatcher."""

    OPD = "OPD"
    EOPD = "EOPD"
    FULL_FKL = "FULL_FKL"
    RANDOM_FKL = "RANDOM_FKL"
    ENTROPY_BONUS = "ENTROPY_BONUS"
    ADV_SHAPING = "ADV_SHAPING"
    KD = "KD"


@dataclass(frozen=True)
class TokenLossInput:
    """One rollout position plus the hyperparameters of the active method.

    ``behavior_logp`` and ``behavior_entropy`` are the rollout-time records
    of the policy that generated the token; neither carries a gradient.
    ``random_gate`` is the stored Bernoulli draw for the random-placement
    baseline.
    """

    student_logits: np.ndarray
    behavior_logp: float
    token: int
    teacher_query: TeacherQuery
    clip_eps: float = 0.2
    tau: float = 0.8
    variant: Method = Method.OPD
    entropy_coef: float = 0.01
    shaping_alpha: float = 0.1
    shaping_kappa: float = 2.0
    fkl_fraction: float = 0.2
    fkl_weight: float = 1.0
    random_gate: bool = False
    behavior_entropy: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "student_logits", as_logits(self.student_logits))
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if math.isnan(self.tau) or self.tau < 0.0:
            raise ValueError("tau must be nonnegative")
        if not self.shaping_kappa > 1.0:
            raise ValueError("shaping_kappa must exceed 1")
        if self.shaping_alpha < 0.0:
            raise ValueError("shaping_alpha must be nonnegative")
        if not 0.0 <= self.fkl_fraction <= 1.0:
            raise ValueError("fkl_fraction must lie in [0, 1]")
        if not 0 <= self.token < self.student_logits.shape[0]:
            raise ValueError("token outside the vocabulary")


@dataclass(frozen=True)
class TokenLossOutput:
    loss: float
    grad: np.ndarray
    gate_active: bool = False
    clipped: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise ValueError("gradient entries must be finite")


def _student_dist(inp: TokenLossInput) -> Categorical:
    return softmax_temp(inp.student_logits, 1.0)


def _clipped_core(
    dist: Categorical, behavior_logp: float, token: int, clip_eps: float, advantage: float
) -> tuple[float, np.ndarray, bool]:
    """Clipped surrogate max(-r*A, -clip(r)*A) with gradient through the
    branch attaining the max; ties select the unclipped branch."""
    if not math.isfinite(behavior_logp):
        raise ValueError("behavior_logp must be finite (the token was sampled)")
    lp = log_prob(dist, token)
    ratio = math.exp(lp - behavior_logp)
    unclipped = -ratio * advantage
    clipped_val = -min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps) * advantage
    if unclipped >= clipped_val:
        coeff = advantage * ratio
        grad = coeff * dist.probs
        grad = grad.copy()
        grad[token] -= coeff
        return unclipped, grad, False
    # The clipped branch can only win strictly when the ratio sits outside
    # the clip band, where its derivative vanishes.
    return clipped_val, np.zeros(dist.vocab_size), True


def clipped_rkl_loss(inp: TokenLossInput) -> TokenLossOutput:
    """PPO-style clipped surrogate on the teacher/behavior log-prob advantage."""
    dist = _student_dist(inp)
    adv = mc_reverse_kl_reward(inp.teacher_query.token_logp, inp.behavior_logp)
    loss, grad, clipped = _clipped_core(dist, inp.behavior_logp, inp.token, inp.clip_eps, adv)
    return TokenLossOutput(loss=loss, grad=grad, clipped=clipped)


def _fkl_loss_grad(topk: TopKView, dist: Categorical) -> tuple[float, np.ndarray]:
    loss = truncated_forward_kl(topk, dist)
    grad = dist.probs.copy()
    grad[topk.indices] -= topk.renorm_probs
    return loss, grad


def fkl_term_loss(inp: TokenLossInput) -> TokenLossOutput:
    """Truncated forward KL, active only when the teacher entropy strictly
    exceeds the threshold; otherwise a zero loss with zero gradient."""
    if inp.teacher_query.entropy > inp.tau:
        dist = _student_dist(inp)
        loss, grad = _fkl_loss_grad(inp.teacher_query.topk, dist)
        return TokenLossOutput(loss=loss, grad=grad, gate_active=True)
    v = inp.student_logits.shape[0]
    return TokenLossOutput(loss=0.0, grad=np.zeros(v), gate_active=False)


def eopd_token_loss(inp: TokenLossInput) -> TokenLossOutput:
    """Clipped surrogate plus the entropy-gated forward-KL term.

    ``fkl_weight`` scales the gated term; the default of 1.0 is the plain
    sum.
    """
    base = clipped_rkl_loss(inp)
    gated = fkl_term_loss(inp)
    if not gated.gate_active:
        return TokenLossOutput(loss=base.loss, grad=base.grad, clipped=base.clipped)
    return TokenLossOutput(
        loss=base.loss + inp.fkl_weight * gated.loss,
        grad=base.grad + inp.fkl_weight * gated.grad,
        gate_active=True,
        clipped=base.clipped,
    )


def entropy_bonus_loss(inp: TokenLossInput) -> TokenLossOutput:
    """Clipped surrogate minus a policy-entropy bonus with coefficient
    ``entropy_coef``."""
    beta = inp.entropy_coef
    if beta < 0.0:
        raise ValueError("entropy_coef must be nonnegative")
    base = clipped_rkl_loss(inp)
    dist = _student_dist(inp)
    h = entropy(dist)
    logp = np.log(np.maximum(dist.probs, PROB_FLOOR))
    # d(-H)/dz_j = p_j (log p_j + H)
    grad = base.grad + beta * dist.probs * (logp + h)
    return TokenLossOutput(loss=base.loss - beta * h, grad=grad, clipped=base.clipped)


def advantage_shaping(adv: float, student_entropy: float, alpha: float, kappa: float) -> float:
    """Add an entropy-dependent bump, capped at |adv|/kappa so the sign of a
    nonzero advantage is preserved. The entropy input is a rollout-time
    constant and carries no gradient."""
    if not kappa > 1.0:
        raise ValueError("kappa must exceed 1")
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    if student_entropy < 0.0:
        raise ValueError("entropy must be nonnegative")
    return adv + min(alpha * student_entropy, abs(adv) / kappa)


def _shaped_advantage_loss(inp: TokenLossInput) -> TokenLossOutput:
    dist = _student_dist(inp)
    adv = mc_reverse_kl_reward(inp.teacher_query.token_logp, inp.behavior_logp)
    shaped = advantage_shaping(adv, inp.behavior_entropy, inp.shaping_alpha, inp.shaping_kappa)
    loss, grad, clipped = _clipped_core(dist, inp.behavior_logp, inp.token, inp.clip_eps, shaped)
    return TokenLossOutput(loss=loss, grad=grad, clipped=clipped)


def kd_offpolicy_loss(
    student_logits,
    teacher_query: TeacherQuery,
    token: int,
    w_ce: float = 0.5,
    w_kl: float = 0.5,
) -> TokenLossOutput:
    """Weighted cross-entropy plus truncated forward KL on a teacher-sampled
    token (the off-policy distillation objective)."""
    if w_ce < 0.0 or w_kl < 0.0:
        raise ValueError("loss weights must be nonnegative")
    logits = as_logits(student_logits)
    if not 0 <= token < logits.shape[0]:
        raise ValueError("token outside the vocabulary")
    dist = softmax_temp(logits, 1.0)
    ce_loss = -log_prob(dist, token)
    ce_grad = dist.probs.copy()
    ce_grad[token] -= 1.0
    fkl_loss, fkl_grad = _fkl_loss_grad(teacher_query.topk, dist)
    return TokenLossOutput(
        loss=w_ce * ce_loss + w_kl * fkl_loss,
        grad=w_ce * ce_grad + w_kl * fkl_grad,
        gate_active=True,
    )


def token_loss(inp: TokenLossInput) -> TokenLossOutput:
    """Dispatch one recorded position to the active method's loss."""
    if inp.variant is Method.OPD:
        return clipped_rkl_loss(inp)
    if inp.variant is Method.EOPD:
        return eopd_token_loss(inp)
    if inp.variant is Method.FULL_FKL:
        base = clipped_rkl_loss(inp)
        dist = _student_dist(inp)
        loss, grad = _fkl_loss_grad(inp.teacher_query.topk, dist)
        return TokenLossOutput(
            loss=base.loss + inp.fkl_weight * loss,
            grad=base.grad + inp.fkl_weight * grad,
            gate_active=True,
            clipped=base.clipped,
        )
    if inp.variant is Method.RANDOM_FKL:
        base = clipped_rkl_loss(inp)
        if not inp.random_gate:
            return base
        dist = _student_dist(inp)
        loss, grad = _fkl_loss_grad(inp.teacher_query.topk, dist)
        return TokenLossOutput(
            loss=base.loss + inp.fkl_weight * loss,
            grad=base.grad + inp.fkl_weight * grad,
            gate_active=True,
            clipped=base.clipped,
        )
    if inp.variant is Method.ENTROPY_BONUS:
        return entropy_bonus_loss(inp)
    if inp.variant is Method.ADV_SHAPING:
        return _shaped_advantage_loss(inp)
    raise ValueError(f"{inp.variant} is not a per-token loss variant")
