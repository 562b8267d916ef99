"""Single-context instability study: reverse-KL reward updates against a
fixed multi-mode categorical teacher, with a capacity-limited student that
samples only from its current top indices.

Tracks how violently the student's top set churns step to step (Jaccard
distance) and how often its most probable index changes, under a peaked
versus a spread teacher.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .probdist import Categorical, TopKView, log_prob, sample, softmax_temp, top_k
from .synthenv import DEFAULT_MODE_VALUES

__all__ = [
    "ToyConfig",
    "ToyStepRecord",
    "ToyTrace",
    "ToyResult",
    "make_toy_teacher",
    "restricted_student_dist",
    "toy_step",
    "run_toy",
    "smoothed",
    "render_traces_csv",
    "render_summary_json",
]


@dataclass(frozen=True)
class ToyConfig:
    """Defaults reproduce the two scenarios: temperature 0.3 gives the
    peaked teacher, 1.0 the spread one. Learning rate and step count are
    artifact constants chosen so the peaked scenario visibly converges."""

    vocab_size: int = 80
    mode_values: tuple[float, ...] = DEFAULT_MODE_VALUES
    temperature: float = 0.3
    student_top: int = 10
    learning_rate: float = 0.5
    steps: int = 300
    seeds: tuple[int, ...] = (0, 1, 2)
    smooth_window: int = 20

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 1 <= self.student_top <= self.vocab_size:
            raise ValueError("student_top must lie in [1, vocab_size]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if len(self.mode_values) > self.vocab_size:
            raise ValueError("more planted modes than vocabulary entries")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.smooth_window < 1:
            raise ValueError("smooth_window must be positive")


@dataclass(frozen=True)
class ToyStepRecord:
    sampled: int
    reward: float
    top_set: frozenset[int]
    top1: int


@dataclass(frozen=True)
class ToyTrace:
    """Per-step metrics for one seed. ``change_rate[t]`` is the Jaccard
    distance between the student's top sets after steps t-1 and t; step 0
    records no change. ``top1_changes`` is cumulative."""

    seed: int
    change_rate: np.ndarray
    top1_index: np.ndarray
    top1_changes: np.ndarray
    sampled: np.ndarray
    reward: np.ndarray

    @property
    def steps(self) -> int:
        return self.change_rate.shape[0]

    @property
    def final_top1_changes(self) -> int:
        return int(self.top1_changes[-1]) if self.steps else 0


@dataclass(frozen=True)
class ToyResult:
    config: ToyConfig
    traces: tuple[ToyTrace, ...]
    mean_top1_changes: float
    std_top1_changes: float
    mean_change_rate: np.ndarray
    mean_smoothed_change_rate: np.ndarray


def make_toy_teacher(cfg: ToyConfig, rng: np.random.Generator) -> Categorical:
    """Standard-normal logits with ``len(mode_values)`` entries overwritten
    by the planted mode values, softmaxed at the scenario temperature. The
    teacher is fixed for the whole run."""
    z = rng.standard_normal(cfg.vocab_size)
    modes = np.asarray(cfg.mode_values, dtype=np.float64)
    if modes.size:
        idx = rng.choice(cfg.vocab_size, size=modes.size, replace=False)
        z[idx] = modes
    return softmax_temp(z, cfg.temperature)


def restricted_student_dist(student_logits, top: int) -> TopKView:
    """The student's sampling distribution: its top ``top`` indices under a
    plain softmax, renormalized. Recomputed from the live logits each step."""
    return top_k(softmax_temp(student_logits, 1.0), top)


def toy_step(
    student_logits: np.ndarray,
    teacher: Categorical,
    cfg: ToyConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ToyStepRecord]:
    """One reward update: sample from the restricted student, score the
    sample by the teacher/student log-prob gap, and nudge only the sampled
    logit. Returns the updated logits and the post-update top set."""
    view = restricted_student_dist(student_logits, cfg.student_top)
    local = sample(Categorical(view.renorm_probs), rng)
    x = int(view.indices[local])
    reward = log_prob(teacher, x) - float(np.log(view.renorm_probs[local]))
    updated = np.array(student_logits, dtype=np.float64)
    updated[x] += cfg.learning_rate * reward
    post = top_k(softmax_temp(updated, 1.0), cfg.student_top)
    return updated, ToyStepRecord(
        sampled=x,
        reward=reward,
        top_set=frozenset(int(i) for i in post.indices),
        top1=int(post.indices[0]),
    )


def _jaccard_distance(a: frozenset[int], b: frozenset[int]) -> float:
    union = len(a | b)
    return 1.0 - len(a & b) / union if union else 0.0


def _run_seed(cfg: ToyConfig, seed: int) -> ToyTrace:
    rng = np.random.default_rng(seed)
    teacher = make_toy_teacher(cfg, rng)
    logits = rng.standard_normal(cfg.vocab_size)

    n = cfg.steps
    change = np.zeros(n)
    top1_idx = np.zeros(n, dtype=np.int64)
    top1_changes = np.zeros(n, dtype=np.int64)
    sampled = np.zeros(n, dtype=np.int64)
    reward = np.zeros(n)

    prev: ToyStepRecord | None = None
    changes = 0
    for t in range(n):
        logits, rec = toy_step(logits, teacher, cfg, rng)
        if t > 0 and prev is not None:
            change[t] = _jaccard_distance(rec.top_set, prev.top_set)
            if rec.top1 != prev.top1:
                changes += 1
        top1_idx[t] = rec.top1
        top1_changes[t] = changes
        sampled[t] = rec.sampled
        reward[t] = rec.reward
        prev = rec
    return ToyTrace(
        seed=seed,
        change_rate=change,
        top1_index=top1_idx,
        top1_changes=top1_changes,
        sampled=sampled,
        reward=reward,
    )


def smoothed(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what exists."""
    out = np.empty_like(values, dtype=np.float64)
    csum = np.cumsum(np.insert(values, 0, 0.0))
    for i in range(values.shape[0]):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def run_toy(cfg: ToyConfig) -> ToyResult:
    """Run every seed and aggregate the change-count statistics and the
    across-seed mean change-rate curves (raw and smoothed)."""
    if not cfg.seeds:
        raise ValueError("at least one seed is required")
    traces = tuple(_run_seed(cfg, seed) for seed in cfg.seeds)
    counts = np.array([t.final_top1_changes for t in traces], dtype=np.float64)
    if cfg.steps:
        mean_curve = np.mean([t.change_rate for t in traces], axis=0)
        mean_smoothed = smoothed(mean_curve, cfg.smooth_window)
    else:
        mean_curve = np.zeros(0)
        mean_smoothed = np.zeros(0)
    std = float(np.std(counts, ddof=1)) if counts.size > 1 else 0.0
    return ToyResult(
        config=cfg,
        traces=traces,
        mean_top1_changes=float(counts.mean()) if counts.size else 0.0,
        std_top1_changes=std,
        mean_change_rate=mean_curve,
        mean_smoothed_change_rate=mean_smoothed,
    )


def render_traces_csv(result: ToyResult) -> str:
    lines = ["seed,step,change_rate,top1_index,top1_changes,sampled,reward"]
    for trace in result.traces:
        for t in range(trace.steps):
            lines.append(
                f"{trace.seed},{t},{trace.change_rate[t]!r},{trace.top1_index[t]},"
                f"{trace.top1_changes[t]},{trace.sampled[t]},{trace.reward[t]!r}"
            )
    return "\n".join(lines) + "\n"


def render_summary_json(result: ToyResult) -> str:
    payload = {
        "temperature": result.config.temperature,
        "steps": result.config.steps,
        "seeds": list(result.config.seeds),
        "smooth_window": result.config.smooth_window,
        "top1_changes_per_seed": {
            str(t.seed): t.final_top1_changes for t in result.traces
        },
        "top1_changes_mean": result.mean_top1_changes,
        "top1_changes_std": result.std_top1_changes,
        "mean_change_rate": [float(v) for v in result.mean_change_rate],
        "mean_smoothed_change_rate": [float(v) for v in result.mean_smoothed_change_rate],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
