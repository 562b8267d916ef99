"""Outer training loop: snapshot the behavior policy, collect rollouts,
then take minibatch gradient steps on the selected per-token loss.

Every iteration draws a prompt batch, rolls out one trajectory per prompt
under the frozen snapshot, partitions the trajectories into minibatches by
a seeded shuffle, and applies plain gradient descent on the token-count
normalized loss. The KD method instead samples trajectories from the
teacher and trains the off-policy cross-entropy + forward-KL objective
without any snapshot or importance-ratio machinery.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .divergence import reverse_kl, truncated_forward_kl
from .objective import Method, TokenLossInput, kd_offpolicy_loss, token_loss
from .probdist import entropy, log_prob
from .synthenv import (
    Env,
    EnvConfig,
    RolloutBuffer,
    STREAM_INIT,
    TabularStudent,
    TokenRecord,
    build_env,
    new_student,
    rollout,
    teacher_rollout,
)

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "TrainReport",
    "TrainResult",
    "TrainingDivergedError",
    "SWEEP_AXES",
    "train",
    "sweep",
    "save_student",
    "load_student",
    "render_metrics_csv",
    "render_report_json",
]

logger = logging.getLogger(__name__)

# rng stream tags beyond the two used by synthenv
STREAM_ITER = 2
STREAM_TRAJ = 3
STREAM_GATE = 4

MODEL_MAGIC = b"EOPD"
MODEL_VERSION = 1

SWEEP_AXES = ("tau", "k", "variant", "fkl_fraction")


@dataclass(frozen=True)
class TrainConfig:
    """One training run. ``batch_size`` prompts are rolled out per
    iteration and split into ``batch_size // minibatch_size`` gradient
    steps. ``seed`` drives the environment build, the student
    initialization, and every sampling stream."""

    env: EnvConfig = EnvConfig()
    method: Method = Method.EOPD
    batch_size: int = 32
    minibatch_size: int = 8
    iterations: int = 40
    learning_rate: float = 100.0
    clip_eps: float = 0.2
    tau: float = 0.8
    topk: int = 16
    entropy_coef: float = 0.01
    shaping_alpha: float = 0.1
    shaping_kappa: float = 2.0
    fkl_fraction: float = 0.2
    fkl_weight: float = 1.0
    momentum: float = 0.0
    kd_ce_weight: float = 0.5
    kd_kl_weight: float = 0.5
    metric_entropy_threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.minibatch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.batch_size % self.minibatch_size != 0:
            raise ValueError("batch_size must be divisible by minibatch_size")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 1 <= self.topk <= self.env.vocab_size:
            raise ValueError("topk must lie in [1, vocab_size]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def gradient_steps_per_iteration(self) -> int:
        return self.batch_size // self.minibatch_size


@dataclass(frozen=True)
class MetricsRow:
    """One iteration of training diagnostics.

    ``first_minibatch_max_ratio_dev`` is max|r - 1| over the first
    minibatch of the iteration, before any update; it must be exactly zero
    for the on-policy methods. ``wall_clock`` is informational only and is
    never written to exported files, so replays stay byte-identical.
    """

    iteration: int
    mean_loss: float
    reverse_kl_visited: float
    fkl_high_entropy: float | None
    gate_active_fraction: float
    student_entropy_mean: float
    gradient_steps: int
    first_minibatch_max_ratio_dev: float | None
    wall_clock: float


@dataclass(frozen=True)
class TrainReport:
    rows: tuple[MetricsRow, ...]


@dataclass(frozen=True)
class TrainResult:
    config: TrainConfig
    env: Env
    report: TrainReport
    student: TabularStudent
    final_buffer: RolloutBuffer | None


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries the
    offending token record for the diagnostic dump."""

    def __init__(self, message: str, iteration: int, record: TokenRecord | None):
        super().__init__(message)
        self.iteration = iteration
        self.record = record

    def diagnostics(self) -> dict:
        out = {"message": str(self), "iteration": self.iteration}
        if self.record is not None:
            r = self.record
            out["record"] = {
                "state": r.state,
                "token": r.token,
                "behavior_logp": r.behavior_logp,
                "behavior_entropy": r.behavior_entropy,
                "fkl_gate": r.fkl_gate,
                "teacher_logp": r.query.token_logp,
                "teacher_entropy": r.query.entropy,
            }
        return out


def _token_loss_input(cfg: TrainConfig, student: TabularStudent, rec: TokenRecord) -> TokenLossInput:
    return TokenLossInput(
        student_logits=student.logits[rec.state],
        behavior_logp=rec.behavior_logp,
        token=rec.token,
        teacher_query=rec.query,
        clip_eps=cfg.clip_eps,
        tau=cfg.tau,
        variant=cfg.method,
        entropy_coef=cfg.entropy_coef,
        shaping_alpha=cfg.shaping_alpha,
        shaping_kappa=cfg.shaping_kappa,
        fkl_fraction=cfg.fkl_fraction,
        fkl_weight=cfg.fkl_weight,
        random_gate=rec.fkl_gate,
        behavior_entropy=rec.behavior_entropy,
    )


def _collect_rollouts(
    cfg: TrainConfig, env: Env, student: TabularStudent, it: int, prompt_ids
) -> RolloutBuffer:
    trajectories = []
    if cfg.method is Method.KD:
        for j, pid in enumerate(prompt_ids):
            traj_rng = np.random.default_rng([cfg.seed, STREAM_TRAJ, it, j])
            trajectories.append(
                teacher_rollout(
                    env.teacher, env.prompt_pool[pid], cfg.env, cfg.topk, traj_rng, prompt_id=int(pid)
                )
            )
    else:
        snapshot = student.snapshot()
        for j, pid in enumerate(prompt_ids):
            traj_rng = np.random.default_rng([cfg.seed, STREAM_TRAJ, it, j])
            gate_rng = np.random.default_rng([cfg.seed, STREAM_GATE, it, j])
            trajectories.append(
                rollout(
                    snapshot,
                    env.teacher,
                    env.prompt_pool[pid],
                    cfg.env,
                    cfg.topk,
                    traj_rng,
                    prompt_id=int(pid),
                    gate_rng=gate_rng,
                    fkl_fraction=cfg.fkl_fraction,
                )
            )
    return RolloutBuffer(trajectories=tuple(trajectories))


def _iteration_metrics(
    cfg: TrainConfig,
    env: Env,
    student: TabularStudent,
    buffer: RolloutBuffer,
    it: int,
    mean_loss: float,
    gate_fraction: float,
    ratio_dev: float | None,
    wall_clock: float,
) -> MetricsRow:
    visits = np.zeros(env.cfg.n_states, dtype=np.int64)
    for rec in buffer.records():
        visits[rec.state] += 1
    visited = np.flatnonzero(visits)
    weights = visits[visited] / visits.sum()
    rkl = 0.0
    ent_mean = 0.0
    for s, w in zip(visited, weights):
        dist = student.dist(int(s))
        rkl += w * reverse_kl(dist, env.teacher.dist(int(s)))
        ent_mean += w * entropy(dist)

    fkl_vals = [
        truncated_forward_kl(rec.query.topk, student.dist(rec.state))
        for rec in buffer.records()
        if rec.query.entropy >= cfg.metric_entropy_threshold
    ]
    fkl = float(np.mean(fkl_vals)) if fkl_vals else None

    return MetricsRow(
        iteration=it,
        mean_loss=mean_loss,
        reverse_kl_visited=float(rkl),
        fkl_high_entropy=fkl,
        gate_active_fraction=gate_fraction,
        student_entropy_mean=float(ent_mean),
        gradient_steps=cfg.gradient_steps_per_iteration,
        first_minibatch_max_ratio_dev=ratio_dev,
        wall_clock=wall_clock,
    )


def train(cfg: TrainConfig, env: Env | None = None) -> TrainResult:
    """Run the full loop and return the report, trained student, and the
    last iteration's rollout buffer. Raises TrainingDivergedError on a
    non-finite loss or gradient."""
    if env is None:
        env = build_env(cfg.env)
    student = new_student(cfg.env, np.random.default_rng([cfg.seed, STREAM_INIT]))
    velocity = np.zeros_like(student.logits) if cfg.momentum > 0.0 else None

    rows = []
    buffer: RolloutBuffer | None = None
    on_policy = cfg.method is not Method.KD
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        iter_rng = np.random.default_rng([cfg.seed, STREAM_ITER, it])
        prompt_ids = iter_rng.integers(0, len(env.prompt_pool), size=cfg.batch_size)
        buffer = _collect_rollouts(cfg, env, student, it, prompt_ids)
        order = iter_rng.permutation(cfg.batch_size)

        n_steps = cfg.gradient_steps_per_iteration
        loss_sum = 0.0
        gate_count = 0
        token_count = 0
        ratio_dev: float | None = 0.0 if on_policy else None
        for g in range(n_steps):
            chunk = order[g * cfg.minibatch_size : (g + 1) * cfg.minibatch_size]
            batch = [buffer.trajectories[i] for i in chunk]
            n_tok = sum(len(t) for t in batch)
            grad = np.zeros_like(student.logits)
            for traj in batch:
                for rec in traj.records:
                    if on_policy:
                        if g == 0:
                            lp = log_prob(student.dist(rec.state), rec.token)
                            dev = abs(math.exp(lp - rec.behavior_logp) - 1.0)
                            if dev > ratio_dev:
                                ratio_dev = dev
                        try:
                            out = token_loss(_token_loss_input(cfg, student, rec))
                        except ValueError as exc:
                            raise TrainingDivergedError(
                                f"loss evaluation failed: {exc}", it, rec
                            ) from exc
                    else:
                        out = kd_offpolicy_loss(
                            student.logits[rec.state],
                            rec.query,
                            rec.token,
                            w_ce=cfg.kd_ce_weight,
                            w_kl=cfg.kd_kl_weight,
                        )
                    if not math.isfinite(out.loss) or not np.all(np.isfinite(out.grad)):
                        raise TrainingDivergedError("non-finite loss or gradient", it, rec)
                    loss_sum += out.loss
                    gate_count += out.gate_active
                    token_count += 1
                    grad[rec.state] += out.grad
            grad /= n_tok
            if velocity is not None:
                velocity *= cfg.momentum
                velocity += grad
                student.logits -= cfg.learning_rate * velocity
            else:
                student.logits -= cfg.learning_rate * grad

        row = _iteration_metrics(
            cfg,
            env,
            student,
            buffer,
            it,
            mean_loss=loss_sum / token_count,
            gate_fraction=gate_count / token_count,
            ratio_dev=ratio_dev,
            wall_clock=time.perf_counter() - t0,
        )
        rows.append(row)
        logger.info(
            "iter %d: loss %.4f rkl %.4f gate %.3f", it, row.mean_loss,
            row.reverse_kl_visited, row.gate_active_fraction,
        )

    return TrainResult(
        config=cfg,
        env=env,
        report=TrainReport(rows=tuple(rows)),
        student=student,
        final_buffer=buffer,
    )


def sweep(base: TrainConfig, axis: str, values) -> list[tuple[object, TrainResult]]:
    """Train once per value of the swept parameter, sharing the base seed.

    ``axis`` must be one of tau | k | variant | fkl_fraction.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    results = []
    for value in values:
        if axis == "tau":
            cfg = dataclasses.replace(base, tau=float(value))
        elif axis == "k":
            cfg = dataclasses.replace(base, topk=int(value))
        elif axis == "fkl_fraction":
            cfg = dataclasses.replace(base, fkl_fraction=float(value))
        else:
            cfg = dataclasses.replace(base, method=Method(str(value)))
        logger.info("sweep %s=%s", axis, value)
        results.append((value, train(cfg)))
    return results


def save_student(path, student: TabularStudent) -> None:
    """Write the logit table: magic 'EOPD', then version, vocabulary size,
    and context order as little-endian uint32, then the rows as
    little-endian float64."""
    header = MODEL_MAGIC + struct.pack(
        "<III", MODEL_VERSION, student.vocab_size, student.context_order
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(student.logits, dtype="<f8").tobytes())


def load_student(path) -> TabularStudent:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a student table (bad magic)")
    version, vocab, order = struct.unpack("<III", blob[4:16])
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    n_states = vocab**order
    table = np.frombuffer(blob[16:], dtype="<f8")
    if table.size != n_states * vocab:
        raise ValueError(f"{path}: truncated table")
    return TabularStudent(table.reshape(n_states, vocab), vocab, order)


def _row_cells(row: MetricsRow) -> list[str]:
    fkl = "" if row.fkl_high_entropy is None else repr(row.fkl_high_entropy)
    dev = "" if row.first_minibatch_max_ratio_dev is None else repr(row.first_minibatch_max_ratio_dev)
    return [
        str(row.iteration),
        repr(row.mean_loss),
        repr(row.reverse_kl_visited),
        fkl,
        repr(row.gate_active_fraction),
        repr(row.student_entropy_mean),
        str(row.gradient_steps),
        dev,
    ]


METRICS_COLUMNS = (
    "iteration,mean_loss,reverse_kl_visited,fkl_high_entropy,"
    "gate_active_fraction,student_entropy_mean,gradient_steps,"
    "first_minibatch_max_ratio_dev"
)


def render_metrics_csv(report: TrainReport) -> str:
    lines = [METRICS_COLUMNS]
    lines.extend(",".join(_row_cells(row)) for row in report.rows)
    return "\n".join(lines) + "\n"


def render_report_json(result: TrainResult) -> str:
    rows = []
    for row in result.report.rows:
        rows.append(
            {
                "iteration": row.iteration,
                "mean_loss": row.mean_loss,
                "reverse_kl_visited": row.reverse_kl_visited,
                "fkl_high_entropy": row.fkl_high_entropy,
                "gate_active_fraction": row.gate_active_fraction,
                "student_entropy_mean": row.student_entropy_mean,
                "gradient_steps": row.gradient_steps,
                "first_minibatch_max_ratio_dev": row.first_minibatch_max_ratio_dev,
            }
        )
    payload = {"method": result.config.method.value, "seed": result.config.seed, "rows": rows}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
