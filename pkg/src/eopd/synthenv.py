"""Synthetic autoregressive environment with tabular softmax policies.

A fixed teacher and a learnable student are tables of logits indexed by the
last ``context_order`` tokens. Rollouts sample a fixed number of tokens from
a frozen behavior policy and record, per position, everything the training
losses need: the behavior log-probability and entropy, a teacher query
(sampled-token log-probability, full-distribution entropy, renormalized
top-k), and the Bernoulli draw used by the random-placement baseline.

Saved rollout buffers use a line-oriented JSON format, one trajectory per
line::

    {"prompt_id": 0, "prompt": [3, 7], "records": [
        {"state": 103, "token": 4, "behavior_logp": -1.2,
         "behavior_entropy": 0.9, "fkl_gate": false,
         "teacher_logp": -0.8, "teacher_entropy": 1.4,
         "topk_indices": [4, 1], "topk_renorm": [0.7, 0.3],
         "topk_mass": 0.95}, ...]}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .probdist import PROB_FLOOR, Categorical, TopKView, entropy, sample, softmax_temp

__all__ = [
    "EnvConfig",
    "TeacherQuery",
    "TokenRecord",
    "Trajectory",
    "RolloutBuffer",
    "TabularTeacher",
    "TabularStudent",
    "FrozenPolicy",
    "Env",
    "build_teacher",
    "build_env",
    "new_student",
    "rollout",
    "teacher_rollout",
    "save_trajectories",
    "load_trajectories",
]

# Named rng streams derived from the run seed, so that rollouts could run in
# parallel with per-trajectory generators without changing any result.
STREAM_ENV = 0
STREAM_INIT = 1

_MAX_STATES = 10**6

DEFAULT_MODE_VALUES = (1.7, 1.9, 2.1, 2.3, 2.5)


@dataclass(frozen=True)
class EnvConfig:
    """Shape and teacher plan of the synthetic environment.

    ``p_high`` is the fraction of context states whose teacher row is built
    at ``temp_high`` (spread, high entropy); the rest use ``temp_low``
    (peaked). ``init_scale`` scales the student's Gaussian logit
    initialization: larger values mean the student starts out committed to
    arbitrary tokens and has to be actively spread out, which is the
    desk-scale stand-in for a capacity-limited student.
    """

    vocab_size: int = 32
    context_order: int = 2
    rollout_len: int = 64
    prompt_pool: int = 16
    p_high: float = 0.3
    temp_low: float = 0.05
    temp_high: float = 1.0
    mode_values: tuple[float, ...] = DEFAULT_MODE_VALUES
    init_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.context_order < 1:
            raise ValueError("vocab_size and context_order must be positive")
        if self.vocab_size**self.context_order > _MAX_STATES:
            raise ValueError(
                f"state table vocab_size**context_order exceeds {_MAX_STATES}"
            )
        if self.rollout_len < 1:
            raise ValueError("rollout_len must be at least 1")
        if self.prompt_pool < 1:
            raise ValueError("prompt_pool must be at least 1")
        if not 0.0 <= self.p_high <= 1.0:
            raise ValueError("p_high must lie in [0, 1]")
        if self.temp_low <= 0.0 or self.temp_high <= 0.0:
            raise ValueError("temperatures must be positive")
        if len(self.mode_values) > self.vocab_size:
            raise ValueError("more planted modes than vocabulary entries")
        if self.init_scale < 0.0:
            raise ValueError("init_scale must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.vocab_size**self.context_order


@dataclass(frozen=True)
class TeacherQuery:
    """Per-token teacher record: log-prob of the sampled token, entropy of
    the full conditional, and the frozen top-k view."""

    token_logp: float
    entropy: float
    topk: TopKView


@dataclass(frozen=True)
class TokenRecord:
    state: int
    token: int
    behavior_logp: float
    behavior_entropy: float
    fkl_gate: bool
    query: TeacherQuery


@dataclass(frozen=True)
class Trajectory:
    prompt_id: int
    prompt: tuple[int, ...]
    records: tuple[TokenRecord, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(r.token for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class RolloutBuffer:
    trajectories: tuple[Trajectory, ...]

    @property
    def n_tokens(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def records(self):
        for traj in self.trajectories:
            yield from traj.records


class _TablePolicy:
    """Shared row-table plumbing: per-state probs, floored log-probs, entropies."""

    def __init__(self, probs: np.ndarray, vocab_size: int, context_order: int):
        self.probs = probs
        self.logp = np.log(np.maximum(probs, PROB_FLOOR))
        ent = np.empty(probs.shape[0])
        for s in range(probs.shape[0]):
            ent[s] = entropy(Categorical(probs[s]))
        self.entropies = ent
        self.vocab_size = vocab_size
        self.context_order = context_order
        for arr in (self.probs, self.logp, self.entropies):
            arr.flags.writeable = False

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def dist(self, state: int) -> Categorical:
        return Categorical(self.probs[state])

    def entropy_at(self, state: int) -> float:
        return float(self.entropies[state])


class TabularTeacher(_TablePolicy):
    """Immutable per-context teacher table with cached top-k views."""

    def __init__(self, probs: np.ndarray, vocab_size: int, context_order: int):
        super().__init__(probs, vocab_size, context_order)
        self._topk_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def checksum(self) -> str:
        return hashlib.sha256(self.probs.tobytes()).hexdigest()

    def _topk_table(self, k: int):
        cached = self._topk_cache.get(k)
        if cached is None:
            idx = np.empty((self.n_states, k), dtype=np.int64)
            renorm = np.empty((self.n_states, k))
            mass = np.empty(self.n_states)
            from .probdist import top_k

            for s in range(self.n_states):
                view = top_k(self.dist(s), k)
                idx[s] = view.indices
                renorm[s] = view.renorm_probs
                mass[s] = view.mass
            cached = (idx, renorm, mass)
            self._topk_cache[k] = cached
        return cached

    def topk_view(self, state: int, k: int) -> TopKView:
        idx, renorm, mass = self._topk_table(k)
        return TopKView(indices=idx[state], renorm_probs=renorm[state], mass=float(mass[state]))

    def query(self, state: int, token: int, k: int) -> TeacherQuery:
        return TeacherQuery(
            token_logp=float(self.logp[state, token]),
            entropy=float(self.entropies[state]),
            topk=self.topk_view(state, k),
        )


class FrozenPolicy(_TablePolicy):
    """Read-only snapshot of a student used as the behavior policy."""


class TabularStudent:
    """Learnable per-context logit table; rows are plain softmax policies."""

    def __init__(self, logits: np.ndarray, vocab_size: int, context_order: int):
        self.logits = np.array(logits, dtype=np.float64)
        self.vocab_size = vocab_size
        self.context_order = context_order

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    def dist(self, state: int) -> Categorical:
        return softmax_temp(self.logits[state], 1.0)

    def entropy_at(self, state: int) -> float:
        return entropy(self.dist(state))

    def snapshot(self) -> FrozenPolicy:
        probs = np.empty_like(self.logits)
        for s in range(self.n_states):
            probs[s] = softmax_temp(self.logits[s], 1.0).probs
        return FrozenPolicy(probs, self.vocab_size, self.context_order)

    def copy(self) -> "TabularStudent":
        return TabularStudent(self.logits, self.vocab_size, self.context_order)


def state_key(tokens, vocab_size: int) -> int:
    """Context key of the last-m-token window ``tokens`` (oldest first)."""
    key = 0
    for t in tokens:
        key = key * vocab_size + int(t)
    return key


def build_teacher(cfg: EnvConfig, rng: np.random.Generator) -> TabularTeacher:
    """Draw the per-context teacher table.

    Each state's base logits are standard normal; ``len(mode_values)``
    distinct entries are overwritten with the planted mode values, and the
    row is softmaxed at the state's temperature (high with probability
    ``p_high``). The result is immutable.
    """
    v, n = cfg.vocab_size, cfg.n_states
    modes = np.asarray(cfg.mode_values, dtype=np.float64)
    probs = np.empty((n, v))
    for s in range(n):
        z = rng.standard_normal(v)
        if modes.size:
            idx = rng.choice(v, size=modes.size, replace=False)
            z[idx] = modes
        temp = cfg.temp_high if rng.random() < cfg.p_high else cfg.temp_low
        probs[s] = softmax_temp(z, temp).probs
    return TabularTeacher(probs, v, cfg.context_order)


@dataclass(frozen=True)
class Env:
    """A built environment: config, fixed teacher, and the prompt pool."""

    cfg: EnvConfig
    teacher: TabularTeacher
    prompt_pool: tuple[tuple[int, ...], ...]


def build_env(cfg: EnvConfig) -> Env:
    rng = np.random.default_rng([cfg.seed, STREAM_ENV])
    teacher = build_teacher(cfg, rng)
    pool = tuple(
        tuple(int(t) for t in rng.integers(0, cfg.vocab_size, size=cfg.context_order))
        for _ in range(cfg.prompt_pool)
    )
    return Env(cfg=cfg, teacher=teacher, prompt_pool=pool)


def new_student(cfg: EnvConfig, rng: np.random.Generator) -> TabularStudent:
    logits = cfg.init_scale * rng.standard_normal((cfg.n_states, cfg.vocab_size))
    return TabularStudent(logits, cfg.vocab_size, cfg.context_order)


def _generate(
    behavior: _TablePolicy,
    teacher: TabularTeacher,
    prompt: tuple[int, ...],
    prompt_id: int,
    cfg: EnvConfig,
    k: int,
    rng: np.random.Generator,
    gate_rng: np.random.Generator | None,
    fkl_fraction: float,
) -> Trajectory:
    if len(prompt) != cfg.context_order:
        raise ValueError("prompt length must equal the context order")
    n = cfg.n_states
    s = state_key(prompt, cfg.vocab_size)
    records = []
    for _ in range(cfg.rollout_len):
        dist = behavior.dist(s)
        x = sample(dist, rng)
        gate = bool(gate_rng.random() < fkl_fraction) if gate_rng is not None else False
        records.append(
            TokenRecord(
                state=s,
                token=x,
                behavior_logp=float(behavior.logp[s, x]),
                behavior_entropy=float(behavior.entropies[s]),
                fkl_gate=gate,
                query=teacher.query(s, x, k),
            )
        )
        s = (s * cfg.vocab_size + x) % n
    return Trajectory(prompt_id=prompt_id, prompt=tuple(prompt), records=tuple(records))


def rollout(
    student_snapshot: FrozenPolicy,
    teacher: TabularTeacher,
    prompt: tuple[int, ...],
    cfg: EnvConfig,
    k: int,
    rng: np.random.Generator,
    prompt_id: int = 0,
    gate_rng: np.random.Generator | None = None,
    fkl_fraction: float = 0.0,
) -> Trajectory:
    """Sample one trajectory from the frozen student and query the teacher
    at every position."""
    return _generate(
        student_snapshot, teacher, prompt, prompt_id, cfg, k, rng, gate_rng, fkl_fraction
    )


def teacher_rollout(
    teacher: TabularTeacher,
    prompt: tuple[int, ...],
    cfg: EnvConfig,
    k: int,
    rng: np.random.Generator,
    prompt_id: int = 0,
) -> Trajectory:
    """Sample one trajectory from the teacher itself (off-policy data);
    behavior fields hold teacher log-probs and entropies."""
    return _generate(teacher, teacher, prompt, prompt_id, cfg, k, rng, None, 0.0)


def _record_to_json(r: TokenRecord) -> dict:
    return {
        "state": r.state,
        "token": r.token,
        "behavior_logp": r.behavior_logp,
        "behavior_entropy": r.behavior_entropy,
        "fkl_gate": r.fkl_gate,
        "teacher_logp": r.query.token_logp,
        "teacher_entropy": r.query.entropy,
        "topk_indices": [int(i) for i in r.query.topk.indices],
        "topk_renorm": [float(p) for p in r.query.topk.renorm_probs],
        "topk_mass": r.query.topk.mass,
    }


def _record_from_json(d: dict) -> TokenRecord:
    return TokenRecord(
        state=int(d["state"]),
        token=int(d["token"]),
        behavior_logp=float(d["behavior_logp"]),
        behavior_entropy=float(d["behavior_entropy"]),
        fkl_gate=bool(d["fkl_gate"]),
        query=TeacherQuery(
            token_logp=float(d["teacher_logp"]),
            entropy=float(d["teacher_entropy"]),
            topk=TopKView(
                indices=np.asarray(d["topk_indices"], dtype=np.int64),
                renorm_probs=np.asarray(d["topk_renorm"], dtype=np.float64),
                mass=float(d["topk_mass"]),
            ),
        ),
    )


def save_trajectories(path, buffer: RolloutBuffer) -> None:
    """Write one trajectory per line in the documented JSON format."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in buffer.trajectories:
            line = {
                "prompt_id": traj.prompt_id,
                "prompt": list(traj.prompt),
                "records": [_record_to_json(r) for r in traj.records],
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def load_trajectories(path) -> RolloutBuffer:
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            trajectories.append(
                Trajectory(
                    prompt_id=int(d["prompt_id"]),
                    prompt=tuple(int(t) for t in d["prompt"]),
                    records=tuple(_record_from_json(r) for r in d["records"]),
                )
            )
    return RolloutBuffer(trajectories=tuple(trajectories))
