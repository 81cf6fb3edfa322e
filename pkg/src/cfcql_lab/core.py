"""Shared domain types, seeded randomness, and dataset integrity checks.

Datasets are stored as plain text: one JSON header line followed by one line
per transition, so files can be diffed, inspected, and reloaded bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
GENERATOR_VERSION = "0.1.0"

# Tabular states are ints; continuous states are tuples of floats.
StateKey = Any


class EnvId(str, Enum):
    TOY_MMDP = "toy_mmdp"
    EQUAL_LINE = "equal_line"


class Tier(str, Enum):
    RANDOM = "random"
    MEDIUM = "medium"
    MEDIUM_REPLAY = "medium_replay"
    EXPERT = "expert"
    MIXED = "mixed"


@dataclass(frozen=True)
class EnvSpec:
    """Complete static description of a finite multi-agent MDP."""

    env_id: EnvId
    n_agents: int
    n_actions: int
    gamma: float
    r_max: float
    episode_limit: int
    state_kind: str  # "discrete" | "vector"
    state_codec: str  # human-readable description of the encoding

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_actions < 2:
            raise ValueError(f"n_actions must be >= 2, got {self.n_actions}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.episode_limit < 1:
            raise ValueError(f"episode_limit must be >= 1, got {self.episode_limit}")

    def matches(self, other: "EnvSpec") -> bool:
        """True when two specs describe the same environment instance."""
        return (
            self.env_id == other.env_id
            and self.n_agents == other.n_agents
            and self.n_actions == other.n_actions
            and self.gamma == other.gamma
            and self.episode_limit == other.episode_limit
        )


@dataclass(frozen=True)
class Transition:
    state: StateKey
    joint_action: tuple
    reward: float
    next_state: StateKey
    done: bool


@dataclass(frozen=True)
class DatasetHeader:
    spec: EnvSpec
    tier: Tier
    seed: int
    n_trajectories: int
    generator_version: str = GENERATOR_VERSION
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class Dataset:
    """Persisted offline experience with provenance header.

    ``trajectory_boundaries`` holds the start index of every trajectory; the
    k-th trajectory is ``transitions[b_k : b_{k+1}]``.
    """

    header: DatasetHeader
    transitions: tuple
    trajectory_boundaries: tuple

    def __len__(self) -> int:
        return len(self.transitions)

    def trajectory_slices(self) -> list:
        bounds = list(self.trajectory_boundaries) + [len(self.transitions)]
        return [(bounds[i], bounds[i + 1]) for i in range(len(self.trajectory_boundaries))]

    def trajectory_returns(self) -> np.ndarray:
        rewards = np.array([t.reward for t in self.transitions], dtype=np.float64)
        return np.array([rewards[a:b].sum() for a, b in self.trajectory_slices()])

    def actions_array(self) -> np.ndarray:
        return np.array([t.joint_action for t in self.transitions], dtype=np.int64)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(self.violations)


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    Identical (seed, stream_id) pairs always yield generators that produce
    identical outputs; child streams are derived by label so independent
    components never share draws.
    """

    seed: int
    stream_id: str = "root"

    def generator(self) -> np.random.Generator:
        digest = hashlib.blake2b(self.stream_id.encode("utf-8"), digest_size=8).digest()
        key = int.from_bytes(digest, "little")
        return np.random.default_rng(np.random.SeedSequence([self.seed & (2**64 - 1), key]))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{label}")


@dataclass
class FactoredPolicy:
    """Per-agent categorical action distributions conditioned on state.

    The joint policy is the product over agents. States missing from the
    table fall back to the uniform distribution.
    """

    n_agents: int
    n_actions: int
    table: dict = field(default_factory=dict)

    def probs(self, state: StateKey) -> np.ndarray:
        row = self.table.get(state)
        if row is None:
            return np.full((self.n_agents, self.n_actions), 1.0 / self.n_actions)
        return row

    def dense(self, n_states: int) -> np.ndarray:
        """Materialize (n_agents, n_states, n_actions) for integer states."""
        out = np.full((self.n_agents, n_states, self.n_actions), 1.0 / self.n_actions)
        for s, row in self.table.items():
            out[:, s, :] = row
        return out

    def probs_batch(self, states: Sequence[StateKey]) -> np.ndarray:
        return np.stack([self.probs(s) for s in states])

    def greedy_batch(self, states: Sequence[StateKey]) -> np.ndarray:
        return np.stack([np.argmax(self.probs(s), axis=1) for s in states])

    def sample_batch(self, states: Sequence[StateKey], rng: np.random.Generator) -> np.ndarray:
        probs = self.probs_batch(states)  # (m, n, A)
        u = rng.random(probs.shape[:2])
        cdf = np.cumsum(probs, axis=2)
        return (u[:, :, None] > cdf).sum(axis=2)

    def validate(self, atol: float = 1e-9) -> list:
        problems = []
        for s, row in self.table.items():
            if row.shape != (self.n_agents, self.n_actions):
                problems.append(f"state {s}: shape {row.shape}")
                continue
            if np.any(row < -atol):
                problems.append(f"state {s}: negative probability")
            if np.any(np.abs(row.sum(axis=1) - 1.0) > atol):
                problems.append(f"state {s}: rows do not sum to 1")
        return problems


def uniform_policy(n_agents: int, n_actions: int) -> FactoredPolicy:
    return FactoredPolicy(n_agents, n_actions, {})


def greedy_policy_from_actions(action_map: dict, n_agents: int, n_actions: int) -> FactoredPolicy:
    """One-hot FactoredPolicy from a map state -> per-agent action indices."""
    table = {}
    for s, acts in action_map.items():
        row = np.zeros((n_agents, n_actions))
        row[np.arange(n_agents), np.asarray(acts, dtype=np.int64)] = 1.0
        table[s] = row
    return FactoredPolicy(n_agents, n_actions, table)


def validate_dataset(dataset: Dataset, spec: EnvSpec) -> ValidationReport:
    """Report every Transition/Dataset invariant violation and spec mismatch."""
    violations = []
    header = dataset.header
    if header.spec.env_id != spec.env_id:
        violations.append(f"header env_id {header.spec.env_id} != spec {spec.env_id}")
    if header.spec.n_agents != spec.n_agents:
        violations.append(f"header n_agents {header.spec.n_agents} != spec {spec.n_agents}")
    if header.spec.n_actions != spec.n_actions:
        violations.append(f"header n_actions {header.spec.n_actions} != spec {spec.n_actions}")

    for idx, t in enumerate(dataset.transitions):
        if len(t.joint_action) != spec.n_agents:
            violations.append(f"transition {idx}: joint action has {len(t.joint_action)} entries")
            continue
        for i, a in enumerate(t.joint_action):
            if not 0 <= a < spec.n_actions:
                violations.append(
                    f"transition {idx}: agent {i} action {a} outside [0, {spec.n_actions})"
                )
        if abs(t.reward) > spec.r_max + 1e-9:
            violations.append(
                f"transition {idx}: |reward| {abs(t.reward):.6g} exceeds r_max {spec.r_max:.6g}"
            )

    bounds = dataset.trajectory_boundaries
    n = len(dataset.transitions)
    if n and (not bounds or bounds[0] != 0):
        violations.append("trajectory boundaries do not start at 0")
    for k in range(1, len(bounds)):
        if bounds[k] <= bounds[k - 1]:
            violations.append(f"trajectory boundaries overlap at index {k}")
    if bounds and bounds[-1] >= n and n > 0:
        violations.append("trajectory boundary beyond last transition")
    if header.n_trajectories != len(bounds):
        violations.append(
            f"header n_trajectories {header.n_trajectories} != {len(bounds)} partitions"
        )
    return ValidationReport(tuple(violations))


def empirical_behavior(dataset: Dataset, smoothing: float = 0.0) -> FactoredPolicy:
    """Counting estimate of the per-agent behavior policy.

    beta_i(a|s) = (count(s, a_i=a) + smoothing) / (count(s) + smoothing * |A|);
    states absent from the dataset map to the uniform distribution.
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if not dataset.transitions:
        raise ValueError("empty dataset")
    spec = dataset.header.spec
    n, n_act = spec.n_agents, spec.n_actions
    counts: dict = {}
    for t in dataset.transitions:
        row = counts.get(t.state)
        if row is None:
            row = np.zeros((n, n_act))
            counts[t.state] = row
        row[np.arange(n), np.asarray(t.joint_action, dtype=np.int64)] += 1.0
    table = {}
    for s, row in counts.items():
        denom = row.sum(axis=1, keepdims=True) + smoothing * n_act
        table[s] = (row + smoothing) / denom
    return FactoredPolicy(n, n_act, table)


# ---------------------------------------------------------------------------
# Dataset file format: JSON header line + one CSV-ish record per transition.
# Floats are written with repr() so reloads are bit-exact.
# ---------------------------------------------------------------------------


def _encode_state(state: StateKey) -> str:
    if isinstance(state, (int, np.integer)):
        return str(int(state))
    return ";".join(repr(float(x)) for x in state)


def _decode_state(text: str, state_kind: str) -> StateKey:
    if state_kind == "discrete":
        return int(text)
    return tuple(float(x) for x in text.split(";"))


def save_dataset(dataset: Dataset, path) -> None:
    header = dataset.header
    spec = header.spec
    meta = {
        "format_version": header.format_version,
        "generator_version": header.generator_version,
        "env_id": spec.env_id.value,
        "n_agents": spec.n_agents,
        "n_actions": spec.n_actions,
        "tier": header.tier.value,
        "seed": header.seed,
        "n_trajectories": header.n_trajectories,
        "gamma": spec.gamma,
        "r_max": spec.r_max,
        "episode_limit": spec.episode_limit,
        "state_kind": spec.state_kind,
        "state_codec": spec.state_codec,
    }
    traj_ids = np.zeros(len(dataset.transitions), dtype=np.int64)
    for k, (a, b) in enumerate(dataset.trajectory_slices()):
        traj_ids[a:b] = k
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for idx, t in enumerate(dataset.transitions):
            fields = [
                _encode_state(t.state),
                " ".join(str(int(a)) for a in t.joint_action),
                repr(float(t.reward)),
                _encode_state(t.next_state),
                "1" if t.done else "0",
                str(int(traj_ids[idx])),
            ]
            fh.write(",".join(fields) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        spec = EnvSpec(
            env_id=EnvId(meta["env_id"]),
            n_agents=meta["n_agents"],
            n_actions=meta["n_actions"],
            gamma=meta["gamma"],
            r_max=meta["r_max"],
            episode_limit=meta["episode_limit"],
            state_kind=meta["state_kind"],
            state_codec=meta["state_codec"],
        )
        transitions = []
        boundaries = []
        last_traj = None
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            state_s, actions_s, reward_s, next_s, done_s, traj_s = line.split(",")
            traj = int(traj_s)
            if traj != last_traj:
                boundaries.append(len(transitions))
                last_traj = traj
            transitions.append(
                Transition(
                    state=_decode_state(state_s, meta["state_kind"]),
                    joint_action=tuple(int(a) for a in actions_s.split(" ")),
                    reward=float(reward_s),
                    next_state=_decode_state(next_s, meta["state_kind"]),
                    done=done_s == "1",
                )
            )
    header = DatasetHeader(
        spec=spec,
        tier=Tier(meta["tier"]),
        seed=meta["seed"],
        n_trajectories=meta["n_trajectories"],
        generator_version=meta["generator_version"],
        format_version=meta["format_version"],
    )
    return Dataset(header, tuple(transitions), tuple(boundaries))
