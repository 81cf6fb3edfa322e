"""Dataset tiers produced by an online TD trainer.

The trainer is the plain online value-decomposition learner (epsilon-greedy
acting, target network, additive mixing by default). Expert is the final
checkpoint; Medium is the earliest checkpoint reaching half the Expert's
evaluation return; Medium-Replay is the chronological buffer up to that
point; Mixed is an equal mixture of Medium and Expert trajectories.

Episodes are collected by a batch of lockstep workers; the buffer interleaves
whole trajectories in deterministic worker order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .core import (
    Dataset,
    DatasetHeader,
    EnvSpec,
    RngStream,
    Tier,
    Transition,
    validate_dataset,
)
from .learner import Batch, FactoredQ, cfcql_loss, make_greedy_actor
from .neural import Adam
from .rollouts import QValuesActor, RandomActor, evaluate_actor, rollout_episodes


class MediumThresholdError(RuntimeError):
    def __init__(self, best_return: float, threshold: float):
        self.best_return = best_return
        self.threshold = threshold
        super().__init__(
            f"training budget too small to reach the medium threshold "
            f"{threshold:.4g}: best evaluation return achieved was {best_return:.4g}"
        )


@dataclass
class OnlineTrainConfig:
    budget: int = 60_000  # gradient updates
    n_parallel: int = 8  # lockstep episode workers
    updates_per_block: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    gamma: Optional[float] = None
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_frac: float = 0.5
    target_interval: int = 200
    hidden: tuple = (64, 64)
    mixer: str = "additive"
    n_checkpoints: int = 40
    eval_episodes: int = 32
    medium_fraction: float = 0.5


@dataclass
class BehaviorCheckpoint:
    q: FactoredQ
    level: Optional[Tier]
    training_steps: int
    eval_return: float
    buffer_len: int
    episode_count: int


@dataclass
class OnlineResult:
    spec: EnvSpec
    checkpoints: list
    expert: BehaviorCheckpoint
    medium: BehaviorCheckpoint
    states: np.ndarray  # (N, ...) raw states, trajectory-contiguous
    actions: np.ndarray  # (N, n_agents)
    rewards: np.ndarray  # (N,)
    next_states: np.ndarray
    episode_starts: np.ndarray  # (n_episodes,) indices into the buffer
    horizon: int
    seed: int


def _encode_inputs(env, mode: str, raw: np.ndarray):
    if mode == "tabular":
        return env.encode_batch(raw)
    return env.per_agent_features(raw)


def train_online(env, budget: int, rng: RngStream,
                 config: Optional[OnlineTrainConfig] = None) -> OnlineResult:
    """Epsilon-greedy TD training; returns checkpoints plus the whole buffer."""
    config = config or OnlineTrainConfig()
    spec = env.spec()
    mode = "tabular" if spec.state_kind == "discrete" else "neural"
    gamma = spec.gamma if config.gamma is None else config.gamma
    horizon = env.episode_limit
    m = config.n_parallel

    q = FactoredQ(
        spec.n_agents, spec.n_actions, mode,
        n_states=env.n_states if mode == "tabular" else None,
        feature_dim=env.per_agent_features(np.zeros((1, spec.n_agents))).shape[2]
        if mode == "neural" else None,
        hidden=config.hidden, mixer=config.mixer,
        rng=rng.child("init").generator(),
    )
    target = q.copy()
    opt = Adam(q.parameters(), lr=config.lr)
    actor = make_greedy_actor(q, env, mode)

    n_blocks = max(1, int(np.ceil(budget / config.updates_per_block)))
    capacity = n_blocks * m * horizon
    states = np.empty((capacity, spec.n_agents))
    next_states = np.empty_like(states)
    actions = np.empty((capacity, spec.n_agents), dtype=np.int64)
    rewards = np.empty(capacity)
    filled = 0
    episode_starts = []

    roll_rng = rng.child("rollouts").generator()
    batch_rng = rng.child("batches").generator()
    checkpoints = []
    checkpoint_every = max(1, n_blocks // config.n_checkpoints)
    anneal_updates = max(1, int(budget * config.epsilon_anneal_frac))
    updates = 0

    def take_checkpoint():
        eval_rng = rng.child(f"eval/{len(checkpoints)}").generator()
        mean, _ = evaluate_actor(env, make_greedy_actor(q, env, mode),
                                 config.eval_episodes, eval_rng)
        checkpoints.append(BehaviorCheckpoint(
            q=q.copy(), level=None, training_steps=updates, eval_return=mean,
            buffer_len=filled, episode_count=len(episode_starts),
        ))

    for block in range(n_blocks):
        frac = min(1.0, updates / anneal_updates)
        eps = config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)
        batch_roll = rollout_episodes(env, actor, m, roll_rng, epsilon=eps)
        for w in range(m):  # deterministic worker-order merge, whole trajectories
            episode_starts.append(filled)
            sl = slice(filled, filled + horizon)
            states[sl] = batch_roll.states[:, w]
            next_states[sl] = batch_roll.next_states[:, w]
            actions[sl] = batch_roll.actions[:, w]
            rewards[sl] = batch_roll.rewards[:, w]
            filled += horizon
        for _ in range(min(config.updates_per_block, budget - updates)):
            idx = batch_rng.integers(0, filled, size=config.batch_size)
            batch = Batch(
                inputs=_encode_inputs(env, mode, states[idx]),
                actions=actions[idx],
                rewards=rewards[idx],
                next_inputs=_encode_inputs(env, mode, next_states[idx]),
                # episodes end by time limit only: bootstrap through the cut
                dones=np.zeros(config.batch_size),
            )
            opt.zero_grad()
            loss, _ = cfcql_loss(batch, q, target, None, 0.0, gamma)
            ad.backward(loss)
            opt.step()
            updates += 1
            if updates % config.target_interval == 0:
                target = q.copy()
        if (block + 1) % checkpoint_every == 0 and updates < budget:
            take_checkpoint()

    take_checkpoint()  # final checkpoint = expert
    expert = checkpoints[-1]
    expert.level = Tier.EXPERT
    threshold = config.medium_fraction * expert.eval_return
    medium = None
    for ck in checkpoints[:-1]:
        if expert.eval_return > 0 and ck.eval_return >= threshold:
            medium = ck
            break
    if medium is None:
        best = max((ck.eval_return for ck in checkpoints[:-1]), default=float("-inf"))
        raise MediumThresholdError(best, threshold)
    medium.level = Tier.MEDIUM

    return OnlineResult(
        spec=spec, checkpoints=checkpoints, expert=expert, medium=medium,
        states=states[:filled], actions=actions[:filled], rewards=rewards[:filled],
        next_states=next_states[:filled],
        episode_starts=np.asarray(episode_starts, dtype=np.int64),
        horizon=horizon, seed=rng.seed,
    )


# ---------------------------------------------------------------------------
# Dataset assembly.
# ---------------------------------------------------------------------------


def _to_transitions(env, spec, states, actions, rewards, next_states, dones):
    discrete = spec.state_kind == "discrete"
    out = []
    if discrete:
        enc = env.encode_batch(states)
        enc_next = env.encode_batch(next_states)
    for k in range(len(actions)):
        if discrete:
            s, s2 = int(enc[k]), int(enc_next[k])
        else:
            s = tuple(float(x) for x in states[k])
            s2 = tuple(float(x) for x in next_states[k])
        out.append(Transition(
            state=s, joint_action=tuple(int(a) for a in actions[k]),
            reward=float(rewards[k]), next_state=s2, done=bool(dones[k]),
        ))
    return out


def _dataset(spec, tier, seed, transitions, boundaries) -> Dataset:
    header = DatasetHeader(spec=spec, tier=tier, seed=seed,
                           n_trajectories=len(boundaries))
    d = Dataset(header, tuple(transitions), tuple(boundaries))
    report = validate_dataset(d, spec)
    if not report.ok:
        raise AssertionError(f"generated dataset failed validation:\n{report}")
    return d


def checkpoint_actor(env, checkpoint: BehaviorCheckpoint) -> QValuesActor:
    mode = checkpoint.q.mode
    return make_greedy_actor(checkpoint.q, env, mode)


def sample_dataset(env, checkpoint, n_traj: int, rng: RngStream,
                   tier: Tier = Tier.EXPERT, reward_filter: Optional[float] = None,
                   epsilon: float = 0.0, min_acceptance: float = 1e-4) -> Dataset:
    """Roll out a checkpoint policy (greedy, optional epsilon).

    Without a filter: ``n_traj`` full episodes, one trajectory each. With
    ``reward_filter=c``: keep only transitions with reward > c * r_max until
    ``n_traj`` SAMPLES are collected; contiguous kept runs become
    trajectories. Errors out when the acceptance rate is below
    ``min_acceptance`` after a bounded attempt budget.
    """
    if n_traj < 1:
        raise ValueError("empty dataset requested (need n_traj >= 1)")
    spec = env.spec()
    actor = (checkpoint_actor(env, checkpoint)
             if isinstance(checkpoint, BehaviorCheckpoint) else checkpoint)
    gen = rng.child("sample").generator()
    horizon = env.episode_limit

    if reward_filter is None:
        transitions, boundaries = [], []
        chunk = 500
        remaining = n_traj
        while remaining > 0:
            m = min(chunk, remaining)
            roll = rollout_episodes(env, actor, m, gen, epsilon=epsilon)
            dones = np.zeros(horizon, dtype=bool)
            dones[-1] = True
            for w in range(m):
                boundaries.append(len(transitions))
                transitions.extend(_to_transitions(
                    env, spec, roll.states[:, w], roll.actions[:, w],
                    roll.rewards[:, w], roll.next_states[:, w], dones,
                ))
            remaining -= m
        return _dataset(spec, tier, rng.seed, transitions, boundaries)

    threshold = reward_filter * spec.r_max
    wanted = n_traj  # sample count under a filter
    attempt_budget = max(200_000, int(np.ceil(wanted / min_acceptance)))
    generated = 0
    kept, boundaries = [], []
    chunk = 200
    while len(kept) < wanted and generated < attempt_budget:
        roll = rollout_episodes(env, actor, chunk, gen, epsilon=epsilon)
        generated += chunk * horizon
        keep = roll.rewards > threshold  # (T, m)
        for w in range(chunk):
            col = keep[:, w]
            if not col.any():
                continue
            run_start = None
            for t in range(horizon):
                if col[t] and run_start is None:
                    run_start = t
                ends_run = run_start is not None and (t == horizon - 1 or not col[t + 1])
                if col[t] and ends_run:
                    take = min(t - run_start + 1, wanted - len(kept))
                    sl = slice(run_start, run_start + take)
                    dones = np.zeros(take, dtype=bool)
                    dones[-1] = (sl.stop == horizon)
                    boundaries.append(len(kept))
                    kept.extend(_to_transitions(
                        env, spec, roll.states[sl, w], roll.actions[sl, w],
                        roll.rewards[sl, w], roll.next_states[sl, w], dones,
                    ))
                    run_start = None
                    if len(kept) >= wanted:
                        break
                elif not col[t]:
                    run_start = None
            if len(kept) >= wanted:
                break
    if len(kept) < wanted:
        rate = len(kept) / max(generated, 1)
        raise RuntimeError(
            f"reward filter acceptance rate {rate:.2e} below {min_acceptance:.0e} "
            f"after {generated} generated transitions"
        )
    return _dataset(spec, tier, rng.seed, kept, boundaries)


def make_replay_dataset(env, result: OnlineResult) -> Dataset:
    """Chronological buffer up to the medium checkpoint, tier medium_replay."""
    cutoff = result.medium.buffer_len
    if cutoff == 0:
        raise ValueError("medium checkpoint precedes any collected data")
    spec = result.spec
    starts = result.episode_starts[result.episode_starts < cutoff]
    dones = np.zeros(cutoff, dtype=bool)
    dones[result.horizon - 1 :: result.horizon] = True
    transitions = _to_transitions(
        env, spec, result.states[:cutoff], result.actions[:cutoff],
        result.rewards[:cutoff], result.next_states[:cutoff], dones,
    )
    return _dataset(spec, Tier.MEDIUM_REPLAY, result.seed, transitions,
                    [int(s) for s in starts])


def random_dataset(env, n_traj: int, rng: RngStream) -> Dataset:
    spec = env.spec()
    return sample_dataset(env, RandomActor(spec.n_agents, spec.n_actions),
                          n_traj, rng, tier=Tier.RANDOM, epsilon=0.0)


def mix(a: Dataset, b: Dataset, rng: RngStream) -> Dataset:
    """Equal mixture: the larger side is downsampled uniformly at random."""
    if not a.header.spec.matches(b.header.spec):
        raise ValueError("datasets come from different environment specs")
    gen = rng.child("mix").generator()
    k = min(a.header.n_trajectories, b.header.n_trajectories)
    transitions, boundaries = [], []
    for d in (a, b):
        slices = d.trajectory_slices()
        pick = sorted(gen.choice(len(slices), size=k, replace=False))
        for idx in pick:
            lo, hi = slices[idx]
            boundaries.append(len(transitions))
            transitions.extend(d.transitions[lo:hi])
    return _dataset(a.header.spec, Tier.MIXED, rng.seed, transitions, boundaries)
