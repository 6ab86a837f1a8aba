"""Policy training: sparse binary reward, whole-episode rollouts, empirical
returns, and the clipped-surrogate update with a KL early stop.

Each iteration samples fresh instances from the configured size
distribution, rolls every episode to termination (goal, exhausted horizon,
or a dead end), and then takes up to ``max_update_steps`` full-batch
gradient steps. Episodes within an iteration advance in lockstep so each
decision step is one batched network call; per-episode seeds are drawn up
front, so runs are reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import dataclass, field, replace

import numpy as np

from genplan import autodiff as ad
from genplan.autodiff import GatherPlan, Tensor
from genplan.encoder import build_layout
from genplan.generators import (
    Distribution,
    default_training_distribution,
    sample_training_instance,
)
from genplan.heuristics import horizon as episode_horizon
from genplan.pddl import State, Task, apply as apply_action, is_goal
from genplan.policy import (
    PolicyBatch,
    PolicyNetwork,
    StepInput,
    TaskContext,
    greedy_action,
    sample_action,
)


class NumericalError(Exception):
    """NaN/Inf appeared in the loss; parameters were restored."""


@dataclass
class TrainConfig:
    domain_name: str = "gripper"
    iterations: int = 1000
    episodes_per_iteration: int = 100
    max_update_steps: int = 20
    lr: float = 1e-4
    gamma: float = 0.99
    entropy_bonus: float = 0.01
    clip_ratio: float = 0.2
    kl_cutoff: float = 0.01
    value_loss_weight: float = 0.5
    hidden_width: int = 256
    history_length: int = 1
    arch: str = "gn-gn"
    size_distribution: Distribution | None = None
    seed: int = 0
    normalize_advantages: bool = True
    grad_clip_norm: float | None = 0.5
    workers: int = 1
    checkpoint_every: int = 50

    def resolved_distribution(self) -> Distribution:
        if self.size_distribution is not None:
            return self.size_distribution
        return default_training_distribution(self.domain_name)


@dataclass
class TrajStep:
    history: tuple[State, ...]
    state: State
    action_ids: np.ndarray
    chosen: int  # position within action_ids
    log_prob_old: float
    value_old: float
    reward: float


@dataclass
class Trajectory:
    ctx: TaskContext
    steps: list[TrajStep]
    solved: bool
    horizon: int

    def __len__(self) -> int:
        return len(self.steps)

    def returns(self, gamma: float) -> np.ndarray:
        out = np.zeros(len(self.steps))
        acc = 0.0
        for t in range(len(self.steps) - 1, -1, -1):
            acc = self.steps[t].reward + gamma * acc
            out[t] = acc
        return out


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    returns: np.ndarray  # per step, concatenated in episode order
    advantages: np.ndarray  # returns - value_old (unnormalized)

    @property
    def num_steps(self) -> int:
        return len(self.returns)


@dataclass
class IterationStats:
    iteration: int
    success_rate: float
    mean_length: float
    policy_loss: float
    value_loss: float
    kl: float
    entropy: float
    seconds: float
    update_steps: int = 0


STATS_COLUMNS = (
    "iteration",
    "success_rate",
    "mean_length",
    "policy_loss",
    "value_loss",
    "kl",
    "entropy",
    "seconds",
)


# ---------------------------------------------------------------------------
# Episode rollouts


class _LiveEpisode:
    __slots__ = ("ctx", "horizon", "rng", "mode", "state", "history", "steps",
                 "solved", "done")

    def __init__(self, ctx: TaskContext, horizon: int, rng: np.random.Generator,
                 mode: str):
        self.ctx = ctx
        self.horizon = horizon
        self.rng = rng
        self.mode = mode
        self.state = ctx.task.init
        self.history: list[State] = []
        self.steps: list[TrajStep] = []
        self.solved = False
        self.done = False
        if is_goal(ctx.task, self.state):
            self.solved = True
            self.done = True
        elif horizon == 0:
            self.done = True

    def to_trajectory(self) -> Trajectory:
        return Trajectory(self.ctx, self.steps, self.solved, self.horizon)


def _advance(episodes: list[_LiveEpisode], policy: PolicyNetwork) -> None:
    """Run one lockstep decision for every live episode."""
    live: list[_LiveEpisode] = []
    items: list[StepInput] = []
    for ep in episodes:
        if ep.done:
            continue
        action_ids = ep.ctx.task.applicable_indices(ep.state)
        if len(action_ids) == 0:
            ep.done = True  # dead end: unsolved
            continue
        live.append(ep)
        items.append(StepInput(ep.ctx, list(ep.history), ep.state, action_ids))
    if not live:
        return
    with ad.no_grad():
        pb = PolicyBatch(items, policy.dtype)
        log_probs, values, _ = policy.forward_batch(pb)
    lp = log_probs.data
    starts = pb.actions_by_graph.starts
    for g, ep in enumerate(live):
        seg = lp[starts[g] : starts[g + 1]].astype(np.float64)
        probs = np.exp(seg)
        if ep.mode == "greedy":
            choice = int(np.argmax(probs))
        else:
            cdf = np.cumsum(probs)
            u = ep.rng.random() * cdf[-1]
            choice = int(np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1))
        item = items[g]
        step = TrajStep(
            history=tuple(item.history),
            state=ep.state,
            action_ids=item.action_ids,
            chosen=choice,
            log_prob_old=float(seg[choice]),
            value_old=float(values.data[g]),
            reward=0.0,
        )
        ep.steps.append(step)
        action = ep.ctx.task.ground_actions[int(item.action_ids[choice])]
        nxt = apply_action(ep.state, action)
        ep.history.append(ep.state)
        if len(ep.history) > ep.ctx.layout.history_length:
            ep.history = ep.history[-ep.ctx.layout.history_length :]
        ep.state = nxt
        if is_goal(ep.ctx.task, nxt):
            step.reward = 1.0
            ep.solved = True
            ep.done = True
        elif len(ep.steps) >= ep.horizon:
            ep.done = True


def rollout_episodes(policy: PolicyNetwork, setups: list[tuple[TaskContext, int, np.random.Generator]],
                     mode: str = "sample") -> list[Trajectory]:
    """Roll a group of episodes to termination in lockstep."""
    episodes = [_LiveEpisode(ctx, hz, rng, mode) for ctx, hz, rng in setups]
    while any(not ep.done for ep in episodes):
        _advance(episodes, policy)
    return [ep.to_trajectory() for ep in episodes]


def run_episode(policy: PolicyNetwork, task: Task, horizon: int,
                rng: np.random.Generator, mode: str = "sample",
                ctx: TaskContext | None = None) -> Trajectory:
    """Roll a single episode: until the goal, the horizon, or a dead end."""
    if ctx is None:
        ctx = TaskContext(task, policy.layout)
    return rollout_episodes(policy, [(ctx, horizon, rng)], mode)[0]


def collect_rollouts(policy: PolicyNetwork, config: TrainConfig,
                     rng: random.Random) -> RolloutBatch:
    """Sample instances from the size distribution and roll one episode per
    instance, whole-episode, with empirical discounted returns."""
    dist = config.resolved_distribution()
    setups = []
    for _ in range(config.episodes_per_iteration):
        instance_seed = rng.randrange(2**31)
        action_seed = rng.randrange(2**31)
        task = sample_training_instance(dist, random.Random(instance_seed))
        ctx = TaskContext(task, policy.layout)
        hz = episode_horizon(task)
        setups.append((ctx, hz, np.random.default_rng(action_seed)))

    if config.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        groups = [setups[i :: config.workers] for i in range(config.workers)]
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                lambda grp: rollout_episodes(policy, grp, "sample"), groups
            ))
        trajectories: list[Trajectory] = [None] * len(setups)  # type: ignore
        for w, group in enumerate(results):
            for j, traj in enumerate(group):
                trajectories[w + j * config.workers] = traj
    else:
        trajectories = rollout_episodes(policy, setups, "sample")

    returns = []
    advantages = []
    for traj in trajectories:
        ret = traj.returns(config.gamma)
        returns.append(ret)
        advantages.append(ret - np.array([s.value_old for s in traj.steps]))
    flat_returns = np.concatenate(returns) if returns else np.zeros(0)
    flat_adv = np.concatenate(advantages) if advantages else np.zeros(0)
    return RolloutBatch(trajectories, flat_returns, flat_adv)


# ---------------------------------------------------------------------------
# PPO update


def featurize_batch(policy: PolicyNetwork, batch: RolloutBatch):
    """(PolicyBatch, plan for the chosen-action rows, old log-probs)."""
    items: list[StepInput] = []
    chosen_local: list[int] = []
    old_lp: list[float] = []
    for traj in batch.trajectories:
        for step in traj.steps:
            items.append(StepInput(traj.ctx, list(step.history), step.state,
                                   step.action_ids))
            chosen_local.append(step.chosen)
            old_lp.append(step.log_prob_old)
    pb = PolicyBatch(items, policy.dtype)
    chosen_rows = pb.actions_by_graph.starts[:-1] + np.asarray(chosen_local)
    chosen_plan = GatherPlan(chosen_rows, pb.num_actions)
    return pb, chosen_plan, np.asarray(old_lp)


def surrogate_terms(ratio, advantages: np.ndarray, clip_ratio: float):
    """Pessimistic per-step objective: min(r * A, clip(r) * A)."""
    unclipped = ad.mul(ratio, advantages)
    clipped = ad.mul(ad.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio), advantages)
    return ad.minimum(unclipped, clipped)


def normalized_advantages(batch: RolloutBatch, config: TrainConfig) -> np.ndarray:
    adv = batch.advantages
    if config.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv.astype(np.float64)


def ppo_update(policy: PolicyNetwork, batch: RolloutBatch,
               config: TrainConfig) -> IterationStats:
    """Up to ``max_update_steps`` full-batch steps on the clipped surrogate
    plus entropy bonus and weighted value loss. Stops before any step whose
    pre-step approximate KL(old || new) exceeds the cutoff."""
    solved = [t.solved for t in batch.trajectories]
    success_rate = float(np.mean(solved)) if solved else 0.0
    lengths = [len(t) for t in batch.trajectories]
    mean_length = float(np.mean(lengths)) if lengths else 0.0

    if batch.num_steps == 0:
        return IterationStats(0, success_rate, mean_length, 0.0, 0.0, 0.0, 0.0, 0.0, 0)

    pb, chosen_plan, old_lp_arr = featurize_batch(policy, batch)
    returns = batch.returns.astype(np.float64)
    adv = normalized_advantages(batch, config)

    snapshot = policy.store.snapshot()
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0}
    steps_taken = 0
    for _ in range(config.max_update_steps):
        log_probs, values, entropy = policy.forward_batch(pb)
        chosen_lp = ad.gather_rows(log_probs, chosen_plan)
        kl = float(np.mean(old_lp_arr - chosen_lp.data))
        stats["kl"] = kl
        if kl > config.kl_cutoff:
            break
        ratio = ad.exp(ad.sub(chosen_lp, old_lp_arr))
        surrogate = ad.reduce_mean(surrogate_terms(ratio, adv, config.clip_ratio))
        entropy_mean = ad.reduce_mean(entropy)
        diff = ad.sub(values, returns)
        value_loss = ad.reduce_mean(ad.mul(diff, diff))
        loss = ad.add(
            ad.add(ad.neg(surrogate), ad.mul(entropy_mean, -config.entropy_bonus)),
            ad.mul(value_loss, config.value_loss_weight),
        )
        if not np.isfinite(loss.data):
            policy.store.restore(snapshot)
            policy.store.zero_grad()
            raise NumericalError("non-finite loss; parameters restored")
        stats["policy_loss"] = -float(surrogate.data)
        stats["value_loss"] = float(value_loss.data)
        stats["entropy"] = float(entropy_mean.data)
        policy.store.zero_grad()
        ad.backward(loss)
        if config.grad_clip_norm is not None:
            policy.store.clip_gradients(config.grad_clip_norm)
        policy.store.adam_step(config.lr)
        steps_taken += 1

    return IterationStats(0, success_rate, mean_length, stats["policy_loss"],
                          stats["value_loss"], stats["kl"], stats["entropy"], 0.0,
                          steps_taken)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    policy: PolicyNetwork
    stats: list[IterationStats]


def build_policy(config: TrainConfig, seed: int | None = None) -> PolicyNetwork:
    from genplan import domains

    dist = config.resolved_distribution()
    names = {spec.domain_name for spec, _ in dist}
    if len(names) != 1:
        raise ValueError(f"size distribution mixes domains: {sorted(names)}")
    domain = domains.load_domain(next(iter(names)))
    layout = build_layout(domain, config.history_length)
    return PolicyNetwork(
        layout,
        arch=config.arch,
        width=config.hidden_width,
        seed=config.seed if seed is None else seed,
        meta={"domain": domain.name},
    )


def train(config: TrainConfig, checkpoint_dir=None, stats_path=None,
          log_fn=None) -> TrainResult:
    """collect -> update for ``config.iterations``; checkpoints every
    ``checkpoint_every`` iterations plus a final one."""
    import pathlib

    policy = build_policy(config)
    rng = random.Random(config.seed)
    stats: list[IterationStats] = []

    ckpt_dir = pathlib.Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for k in range(config.iterations):
        started = time.perf_counter()
        batch = collect_rollouts(policy, config, rng)
        try:
            row = ppo_update(policy, batch, config)
        except NumericalError:
            row = IterationStats(0, float(np.mean([t.solved for t in batch.trajectories])),
                                 float(np.mean([len(t) for t in batch.trajectories])),
                                 math.nan, math.nan, math.nan, math.nan, 0.0)
        row.iteration = k
        row.seconds = time.perf_counter() - started
        stats.append(row)
        if log_fn is not None:
            log_fn(row)
        if ckpt_dir and config.checkpoint_every > 0 and (k + 1) % config.checkpoint_every == 0:
            policy.save(ckpt_dir / f"checkpoint-{k + 1:05d}.bin")

    if ckpt_dir:
        policy.save(ckpt_dir / "checkpoint-final.bin")
    if stats_path:
        write_stats_csv(stats_path, stats)
    return TrainResult(policy, stats)


def write_stats_csv(path, stats: list[IterationStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        for row in stats:
            writer.writerow([
                row.iteration,
                f"{row.success_rate:.4f}",
                f"{row.mean_length:.3f}",
                f"{row.policy_loss:.6f}",
                f"{row.value_loss:.6f}",
                f"{row.kl:.6f}",
                f"{row.entropy:.6f}",
                f"{row.seconds:.3f}",
            ])
