"""Episode runner, same-seed rollout groups, and the reward verification harness."""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .core import ACTION, OBSERVATION, Step, Trajectory, env_spec, make_env
from .gateway import GatewayError
from .policy import EpisodeContext

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 50


class EpisodeError(RuntimeError):
    """The policy transport failed mid-episode; the episode may be retried."""

    retryable = True


def episode_rng(global_seed: int, group_seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng([global_seed, group_seed, replicate])


def run_episode(policy: Any, env_name: str, seed: int, max_steps: int = DEFAULT_MAX_STEPS,
                temperature: float = 1.0, global_seed: int = 0, replicate: int = 0,
                rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Play one episode; non-terminal episodes at ``max_steps`` score 0."""
    spec = env_spec(env_name)
    env = make_env(env_name)
    env.reset(seed)
    rng = rng if rng is not None else episode_rng(global_seed, seed, replicate)
    steps = [Step(OBSERVATION, env.observe(0))]
    ctx = EpisodeContext(env_name, seed, steps, rng, temperature)
    for _ in range(max_steps):
        try:
            out = policy.act(ctx)
        except GatewayError as exc:
            raise EpisodeError(f"{env_name} seed {seed}: {exc}") from exc
        steps.append(Step(ACTION, out.text if out.text is not None else "", out.token, out.logprob))
        env.step(out.text)
        if env.done:
            break
        steps.append(Step(OBSERVATION, env.observe(0)))
    meta = dict(env.episode_metadata()) if hasattr(env, "episode_metadata") else {}
    if env.done:
        reward = float(env.rewards.get(0, 0.0))
        if env.invalid_player is not None:
            meta["invalid_action"] = "true"
    else:
        reward = 0.0
        meta["truncated"] = "true"
    meta["replicate"] = str(replicate)
    return Trajectory(
        task_id=f"{env_name}/{seed}",
        episode_seed=seed,
        steps=steps,
        reward=reward,
        success=env.done and reward >= spec.success_threshold,
        env_name=env_name,
        metadata=meta,
    )


@dataclass
class RolloutGroup:
    group_seed: int
    trajectories: list[Trajectory]
    rewards: list[float] = field(default_factory=list)
    advantages: Optional[list[float]] = None

    def __post_init__(self) -> None:
        if not self.rewards:
            self.rewards = [t.reward for t in self.trajectories]
        if any(t.episode_seed != self.group_seed for t in self.trajectories):
            raise ValueError("all trajectories in a group must share the group seed")

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass
class GroupFailure:
    group_seed: int
    error: str


def _map(fn: Any, items: Sequence[Any], workers: int) -> list[Any]:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def collect_groups(policy: Any, env_name: str, group_seeds: Sequence[int], K: int,
                   temperature: float = 1.0, global_seed: int = 0,
                   max_steps: int = DEFAULT_MAX_STEPS, workers: int = 1,
                   failures: Optional[list[GroupFailure]] = None) -> list[RolloutGroup]:
    """K same-seed rollouts per group seed, ordered by (group seed, replicate).

    A group with any failed episode is dropped and recorded in ``failures``.
    """
    if K < 2:
        raise ValueError("groups need K >= 2 rollouts")
    jobs = [(g, k) for g in group_seeds for k in range(K)]

    def one(job: tuple[int, int]) -> Trajectory | EpisodeError:
        g, k = job
        try:
            return run_episode(policy, env_name, g, max_steps, temperature, global_seed, k)
        except EpisodeError as exc:
            return exc

    results = _map(one, jobs, workers)
    groups = []
    for i, g in enumerate(group_seeds):
        chunk = results[i * K:(i + 1) * K]
        errs = [r for r in chunk if isinstance(r, EpisodeError)]
        if errs:
            log.warning("group %d dropped: %s", g, errs[0])
            if failures is not None:
                failures.append(GroupFailure(g, str(errs[0])))
            continue
        groups.append(RolloutGroup(g, list(chunk)))
    return groups


def run_many(policy: Any, env_name: str, seeds: Sequence[int], temperature: float = 1.0,
             global_seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS,
             workers: int = 1) -> list[Trajectory]:
    return _map(lambda s: run_episode(policy, env_name, s, max_steps, temperature, global_seed, 0),
                list(seeds), workers)


def is_informative(rewards: Sequence[float]) -> bool:
    return len({round(r, 2) for r in rewards}) > 1


@dataclass
class VerificationReport:
    env_name: str
    n_rollouts: int
    mean_reward: float
    std_reward: float
    reward_histogram: dict[str, int]
    n_groups: int
    informative_groups: int
    informative_group_fraction: float
    per_skill: dict[str, dict[str, float]]
    warnings: list[str]
    rewards: list[float] = field(repr=False, default_factory=list)
    group_rewards: list[list[float]] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "env": self.env_name,
            "n_rollouts": self.n_rollouts,
            "mean_reward": self.mean_reward,
            "std_reward": self.std_reward,
            "reward_histogram": self.reward_histogram,
            "n_groups": self.n_groups,
            "informative_groups": self.informative_groups,
            "informative_group_fraction": self.informative_group_fraction,
            "per_skill": self.per_skill,
            "warnings": self.warnings,
        }

    def to_text(self) -> str:
        rows = [
            ("environment", self.env_name),
            ("rollouts", str(self.n_rollouts)),
            ("mean reward", f"{self.mean_reward:.3f}"),
            ("std reward", f"{self.std_reward:.3f}"),
            ("distribution", ", ".join(f"{k}: {v}" for k, v in self.reward_histogram.items())),
            ("informative groups", f"{self.informative_groups}/{self.n_groups} "
                                   f"({100 * self.informative_group_fraction:.0f}%)"),
        ]
        for skill, s in self.per_skill.items():
            rows.append((f"skill {skill}", f"n={int(s['n'])} mean={s['mean']:.3f}"))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        lines += [f"WARNING: {w}" for w in self.warnings]
        return "\n".join(lines)


def verify_environment(policy: Any, env_name: str, n_rollouts: int = 100, n_groups: int = 20,
                       K: int = 8, temperature: float = 1.0, global_seed: int = 0,
                       max_steps: int = DEFAULT_MAX_STEPS, workers: int = 1) -> VerificationReport:
    """Reward distribution over ``n_rollouts`` seeds and group-variance check over ``n_groups``."""
    trajs = run_many(policy, env_name, range(n_rollouts), temperature, global_seed, max_steps, workers)
    rewards = [t.reward for t in trajs]
    mean = float(np.mean(rewards)) if rewards else 0.0
    std = float(np.std(rewards)) if rewards else 0.0
    hist = Counter(f"{round(r, 1):.1f}" for r in rewards)
    per_skill: dict[str, list[float]] = {}
    for t in trajs:
        per_skill.setdefault(t.metadata.get("skill", "n/a"), []).append(t.reward)

    groups = collect_groups(policy, env_name, list(range(n_groups)), K, temperature,
                            global_seed, max_steps, workers)
    informative = sum(is_informative(g.rewards) for g in groups)
    frac = informative / len(groups) if groups else 0.0

    warnings = []
    if not 0.3 <= mean <= 0.6:
        warnings.append(f"mean reward {mean:.3f} outside target 0.3-0.6")
    if std <= 0.2:
        warnings.append(f"reward std {std:.3f} not above 0.2")
    if frac <= 0.6:
        warnings.append(f"informative group fraction {frac:.2f} not above 0.60")
    return VerificationReport(
        env_name, len(rewards), mean, std, dict(sorted(hist.items())), len(groups), informative,
        frac,
        {k: {"n": float(len(v)), "mean": float(np.mean(v))} for k, v in sorted(per_skill.items())},
        warnings, rewards, [list(g.rewards) for g in groups],
    )


def mean_reward(trajs: Sequence[Trajectory]) -> float:
    return math.fsum(t.reward for t in trajs) / len(trajs) if trajs else 0.0
