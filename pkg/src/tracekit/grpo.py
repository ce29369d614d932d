"""Group-relative policy optimisation of a low-rank adapter on the built-in policy."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .adapters import LoraAdapter, init_adapter
from .core import ACTION
from .kernels import clipped_surrogate
from .policy import AdapterPolicy
from .rollout import DEFAULT_MAX_STEPS, RolloutGroup, collect_groups, is_informative

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adamw")
# Plain gradient descent on the bilinear adapter needs a step of order one; the
# adaptive optimiser keeps the conventional small rate.
DEFAULT_LR = {"sgd": 1.0, "adamw": 1e-5}


@dataclass
class TrainerConfig:
    learning_rate: Optional[float] = None  # None: optimiser default from DEFAULT_LR
    max_iterations: int = 40
    clip_epsilon: float = 0.2
    std_epsilon: float = 1e-6
    groups_per_iter: int = 16
    group_size: int = 8
    rollout_temperature: float = 1.0
    rank: int = 4
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    updates_per_wave: int = 4
    max_steps: int = DEFAULT_MAX_STEPS
    workers: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.std_epsilon <= 0.0:
            raise ValueError("std_epsilon must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.rank < 1 or self.groups_per_iter < 1 or self.max_iterations < 0:
            raise ValueError("rank and groups_per_iter must be positive, max_iterations >= 0")
        if self.rollout_temperature <= 0.0:
            raise ValueError("rollout_temperature must be positive")
        if self.updates_per_wave < 1:
            raise ValueError("updates_per_wave must be >= 1")

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.optimizer] if self.learning_rate is None else self.learning_rate

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["learning_rate"] = self.lr
        return d


def group_advantages(rewards: Sequence[float], std_epsilon: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantage normalisation needs at least two rollouts")
    return (r - r.mean()) / (r.std() + std_epsilon)


def normalize_advantages(group: RolloutGroup, std_epsilon: float = 1e-6) -> RolloutGroup:
    """Same group with ``(r - mean) / (population std + eps)`` advantages."""
    return replace(group, advantages=group_advantages(group.rewards, std_epsilon).tolist())


def filter_informative(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """Drop groups whose rewards are all equal; they carry no gradient."""
    return [g for g in groups if len(set(g.rewards)) > 1]


@dataclass
class Batch:
    features: np.ndarray  # (N, d_in), one row per action token
    actions: np.ndarray  # (N,)
    old_logp: np.ndarray  # (N,)
    advantages: np.ndarray  # (N,), shared by all tokens of a trajectory
    weights: np.ndarray  # (N,), 1 / (|B| T) of the token's trajectory

    @property
    def size(self) -> int:
        return len(self.actions)


def build_batch(policy: AdapterPolicy, groups: Sequence[RolloutGroup],
                old_logprobs: Optional[Sequence[Sequence[float]]] = None) -> Batch:
    """Flatten normalised groups into token rows.

    ``old_logprobs`` defaults to the logprobs recorded at sampling time; when
    given it holds one list per trajectory, in group order.
    """
    trajs = [(t, a) for g in groups for t, a in zip(g.trajectories, _advantages_of(g))]
    if old_logprobs is not None and len(old_logprobs) != len(trajs):
        raise ValueError(f"{len(old_logprobs)} logprob lists for {len(trajs)} trajectories")
    feats, acts, olds, advs, wts = [], [], [], [], []
    n_traj = len(trajs)
    for i, (traj, adv) in enumerate(trajs):
        action_idx = [j for j, s in enumerate(traj.steps) if s.kind == ACTION]
        lps = old_logprobs[i] if old_logprobs is not None else [traj.steps[j].logprob for j in action_idx]
        if len(lps) != len(action_idx):
            raise ValueError(f"trajectory {traj.task_id}: {len(lps)} logprobs for "
                             f"{len(action_idx)} action tokens")
        T = len(action_idx)
        for j, lp in zip(action_idx, lps):
            step = traj.steps[j]
            if step.token is None or lp is None:
                raise ValueError(f"trajectory {traj.task_id} has an action without token/logprob")
            feats.append(policy.feature_map(traj.steps[:j]))
            acts.append(step.token)
            olds.append(lp)
            advs.append(adv)
            wts.append(1.0 / (n_traj * T))
    d_in = policy.feature_map.dim
    return Batch(np.array(feats, dtype=np.float64).reshape(-1, d_in),
                 np.array(acts, dtype=np.int64), np.array(olds, dtype=np.float64),
                 np.array(advs, dtype=np.float64), np.array(wts, dtype=np.float64))


def _advantages_of(group: RolloutGroup) -> list[float]:
    if group.advantages is None:
        raise ValueError(f"group {group.group_seed} has no advantages; normalise first")
    if len(group.advantages) != group.size:
        raise ValueError(f"group {group.group_seed}: advantage count does not match rollouts")
    return list(group.advantages)


def batch_loss(W: np.ndarray, adapter: LoraAdapter, batch: Batch, clip_epsilon: float,
               temperature: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Clipped surrogate loss with analytic gradients for ``A`` and ``B``."""
    if batch.size == 0:
        return 0.0, np.zeros_like(adapter.A), np.zeros_like(adapter.B)
    M = W + adapter.B @ adapter.A
    logits = batch.features @ M.T
    loss, g, _ = clipped_surrogate(np.ascontiguousarray(logits), batch.actions, batch.old_logp,
                                   batch.advantages, batch.weights, clip_epsilon, temperature)
    dM = g.T @ batch.features  # (d_out, d_in)
    return loss, adapter.B.T @ dM, dM @ adapter.A.T


def surrogate_loss(policy: AdapterPolicy, old_policy_logprobs: Optional[Sequence[Sequence[float]]],
                   groups: Sequence[RolloutGroup], clip_epsilon: float = 0.2,
                   temperature: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns ``(loss, dL/dA, dL/dB)`` for the policy's current adapter."""
    if policy.adapter is None:
        raise ValueError("policy has no adapter to differentiate")
    batch = build_batch(policy, groups, old_policy_logprobs)
    return batch_loss(policy.base_weights, policy.adapter, batch, clip_epsilon, temperature)


class _SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * g


class _AdamW:
    def __init__(self, lr: float, weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainerConfig) -> Any:
    if config.optimizer == "sgd":
        return _SGD(config.lr, config.weight_decay)
    return _AdamW(config.lr, config.weight_decay)


@dataclass
class IterationRecord:
    iteration: int
    rollouts: int
    mean_reward: float
    informative_groups: int
    loss: Optional[float]
    updated: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    adapter: LoraAdapter
    history: list[float]
    records: list[IterationRecord] = field(default_factory=list)
    wasted_iterations: int = 0
    error: Optional[str] = None

    @property
    def rollouts(self) -> int:
        return sum(r.rollouts for r in self.records)


def iteration_seeds(seed: int, iteration: int, groups_per_iter: int) -> list[int]:
    """Fresh, disjoint group seeds for each iteration of a run."""
    base = (seed * 1_000_003 + iteration * groups_per_iter) % (2 ** 31)
    return [base + g for g in range(groups_per_iter)]


def train_capability(env_name: str, config: TrainerConfig, seed: int, base_policy: AdapterPolicy,
                     capability_id: str = "capability",
                     on_iteration: Optional[Callable[[IterationRecord], None]] = None) -> TrainResult:
    """Train one adapter on ``env_name`` starting from ``base_policy``.

    Each iteration collects ``groups_per_iter`` groups of ``group_size``
    same-seed rollouts with the current adapter, discards zero-variance
    groups and takes ``updates_per_wave`` full-batch steps on the clipped
    surrogate. Iterations without informative groups are counted as wasted.
    A failure aborts training and returns the last adapter that completed an
    iteration.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    d_out, d_in = base_policy.base_weights.shape
    adapter = init_adapter(capability_id, d_out, d_in, config.rank, rng)
    adapter.provenance = {"env": env_name, "seed": seed, "trainer": config.to_dict()}
    W = base_policy.base_weights
    policy = base_policy.with_adapter(adapter)
    opt = make_optimizer(config)
    result = TrainResult(adapter.copy(), [])
    for it in range(config.max_iterations):
        try:
            policy.refresh()
            groups = collect_groups(policy, env_name, iteration_seeds(seed, it, config.groups_per_iter),
                                    config.group_size, config.rollout_temperature, seed,
                                    config.max_steps, config.workers)
            rewards = [r for g in groups for r in g.rewards]
            mean = math.fsum(rewards) / len(rewards) if rewards else 0.0
            useful = [normalize_advantages(g, config.std_epsilon) for g in filter_informative(groups)]
            loss = None
            if useful:
                batch = build_batch(policy, useful)
                for _ in range(config.updates_per_wave):
                    loss, dA, dB = batch_loss(W, adapter, batch, config.clip_epsilon,
                                              config.rollout_temperature)
                    opt.step([adapter.A, adapter.B], [dA, dB])
                if not (np.all(np.isfinite(adapter.A)) and np.all(np.isfinite(adapter.B))):
                    raise FloatingPointError("adapter factors became non-finite")
            else:
                result.wasted_iterations += 1
            rec = IterationRecord(it, len(rewards), mean, len(useful), loss, bool(useful))
        except Exception as exc:  # abort with the last good adapter
            log.error("training %s aborted at iteration %d: %s", capability_id, it, exc)
            result.error = f"iteration {it}: {exc}"
            return result
        result.adapter = adapter.copy()
        result.history.append(mean)
        result.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        log.info("%s iter %d: mean reward %.3f, informative %d/%d", capability_id, it, mean,
                 len(useful), len(groups))
    return result


def informative_fraction(groups: Sequence[RolloutGroup]) -> float:
    return sum(is_informative(g.rewards) for g in groups) / len(groups) if groups else 0.0
