"""Agent policies: the built-in low-rank-adapted softmax policy and scripted agents.

The built-in policy scores a fixed vocabulary of single-token actions with
``softmax((W + B A) phi(h) / T)``, where ``phi`` is a hashed bag of tokens
of the interaction history. ``W`` is frozen; only the adapter factors train.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np

from .core import ACTION, OBSERVATION, Step, extract_tool_or_message, format_message, format_tool_call
from .kernels import hash_features

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lower-cased alphanumeric words; words containing digits are dropped (ids, values)."""
    return [w for w in _WORD.findall(text.lower()) if not any(ch.isdigit() for ch in w)]


def _action_head(text: str) -> str:
    parsed = extract_tool_or_message(text)
    if parsed is None:
        return "invalid"
    return getattr(parsed, "name", "respond")


@dataclass(frozen=True)
class HashingFeatureMap:
    """Hashed features of the history: request words, latest observation, last action."""

    dim: int = 256

    def context_tokens(self, steps: Sequence[Step]) -> list[str]:
        toks = ["bias"]
        if not steps:
            return toks
        toks += ["u:" + w for w in tokenize(steps[0].text)]
        actions = [s for s in steps if s.kind == ACTION]
        if not actions:
            toks.append("t:start")
            return toks
        toks.append("a:" + _action_head(actions[-1].text))
        toks.append(f"n:{min(len(actions), 6)}")
        last_obs = next((s for s in reversed(steps) if s.kind == OBSERVATION), None)
        if last_obs is not None and len(steps) > 1:
            toks += ["o:" + w for w in tokenize(last_obs.text)]
        return toks

    def __call__(self, steps: Sequence[Step]) -> np.ndarray:
        return hash_features(self.context_tokens(steps), self.dim)

    def text(self, text: str) -> np.ndarray:
        return hash_features(tokenize(text), self.dim)


@dataclass(frozen=True)
class ActionVocab:
    """Single-token actions; templates may quote the latest observation via ``{last}``."""

    names: tuple[str, ...]
    templates: tuple[str, ...]

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "ActionVocab":
        names = tuple(p[0] for p in pairs)
        if len(set(names)) != len(names):
            raise ValueError("duplicate action names")
        return cls(names, tuple(p[1] for p in pairs))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def render(self, token: int, steps: Sequence[Step]) -> str:
        last = next((s.text for s in reversed(steps) if s.kind == OBSERVATION), "")
        return self.templates[token].replace("{last}", last)


@dataclass
class EpisodeContext:
    env_name: str
    seed: int
    steps: list[Step]
    rng: np.random.Generator
    temperature: float = 1.0


@dataclass
class PolicyOutput:
    text: Optional[str]
    token: Optional[int] = None
    logprob: Optional[float] = None


class Policy(Protocol):
    def act(self, ctx: EpisodeContext) -> PolicyOutput: ...


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class AdapterPolicy:
    """Frozen base weights plus an optional low-rank adapter."""

    base_weights: np.ndarray
    vocab: ActionVocab
    feature_map: HashingFeatureMap
    adapter: Any = None  # LoraAdapter
    _effective: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.base_weights.shape != (len(self.vocab), self.feature_map.dim):
            raise ValueError(f"base weights {self.base_weights.shape} do not match "
                             f"({len(self.vocab)}, {self.feature_map.dim})")
        self.base_weights = np.array(self.base_weights, dtype=np.float64)
        self.base_weights.flags.writeable = False
        self.refresh()

    def refresh(self) -> None:
        """Re-merge the adapter; call after the adapter factors change."""
        from .adapters import merge

        if self.adapter is None:
            self._effective = self.base_weights
        else:
            self._effective = merge(self.base_weights, self.adapter)

    @property
    def effective_weights(self) -> np.ndarray:
        return self._effective

    def with_adapter(self, adapter: Any) -> "AdapterPolicy":
        return AdapterPolicy(self.base_weights, self.vocab, self.feature_map, adapter)

    def logits(self, steps: Sequence[Step]) -> np.ndarray:
        return self._effective @ self.feature_map(steps)

    def action_logprobs(self, steps: Sequence[Step], temperature: float = 1.0) -> np.ndarray:
        return log_softmax(self.logits(steps) / temperature)

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        z = self.logits(ctx.steps)
        if ctx.temperature <= 0.0:
            token = int(np.argmax(z))
            logp = float(log_softmax(z)[token])
        else:
            lp = log_softmax(z / ctx.temperature)
            token = int(ctx.rng.choice(len(lp), p=np.exp(lp)))
            logp = float(lp[token])
        return PolicyOutput(self.vocab.render(token, ctx.steps), token, logp)


# ---------------------------------------------------------------------------
# scripted agents

def oracle_plan(env_name: str, seed: int) -> list[str]:
    """Action texts a fully capable agent would emit, derived from the scenario."""
    from .envs.bandit import bandit_target
    from .envs.sdr import generate_sdr_scenario
    from .envs.tec import generate_suite_scenario, generate_tec_scenario
    from .envs.tools import SERVICE_TOOLS

    if env_name == "contextual_bandit":
        return [f"choose: {bandit_target(seed)}"]
    if env_name == "structured_data_game":
        sc = generate_sdr_scenario(seed)
        plan = []
        if sc.expected_tool is not None:
            plan.append(format_tool_call(sc.expected_tool.name, sc.expected_tool.args))
        plan.append(format_message("Here you go: " + ", ".join(sc.communicate_info)))
        return plan
    if env_name == "device_suite":
        tec = generate_suite_scenario(seed)
    elif env_name.startswith("tec_"):
        skill = env_name[len("tec_"):]
        tec = generate_tec_scenario(seed, None if skill == "game" else skill)
    else:
        raise KeyError(f"no oracle for environment {env_name!r}")
    plan = []
    if tec.blocker == "low_battery":
        plan.append(format_tool_call("set_low_battery_mode_status", {"on": False}))
    if tec.target_service is not None:
        plan.append(format_tool_call(SERVICE_TOOLS[tec.target_service], {"on": True}))
    if tec.target_tool is not None:
        plan.append(format_tool_call(tec.target_tool, {}))
    plan.append(format_message("All set: " + "; ".join(tec.keywords)))
    return plan


class OraclePolicy:
    """Replays the gold plan; repeats its final message if the episode continues."""

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        plan = oracle_plan(ctx.env_name, ctx.seed)
        n = sum(1 for s in ctx.steps if s.kind == ACTION)
        return PolicyOutput(plan[min(n, len(plan) - 1)])


@dataclass
class EpsilonPolicy:
    """With probability ``epsilon`` emits unparseable text, otherwise defers to ``inner``."""

    inner: Any
    epsilon: float
    junk: str = "<<garbled output>>"

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        if ctx.rng.random() < self.epsilon:
            return PolicyOutput(self.junk)
        return self.inner.act(ctx)


@dataclass
class FixedPolicy:
    """Always emits the same text; deterministic."""

    text: str

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        return PolicyOutput(self.text)


@dataclass
class RandomPolicy:
    choices: Sequence[str]

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        return PolicyOutput(self.choices[int(ctx.rng.integers(len(self.choices)))])


@dataclass
class GatewayPolicy:
    """Agent served by a chat model through the gateway."""

    gateway: Any
    system_prompt: str
    max_tokens: int = 2048
    request_hook: Optional[Callable[[Any], Any]] = None

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        from .gateway import ChatRequest

        messages = [{"role": "system", "content": self.system_prompt}]
        for s in ctx.steps:
            messages.append({"role": "user" if s.kind == OBSERVATION else "assistant",
                             "content": s.text})
        req = ChatRequest(messages=messages, temperature=ctx.temperature,
                          max_tokens=self.max_tokens, seed=int(ctx.rng.integers(2**31)))
        if self.request_hook is not None:
            req = self.request_hook(req)
        return PolicyOutput(self.gateway.complete(req))
