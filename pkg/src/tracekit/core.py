"""Environment protocol, registry, trajectory model and JSONL persistence."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, runtime_checkable

SCHEMA_VERSION = 1

OBSERVATION = "observation"
ACTION = "action"


class ProtocolError(RuntimeError):
    """An environment was driven outside its contract (e.g. stepped after done)."""


class RegistryError(KeyError):
    pass


class TrajectoryFormatError(ValueError):
    def __init__(self, path: Path | str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass
class Step:
    """One entry of a trajectory: an observation or an agent action.

    Agent actions taken by the built-in policy also carry the vocabulary
    token and its log-probability under the rollout policy.
    """

    kind: str
    text: str
    token: Optional[int] = None
    logprob: Optional[float] = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "text": self.text}
        if self.token is not None:
            d["token"] = self.token
        if self.logprob is not None:
            d["logprob"] = self.logprob
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Step":
        kind = d["kind"]
        if kind not in (OBSERVATION, ACTION):
            raise ValueError(f"unknown step kind {kind!r}")
        return cls(kind=kind, text=d["text"], token=d.get("token"), logprob=d.get("logprob"))


@dataclass
class Trajectory:
    task_id: str
    episode_seed: int
    steps: list[Step]
    reward: float
    success: bool
    env_name: str
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def n_actions(self) -> int:
        return sum(1 for s in self.steps if s.kind == ACTION)

    @property
    def actions(self) -> list[Step]:
        return [s for s in self.steps if s.kind == ACTION]

    @property
    def observations(self) -> list[Step]:
        return [s for s in self.steps if s.kind == OBSERVATION]

    @property
    def initial_observation(self) -> str:
        return self.steps[0].text if self.steps else ""

    def check(self, max_steps: Optional[int] = None) -> None:
        if not self.steps or self.steps[0].kind != OBSERVATION:
            raise ValueError("trajectory must start with the initial observation")
        for prev, cur in zip(self.steps, self.steps[1:]):
            if prev.kind == cur.kind:
                raise ValueError("observations and actions must alternate")
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [0, 1]")
        if max_steps is not None and self.n_actions > max_steps:
            raise ValueError(f"{self.n_actions} actions exceeds max_steps={max_steps}")

    def to_record(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "episode_seed": self.episode_seed,
            "env": self.env_name,
            "steps": [s.to_dict() for s in self.steps],
            "reward": self.reward,
            "success": self.success,
            "meta": dict(sorted(self.metadata.items())),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Trajectory":
        version = rec.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r}")
        seed = rec["episode_seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ValueError("episode_seed must be a non-negative integer")
        meta = rec.get("meta", {})
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
            raise ValueError("meta must map strings to strings")
        return cls(
            task_id=str(rec["task_id"]),
            episode_seed=seed,
            steps=[Step.from_dict(s) for s in rec["steps"]],
            reward=float(rec["reward"]),
            success=bool(rec["success"]),
            env_name=str(rec["env"]),
            metadata=dict(meta),
        )


def write_trajectories(path: Path | str, trajectories: Iterable[Trajectory]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_record(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_trajectories(path: Path | str) -> list[Trajectory]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TrajectoryFormatError(path, lineno, str(exc)) from exc
    return out


# ---------------------------------------------------------------------------
# action grammar

@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict[str, Any]


@dataclass(frozen=True)
class Message:
    text: str


Action = ToolCall | Message

_TOOL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\((.*)\)\s*$", re.DOTALL)
_MSG_RE = re.compile(r"^\s*respond:\s?(.*)$", re.DOTALL)


def extract_tool_or_message(text: Optional[str]) -> Optional[Action]:
    """Parse ``name({json})`` tool calls and ``respond: ...`` messages.

    Anything else (including non-object arguments) yields ``None``.
    """
    if text is None:
        return None
    m = _MSG_RE.match(text)
    if m:
        body = m.group(1).strip()
        return Message(body) if body else None
    m = _TOOL_RE.match(text)
    if not m:
        return None
    raw = m.group(2).strip() or "{}"
    try:
        args = json.loads(raw)
    except json.JSONDecodeError:
        return None
    if not isinstance(args, dict):
        return None
    return ToolCall(m.group(1), args)


def format_tool_call(name: str, args: dict[str, Any]) -> str:
    return f"{name}({json.dumps(args, sort_keys=True)})"


def format_message(text: str) -> str:
    return f"respond: {text}"


_EXTRACTORS: dict[str, Callable[[Optional[str]], Any]] = {
    "tool_or_message": extract_tool_or_message,
}


def register_extractor(name: str, fn: Callable[[Optional[str]], Any]) -> None:
    if name in _EXTRACTORS:
        raise RegistryError(f"extractor {name!r} already registered")
    _EXTRACTORS[name] = fn


def get_extractor(name: str) -> Callable[[Optional[str]], Any]:
    try:
        return _EXTRACTORS[name]
    except KeyError:
        raise RegistryError(f"unknown action extractor {name!r}") from None


# ---------------------------------------------------------------------------
# environment protocol and registry

@runtime_checkable
class EnvState(Protocol):
    done: bool
    current_player: int
    rewards: dict[int, float]
    invalid_player: Optional[int]

    def reset(self, seed: int) -> None: ...

    def observe(self, player_id: int) -> str: ...

    def legal_actions(self) -> list[str]: ...

    def step(self, action: Optional[str]) -> None: ...


@dataclass(frozen=True)
class EnvSpec:
    name: str
    max_gen_tokens: int
    system_prompt: str
    action_extractor_id: str = "tool_or_message"
    # reward at or above which an episode counts as a success
    success_threshold: float = 1.0

    def __post_init__(self) -> None:
        if self.max_gen_tokens <= 0:
            raise ValueError("max_gen_tokens must be positive")


class BaseEnv:
    """Shared bookkeeping for terminal-reward environments."""

    spec: EnvSpec

    def __init__(self) -> None:
        self.done = False
        self.current_player = 0
        self.rewards: dict[int, float] = {}
        self.invalid_player: Optional[int] = None
        self.extract = get_extractor(self.spec.action_extractor_id)

    def _clear(self) -> None:
        self.done = False
        self.current_player = 0
        self.rewards = {}
        self.invalid_player = None

    def _terminate(self, reward: float) -> None:
        if not 0.0 <= reward <= 1.0:
            raise ValueError(f"reward {reward} outside [0, 1]")
        self.done = True
        self.rewards = {0: reward}

    def _invalid(self) -> None:
        self.invalid_player = 0
        self._terminate(0.0)

    def _require_live(self) -> None:
        if self.done:
            raise ProtocolError("step() called on a finished episode")

    def legal_actions(self) -> list[str]:
        return []

    @property
    def success(self) -> bool:
        return self.done and self.rewards.get(0, 0.0) >= self.spec.success_threshold


@dataclass(frozen=True)
class _Entry:
    spec: EnvSpec
    factory: Callable[[], EnvState]


class Registry:
    def __init__(self) -> None:
        self._entries: dict[str, _Entry] = {}
        self._lock = threading.Lock()

    def register(self, spec: EnvSpec, factory: Callable[[], EnvState]) -> None:
        with self._lock:
            if spec.name in self._entries:
                raise RegistryError(f"environment {spec.name!r} already registered")
            self._entries[spec.name] = _Entry(spec, factory)

    def spec(self, name: str) -> EnvSpec:
        return self._get(name).spec

    def make(self, name: str) -> EnvState:
        return self._get(name).factory()

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def _get(self, name: str) -> _Entry:
        try:
            return self._entries[name]
        except KeyError:
            raise RegistryError(f"unknown environment {name!r}") from None


REGISTRY = Registry()


def register_env(spec: EnvSpec, factory: Callable[[], EnvState]) -> None:
    REGISTRY.register(spec, factory)


def make_env(name: str) -> EnvState:
    _ensure_builtins()
    return REGISTRY.make(name)


def env_spec(name: str) -> EnvSpec:
    _ensure_builtins()
    return REGISTRY.spec(name)


def env_names() -> list[str]:
    _ensure_builtins()
    return REGISTRY.names()


def _ensure_builtins() -> None:
    from . import envs  # noqa: F401  registers the shipped environments on import
