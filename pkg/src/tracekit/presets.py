"""Built-in policies and fixtures for the shipped environments.

The device preset is a base assistant with two deliberate weaknesses: after a
low-battery permission error it apologises instead of clearing the blocker,
and after a lookup it confirms without reporting the looked-up values. Its
weights are a least-squares fit of a softened rule table, so sampling at
temperature 1 still occasionally finds the right move.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .core import ACTION, OBSERVATION, Step, Trajectory, extract_tool_or_message, format_tool_call
from .envs.bandit import OPTIONS
from .policy import ActionVocab, AdapterPolicy, EpisodeContext, HashingFeatureMap, PolicyOutput, tokenize

# ---------------------------------------------------------------------------
# contextual bandit

BANDIT_VOCAB = ActionVocab.from_pairs([(o, f"choose: {o}") for o in OPTIONS])
BANDIT_DIM = 64


def bandit_policy(dim: int = BANDIT_DIM) -> AdapterPolicy:
    """Uniform policy: zero base weights, so the first rollouts are at chance."""
    return AdapterPolicy(np.zeros((len(BANDIT_VOCAB), dim)), BANDIT_VOCAB, HashingFeatureMap(dim))


# ---------------------------------------------------------------------------
# device assistant

def _call(name: str, **args: object) -> str:
    return format_tool_call(name, dict(args))


DEVICE_VOCAB = ActionVocab.from_pairs([
    ("check_battery_mode", _call("get_low_battery_mode_status")),
    ("disable_low_battery", _call("set_low_battery_mode_status", on=False)),
    ("wifi_on", _call("set_wifi_status", on=True)),
    ("cellular_on", _call("set_cellular_status", on=True)),
    ("location_on", _call("set_location_service_status", on=True)),
    ("get_location", _call("get_current_location")),
    ("get_timestamp", _call("get_current_timestamp")),
    ("get_battery", _call("get_battery_level")),
    ("respond_result", "respond: Here is the result: {last}"),
    ("respond_done", "respond: Done, your request has been taken care of."),
    ("respond_error", "respond: Sorry, I was not able to complete that request."),
])
DEVICE_DIM = 256

SERVICE_ACTION = {"wifi": "wifi_on", "cellular": "cellular_on", "location": "location_on"}
LOOKUP_ACTION = {"get_current_location": "get_location", "get_current_timestamp": "get_timestamp",
                 "get_battery_level": "get_battery"}
_SETTERS = {"set_wifi_status", "set_cellular_status", "set_location_service_status"}
_TOGGLE_WORDS = {"turn", "enable", "switch", "switched", "turned"}


def requested_action(request: str) -> str:
    """The first action a competent assistant takes for a device request."""
    words = set(tokenize(request))
    if words & _TOGGLE_WORDS:
        for service in ("wifi", "cellular", "location"):
            if service in words:
                return SERVICE_ACTION[service]
    if "battery" in words:
        return "get_battery"
    if "timestamp" in words or "time" in words:
        return "get_timestamp"
    return "get_location"


def _soft(main: dict[str, float]) -> np.ndarray:
    """Distribution with the given masses; leftover mass spread over the rest."""
    p = np.zeros(len(DEVICE_VOCAB))
    for name, mass in main.items():
        p[DEVICE_VOCAB.index(name)] = mass
    rest = 1.0 - p.sum()
    free = p == 0.0
    p[free] = rest / free.sum()
    return p


def device_teacher(steps: Sequence[Step]) -> np.ndarray:
    """Target action distribution of the base assistant for a history."""
    request = steps[0].text
    actions = [s for s in steps if s.kind == ACTION]
    if not actions:
        return _soft({requested_action(request): 0.98})
    last = extract_tool_or_message(actions[-1].text)
    obs = next(s.text for s in reversed(steps) if s.kind == OBSERVATION)
    name = getattr(last, "name", "")
    if obs.startswith("PermissionError"):
        return _soft({"respond_error": 0.55, "disable_low_battery": 0.12, "check_battery_mode": 0.12})
    if name == "get_low_battery_mode_status":
        return _soft({"respond_error": 0.5, "disable_low_battery": 0.3})
    if name == "set_low_battery_mode_status":
        return _soft({requested_action(request): 0.9})
    if name in _SETTERS and obs.endswith("is now on."):
        return _soft({"respond_result": 0.9})
    if name in LOOKUP_ACTION and not obs.startswith("Error"):
        return _soft({"respond_done": 0.55, "respond_result": 0.3})
    return _soft({"respond_error": 0.6})


class _TeacherPolicy:
    def __init__(self, rng_temperature: float = 1.0):
        self.temperature = rng_temperature

    def act(self, ctx: EpisodeContext) -> PolicyOutput:
        p = device_teacher(ctx.steps)
        token = int(ctx.rng.choice(len(p), p=p))
        return PolicyOutput(DEVICE_VOCAB.render(token, ctx.steps), token, float(np.log(p[token])))


FIT_ENVS = ("device_suite", "tec_recovery", "tec_communicate")
FIT_SEED_OFFSET = 5_000_000


@lru_cache(maxsize=4)
def _device_weights(dim: int, n_seeds: int, ridge: float) -> np.ndarray:
    from .rollout import run_episode

    fmap = HashingFeatureMap(dim)
    teacher = _TeacherPolicy()
    rows: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
    for env in FIT_ENVS:
        for seed in range(FIT_SEED_OFFSET, FIT_SEED_OFFSET + n_seeds):
            traj = run_episode(teacher, env, seed, max_steps=8, global_seed=17)
            for j, step in enumerate(traj.steps):
                if step.kind != ACTION:
                    continue
                phi = fmap(traj.steps[:j])
                rows.setdefault(phi.tobytes(), (phi, device_teacher(traj.steps[:j])))
    X = np.array([r[0] for r in rows.values()])
    logp = np.log(np.array([r[1] for r in rows.values()]))
    Y = logp - logp.mean(axis=1, keepdims=True)
    # ridge least squares: W = Y^T X (X^T X + ridge I)^-1
    gram = X.T @ X + ridge * np.eye(dim)
    W = np.linalg.solve(gram, X.T @ Y).T
    return W


def device_policy(dim: int = DEVICE_DIM, n_seeds: int = 150, ridge: float = 1e-3) -> AdapterPolicy:
    W = _device_weights(dim, n_seeds, ridge)
    return AdapterPolicy(W.copy(), DEVICE_VOCAB, HashingFeatureMap(dim))


def builtin_policy(name: str) -> AdapterPolicy:
    if name == "bandit":
        return bandit_policy()
    if name == "device":
        return device_policy()
    raise KeyError(f"unknown built-in policy {name!r}; expected 'bandit' or 'device'")


# ---------------------------------------------------------------------------
# capability dictionary and rule-table labels for device trajectories

NA, PRESENT, LACKING = "NA", "PRESENT", "LACKING"


def _tool_calls(traj: Trajectory) -> list[tuple[str, str]]:
    """(tool name, result observation) pairs in order."""
    out = []
    for i, step in enumerate(traj.steps):
        if step.kind != ACTION:
            continue
        parsed = extract_tool_or_message(step.text)
        if parsed is not None and hasattr(parsed, "name"):
            result = traj.steps[i + 1].text if i + 1 < len(traj.steps) else ""
            out.append((parsed.name, result))
    return out


def _final_message(traj: Trajectory) -> Optional[str]:
    for step in reversed(traj.actions):
        parsed = extract_tool_or_message(step.text)
        if parsed is not None and not hasattr(parsed, "name"):
            return parsed.text
    return None


def _label_recovery(traj: Trajectory) -> str:
    calls = _tool_calls(traj)
    hit = next((i for i, (_, res) in enumerate(calls) if res.startswith("PermissionError")), None)
    if hit is None:
        return NA
    cleared = any(name == "set_low_battery_mode_status" for name, _ in calls[hit + 1:])
    return PRESENT if cleared else LACKING


def _label_communication(traj: Trajectory) -> str:
    calls = [(n, r) for n, r in _tool_calls(traj) if n in LOOKUP_ACTION and not r.startswith("Error")]
    if not calls:
        return NA
    final = _final_message(traj) or ""
    value = calls[-1][1].split(":", 1)[-1].strip()
    return PRESENT if value and value in final else LACKING


def _label_tool_selection(traj: Trajectory) -> str:
    target = traj.metadata.get("target_tool") or ""
    service = traj.metadata.get("target_service") or ""
    wanted = {target} if target else set()
    if service:
        from .envs.tools import SERVICE_TOOLS

        wanted.add(SERVICE_TOOLS[service])
    if not wanted:
        return NA
    called = {n for n, _ in _tool_calls(traj)}
    return PRESENT if wanted & called else LACKING


def _label_status_check(traj: Trajectory) -> str:
    calls = _tool_calls(traj)
    setters = [i for i, (n, _) in enumerate(calls) if n in _SETTERS]
    if not setters:
        return NA
    checked = any(n == "get_low_battery_mode_status" for n, _ in calls[:setters[0]])
    return PRESENT if checked else LACKING


def _label_closure(traj: Trajectory) -> str:
    return PRESENT if _final_message(traj) is not None else LACKING


DEVICE_CAPABILITIES = [
    {
        "id": "permission_error_recovery",
        "name": "Permission error recovery",
        "description": "Turn on, enable or switch on wifi, cellular data service or location "
                       "services when the change is refused because low battery mode is on: "
                       "turn low battery mode off, then retry the requested setting.",
        "failure_pattern": "The agent hits a low battery permission error and apologises to the "
                           "user instead of disabling low battery mode and retrying.",
        "correct_behavior": "Call set_low_battery_mode_status with on=false, retry the blocked "
                            "setter, then confirm the setting is on.",
        "train_env": "tec_recovery",
    },
    {
        "id": "result_communication",
        "name": "Result communication",
        "description": "Tell the user what was looked up: how much battery level percentage is "
                       "left, what time the current timestamp is, or where the current location "
                       "is right now.",
        "failure_pattern": "The agent calls the right lookup tool but ends with a generic "
                           "confirmation that omits the value the user asked for.",
        "correct_behavior": "Quote the values returned by the lookup tool in the final response.",
        "train_env": "tec_communicate",
    },
    {
        "id": "tool_selection",
        "name": "Tool selection",
        "description": "Call the device tool that matches the service or value the user asked about.",
        "failure_pattern": "The agent calls an unrelated tool.",
        "correct_behavior": "Map the request to the matching setter or lookup tool.",
        "train_env": "device_suite",
    },
    {
        "id": "status_check_before_action",
        "name": "Status check before action",
        "description": "Check low battery mode before changing a connectivity setting.",
        "failure_pattern": "The agent changes a setting without first checking the battery mode.",
        "correct_behavior": "Call get_low_battery_mode_status before any setter.",
        "train_env": "tec_recovery",
    },
    {
        "id": "conversation_closure",
        "name": "Conversation closure",
        "description": "End the task with a message to the user.",
        "failure_pattern": "The episode ends without a final user-facing message.",
        "correct_behavior": "Finish with a respond message.",
        "train_env": "device_suite",
    },
]

DEVICE_RULES = {
    "permission_error_recovery": _label_recovery,
    "result_communication": _label_communication,
    "tool_selection": _label_tool_selection,
    "status_check_before_action": _label_status_check,
    "conversation_closure": _label_closure,
}
