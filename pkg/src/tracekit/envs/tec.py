"""Tool-use and error-recovery game on a synthetic device.

Skills: ``communicate`` (call a lookup tool and report its values),
``recovery`` (the requested service is blocked by low battery mode and the
agent has to clear the blocker and retry) and ``combined`` (recover, then
look up and report). The episode ends at the agent's first message to the
user.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Optional

from ..core import BaseEnv, EnvSpec, Message, ToolCall
from .rewards import RewardBreakdown, keyword_match_ratio
from .tools import LOOKUP_TOOLS, SERVICE_LABELS, Database, execute_tool, tool_names

ACTION_WEIGHT = 0.6
COMM_WEIGHT = 0.4

SERVICE_REQUESTS = {
    "wifi": ["Turn on wifi.", "Please turn on my wifi.", "Can you enable wifi for me?",
             "I need wifi switched on."],
    "cellular": ["Turn on cellular data.", "Please enable my cellular service.",
                 "Can you switch cellular on?", "I need cellular turned on."],
    "location": ["Turn on location services.", "Please enable location on my phone.",
                 "Can you switch location services on?", "I need location turned on."],
}
LOOKUP_REQUESTS = {
    "get_current_location": ["Where am I right now?", "What is my current location?",
                             "Tell me where I am."],
    "get_current_timestamp": ["What is the current timestamp?", "Tell me the current unix time.",
                              "What time is it as a timestamp?"],
    "get_battery_level": ["What is my battery level?", "How much battery do I have left?",
                          "Tell me my battery percentage."],
}
COMBINED_REQUESTS = ["Turn on location services and tell me where I am.",
                     "Enable location and then tell me my current location.",
                     "Switch location on and tell me where I am right now."]
OWNERS = ["Maya", "Liam", "Sofia", "Noah", "Aisha", "Mateo", "Yuki", "Omar", "Elena", "Kofi",
          "Priya", "Lucas", "Hana", "Diego", "Zara", "Ivan"]


@dataclass
class TECScenario:
    seed: int
    skill: str
    database: Database
    initial_message: str
    target_service: Optional[str]
    target_tool: Optional[str]
    keywords: list[str]
    blocker: Optional[str] = None
    extras: dict[str, str] = field(default_factory=dict)

    @property
    def domain(self) -> str:
        return "Device"


def _device_db(rng: random.Random) -> Database:
    return {
        "domain": "Device",
        "settings": {"wifi": False, "cellular": False, "location": True, "low_battery": False},
        "battery_level": rng.randint(5, 95),
        "location": {"latitude": f"{rng.uniform(-60, 60):.4f}",
                     "longitude": f"{rng.uniform(-170, 170):.4f}"},
        "timestamp": rng.randint(1_700_000_000, 1_800_000_000),
        "contacts": {f"{rng.choice(OWNERS)} {i}": f"+1-555-{rng.randint(1000, 9999)}" for i in range(3)},
        "call_log": [],
    }


def _lookup_keywords(db: Database, tool: str) -> list[str]:
    if tool == "get_current_location":
        return [db["location"]["latitude"], db["location"]["longitude"]]
    if tool == "get_current_timestamp":
        return [str(db["timestamp"])]
    return [f"{db['battery_level']}%"]


def _build(rng: random.Random, seed: int, skill: str) -> TECScenario:
    db = _device_db(rng)
    owner = rng.choice(OWNERS)
    header = f"[device d{rng.randint(1000, 9999)}, owner {owner}]"
    if skill == "communicate":
        tool = rng.choice(LOOKUP_TOOLS)
        return TECScenario(seed, skill, db, f"{header} {rng.choice(LOOKUP_REQUESTS[tool])}",
                           None, tool, _lookup_keywords(db, tool))
    if skill == "combined":
        db["settings"]["location"] = False
        db["settings"]["low_battery"] = True
        return TECScenario(seed, skill, db, f"{header} {rng.choice(COMBINED_REQUESTS)}",
                           "location", "get_current_location",
                           _lookup_keywords(db, "get_current_location"), blocker="low_battery")
    service = rng.choice(sorted(SERVICE_REQUESTS))
    db["settings"][service] = False
    blocked = skill == "recovery"
    db["settings"]["low_battery"] = blocked
    return TECScenario(seed, skill, db, f"{header} {rng.choice(SERVICE_REQUESTS[service])}",
                       service, None, [f"{SERVICE_LABELS[service]} is now on"],
                       blocker="low_battery" if blocked else None)


def generate_tec_scenario(seed: int, skill: Optional[str] = None) -> TECScenario:
    """Skill split 40% communicate / 40% recovery / 20% combined unless forced."""
    rng = random.Random(f"tec:{seed}")
    roll = rng.random()
    if skill is None:
        if roll < 0.40:
            skill = "communicate"
        elif roll < 0.80:
            skill = "recovery"
        else:
            skill = "combined"
    if skill not in ("communicate", "recovery", "combined", "plain"):
        raise ValueError(f"unknown skill {skill!r}")
    return _build(rng, seed, skill)


SUITE_WEIGHTS = {"plain": 0.4, "recovery": 0.3, "communicate": 0.3}


def generate_suite_scenario(seed: int) -> TECScenario:
    """Mixed device-assistant task: plain toggles plus the two skill families."""
    rng = random.Random(f"suite:{seed}")
    roll = rng.random()
    acc = 0.0
    skill = "communicate"
    for name in ("plain", "recovery", "communicate"):
        acc += SUITE_WEIGHTS[name]
        if roll < acc:
            skill = name
            break
    return _build(rng, seed, skill)


def evaluate_tec_reward(final_response: str, final_db: Database,
                        scenario: TECScenario) -> RewardBreakdown:
    if scenario.skill in ("recovery", "combined", "plain"):
        action = 1.0 if final_db["settings"][scenario.target_service] else 0.0
    else:
        action = 1.0 if scenario.target_tool in final_db.get("call_log", []) else 0.0
    comm = keyword_match_ratio(final_response, scenario.keywords)
    total = ACTION_WEIGHT * action + COMM_WEIGHT * comm
    return RewardBreakdown({"action": action, "comm": comm}, action * comm, total, 0.0, total)


TEC_SYSTEM_PROMPT = (
    "You are a phone assistant. Use device tools to carry out the user's request, fixing any "
    "setting that blocks it, then tell the user the outcome including any values you looked up. "
    "Call a tool as name({json arguments}); your first 'respond: <message>' ends the task. "
    "Tools: " + ", ".join(tool_names("Device"))
)


class TECGame(BaseEnv):
    spec = EnvSpec(name="tec_game", max_gen_tokens=2048, system_prompt=TEC_SYSTEM_PROMPT,
                   success_threshold=0.99)

    def __init__(self, skill: Optional[str] = None):
        super().__init__()
        self.skill = skill
        self.scenario: Optional[TECScenario] = None
        self.db: Database = {}
        self._obs = ""
        self.breakdown: Optional[RewardBreakdown] = None

    def _generate(self, seed: int) -> TECScenario:
        return generate_tec_scenario(seed, self.skill)

    def reset(self, seed: int) -> None:
        self._clear()
        self.scenario = self._generate(seed)
        self.db = copy.deepcopy(self.scenario.database)
        self.breakdown = None
        self._obs = self.scenario.initial_message

    def observe(self, player_id: int) -> str:
        return self._obs

    def legal_actions(self) -> list[str]:
        return tool_names("Device")

    def step(self, action: Optional[str]) -> None:
        self._require_live()
        parsed = self.extract(action)
        if parsed is None:
            self._invalid()
            return
        if isinstance(parsed, ToolCall):
            self._obs, self.db = execute_tool(parsed.name, parsed.args, self.db)
            return
        assert isinstance(parsed, Message)
        self.breakdown = evaluate_tec_reward(parsed.text, self.db, self.scenario)
        self._terminate(self.breakdown.total)

    def episode_metadata(self) -> dict[str, str]:
        s = self.scenario
        return {"domain": "Device", "skill": s.skill, "target_service": s.target_service or "",
                "target_tool": s.target_tool or ""}


class DeviceSuite(TECGame):
    """Target environment mixing tasks the base policy handles with two deficits."""

    spec = EnvSpec(name="device_suite", max_gen_tokens=2048, system_prompt=TEC_SYSTEM_PROMPT,
                   success_threshold=0.99)

    def _generate(self, seed: int) -> TECScenario:
        return generate_suite_scenario(seed)
