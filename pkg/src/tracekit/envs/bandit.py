"""One-step contextual bandit: reward 1 iff the agent names the marked option."""

from __future__ import annotations

import random
import re
from typing import Optional

from ..core import BaseEnv, EnvSpec, register_extractor

OPTIONS = ("alpha", "beta", "gamma", "delta")
_CHOICE = re.compile(r"^\s*choose:\s*([a-z]+)\s*$")


def extract_choice(text: Optional[str]) -> Optional[str]:
    if text is None:
        return None
    m = _CHOICE.match(text)
    if m is None or m.group(1) not in OPTIONS:
        return None
    return m.group(1)


register_extractor("choice", extract_choice)


def bandit_target(seed: int) -> str:
    return random.Random(f"bandit:{seed}").choice(OPTIONS)


class ContextualBandit(BaseEnv):
    spec = EnvSpec(name="contextual_bandit", max_gen_tokens=8,
                   system_prompt="Reply with 'choose: <option>' naming the marked option.",
                   action_extractor_id="choice", success_threshold=1.0)

    def __init__(self) -> None:
        super().__init__()
        self.target = ""
        self._obs = ""

    def reset(self, seed: int) -> None:
        self._clear()
        rng = random.Random(f"bandit:{seed}")
        self.target = rng.choice(OPTIONS)
        self._obs = f"Round r{rng.randint(10**5, 10**6)}: the marked option is {self.target}."

    def observe(self, player_id: int) -> str:
        return self._obs

    def legal_actions(self) -> list[str]:
        return [f"choose: {o}" for o in OPTIONS]

    def step(self, action: Optional[str]) -> None:
        self._require_live()
        choice = self.extract(action)
        if choice is None:
            self._invalid()
            return
        self._terminate(1.0 if choice == self.target else 0.0)

    def episode_metadata(self) -> dict[str, str]:
        return {"target": self.target}
