"""Prompt template for commissioning a capability-targeted training environment."""

from __future__ import annotations

import re
from typing import Mapping

PLACEHOLDERS = ("SKILL_DESCRIPTION", "FAILURE_PATTERN", "CORRECT_BEHAVIOR",
                "TRAJECTORY_EXAMPLES_OR_PATH", "GAME_NAME", "VLLM_URL")

ENV_DESIGN_TEMPLATE = """\
You are an RL environment designer. Build a training environment, compatible with group-relative
policy optimisation, that teaches a language model one skill through seeded, procedurally
generated scenarios with shaped rewards.

## Target skill
- Skill: {SKILL_DESCRIPTION}
- Current failure: {FAILURE_PATTERN}
- Desired behaviour: {CORRECT_BEHAVIOR}
- Failing trajectories:
{TRAJECTORY_EXAMPLES_OR_PATH}

## Interface
Implement the environment protocol (done, current_player with 0 for the agent, terminal rewards
per player, invalid_player, reset(seed), observe(player_id), legal_actions(), step(action)) and
register it under the name "{GAME_NAME}" with an action extractor, a system prompt and a
generation budget of 2048 tokens.

## Design constraints
1. Reward variance. Group-relative updates learn only from reward differences inside a group of
   same-seed rollouts; a group with identical rewards is a wasted update. Prefer multi-level
   rewards, aim for a base success rate between roughly 30% and 60%, and combine components that
   must co-occur multiplicatively with an additive floor:
   reward = alpha * (product of components) + (1 - alpha) * (weighted sum of components).
2. Fidelity. Reuse the target benchmark's tool names, argument names and result formats; keep
   error messages consistent; generate all data procedurally. Train the skill, not the surface
   format of one benchmark.
3. Procedural generation. reset(seed) must be deterministic; different seeds must give genuinely
   different scenarios (database contents, requests, constraint combinations, distractors).
4. Skill isolation. Stress one skill per environment. If several skills are needed, sample one
   per scenario from fixed weights, give each its own generator and reward, and record which
   skill each scenario targets. Keep to one or two skills per environment.

## Deliverables
- The environment module for "{GAME_NAME}" and its registration entry.
- A reward verification report from at least 100 rollouts of the base model.

## Verification targets
Run the checks below against the model served at {VLLM_URL} before finalising:
- Mean reward over 100 seeded rollouts (target: 0.3-0.6 for base model).
- Reward standard deviation (target: >0.2).
- Reward distribution rounded to one decimal, and a per-skill breakdown for multi-skill envs.
- Informative groups: for 20 group seeds, play 8 rollouts each at temperature 1.0; a group is
  informative when its rewards rounded to two decimals take more than one value
  (target: more than 60% of groups).
"""

_UNFILLED = re.compile(r"\{([A-Z_]+)\}")


class PromptError(ValueError):
    pass


def render_env_prompt(values: Mapping[str, str], template: str = ENV_DESIGN_TEMPLATE) -> str:
    """Fill every placeholder; a missing or empty value is an error naming it."""
    for name in PLACEHOLDERS:
        v = values.get(name)
        if v is None or not str(v).strip():
            raise PromptError(f"missing value for placeholder {{{name}}}")
    out = template
    for name in PLACEHOLDERS:
        out = out.replace("{" + name + "}", str(values[name]))
    # any leftover placeholder comes from the template, not from filled values
    leftover = [m for m in _UNFILLED.findall(template) if m not in PLACEHOLDERS]
    if leftover:
        raise PromptError(f"template has unknown placeholders: {sorted(set(leftover))}")
    return out


def card_prompt_values(card: Mapping[str, str] | object, trajectories: str, game_name: str,
                       server_url: str) -> dict[str, str]:
    get = card.get if isinstance(card, Mapping) else (lambda k, d="": getattr(card, k, d))
    return {
        "SKILL_DESCRIPTION": get("description", ""),
        "FAILURE_PATTERN": get("failure_pattern", ""),
        "CORRECT_BEHAVIOR": get("correct_behavior", ""),
        "TRAJECTORY_EXAMPLES_OR_PATH": trajectories,
        "GAME_NAME": game_name,
        "VLLM_URL": server_url,
    }
