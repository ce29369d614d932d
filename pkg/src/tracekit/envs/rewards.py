"""Reward composition and text-matching helpers shared by the environments."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

DEFAULT_ALPHA = 0.7


@dataclass(frozen=True)
class RewardBreakdown:
    components: dict[str, float]
    multiplicative: float
    additive: float
    alpha: float
    total: float
    notes: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        expected = self.alpha * self.multiplicative + (1.0 - self.alpha) * self.additive
        if abs(expected - self.total) > 1e-12:
            raise AssertionError(f"total {self.total} != composed {expected}")
        if not 0.0 <= self.total <= 1.0:
            raise AssertionError(f"total {self.total} outside [0, 1]")


def compose_reward(
    components: Mapping[str, float],
    weights: Mapping[str, float] | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> RewardBreakdown:
    """``alpha * prod(c) + (1 - alpha) * sum(w * c)``.

    Weights default to uniform and must sum to one.
    """
    if not components:
        raise ValueError("no reward components")
    if weights is None:
        weights = {k: 1.0 / len(components) for k in components}
    if set(weights) != set(components):
        raise ValueError("weights and components name different keys")
    for k, c in components.items():
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"component {k}={c} outside [0, 1]")
    if any(w < 0 for w in weights.values()):
        raise ValueError("weights must be nonnegative")
    if abs(math.fsum(weights.values()) - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {math.fsum(weights.values())}, expected 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mult = math.prod(components.values())
    add = sum(weights[k] * components[k] for k in components)
    total = alpha * mult + (1.0 - alpha) * add
    return RewardBreakdown(dict(components), mult, add, alpha, min(1.0, max(0.0, total)))


_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text).strip().lower()


def contains(haystack: str, needle: str) -> bool:
    """Case-insensitive substring test after whitespace normalisation."""
    return normalize_text(needle) in normalize_text(haystack)


def keyword_match_ratio(response: str, keywords: Iterable[str]) -> float:
    keywords = list(keywords)
    if not keywords:
        return 1.0
    return sum(contains(response, k) for k in keywords) / len(keywords)
