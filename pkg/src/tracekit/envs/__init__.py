"""Shipped environments; importing this package registers them."""

from __future__ import annotations

from dataclasses import replace

from ..core import REGISTRY
from .bandit import ContextualBandit
from .sdr import StructuredDataGame
from .tec import DeviceSuite, TECGame


def _tec_variant(skill: str) -> type[TECGame]:
    spec = replace(TECGame.spec, name=f"tec_{skill}")
    return type(f"TEC{skill.title()}Game", (TECGame,),
                {"spec": spec, "__init__": lambda self: TECGame.__init__(self, skill)})


TECRecoveryGame = _tec_variant("recovery")
TECCommunicateGame = _tec_variant("communicate")

for _cls in (StructuredDataGame, TECGame, TECRecoveryGame, TECCommunicateGame, DeviceSuite,
             ContextualBandit):
    if _cls.spec.name not in REGISTRY:
        REGISTRY.register(_cls.spec, _cls)

__all__ = ["ContextualBandit", "DeviceSuite", "StructuredDataGame", "TECGame",
           "TECRecoveryGame", "TECCommunicateGame"]
