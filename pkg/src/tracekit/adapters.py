"""Low-rank adapters, single-adapter merge, and label-token routing."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .core import Trajectory, extract_tool_or_message, make_env
from .kernels import content_hash
from .policy import tokenize

log = logging.getLogger(__name__)

BASE = "BASE"
BASE_LABEL = "Z"
CAPABILITY_LABELS = "ABCDEFGHIJKLMNOPQRSTUVWXY"
ADAPTER_FORMAT = "lora-adapter/1"


@dataclass
class LoraAdapter:
    capability_id: str
    B: np.ndarray  # (d_out, rank)
    A: np.ndarray  # (rank, d_in)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.B = np.asarray(self.B, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ValueError(f"factor shapes {self.B.shape} and {self.A.shape} do not chain")
        if self.rank < 1:
            raise ValueError("rank must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.capability_id, self.B.copy(), self.A.copy(), dict(self.provenance))

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": ADAPTER_FORMAT,
            "capability_id": self.capability_id,
            "rank": self.rank,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "A": self.A.ravel(order="C").tolist(),
            "B": self.B.ravel(order="C").tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LoraAdapter":
        if d.get("format") != ADAPTER_FORMAT:
            raise ValueError(f"not an adapter file (format={d.get('format')!r})")
        r, d_in, d_out = int(d["rank"]), int(d["d_in"]), int(d["d_out"])
        A = np.asarray(d["A"], dtype=np.float64)
        B = np.asarray(d["B"], dtype=np.float64)
        if A.size != r * d_in or B.size != d_out * r:
            raise ValueError("factor sizes disagree with declared dimensions")
        return cls(str(d["capability_id"]), B.reshape(d_out, r), A.reshape(r, d_in),
                   dict(d.get("provenance", {})))

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "LoraAdapter":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_adapter(capability_id: str, d_out: int, d_in: int, rank: int,
                 rng: np.random.Generator, a_scale: Optional[float] = None) -> LoraAdapter:
    """B = 0 and Gaussian A, so the adapted policy starts equal to the base."""
    scale = 1.0 / math.sqrt(rank) if a_scale is None else a_scale
    return LoraAdapter(capability_id, np.zeros((d_out, rank)),
                       rng.normal(0.0, scale, size=(rank, d_in)))


def merge(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Dense ``W + B A`` as a new array; ``W`` is not modified."""
    if W.shape != (adapter.d_out, adapter.d_in):
        raise ValueError(f"adapter {adapter.d_out}x{adapter.d_in} does not fit weights {W.shape}")
    return W + adapter.B @ adapter.A


def load_adapters(directory: Path | str) -> dict[str, LoraAdapter]:
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        ad = LoraAdapter.load(path)
        out[ad.capability_id] = ad
    return out


# ---------------------------------------------------------------------------
# routing prompt

@dataclass
class RoutingCandidate:
    capability_id: str
    name: str
    description: str
    exemplar: str
    relevance: Optional[float] = None


@dataclass
class RoutingPrompt:
    messages: list[dict[str, str]]
    label_map: dict[str, str]  # label -> capability id or BASE
    sections: dict[str, str]  # label -> description and exemplar text
    task: str

    @property
    def text(self) -> str:
        return "\n".join(f"--- {m['role'].upper()} ---\n{m['content']}" for m in self.messages)

    @property
    def labels(self) -> list[str]:
        return list(self.label_map)

    def digest(self) -> str:
        return content_hash(self.messages)


def render_exemplar(traj: Trajectory) -> str:
    """Customer request, executed tool calls, and the agent's final message."""
    lines = [f"Customer: {traj.initial_observation}"]
    calls = []
    final = ""
    for step in traj.actions:
        parsed = extract_tool_or_message(step.text)
        if parsed is None:
            continue
        if hasattr(parsed, "name"):
            calls.append(parsed.name)
        else:
            final = parsed.text
    if calls:
        lines.append(f"[Agent executes: {'; '.join(calls)}]")
    if final:
        lines.append(f"Agent: {final}")
    return "\n".join(lines)


ROUTER_HEADER = "You are a routing classifier. Select which skill best matches the customer's request."
BASE_DESCRIPTION = "base: none of the skills above is needed; answer with the unmodified assistant."


def assemble_routing_prompt(task_o1: str, candidates: Sequence[RoutingCandidate]) -> RoutingPrompt:
    if len(candidates) > len(CAPABILITY_LABELS):
        raise ValueError(f"at most {len(CAPABILITY_LABELS)} capabilities can be routed")
    ids = [c.capability_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate capability ids in routing candidates")
    label_map: dict[str, str] = {}
    sections: dict[str, str] = {}
    blocks = [ROUTER_HEADER]
    for label, cand in zip(CAPABILITY_LABELS, candidates):
        if not cand.exemplar:
            raise ValueError(f"capability {cand.capability_id!r} has no exemplar trajectory")
        rel = f" (relevance: {cand.relevance:.2f})" if cand.relevance is not None else ""
        section = f"{cand.name}{rel} - {cand.description}\nSimilar scenario:\n{cand.exemplar}"
        blocks.append(f"{label}: {section}")
        label_map[label] = cand.capability_id
        sections[label] = section
    blocks.append(f"{BASE_LABEL}: {BASE_DESCRIPTION}")
    label_map[BASE_LABEL] = BASE
    sections[BASE_LABEL] = BASE_DESCRIPTION
    blocks.append("Only output the label.")
    messages = [
        {"role": "system", "content": "\n\n".join(blocks)},
        {"role": "user", "content": task_o1},
        {"role": "user", "content": "Which skill?"},
    ]
    return RoutingPrompt(messages, label_map, sections, task_o1)


_BLOCK = re.compile(r"^([A-Z]): (.*)$", re.DOTALL)


def parse_routing_messages(messages: Sequence[Mapping[str, str]]) -> RoutingPrompt:
    """Rebuild a routing prompt from its wire messages (labels map to themselves)."""
    if len(messages) < 2 or messages[0].get("role") != "system":
        raise ValueError("not a routing request")
    label_map: dict[str, str] = {}
    sections: dict[str, str] = {}
    for block in messages[0]["content"].split("\n\n"):
        m = _BLOCK.match(block)
        if m is None:
            continue
        label, text = m.group(1), m.group(2)
        label_map[label] = BASE if label == BASE_LABEL else label
        sections[label] = text
    return RoutingPrompt([dict(m) for m in messages], label_map, sections, messages[1]["content"])


# ---------------------------------------------------------------------------
# routing decision

@dataclass
class RoutingDecision:
    chosen: str
    label: str
    label_logits: dict[str, float]
    prompt_digest: str

    def to_dict(self) -> dict[str, Any]:
        return {"chosen": self.chosen, "label": self.label,
                "label_logits": dict(sorted(self.label_logits.items())),
                "prompt_digest": self.prompt_digest}


def argmax_label(scores: Mapping[str, float]) -> str:
    """Highest score; ties go to the alphabetically lowest label, BASE's label last."""
    if not scores:
        raise ValueError("no label scores")
    order = sorted(scores, key=lambda lab: (lab == BASE_LABEL, lab))
    best = order[0]
    for lab in order[1:]:
        if scores[lab] > scores[best]:
            best = lab
    return best


_STOP = frozenset("a an and the to of for my me i is it in on at be can you your please "
                  "with this that what which who customer agent executes here result "
                  "device owner similar scenario relevance".split())


class BuiltinRouter:
    """In-context scorer of the built-in base model.

    The logit of a capability label is ``scale`` times the fraction of the
    request's content words that occur in that capability's prompt section;
    the base label scores a fixed ``base_score``.
    """

    def __init__(self, scale: float = 10.0, base_score: float = 0.25):
        self.scale = scale
        self.base_score = base_score

    @staticmethod
    def _words(text: str) -> set[str]:
        return {w for w in tokenize(text) if w not in _STOP}

    def score_request(self, request: Any) -> dict[str, float]:
        """Label scores for a wire-format routing request (mock served model)."""
        return self.label_logits(parse_routing_messages(request.messages))

    def label_logits(self, prompt: RoutingPrompt) -> dict[str, float]:
        task = self._words(prompt.task)
        out = {}
        for label, cap in prompt.label_map.items():
            if cap == BASE:
                out[label] = self.scale * self.base_score
            elif task:
                out[label] = self.scale * len(task & self._words(prompt.sections[label])) / len(task)
            else:
                out[label] = 0.0
        return out


class GatewayRouter:
    """Routes with a served model: single-token constrained decode at temperature 0."""

    def __init__(self, gateway: Any):
        self.gateway = gateway


def route(router: Any, prompt: RoutingPrompt) -> RoutingDecision:
    if hasattr(router, "label_logits"):
        logits = router.label_logits(prompt)
        label = argmax_label(logits)
    else:
        from .gateway import ChatRequest

        gateway = router.gateway if isinstance(router, GatewayRouter) else router
        req = ChatRequest(messages=prompt.messages, temperature=0.0, max_tokens=1,
                          choices=prompt.labels)
        label, scores = gateway.choose(req)
        logits = {k: float(v) for k, v in (scores or {}).items() if k in prompt.label_map}
        if logits:
            label = argmax_label(logits)
        elif label not in prompt.label_map:
            log.warning("router returned %r outside the label set; using the base policy", label)
            label = BASE_LABEL
    return RoutingDecision(prompt.label_map[label], label, logits, prompt.digest())


def run_with_routing(env_name: str, seed: int, router: Any, base_policy: Any,
                     adapters: Mapping[str, LoraAdapter],
                     candidates: Sequence[RoutingCandidate], **episode_kw: Any
                     ) -> tuple[Trajectory, RoutingDecision]:
    """Route one task, merge at most one adapter into an episode-local copy, run it."""
    from .rollout import run_episode

    env = make_env(env_name)
    env.reset(seed)
    prompt = assemble_routing_prompt(env.observe(0), candidates)
    decision = route(router, prompt)
    if decision.chosen == BASE:
        policy = base_policy
    else:
        if decision.chosen not in adapters:
            raise KeyError(f"router chose {decision.chosen!r} but no such adapter is loaded")
        policy = base_policy.with_adapter(adapters[decision.chosen])
    traj = run_episode(policy, env_name, seed, **episode_kw)
    traj.metadata["routed_to"] = decision.chosen
    return traj, decision
