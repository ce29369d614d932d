"""Contrastive capability identification over collected trajectories.

Discovery proposes a fixed dictionary of capabilities. Labeling marks each
(trajectory, capability) pair NA, PRESENT or LACKING. A capability is kept
when it is lacking markedly more often on failures than on successes and
explains enough of the failures, consistently across labeling runs.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .core import ACTION, OBSERVATION, Step, Trajectory

log = logging.getLogger(__name__)

NA, PRESENT, LACKING = "NA", "PRESENT", "LACKING"
LABELS = (NA, PRESENT, LACKING)
DEFAULT_DELTA = 0.20
DEFAULT_RHO = 0.10
DEFAULT_MIN_FRACTION = 0.8


def trajectory_id(traj: Trajectory) -> str:
    return f"{traj.task_id}#{traj.metadata.get('replicate', '0')}"


def _index(D: Sequence[Trajectory]) -> dict[str, Trajectory]:
    out: dict[str, Trajectory] = {}
    for t in D:
        tid = trajectory_id(t)
        if tid in out:
            raise ValueError(f"duplicate trajectory id {tid!r} in dataset")
        out[tid] = t
    return out


@dataclass
class CapabilityCard:
    id: str
    name: str
    description: str
    failure_pattern: str = ""
    correct_behavior: str = ""
    train_env: str = ""
    labels: dict[str, str] = field(default_factory=dict)

    def unlabeled(self) -> "CapabilityCard":
        return replace(self, labels={})

    def to_dict(self, with_labels: bool = False) -> dict[str, Any]:
        d = asdict(self)
        if not with_labels:
            d.pop("labels")
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CapabilityCard":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown capability card fields: {sorted(extra)}")
        return cls(**{k: (dict(v) if k == "labels" else v) for k, v in d.items()})


def split_dataset(D: Sequence[Trajectory]) -> tuple[list[Trajectory], list[Trajectory]]:
    """(successes, failures), each in input order."""
    return [t for t in D if t.success], [t for t in D if not t.success]


# ---------------------------------------------------------------------------
# discovery

class Discoverer(Protocol):
    def propose(self, D: Sequence[Trajectory]) -> list[CapabilityCard]: ...


def _dedup(cards: Iterable[CapabilityCard]) -> list[CapabilityCard]:
    seen: dict[str, CapabilityCard] = {}
    for c in cards:
        if c.id in seen:
            log.info("dropping duplicate capability %r", c.id)
            continue
        seen[c.id] = c.unlabeled()
    return list(seen.values())


def discover(D: Sequence[Trajectory], discoverer: Discoverer) -> list[CapabilityCard]:
    """Capability dictionary for ``D``; empty for an empty dataset."""
    if not D:
        return []
    return _dedup(discoverer.propose(D))


@dataclass
class ScriptedDiscoverer:
    """Returns a fixed dictionary."""

    cards: Sequence[CapabilityCard | Mapping[str, Any]]

    def propose(self, D: Sequence[Trajectory]) -> list[CapabilityCard]:
        return [c if isinstance(c, CapabilityCard) else CapabilityCard.from_dict(c) for c in self.cards]


def render_trajectory(traj: Trajectory, limit: int = 1200) -> str:
    lines = []
    for s in traj.steps:
        who = "USER/TOOL" if s.kind == OBSERVATION else "AGENT"
        lines.append(f"{who}: {s.text}")
    text = "\n".join(lines)
    return text if len(text) <= limit else text[:limit] + " ..."


DISCOVERY_PROMPT = """You analyse transcripts of an assistant agent. Some episodes succeeded and some failed.
Propose a dictionary of recurring capabilities that decide success on these tasks: actions or
behaviours that are necessary for a subset of the tasks. Return a JSON list of objects with keys
"id" (snake_case), "name", "description", "failure_pattern" and "correct_behavior".

FAILED EPISODES:
{failures}

SUCCESSFUL EPISODES:
{successes}
"""

_JSON_LIST = re.compile(r"\[.*\]", re.DOTALL)


@dataclass
class LLMDiscoverer:
    """Asks a served model for the dictionary; the prompt wording is non-normative."""

    gateway: Any
    examples_per_side: int = 6
    seed: int = 0

    def propose(self, D: Sequence[Trajectory]) -> list[CapabilityCard]:
        from .gateway import ChatRequest

        plus, minus = split_dataset(D)
        rng = random.Random(self.seed)
        pick = lambda xs: rng.sample(list(xs), min(self.examples_per_side, len(xs)))  # noqa: E731
        prompt = DISCOVERY_PROMPT.format(
            failures="\n---\n".join(render_trajectory(t) for t in pick(minus)) or "(none)",
            successes="\n---\n".join(render_trajectory(t) for t in pick(plus)) or "(none)")
        text = self.gateway.complete(ChatRequest([{"role": "user", "content": prompt}],
                                                 temperature=0.0, max_tokens=4096, seed=self.seed))
        m = _JSON_LIST.search(text)
        if m is None:
            raise ValueError("discoverer reply contains no JSON list")
        items = json.loads(m.group(0))
        cards = []
        for it in items:
            if not isinstance(it, dict) or "id" not in it:
                continue
            cards.append(CapabilityCard(
                id=str(it["id"]), name=str(it.get("name", it["id"])),
                description=str(it.get("description", "")),
                failure_pattern=str(it.get("failure_pattern", "")),
                correct_behavior=str(it.get("correct_behavior", ""))))
        return cards


# ---------------------------------------------------------------------------
# labeling

class Labeler(Protocol):
    def label(self, card: CapabilityCard, traj: Trajectory, run: int) -> str: ...


@dataclass
class RuleTableLabeler:
    """Deterministic labels from one rule function per capability id."""

    rules: Mapping[str, Callable[[Trajectory], str]]

    def label(self, card: CapabilityCard, traj: Trajectory, run: int) -> str:
        rule = self.rules.get(card.id)
        return NA if rule is None else rule(traj)


@dataclass
class PlantedLabeler:
    """Reads labels stored as ``cap:<id>`` in trajectory metadata (planted fixtures)."""

    def label(self, card: CapabilityCard, traj: Trajectory, run: int) -> str:
        return traj.metadata.get(f"cap:{card.id}", NA)


LABEL_PROMPT = """Capability: {name}
Description: {description}

Transcript:
{transcript}

Was this capability necessary for the task, and if so was it exercised correctly?
Answer with exactly one word: NA (not necessary), PRESENT (necessary and exercised) or
LACKING (necessary but missing or wrong)."""


@dataclass
class LLMLabeler:
    """Served-model labeler; an answer outside the label set is retried once, then NA."""

    gateway: Any
    temperature: float = 1.0
    seed: int = 0

    def _ask(self, card: CapabilityCard, traj: Trajectory, run: int, attempt: int) -> str:
        from .gateway import ChatRequest
        from .kernels import fnv1a64

        prompt = LABEL_PROMPT.format(name=card.name, description=card.description,
                                     transcript=render_trajectory(traj))
        seed = fnv1a64(f"{self.seed}:{run}:{attempt}:{card.id}:{trajectory_id(traj)}".encode()) % 2**31
        reply = self.gateway.complete(ChatRequest([{"role": "user", "content": prompt}],
                                                  temperature=self.temperature, max_tokens=8, seed=seed))
        return reply.strip().upper().rstrip(".")

    def label(self, card: CapabilityCard, traj: Trajectory, run: int) -> str:
        for attempt in range(2):
            ans = self._ask(card, traj, run, attempt)
            if ans in LABELS:
                return ans
            log.warning("labeler answered %r for %s/%s", ans, card.id, trajectory_id(traj))
        return NA


def label(cards: Sequence[CapabilityCard], D: Sequence[Trajectory], labeler: Labeler,
          run: int = 0) -> list[CapabilityCard]:
    """Labeled copies of ``cards``; every label is checked against the label set."""
    index = _index(D)
    out = []
    for card in cards:
        if card.labels:
            raise ValueError(f"card {card.id!r} is already labeled")
        labels = {}
        for tid, traj in index.items():
            lab = labeler.label(card, traj, run)
            if lab not in LABELS:
                raise ValueError(f"label {lab!r} for {card.id}/{tid} is not one of {LABELS}")
            labels[tid] = lab
        out.append(replace(card, labels=labels))
    return out


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class CapabilityStats:
    capability_id: str
    er_success: float
    er_fail: float
    gap: float
    coverage: float
    n_applicable_success: int
    n_applicable_fail: int
    n_lacking_success: int
    n_lacking_fail: int
    n_success: int
    n_fail: int
    vacuous_success: bool
    vacuous_fail: bool

    def _exact(self, num: int, den: int) -> Fraction:
        return Fraction(num, den) if den else Fraction(0)

    @property
    def exact_er_success(self) -> Fraction:
        return self._exact(self.n_lacking_success, self.n_applicable_success)

    @property
    def exact_er_fail(self) -> Fraction:
        return self._exact(self.n_lacking_fail, self.n_applicable_fail)

    @property
    def exact_gap(self) -> Fraction:
        return self.exact_er_fail - self.exact_er_success

    @property
    def exact_coverage(self) -> Fraction:
        return self._exact(self.n_lacking_fail, self.n_fail)

    @property
    def vacuous(self) -> bool:
        return self.vacuous_success and self.vacuous_fail

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def compute_stats(card: CapabilityCard, D: Sequence[Trajectory]) -> CapabilityStats:
    """Error rates on successes and failures, their gap, and failure coverage.

    A zero denominator gives a rate of 0 and sets the matching vacuous flag.
    """
    index = _index(D)
    missing = set(card.labels) - set(index)
    if missing:
        raise ValueError(f"card {card.id!r} labels unknown trajectories: {sorted(missing)[:3]}")
    counts = {True: [0, 0, 0], False: [0, 0, 0]}  # y -> [total, applicable, lacking]
    for tid, traj in index.items():
        if tid not in card.labels:
            raise ValueError(f"card {card.id!r} has no label for {tid!r}")
        lab = card.labels[tid]
        c = counts[traj.success]
        c[0] += 1
        if lab != NA:
            c[1] += 1
        if lab == LACKING:
            c[2] += 1
    n_s, app_s, lack_s = counts[True]
    n_f, app_f, lack_f = counts[False]
    er_s = Fraction(lack_s, app_s) if app_s else Fraction(0)
    er_f = Fraction(lack_f, app_f) if app_f else Fraction(0)
    cov = Fraction(lack_f, n_f) if n_f else Fraction(0)
    return CapabilityStats(card.id, float(er_s), float(er_f), float(er_f - er_s), float(cov),
                           app_s, app_f, lack_s, lack_f, n_s, n_f, app_s == 0, app_f == 0)


def retain(stats_by_card: Mapping[str, CapabilityStats], delta: float = DEFAULT_DELTA,
           rho: float = DEFAULT_RHO) -> list[str]:
    """Ids with gap >= delta and coverage >= rho, compared exactly."""
    # decimal thresholds compare at their decimal value, not their binary approximation
    d, r = Fraction(str(delta)), Fraction(str(rho))
    return sorted(cid for cid, s in stats_by_card.items()
                  if s.exact_gap >= d and s.exact_coverage >= r)


def consistency_filter(run_results: Sequence[Iterable[str]],
                       min_fraction: float = DEFAULT_MIN_FRACTION) -> list[str]:
    """Ids retained in at least ``min_fraction`` of the runs."""
    runs = [set(r) for r in run_results]
    if not runs:
        raise ValueError("consistency filter needs at least one run")
    need = Fraction(str(min_fraction))
    counts: dict[str, int] = {}
    for r in runs:
        for cid in r:
            counts[cid] = counts.get(cid, 0) + 1
    return sorted(cid for cid, n in counts.items() if Fraction(n, len(runs)) >= need)


# ---------------------------------------------------------------------------
# full analysis

@dataclass
class AnalysisResult:
    cards: list[CapabilityCard]
    run_stats: list[dict[str, CapabilityStats]]
    run_retained: list[list[str]]
    final: list[str]
    delta: float
    rho: float
    min_fraction: float
    n_success: int
    n_fail: int

    def selection_counts(self) -> dict[str, int]:
        return {c.id: sum(c.id in r for r in self.run_retained) for c in self.cards}

    def retained_cards(self) -> list[CapabilityCard]:
        keep = set(self.final)
        return [c for c in self.cards if c.id in keep]

    def to_dict(self) -> dict[str, Any]:
        counts = self.selection_counts()
        return {
            "delta": self.delta,
            "rho": self.rho,
            "min_fraction": self.min_fraction,
            "runs": len(self.run_retained),
            "n_success": self.n_success,
            "n_fail": self.n_fail,
            "retained": self.final,
            "capabilities": [
                {**c.to_dict(), "selected_runs": counts[c.id], "retained": c.id in self.final,
                 "stats": [rs[c.id].to_dict() for rs in self.run_stats]}
                for c in self.cards
            ],
        }

    def write_json(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path: Path | str) -> None:
        """One row per (capability, run) with the statistics and the retention outcome."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        counts = self.selection_counts()
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["capability", "run", "er_success", "er_fail", "gap", "coverage",
                        "retained_in_run", "selected_runs", "final"])
            for c in self.cards:
                for run, (rs, kept) in enumerate(zip(self.run_stats, self.run_retained)):
                    s = rs[c.id]
                    w.writerow([c.id, run, f"{s.er_success:.6f}", f"{s.er_fail:.6f}", f"{s.gap:.6f}",
                                f"{s.coverage:.6f}", int(c.id in kept), counts[c.id],
                                int(c.id in self.final)])


def load_capabilities(path: Path | str) -> tuple[list[CapabilityCard], list[str]]:
    """(all cards, retained ids) from an analysis JSON file."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    cards = []
    for c in data["capabilities"]:
        cards.append(CapabilityCard.from_dict({k: c[k] for k in CapabilityCard.__dataclass_fields__
                                               if k in c and k != "labels"}))
    return cards, list(data.get("retained", []))


def analyze(D: Sequence[Trajectory], discoverer: Discoverer, labeler: Labeler, runs: int = 10,
            delta: float = DEFAULT_DELTA, rho: float = DEFAULT_RHO,
            min_fraction: float = DEFAULT_MIN_FRACTION) -> AnalysisResult:
    """Discover once, then label and select ``runs`` times and keep consistent picks."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cards = discover(D, discoverer)
    plus, minus = split_dataset(D)
    run_stats, run_retained = [], []
    for run in range(runs):
        labeled = label(cards, D, labeler, run)
        stats = {c.id: compute_stats(c, D) for c in labeled}
        run_stats.append(stats)
        run_retained.append(retain(stats, delta, rho))
    final = consistency_filter(run_retained, min_fraction) if cards else []
    return AnalysisResult(cards, run_stats, run_retained, final, delta, rho, min_fraction,
                          len(plus), len(minus))


# ---------------------------------------------------------------------------
# planted fixtures

@dataclass(frozen=True)
class PlantedCapability:
    """Exact LACKING rates among applicable failures and successes."""

    id: str
    p_fail: float
    p_success: float
    applicable_fail: float = 1.0
    applicable_success: float = 1.0


def planted_dataset(n: int, n_success: int, caps: Sequence[PlantedCapability],
                    seed: int = 0) -> list[Trajectory]:
    """Synthetic trajectories whose ``cap:<id>`` labels hit the planted rates exactly.

    Counts are rounded to the nearest integer; positions are shuffled with
    ``seed`` so rates never line up with trajectory order.
    """
    if not 0 <= n_success <= n:
        raise ValueError("n_success must lie in [0, n]")
    rng = random.Random(seed)
    sides = {True: n_success, False: n - n_success}
    labels: dict[bool, dict[str, list[str]]] = {True: {}, False: {}}
    for cap in caps:
        for y, size in sides.items():
            app_frac = cap.applicable_success if y else cap.applicable_fail
            p = cap.p_success if y else cap.p_fail
            n_app = round(size * app_frac)
            n_lack = round(n_app * p)
            col = [LACKING] * n_lack + [PRESENT] * (n_app - n_lack) + [NA] * (size - n_app)
            rng.shuffle(col)
            labels[y][cap.id] = col
    out = []
    order = [True] * n_success + [False] * (n - n_success)
    rng.shuffle(order)
    pos = {True: 0, False: 0}
    for i, y in enumerate(order):
        k = pos[y]
        pos[y] += 1
        meta = {f"cap:{c.id}": labels[y][c.id][k] for c in caps}
        steps = [Step(OBSERVATION, f"planted task {i}"), Step(ACTION, "respond: ok")]
        out.append(Trajectory(f"planted/{i}", i, steps, 1.0 if y else 0.0, y, "planted", meta))
    return out
