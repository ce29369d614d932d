"""Benchmark metrics over trajectory logs and CSV emission for scaling reports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .core import Trajectory


@dataclass(frozen=True)
class PassRate:
    per_domain: dict[str, Fraction]
    overall: Fraction

    def percent(self, digits: int = 1) -> str:
        return f"{100 * float(self.overall):.{digits}f}%"


def _as_mapping(x: Mapping[str, int] | Sequence[int]) -> dict[str, int]:
    if isinstance(x, Mapping):
        return dict(x)
    return {str(i): v for i, v in enumerate(x)}


def pass_rate(solved_by_domain: Mapping[str, int] | Sequence[int],
              totals_by_domain: Mapping[str, int] | Sequence[int]) -> PassRate:
    """Exact per-domain and pooled pass rates: sum solved over sum total."""
    solved, totals = _as_mapping(solved_by_domain), _as_mapping(totals_by_domain)
    if set(solved) != set(totals):
        raise ValueError("solved and totals name different domains")
    per = {}
    for d, n in totals.items():
        s = solved[d]
        if n <= 0:
            raise ValueError(f"domain {d!r} has no tasks")
        if not 0 <= s <= n:
            raise ValueError(f"domain {d!r}: solved {s} outside [0, {n}]")
        per[d] = Fraction(s, n)
    if not per:
        raise ValueError("no domains")
    return PassRate(per, Fraction(sum(solved.values()), sum(totals.values())))


def similarity_metrics(scores: Sequence[float]) -> tuple[float, Fraction]:
    """(mean score, fraction of scores exactly equal to 1.0)."""
    if not scores:
        raise ValueError("no scores")
    for s in scores:
        if not 0.0 <= s <= 1.0 or math.isnan(s):
            raise ValueError(f"score {s!r} outside [0, 1]")
    return math.fsum(scores) / len(scores), Fraction(sum(1 for s in scores if s == 1.0), len(scores))


@dataclass
class EvalSummary:
    solved: dict[str, int]
    total: dict[str, int]
    pass_rate: float
    mean_similarity: float
    perfect_rate: float
    rollout_count: int = 0
    capabilities: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalSummary":
        return cls(**dict(d))


def summarize(trajs: Sequence[Trajectory], rollout_count: int = 0, capabilities: int = 0) -> EvalSummary:
    """Pass rate by domain (``metadata['domain']``, else env name) and reward statistics."""
    solved: dict[str, int] = {}
    total: dict[str, int] = {}
    for t in trajs:
        d = t.metadata.get("domain") or t.env_name
        total[d] = total.get(d, 0) + 1
        solved[d] = solved.get(d, 0) + int(t.success)
    solved, total = dict(sorted(solved.items())), dict(sorted(total.items()))
    if trajs:
        pr = float(pass_rate(solved, total).overall)
        mean, perfect = similarity_metrics([t.reward for t in trajs])
    else:
        pr, mean, perfect = 0.0, 0.0, Fraction(0)
    return EvalSummary(solved, total, pr, mean, float(perfect), rollout_count, capabilities)


ROLLOUT_HEADER = ["run", "iteration", "rollouts", "mean_reward"]
CAPABILITY_HEADER = ["run", "capabilities", "rollouts", "pass_rate", "mean_similarity", "perfect_rate"]


def _unique_labels(labels: Iterable[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for lab in labels:
        n = seen.get(lab, 0) + 1
        seen[lab] = n
        out.append(lab if n == 1 else f"{lab}-{n}")
    return out


def _points(history: Sequence[Any]) -> list[tuple[int, float]]:
    """(rollouts in iteration, score) from iteration records or (rollouts, score) pairs."""
    out = []
    for h in history:
        if hasattr(h, "rollouts") and hasattr(h, "mean_reward"):
            out.append((int(h.rollouts), float(h.mean_reward)))
        else:
            n, s = h
            out.append((int(n), float(s)))
    return out


def emit_report(histories: Sequence[tuple[str, Sequence[Any]]],
                summaries: Sequence[tuple[str, EvalSummary]],
                out_dir: Path | str) -> dict[str, Path]:
    """Write ``rollouts_vs_score.csv`` and ``capabilities_vs_score.csv``.

    Duplicate run labels get ``-2``, ``-3`` suffixes. Rollout counts are cumulative.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"rollouts": out / "rollouts_vs_score.csv", "capabilities": out / "capabilities_vs_score.csv"}
    with paths["rollouts"].open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROLLOUT_HEADER)
        for label, (_, hist) in zip(_unique_labels(h[0] for h in histories), histories):
            cum = 0
            for i, (n, score) in enumerate(_points(hist)):
                cum += n
                w.writerow([label, i, cum, f"{score:.6f}"])
    with paths["capabilities"].open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CAPABILITY_HEADER)
        for label, (_, s) in zip(_unique_labels(x[0] for x in summaries), summaries):
            w.writerow([label, s.capabilities, s.rollout_count, f"{s.pass_rate:.6f}",
                        f"{s.mean_similarity:.6f}", f"{s.perfect_rate:.6f}"])
    return paths
