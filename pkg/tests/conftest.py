from __future__ import annotations

import pytest

from tracekit.core import ACTION, OBSERVATION, Step, Trajectory

# acceptance lines, printed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_traj(i: int = 0, reward: float = 1.0, success: bool = True, env: str = "tec_game",
              actions: tuple[str, ...] = ("respond: done",), meta: dict | None = None) -> Trajectory:
    steps = [Step(OBSERVATION, f"task {i}")]
    for j, a in enumerate(actions):
        if j:
            steps.append(Step(OBSERVATION, f"result {j}"))
        steps.append(Step(ACTION, a))
    return Trajectory(f"{env}/{i}", i, steps, reward, success, env, dict(meta or {}))


@pytest.fixture
def traj_factory():
    return make_traj
