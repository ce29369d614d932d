from __future__ import annotations

import json
import shutil

import pytest

from tracekit.config import parse_config
from tracekit.pipeline import STAGES, Pipeline, StageError, file_hash

SMALL = """\
[rollout]
seeds = 0..79
[analysis]
runs = 3
[trainer]
max_iterations = 4
groups_per_iter = 4
[routing]
router = builtin
exemplar_seeds = 0..39
eval_seeds = 100000..100019
"""


def _run(out, text=SMALL, resume=True, stages=STAGES):
    return Pipeline(parse_config(text), out, echo=lambda s: None).run(resume, stages)


def _hashes(root):
    return {str(p.relative_to(root)): file_hash(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    first = _run(out)
    return out, first


def test_first_run_executes_every_stage(small_run):
    out, first = small_run
    assert first.ran == list(STAGES)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGES)
    for entry in manifest["stages"].values():
        for rel, h in entry["outputs"].items():
            assert file_hash(out / rel) == h
    assert {"base", "routed", "improvement"} <= set(first.summary)


def test_resume_skips_everything(small_run):
    out, _ = small_run
    before = _hashes(out)
    again = _run(out)
    assert again.ran == [] and again.skipped == list(STAGES)
    assert _hashes(out) == before


def test_changed_trainer_key_reruns_downstream_only(small_run, tmp_path):
    out, _ = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    res = _run(copy, SMALL.replace("max_iterations = 4", "max_iterations = 3"))
    assert res.skipped == ["rollout", "analyze"]
    assert res.ran == ["train", "eval", "report"]
    # an eval-only key leaves training alone
    res = _run(copy, SMALL.replace("max_iterations = 4", "max_iterations = 3")
               .replace("eval_seeds = 100000..100019", "eval_seeds = 100000..100009"))
    assert res.skipped == ["rollout", "analyze", "train"]
    assert res.ran == ["eval", "report"]


def test_tampered_output_reruns_its_stage(small_run, tmp_path):
    out, _ = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "eval" / "summary.json").write_text("{}")
    res = _run(copy)
    assert "eval" in res.ran and "train" in res.skipped
    assert _hashes(copy) == _hashes(out)


def test_worker_count_does_not_change_artifacts(small_run, tmp_path):
    out, _ = small_run
    res = _run(tmp_path / "w4", SMALL + "[run]\nworkers = 4\n", resume=False)
    assert res.ran == list(STAGES)
    assert _hashes(tmp_path / "w4") == _hashes(out)


def test_missing_input_is_a_stage_error(tmp_path):
    with pytest.raises(StageError) as info:
        _run(tmp_path / "empty", stages=("train",))
    assert "train" in str(info.value)


def test_pipeline_rejects_gateway_policy(tmp_path):
    from tracekit.config import ConfigError

    with pytest.raises(ConfigError):
        Pipeline(parse_config("[rollout]\npolicy = gateway\n"), tmp_path)
