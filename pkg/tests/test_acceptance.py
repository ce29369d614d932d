"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line with its timing to the terminal summary.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import random
import statistics
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np

from tracekit.adapters import (BASE, BuiltinRouter, LoraAdapter, argmax_label, init_adapter,
                               merge, run_with_routing)
from tracekit.analysis import (CapabilityCard, PlantedCapability, PlantedLabeler,
                               ScriptedDiscoverer, analyze, planted_dataset)
from tracekit.cli import main
from tracekit.config import defaults
from tracekit.core import OBSERVATION, Step, make_env
from tracekit.envs.rewards import normalize_text
from tracekit.envs.sdr import evaluate_sdr_reward, generate_sdr_scenario, replay_gold_action
from tracekit.envs.tec import evaluate_tec_reward, generate_tec_scenario
from tracekit.grpo import (Batch, TrainerConfig, batch_loss, group_advantages, normalize_advantages,
                           surrogate_loss, train_capability)
from tracekit.metrics import pass_rate, similarity_metrics
from tracekit.pipeline import Pipeline
from tracekit.policy import ActionVocab, AdapterPolicy, HashingFeatureMap, OraclePolicy, RandomPolicy
from tracekit.presets import bandit_policy
from tracekit.rollout import collect_groups, run_episode, run_many, verify_environment

from conftest import ACCEPTANCE_LINES


@contextmanager
def criterion(number: int, title: str, limit: float | None):
    info = {"detail": ""}
    start = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        info["elapsed"] = elapsed
        within = limit is None or elapsed < limit
        status = "PASS" if ok and within else "FAIL"
        budget = f", limit {limit:g}s" if limit is not None else ""
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title} | {info['detail']} "
                                f"({elapsed:.2f}s{budget})")
    if limit is not None:
        assert elapsed < limit, f"criterion {number} took {elapsed:.2f}s (limit {limit}s)"


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_metric_fidelity():
    with criterion(1, "metric fidelity", 1.0) as c:
        pr = pass_rate((22, 55), (50, 114))
        assert pr.overall == Fraction(77, 164)
        assert abs(float(pr.overall) - 0.46951) < 1e-5
        assert pr.percent() == "47.0%"
        _, perfect = similarity_metrics([1.0] * 26 + [0.25] * 103)
        assert perfect == Fraction(26, 129)
        assert abs(float(perfect) - 0.20155) < 1e-5
        c["detail"] = f"pass rate {pr.overall} = {pr.percent()}, perfect {perfect} = {float(perfect):.5f}"


# 2 ---------------------------------------------------------------------------------

def _hand_advantages(r):
    n = len(r)
    mean = math.fsum(r) / n
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in r) / n)
    return [(x - mean) / std for x in r]


def _fd_error(seed, temp=1.0, h=1e-5):
    rng = np.random.default_rng(seed)
    vocab = ActionVocab.from_pairs([(f"a{i}", f"choose: a{i}") for i in range(3)])
    W = rng.normal(size=(3, 8))
    policy = AdapterPolicy(W, vocab, HashingFeatureMap(8))
    ad = LoraAdapter("toy", rng.normal(scale=0.5, size=(3, 2)), rng.normal(size=(2, 8)))
    feats = rng.normal(size=(16, 8))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    batch = Batch(feats, rng.integers(0, 3, size=16), rng.normal(-1.1, 0.3, size=16),
                  rng.normal(size=16), np.full(16, 1 / 16))
    _, dA, dB = batch_loss(policy.base_weights, ad, batch, 0.2, temp)
    worst = 0.0
    for P, grad in ((ad.A, dA), (ad.B, dB)):
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = batch_loss(policy.base_weights, ad, batch, 0.2, temp)[0]
            P[idx] = old - h
            down = batch_loss(policy.base_weights, ad, batch, 0.2, temp)[0]
            P[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - num) / max(np.linalg.norm(num), 1e-12))
    return worst


def test_criterion_2_grpo_math():
    with criterion(2, "GRPO math", 10.0) as c:
        rng = random.Random(0)
        max_err = 0.0
        for _ in range(1000):
            n = rng.randint(2, 16)
            r = [rng.random() for _ in range(n)]
            got = group_advantages(r, 0.0)
            max_err = max(max_err, max(abs(a - b) for a, b in zip(got, _hand_advantages(r))))
        assert max_err < 1e-9
        fd = max(_fd_error(s, t) for s in range(5) for t in (1.0, 0.7))
        assert fd < 1e-4
        # zero-variance groups: exact zero gradient
        base = bandit_policy()
        ad = init_adapter("z", 4, 64, 4, np.random.default_rng(0))
        ad.B[:] = np.random.default_rng(1).normal(size=ad.B.shape)
        pol = base.with_adapter(ad)
        groups = collect_groups(pol, "contextual_bandit", list(range(40)), 4)
        flat = [normalize_advantages(g) for g in groups if len(set(g.rewards)) == 1]
        assert flat
        _, dA, dB = surrogate_loss(pol, None, flat)
        assert not dA.any() and not dB.any()
        c["detail"] = f"advantage max err {max_err:.1e}, FD rel err {fd:.1e}, zero-variance grad exactly 0"


# 3 ---------------------------------------------------------------------------------

HELD_OUT = range(500_000, 501_000)


def _expected_reward(policy, seeds):
    """Exact mean success probability of sampling at temperature 1 on the given seeds."""
    env = make_env("contextual_bandit")
    total = 0.0
    for s in seeds:
        env.reset(s)
        lp = policy.action_logprobs([Step(OBSERVATION, env.observe(0))], 1.0)
        total += math.exp(lp[policy.vocab.index(env.target)])
    return total / len(seeds)


def test_criterion_3_trainer_efficacy():
    with criterion(3, "trainer efficacy (contextual bandit)", 120.0) as c:
        base = bandit_policy()
        w_before = base.base_weights.tobytes()
        before = _expected_reward(base, HELD_OUT)
        assert abs(before - 0.25) <= 0.05
        res = train_capability("contextual_bandit", TrainerConfig(), 0, base)
        assert res.error is None and len(res.history) <= 40
        after = _expected_reward(base.with_adapter(res.adapter), HELD_OUT)
        assert after > 0.9
        assert base.base_weights.tobytes() == w_before
        c["detail"] = (f"held-out expected reward {before:.3f} -> {after:.3f}; sampled "
                       f"{res.history[0]:.3f} -> {res.history[-1]:.3f} in {len(res.history)} iterations; "
                       f"W bit-identical")


# 4 ---------------------------------------------------------------------------------

PLANTED = [PlantedCapability("planted_deficit", 0.5, 0.1),
           PlantedCapability("mild_a", 0.30, 0.25),
           PlantedCapability("mild_b", 0.20, 0.15),
           PlantedCapability("flat", 0.40, 0.40),
           PlantedCapability("inverse", 0.10, 0.15)]


def test_criterion_4_contrastive_recovery():
    with criterion(4, "contrastive recovery", 5.0) as c:
        kept = []
        for seed in range(5):
            D = planted_dataset(200, 100, PLANTED, seed=seed)
            cards = [CapabilityCard(p.id, p.id, p.id) for p in PLANTED]
            res = analyze(D, ScriptedDiscoverer(cards), PlantedLabeler(), runs=10, delta=0.20, rho=0.10)
            assert res.final == ["planted_deficit"]
            assert res.selection_counts()["planted_deficit"] == 10
            assert all(n == 0 for k, n in res.selection_counts().items() if k != "planted_deficit")
            kept.append(res.final)
        c["detail"] = f"retained {kept[0]} with consistency 10/10 on 5 planted datasets"


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_verification_harness():
    with criterion(5, "environment verification harness", 10.0) as c:
        pol = RandomPolicy(["choose: alpha", "choose: beta", "choose: gamma", "choose: delta", "???"])
        rep = verify_environment(pol, "contextual_bandit", n_rollouts=100, n_groups=20, K=8)
        rewards = [t.reward for t in run_many(pol, "contextual_bandit", range(100))]
        mean = math.fsum(rewards) / len(rewards)
        assert abs(rep.mean_reward - mean) <= 1e-12
        assert abs(rep.std_reward - statistics.pstdev(rewards)) <= 1e-12
        groups = collect_groups(pol, "contextual_bandit", list(range(20)), 8)
        recount = sum(1 for g in groups if len({round(r, 2) for r in g.rewards}) > 1)
        assert rep.informative_groups == recount
        assert rep.informative_group_fraction == recount / 20
        det = verify_environment(OraclePolicy(), "contextual_bandit", n_rollouts=20, n_groups=20, K=8)
        assert det.informative_group_fraction == 0
        c["detail"] = (f"mean {rep.mean_reward:.3f} std {rep.std_reward:.3f} match recount; "
                       f"informative {recount}/20; deterministic fraction 0")


# 6 ---------------------------------------------------------------------------------

def _mutate(db, rng):
    """A copy of ``db`` with one leaf value changed."""
    db = copy.deepcopy(db)
    node = db
    while True:
        keys = [k for k in sorted(node) if isinstance(node[k], (dict, str, int, float, bool))]
        k = rng.choice(keys)
        if isinstance(node[k], dict) and node[k]:
            node = node[k]
            continue
        v = node[k]
        node[k] = (not v) if isinstance(v, bool) else (v + 1 if isinstance(v, (int, float))
                                                        else f"{v}_x" if isinstance(v, str) else {"x": 1})
        return db


def _sdr_oracle(messages, scenario, final_db, gold):
    said = normalize_text(" ".join(messages))
    info = all(normalize_text(v) in said for v in scenario.communicate_info)
    if not scenario.expects_mutation:
        return 1.0 if info else 0.0
    if final_db == gold:
        return 1.0 if info else 0.3
    return 0.0


def _tec_oracle(response, final_db, sc):
    if sc.skill == "communicate":
        action = 1.0 if sc.target_tool in final_db["call_log"] else 0.0
    else:
        action = 1.0 if final_db["settings"][sc.target_service] else 0.0
    said = normalize_text(response)
    hits = sum(1 for k in sc.keywords if normalize_text(k) in said)
    return 0.6 * action + 0.4 * (hits / len(sc.keywords))


def test_criterion_6_reward_logic():
    with criterion(6, "reward logic", 30.0) as c:
        rng = random.Random(6)
        tiers = {}
        for i in range(100):
            sc = generate_sdr_scenario(rng.randrange(10**6))
            gold = replay_gold_action(sc) if sc.expects_mutation else sc.database
            final = rng.choice([gold, sc.database, _mutate(gold, rng)])
            info = list(sc.communicate_info)
            msgs = rng.choice([info, [" ".join(info).upper()], info[:-1], ["no idea"], []])
            got = evaluate_sdr_reward(msgs, sc, final).total
            want = _sdr_oracle(msgs, sc, final, gold)
            assert got == want, (sc.seed, got, want)
            tiers[want] = tiers.get(want, 0) + 1
        assert set(tiers) >= {0.0, 0.3, 1.0}
        for i in range(100):
            sc = generate_tec_scenario(rng.randrange(10**6))
            db = copy.deepcopy(sc.database)
            if rng.random() < 0.5:
                if sc.skill == "communicate":
                    db["call_log"].append(sc.target_tool)
                else:
                    db["settings"][sc.target_service] = True
            said = rng.sample(sc.keywords, rng.randint(0, len(sc.keywords)))
            resp = "Done: " + " and ".join(said) if said else "Done."
            got = evaluate_tec_reward(resp, db, sc).total
            assert got == _tec_oracle(resp, db, sc)
        solved = 0
        for s in range(200):
            if generate_sdr_scenario(s).expects_mutation:
                assert run_episode(OraclePolicy(), "structured_data_game", s).reward == 1.0, s
                solved += 1
        assert solved > 0
        c["detail"] = (f"SDR tiers {dict(sorted(tiers.items()))} and 100 TEC pairs exact; "
                       f"oracle 1.0 on {solved}/{solved} mutation scenarios")


# 7 ---------------------------------------------------------------------------------

MONOTONE = [lambda z: 3.0 * z - 7.0, lambda z: np.exp(z), lambda z: z ** 3, np.arctan,
            lambda z: 0.01 * z + 100.0]


def test_criterion_7_routing_and_merge():
    with criterion(7, "routing and merge", 10.0) as c:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(200):
            d_out, d_in, r = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 9)
            W = rng.normal(size=(d_out, d_in))
            B, A = rng.normal(size=(d_out, r)), rng.normal(size=(r, d_in))
            dense = W.copy()
            for k in range(r):
                dense += np.outer(B[:, k], A[k])
            worst = max(worst, float(np.max(np.abs(merge(W, LoraAdapter("c", B, A)) - dense))))
        assert worst < 1e-12
        labels = list("ABCDEFGH") + ["Z"]
        for _ in range(1000):
            n = int(rng.integers(1, len(labels) + 1))
            z = rng.normal(size=n)
            chosen = argmax_label(dict(zip(labels[:n], z)))
            for f in MONOTONE:
                assert argmax_label(dict(zip(labels[:n], f(z)))) == chosen
        base = bandit_policy()
        before = base.base_weights.tobytes()
        ad = init_adapter("cap", 4, 64, 2, rng)
        ad.B[:] = rng.normal(size=ad.B.shape)
        for s in range(20):
            traj, d = run_with_routing("contextual_bandit", s, BuiltinRouter(), base, {"cap": ad}, [])
            assert d.chosen == BASE
            assert traj.steps == run_episode(base, "contextual_bandit", s).steps
        assert base.base_weights.tobytes() == before and base.adapter is None
        c["detail"] = f"merge max err {worst:.1e}; argmax invariant on 1000 sets x {len(MONOTONE)} maps; BASE bitwise"


# 8 ---------------------------------------------------------------------------------

def _tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_end_to_end(tmp_path):
    with criterion(8, "end-to-end pipeline", 600.0) as c:
        res = Pipeline(defaults(), tmp_path / "a", echo=lambda s: None).run()
        caps = json.loads((tmp_path / "a/analysis/capabilities.json").read_text())
        assert caps["retained"] == ["permission_error_recovery", "result_communication"]
        assert sorted(p.name for p in (tmp_path / "a/adapters").glob("*.json")) == \
            ["permission_error_recovery.json", "result_communication.json"]
        s = res.summary
        assert s["tasks"] == 100
        assert s["routed"]["pass_rate"] - s["base"]["pass_rate"] >= 0.15
        again = Pipeline(defaults(), tmp_path / "b", echo=lambda s: None).run(resume=False)
        assert again.ran == res.ran
        assert _tree_hashes(tmp_path / "a") == _tree_hashes(tmp_path / "b")
        c["detail"] = (f"retained {caps['retained']}; pass rate base {s['base']['pass_rate']:.2f} -> "
                       f"routed {s['routed']['pass_rate']:.2f}; rerun byte-identical")


# 9 ---------------------------------------------------------------------------------

def _cli(args):
    assert main([str(a) for a in args]) == 0, args


def _commands(d: Path, workers: int):
    d.mkdir(parents=True, exist_ok=True)
    w = ["--workers", workers]
    _cli(["rollout", "--env", "device_suite", "--seeds", "0..119", "--out", d / "roll.jsonl", *w])
    _cli(["rollout", "--env", "contextual_bandit", "--seeds", "0..19", "--k", 4, "--policy", "bandit",
          "--out", d / "groups.jsonl", *w])
    _cli(["verify-env", "--env", "tec_game", "--n-rollouts", 40, "--n-groups", 5, "--k", 4,
          "--json", d / "verify.json", *w])
    _cli(["analyze", "--in", d / "roll.jsonl", "--out", d / "caps.json"])
    for cap, env in (("permission_error_recovery", "tec_recovery"), ("result_communication", "tec_communicate")):
        _cli(["train", "--env", env, "--capability", cap, "--caps", d / "caps.json", "--max-iterations", 6,
              "--out", d / "adapters" / f"{cap}.json", *w])
    (d / "task.txt").write_text("[device d1, owner Ana] Turn on wifi.")
    _cli(["route", "--task", d / "task.txt", "--caps", d / "caps.json", "--adapters", d / "adapters"])
    _cli(["eval", "--env", "device_suite", "--seeds", "100000..100029", "--route", "--caps", d / "caps.json",
          "--adapters", d / "adapters", "--out", d / "eval", *w])
    _cli(["gen-env-prompt", "--caps", d / "caps.json", "--capability", "result_communication",
          "--examples", d / "roll.jsonl", "--out", d / "prompt.md"])
    cfg = d / "run.ini"
    cfg.write_text("[rollout]\nseeds = 0..79\n[analysis]\nruns = 3\n[trainer]\nmax_iterations = 4\n"
                   "groups_per_iter = 4\n[routing]\neval_seeds = 100000..100019\n")
    _cli(["pipeline", "--config", cfg, "--out", d / "pipe", *w])
    _cli(["report", "--in", d / "pipe", "--out", d / "report"])


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "determinism across runs and thread counts", None) as c:
        _commands(tmp_path / "one", 1)
        _commands(tmp_path / "two", 1)
        _commands(tmp_path / "eight", 8)
        h1, h2, h8 = (_tree_hashes(tmp_path / x) for x in ("one", "two", "eight"))
        assert len(h1) >= 20
        assert h1 == h2
        assert h1 == h8
        c["detail"] = f"{len(h1)} artifacts identical over two runs and 1 vs 8 workers"
