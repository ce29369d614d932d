from __future__ import annotations

import csv
import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracekit.analysis import (LACKING, NA, PRESENT, CapabilityCard, LLMLabeler, PlantedCapability,
                               PlantedLabeler, RuleTableLabeler, ScriptedDiscoverer, analyze,
                               compute_stats, consistency_filter, discover, label, load_capabilities,
                               planted_dataset, retain, split_dataset, trajectory_id)
from tracekit.gateway import MockGateway

from conftest import make_traj


def _card(cid="cap", **kw):
    return CapabilityCard(cid, cid.replace("_", " "), f"{cid} description", **kw)


def _labeled(success_labels, fail_labels):
    """Dataset plus a card whose labels are given per side, in order."""
    D, labels = [], {}
    for i, lab in enumerate(success_labels):
        D.append(make_traj(i, 1.0, True))
    for j, lab in enumerate(fail_labels, start=len(success_labels)):
        D.append(make_traj(j, 0.0, False))
    for t, lab in zip(D, list(success_labels) + list(fail_labels)):
        labels[trajectory_id(t)] = lab
    return D, _card(labels=labels)


# -- discovery and labeling ------------------------------------------------------

def test_split_preserves_order():
    D = [make_traj(i, float(i % 2), bool(i % 2)) for i in range(6)]
    plus, minus = split_dataset(D)
    assert [t.episode_seed for t in plus] == [1, 3, 5]
    assert [t.episode_seed for t in minus] == [0, 2, 4]


def test_discover_dedups_and_handles_empty():
    D = [make_traj(0)]
    disc = ScriptedDiscoverer([_card("a"), _card("b"), _card("a", train_env="other")])
    cards = discover(D, disc)
    assert [c.id for c in cards] == ["a", "b"]
    assert cards[0].train_env == ""
    assert discover([], disc) == []


def test_label_rejects_bad_labels_and_relabeling():
    D = [make_traj(0), make_traj(1, 0.0, False)]
    with pytest.raises(ValueError):
        label([_card()], D, RuleTableLabeler({"cap": lambda t: "MAYBE"}))
    with pytest.raises(ValueError):
        label([_card(labels={"x": NA})], D, PlantedLabeler())
    out = label([_card()], D, RuleTableLabeler({"cap": lambda t: LACKING}))
    assert set(out[0].labels.values()) == {LACKING}


def test_duplicate_trajectory_ids_rejected():
    with pytest.raises(ValueError):
        label([_card()], [make_traj(0), make_traj(0)], PlantedLabeler())


# -- statistics ------------------------------------------------------------------

def test_stats_worked_example():
    # 10 failures: 8 applicable, 4 lacking; 10 successes: 10 applicable, 1 lacking
    fail = [LACKING] * 4 + [PRESENT] * 4 + [NA] * 2
    succ = [LACKING] + [PRESENT] * 9
    D, card = _labeled(succ, fail)
    s = compute_stats(card, D)
    assert s.exact_er_fail == Fraction(1, 2)
    assert s.exact_er_success == Fraction(1, 10)
    assert s.exact_gap == Fraction(2, 5)
    assert s.exact_coverage == Fraction(2, 5)
    assert (s.er_fail, s.er_success) == (0.5, 0.1)
    assert s.gap == pytest.approx(0.4) and s.coverage == pytest.approx(0.4)


def test_all_na_is_vacuous():
    D, card = _labeled([NA] * 3, [NA] * 4)
    s = compute_stats(card, D)
    assert s.vacuous and s.gap == 0.0 and s.coverage == 0.0
    assert retain({"cap": s}) == []


def test_extreme_gap():
    D, card = _labeled([PRESENT] * 5, [LACKING] * 5)
    s = compute_stats(card, D)
    assert s.exact_gap == 1 and s.exact_coverage == 1


def test_missing_labels_rejected():
    D, card = _labeled([PRESENT], [LACKING])
    card.labels.pop(next(iter(card.labels)))
    with pytest.raises(ValueError):
        compute_stats(card, D)


def _stats_with(gap_num, cov_num, n=100):
    """Stats with gap = gap_num/n and coverage = cov_num/n over n failures and n successes."""
    if cov_num >= gap_num:
        fail = [LACKING] * cov_num + [PRESENT] * (n - cov_num)
        lack_s = cov_num - gap_num
    else:
        # er_fail = gap with zero lacking successes; NA failures lower coverage
        n_app = cov_num * n // gap_num
        fail = [LACKING] * cov_num + [PRESENT] * (n_app - cov_num) + [NA] * (n - n_app)
        lack_s = 0
    succ = [LACKING] * lack_s + [PRESENT] * (n - lack_s)
    D, card = _labeled(succ, fail)
    s = compute_stats(card, D)
    assert (s.exact_gap, s.exact_coverage) == (Fraction(gap_num, n), Fraction(cov_num, n))
    return s


def test_retain_boundaries_are_inclusive_and_exact():
    assert retain({"c": _stats_with(20, 30)}) == ["c"]
    assert retain({"c": _stats_with(19, 30)}) == []
    assert retain({"c": _stats_with(20, 10)}) == ["c"]
    assert retain({"c": _stats_with(25, 9)}) == []
    assert retain({"c": _stats_with(19, 30)}, delta=0.19) == ["c"]


def test_consistency_filter():
    runs = [{"a", "b"}] * 7 + [{"a"}] * 1 + [set()] * 2
    assert consistency_filter(runs, 0.8) == ["a"]
    assert consistency_filter([{"x", "y"}], 0.8) == ["x", "y"]
    with pytest.raises(ValueError):
        consistency_filter([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from([NA, PRESENT, LACKING])), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_stats_permutation_invariant(rows, rnd):
    D = [make_traj(i, float(y), y) for i, (y, _) in enumerate(rows)]
    card = _card(labels={trajectory_id(t): lab for t, (_, lab) in zip(D, rows)})
    shuffled = list(D)
    rnd.shuffle(shuffled)
    assert compute_stats(card, D) == compute_stats(card, shuffled)


# -- planted recovery ------------------------------------------------------------

CAPS = [PlantedCapability("planted_hit", 0.5, 0.1),
        PlantedCapability("near_miss", 0.3, 0.25),
        PlantedCapability("noise", 0.2, 0.2),
        PlantedCapability("rare", 0.05, 0.0),
        PlantedCapability("reverse", 0.1, 0.3)]


def test_planted_dataset_hits_rates():
    D = planted_dataset(200, 100, CAPS, seed=0)
    assert sum(t.success for t in D) == 100
    cards = label([_card(c.id) for c in CAPS], D, PlantedLabeler())
    s = compute_stats(cards[0], D)
    assert (s.exact_er_fail, s.exact_er_success) == (Fraction(1, 2), Fraction(1, 10))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), n_success=st.integers(60, 140))
def test_planted_recovery(seed, n_success):
    D = planted_dataset(200, n_success, CAPS, seed=seed)
    res = analyze(D, ScriptedDiscoverer([_card(c.id) for c in CAPS]), PlantedLabeler(), runs=3)
    assert res.final == ["planted_hit"]


def test_analyze_empty_dataset():
    res = analyze([], ScriptedDiscoverer([_card()]), PlantedLabeler(), runs=2)
    assert res.cards == [] and res.final == []


# -- served-model labeler --------------------------------------------------------

def test_llm_labeler_retries_once_then_na():
    t = make_traj(0)
    assert LLMLabeler(MockGateway(script=["present."])).label(_card(), t, 0) == PRESENT
    assert LLMLabeler(MockGateway(script=["dunno", "lacking"])).label(_card(), t, 0) == LACKING
    gw = MockGateway(script=["dunno", "still no", "PRESENT"])
    assert LLMLabeler(gw).label(_card(), t, 0) == NA
    assert gw.calls == 2


# -- output files ----------------------------------------------------------------

def test_result_files_roundtrip(tmp_path):
    D = planted_dataset(60, 30, CAPS[:2], seed=1)
    res = analyze(D, ScriptedDiscoverer([_card(c.id) for c in CAPS[:2]]), PlantedLabeler(), runs=4)
    res.write_json(tmp_path / "caps.json")
    res.write_csv(tmp_path / "caps.csv")
    data = json.loads((tmp_path / "caps.json").read_text())
    assert data["retained"] == res.final == ["planted_hit"]
    assert data["runs"] == 4
    cards, kept = load_capabilities(tmp_path / "caps.json")
    assert [c.id for c in cards] == ["planted_hit", "near_miss"] and kept == ["planted_hit"]
    assert all(not c.labels for c in cards)
    rows = list(csv.DictReader((tmp_path / "caps.csv").open()))
    assert len(rows) == 2 * 4
    assert {r["final"] for r in rows if r["capability"] == "planted_hit"} == {"1"}
    assert res.selection_counts() == {"planted_hit": 4, "near_miss": 0}


def test_card_from_dict_rejects_unknown_fields():
    with pytest.raises(ValueError):
        CapabilityCard.from_dict({"id": "a", "name": "a", "description": "", "colour": "red"})
