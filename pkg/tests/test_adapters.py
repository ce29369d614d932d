from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracekit.adapters import (BASE, BASE_LABEL, BuiltinRouter, GatewayRouter, LoraAdapter,
                               RoutingCandidate, argmax_label, assemble_routing_prompt, init_adapter,
                               load_adapters, merge, parse_routing_messages, route, run_with_routing)
from tracekit.gateway import MockGateway
from tracekit.presets import device_policy
from tracekit.rollout import run_episode


def _cand(cid, desc="does things", exemplar="Customer: hi"):
    return RoutingCandidate(cid, cid.replace("_", " "), desc, exemplar)


# -- merge -----------------------------------------------------------------------

def test_merge_identity_and_new_array():
    W = np.arange(12.0).reshape(3, 4)
    ad = LoraAdapter("z", np.zeros((3, 2)), np.ones((2, 4)))
    out = merge(W, ad)
    np.testing.assert_array_equal(out, W)
    assert out is not W


@settings(max_examples=100, deadline=None)
@given(d_out=st.integers(1, 16), d_in=st.integers(1, 16), r=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_merge_matches_sum_of_outer_products(d_out, d_in, r, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(d_out, d_in))
    B, A = rng.normal(size=(d_out, r)), rng.normal(size=(r, d_in))
    oracle = W.copy()
    for k in range(r):
        oracle += np.outer(B[:, k], A[k])
    np.testing.assert_allclose(merge(W, LoraAdapter("c", B, A)), oracle, rtol=1e-12, atol=1e-12)
    # merging the negated adapter undoes it
    back = merge(merge(W, LoraAdapter("c", B, A)), LoraAdapter("c", -B, A))
    np.testing.assert_allclose(back, W, atol=1e-10)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge(np.zeros((3, 4)), LoraAdapter("c", np.zeros((3, 1)), np.zeros((1, 5))))
    with pytest.raises(ValueError):
        LoraAdapter("c", np.zeros((3, 2)), np.zeros((1, 4)))


def test_adapter_save_load_roundtrip(tmp_path):
    ad = init_adapter("cap_x", 5, 7, 3, np.random.default_rng(0))
    ad.B[:] = np.random.default_rng(1).normal(size=ad.B.shape)
    ad.provenance["name"] = "cap x"
    ad.save(tmp_path / "cap_x.json")
    back = LoraAdapter.load(tmp_path / "cap_x.json")
    np.testing.assert_array_equal(back.A, ad.A)
    np.testing.assert_array_equal(back.B, ad.B)
    assert back.provenance["name"] == "cap x"
    assert set(load_adapters(tmp_path)) == {"cap_x"}


def test_init_adapter_starts_at_base():
    ad = init_adapter("c", 4, 6, 2, np.random.default_rng(0))
    assert not ad.B.any() and ad.A.any()
    assert ad.rank == 2


# -- routing prompt --------------------------------------------------------------

def test_prompt_labels_and_base_last():
    p = assemble_routing_prompt("turn on wifi", [_cand("a"), _cand("b"), _cand("c")])
    assert p.labels == ["A", "B", "C", BASE_LABEL]
    assert p.label_map[BASE_LABEL] == BASE
    system = p.messages[0]["content"]
    assert system.index("A: ") < system.index("B: ") < system.index("C: ") < system.index(f"{BASE_LABEL}: ")
    assert p.messages[1]["content"] == "turn on wifi"


def test_prompt_without_capabilities_offers_only_base():
    p = assemble_routing_prompt("x", [])
    assert p.labels == [BASE_LABEL]
    assert route(BuiltinRouter(), p).chosen == BASE


def test_prompt_validation():
    with pytest.raises(ValueError):
        assemble_routing_prompt("x", [_cand("a"), _cand("a")])
    with pytest.raises(ValueError):
        assemble_routing_prompt("x", [_cand("a", exemplar="")])
    with pytest.raises(ValueError):
        assemble_routing_prompt("x", [_cand(f"c{i}") for i in range(26)])
    assemble_routing_prompt("x", [_cand(f"c{i}") for i in range(25)])


def test_prompt_digest_stable():
    a = assemble_routing_prompt("x", [_cand("a")])
    b = assemble_routing_prompt("x", [_cand("a")])
    assert a.digest() == b.digest()
    assert a.digest() != assemble_routing_prompt("y", [_cand("a")]).digest()


def test_parse_routing_messages_roundtrip():
    p = assemble_routing_prompt("turn wifi on", [_cand("wifi", "toggle wireless"), _cand("b")])
    q = parse_routing_messages(p.messages)
    assert q.labels == ["A", "B", BASE_LABEL]
    assert q.label_map[BASE_LABEL] == BASE
    assert q.task == "turn wifi on"
    assert q.sections["A"] == p.sections["A"]
    with pytest.raises(ValueError):
        parse_routing_messages([{"role": "user", "content": "x"}])


# -- decisions -------------------------------------------------------------------

def test_argmax_examples_and_ties():
    assert argmax_label({"A": 2.0, "B": 0.5, BASE_LABEL: 0.1}) == "A"
    assert argmax_label({"A": 0.0, "B": 0.0, BASE_LABEL: 1.0}) == BASE_LABEL
    assert argmax_label({"B": 1.0, "A": 1.0, BASE_LABEL: 1.0}) == "A"
    assert argmax_label({"A": 1.0, BASE_LABEL: 1.0}) == "A"
    with pytest.raises(ValueError):
        argmax_label({})


# scores on a 0.25 grid so strictly monotone maps stay strict in floating point
@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from(list("ABCDZ")), st.integers(-200, 200).map(lambda i: i / 4),
                       min_size=1),
       st.floats(-100, 100), st.floats(0.01, 100))
def test_argmax_invariant_under_monotone_transforms(scores, c, lam):
    label = argmax_label(scores)
    assert argmax_label({k: lam * v + c for k, v in scores.items()}) == label
    assert argmax_label({k: float(np.tanh(v / 50)) for k, v in scores.items()}) == label
    assert argmax_label({k: v ** 3 for k, v in scores.items()}) == label


def test_builtin_router_prefers_word_overlap():
    cands = [_cand("wifi", "turns the wifi radio on"), _cand("time", "reports the unix time")]
    p = assemble_routing_prompt("Please turn on my wifi.", cands)
    d = route(BuiltinRouter(), p)
    assert (d.label, d.chosen) == ("A", "wifi")
    assert d.label_logits[BASE_LABEL] == pytest.approx(2.5)
    p2 = assemble_routing_prompt("Sing a shanty", cands)
    assert route(BuiltinRouter(), p2).chosen == BASE


class _LabelOnly:
    """A served model that returns a label without scores."""

    def __init__(self, label):
        self.label = label

    def choose(self, request):
        return self.label, None


def test_gateway_router_uses_scores_and_falls_back():
    p = assemble_routing_prompt("x", [_cand("a"), _cand("b")])
    gw = MockGateway(scorer=lambda r: {"A": -3.0, "B": -0.5, BASE_LABEL: -1.0})
    d = route(GatewayRouter(gw), p)
    assert (d.label, d.chosen) == ("B", "b")
    d = route(GatewayRouter(_LabelOnly("Q")), p)
    assert d.chosen == BASE and d.label_logits == {}
    assert route(GatewayRouter(_LabelOnly("A")), p).chosen == "a"


def test_builtin_router_as_mock_scorer_matches_direct():
    cands = [_cand("wifi", "turns the wifi radio on"), _cand("time", "reports the unix time")]
    p = assemble_routing_prompt("Tell me the current unix time.", cands)
    router = BuiltinRouter()
    via_gw = route(GatewayRouter(MockGateway(scorer=router.score_request)), p)
    direct = route(router, p)
    assert via_gw == direct


# -- isolation -------------------------------------------------------------------

def _two_adapters():
    base = device_policy()
    d_out, d_in = base.base_weights.shape
    rng = np.random.default_rng(7)
    out = {}
    for cid in ("wifi_cap", "time_cap"):
        ad = init_adapter(cid, d_out, d_in, 4, rng)
        ad.B[:] = rng.normal(scale=3.0, size=ad.B.shape)
        out[cid] = ad
    return base, out


CANDS = [_cand("time_cap", "reports the current unix time"), _cand("wifi_cap", "turns the wifi on")]


def test_base_route_leaves_weights_bitwise_unchanged():
    base, adapters = _two_adapters()
    before = base.base_weights.tobytes()
    traj, d = run_with_routing("device_suite", 0, BuiltinRouter(base_score=0.99), base, adapters, CANDS)
    assert d.chosen == BASE
    assert traj.metadata["routed_to"] == BASE
    meta = {k: v for k, v in traj.metadata.items() if k != "routed_to"}
    assert dataclasses.replace(traj, metadata=meta) == run_episode(base, "device_suite", 0)
    assert base.base_weights.tobytes() == before
    assert base.adapter is None


def test_no_cross_contamination_in_either_order():
    base, adapters = _two_adapters()
    router = BuiltinRouter()
    seeds = [0, 3]  # a wifi request and a unix-time request
    forward = [run_with_routing("device_suite", s, router, base, adapters, CANDS) for s in seeds]
    backward = [run_with_routing("device_suite", s, router, base, adapters, CANDS) for s in reversed(seeds)]
    assert [d.chosen for _, d in forward] == ["wifi_cap", "time_cap"]
    assert forward[0][0] == backward[1][0] and forward[1][0] == backward[0][0]
    # each routed episode equals running with that adapter alone
    for s, (traj, d) in zip(seeds, forward):
        alone = run_episode(base.with_adapter(adapters[d.chosen]), "device_suite", s)
        meta = {k: v for k, v in traj.metadata.items() if k != "routed_to"}
        traj = dataclasses.replace(traj, metadata=meta)
        assert traj == alone
    assert base.adapter is None


def test_missing_adapter_is_an_error():
    base, adapters = _two_adapters()
    with pytest.raises(KeyError):
        run_with_routing("device_suite", 0, BuiltinRouter(), base, {"time_cap": adapters["time_cap"]}, CANDS)
