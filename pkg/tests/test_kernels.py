from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracekit import _pykernels as py
from tracekit import kernels

compiled = pytest.importorskip("tracekit._kernels")


def test_fnv_known_vectors():
    # published FNV-1a 64-bit test vectors
    assert py.fnv1a64(b"") == 0xCBF29CE484222325
    assert py.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert py.fnv1a64(b"foobar") == 0x85944171F73967E8


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_fnv_parity(data):
    assert compiled.fnv1a64(data) == py.fnv1a64(data)


@settings(max_examples=100, deadline=None)
@given(tokens=st.lists(st.text(max_size=12), max_size=40), dim=st.sampled_from([1, 7, 64, 256]))
def test_hash_features_parity(tokens, dim):
    a = compiled.hash_features(tokens, dim)
    b = py.hash_features(tokens, dim)
    assert a.shape == b.shape == (dim,)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    if np.any(b):
        assert abs(np.linalg.norm(b) - 1.0) < 1e-12


def test_hash_features_empty_is_zero():
    assert not np.any(py.hash_features([], 16))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 30), k=st.integers(2, 6), seed=st.integers(0, 2**32 - 1),
       temp=st.sampled_from([0.5, 1.0, 2.0]), eps=st.sampled_from([0.1, 0.2]))
def test_clipped_surrogate_parity(n, k, seed, temp, eps):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, k))
    actions = rng.integers(0, k, size=n)
    old = rng.normal(-1.0, 0.5, size=n)
    adv = rng.normal(size=n)
    w = rng.uniform(0.01, 0.2, size=n)
    la, ga, na = compiled.clipped_surrogate(logits, actions, old, adv, w, eps, temp)
    lb, gb, nb = py.clipped_surrogate(logits, actions, old, adv, w, eps, temp)
    assert abs(la - lb) <= 1e-12 * max(1.0, abs(lb))
    np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(na, nb, rtol=1e-12, atol=1e-13)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_content_hash_canonical():
    assert kernels.content_hash({"b": 1, "a": [1, 2]}) == kernels.content_hash({"a": [1, 2], "b": 1})
    assert kernels.content_hash({"a": 1}) != kernels.content_hash({"a": 2})
