import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from memapo.errors import DimensionMismatch, ZeroNorm
from memapo.index import ScoredHit, VectorIndex, cosine_similarity

from conftest import at_angle, basis


def test_cosine_examples():
    assert cosine_similarity([3, 4], [3, 4]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ZeroNorm):
        cosine_similarity([0, 0], [1, 0])


def test_upsert_fixes_dimension():
    idx = VectorIndex()
    idx.upsert("t1", [1, 0, 0, 0])
    assert idx.dim == 4
    with pytest.raises(DimensionMismatch):
        idx.upsert("t2", [1, 0, 0])


def test_upsert_replaces():
    idx = VectorIndex()
    idx.upsert("t1", [1, 0])
    idx.upsert("t1", [0, 1])
    assert idx.top_k([0, 1], 1, 0.0) == [ScoredHit("t1", 1.0)]
    assert len(idx) == 1


def test_empty_index_returns_nothing():
    assert VectorIndex().top_k([1.0, 2.0], 3, -1.0) == []


def _five():
    q = basis(4, 0)
    idx = VectorIndex()
    for name, cos in zip("abcde", [0.9, 0.7, 0.5, 0.2, 0.1]):
        idx.upsert(name, at_angle(q, basis(4, 1), cos))
    return idx, q


def test_top_k_threshold_and_order():
    idx, q = _five()
    hits = idx.top_k(q, 3, 0.3)
    assert [h.id for h in hits] == ["a", "b", "c"]
    assert [h.score for h in hits] == pytest.approx([0.9, 0.7, 0.5])
    assert idx.top_k(q, 3, 0.95) == []


def test_threshold_is_inclusive():
    idx = VectorIndex()
    idx.upsert("x", [1.0, 0.0])
    assert idx.top_k([1.0, 0.0], 1, 1.0) == [ScoredHit("x", 1.0)]


def test_ties_broken_by_id():
    idx = VectorIndex()
    for name in ["t-3", "t-1", "t-2"]:
        idx.upsert(name, [1.0, 1.0])
    assert [h.id for h in idx.top_k([2.0, 2.0], 2, 0.0)] == ["t-1", "t-2"]


def test_zero_query_rejected():
    idx, _ = _five()
    with pytest.raises(ZeroNorm):
        idx.top_k(np.zeros(4), 3, 0.0)


def test_remove():
    idx, q = _five()
    assert idx.remove("a") is True
    assert "a" not in [h.id for h in idx.top_k(q, 5, -1)]
    assert idx.remove("zz") is False
    assert len(idx) == 4
    idx.upsert("a", at_angle(q, basis(4, 1), 0.9))
    assert idx.top_k(q, 1, 0)[0].id == "a"


def test_equality_ignores_slot_order():
    a, b = VectorIndex(), VectorIndex()
    a.upsert("x", [1.0, 2.0])
    a.upsert("y", [3.0, 4.0])
    b.upsert("y", [3.0, 4.0])
    b.upsert("x", [1.0, 2.0])
    assert a == b
    b.upsert("x", [1.0, 2.0000000000000004])
    assert a != b


vec3 = hnp.arrays(np.float64, 3, elements=st.floats(-100, 100, allow_nan=False)).filter(
    lambda v: np.sqrt((v * v).sum()) > 1e-3
)


@settings(max_examples=200, deadline=None)
@given(vec3, vec3, st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, c):
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    assert cosine_similarity(a, c * a) == pytest.approx(1.0, abs=1e-9)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 40), st.integers(0, 10), st.floats(-1, 1), st.integers(0, 2**32 - 1))
def test_top_k_length_bound(n, k, theta, seed):
    rng = np.random.default_rng(seed)
    idx = VectorIndex(dim=5)
    for i in range(n):
        idx.upsert(f"e{i}", rng.standard_normal(5))
    hits = idx.top_k(rng.standard_normal(5), k, theta)
    assert len(hits) <= min(k, n)
    assert all(h.score >= theta for h in hits)
