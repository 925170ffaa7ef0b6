import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxoverlap.boxes import HARD, BoxEmbedding, SmoothingConfig, softplus
from boxoverlap.retrieval import (
    CLONE_LIKE,
    OBLIQUE_OR_CROP_OUT,
    UNRELATED,
    ZOOM_IN,
    ZOOM_OUT,
    BoxIndex,
    build,
    classify_relation,
    estimate_scale,
)
from boxoverlap.training import EmbeddingTable

RHO5 = SmoothingConfig(5.0)

unit = st.floats(0.0, 1.0, allow_nan=False)


def box(lower, upper):
    return BoxEmbedding(np.asarray(lower, float), np.asarray(upper, float))


def random_table(rng, n, dim):
    centers = rng.normal(0.0, 2.0, size=(n, dim))
    size_raws = rng.normal(1.0, 1.0, size=(n, dim))
    ids = [f"b{i:04d}" for i in range(n)]
    return EmbeddingTable("box", ids, np.hstack([centers, size_raws]))


def random_query(rng, dim):
    lo = rng.normal(0.0, 2.0, size=dim)
    return BoxEmbedding(lo, lo + softplus(rng.normal(1.0, 1.0, size=dim)))


# -- relation classification ---------------------------------------------------


def test_classify_reference_values():
    assert classify_relation(0.152, 0.831).label == ZOOM_IN
    assert classify_relation(0.808, 0.887).label == CLONE_LIKE
    assert classify_relation(0.853, 0.053).label == ZOOM_OUT


def test_classify_oblique_and_unrelated():
    assert classify_relation(0.2, 0.2).label == OBLIQUE_OR_CROP_OUT
    assert classify_relation(0.04, 0.04).label == UNRELATED
    assert classify_relation(0.0, 0.0).label == UNRELATED


def test_classify_rejects_out_of_range():
    with pytest.raises(ValueError):
        classify_relation(1.2, 0.5)


@given(unit, unit)
@settings(max_examples=300, deadline=None)
def test_classify_swap_symmetry(a, b):
    fwd = classify_relation(a, b).label
    rev = classify_relation(b, a).label
    swap = {ZOOM_IN: ZOOM_OUT, ZOOM_OUT: ZOOM_IN}
    assert rev == swap.get(fwd, fwd)


@given(unit, unit)
@settings(max_examples=200, deadline=None)
def test_classify_total_and_deterministic(a, b):
    first = classify_relation(a, b)
    second = classify_relation(a, b)
    assert first.label == second.label
    assert first.label in (ZOOM_IN, ZOOM_OUT, CLONE_LIKE, OBLIQUE_OR_CROP_OUT,
                           UNRELATED)


# -- scale ---------------------------------------------------------------------


def test_scale_examples():
    assert estimate_scale(0.25, 1.0, 100, 100) == pytest.approx(2.0)
    assert estimate_scale(0.4, 0.4, 640, 640) == pytest.approx(1.0)
    assert estimate_scale(0.4, 0.4, 100, 400) == pytest.approx(2.0)


def test_scale_zero_overlap():
    with pytest.raises(ValueError, match="no estimated overlap"):
        estimate_scale(0.0, 0.5, 10, 10)


@given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0),
       st.integers(1, 10**6), st.integers(1, 10**6))
@settings(max_examples=200, deadline=None)
def test_scale_reciprocal_symmetry(qr, rq, nq, nr):
    fwd = estimate_scale(qr, rq, nq, nr)
    rev = estimate_scale(rq, qr, nr, nq)
    assert abs(fwd * rev - 1.0) < 1e-12


# -- index ---------------------------------------------------------------------


def test_empty_index():
    table = EmbeddingTable("box", [], np.zeros((0, 8)))
    index = build(table)
    assert len(index) == 0
    assert index.query_topk(box([0, 0, 0, 0], [1, 1, 1, 1]), 5) == []


def test_build_rejects_vector_table():
    with pytest.raises(ValueError, match="box-kind"):
        build(EmbeddingTable("vector", ["a"], np.zeros((1, 4))))


def test_query_self_ranks_first():
    rng = np.random.default_rng(0)
    table = random_table(rng, 50, 6)
    index = build(table)
    target = table.ids[7]
    results = index.query_topk(table.box(target), 3, HARD)
    assert results[0].id == target
    assert results[0].score == 1.0
    assert results[0].enclosure == 1.0 and results[0].concentration == 1.0


def test_k_exceeds_size_returns_all():
    rng = np.random.default_rng(1)
    table = random_table(rng, 7, 4)
    index = build(table)
    results = index.query_topk(random_query(rng, 4), 100, HARD)
    assert len(results) == 7


def test_duplicate_boxes_both_returned():
    row = np.concatenate([np.zeros(3), np.ones(3)])
    table = EmbeddingTable("box", ["dup-a", "dup-b"], np.vstack([row, row]))
    index = build(table)
    results = index.query_topk(table.box("dup-a"), 2, HARD)
    assert [r.id for r in results] == ["dup-a", "dup-b"]  # tie broken by id
    assert results[0].score == results[1].score == 1.0


def test_hand_placed_ordering():
    # Query [0,2]^1; gallery: same box, a half-overlapping box, a sliver.
    table = EmbeddingTable("box", ["same", "half", "sliver"], np.zeros((3, 2)))
    index = BoxIndex(
        ["same", "half", "sliver"],
        np.array([[0.0], [1.0], [1.9]]),
        np.array([[2.0], [3.0], [2.1]]),
    )
    q = box([0.0], [2.0])
    results = index.query_topk(q, 3, HARD)
    assert [r.id for r in results] == ["same", "half", "sliver"]
    assert results[1].enclosure == pytest.approx(0.5)
    assert results[1].concentration == pytest.approx(0.5)
    assert results[2].score == pytest.approx(0.5 * (0.1 / 2.0 + 0.1 / 0.2))


@pytest.mark.parametrize("rho", [0.0, 5.0])
def test_index_equals_exhaustive_scan(rho):
    rng = np.random.default_rng(42)
    table = random_table(rng, 1000, 16)
    index = build(table)
    cfg = SmoothingConfig(rho)
    for _ in range(50):
        q = random_query(rng, 16)
        via_index = index.query_topk(q, 10, cfg)
        via_scan = index.query_topk_exhaustive(q, 10, cfg)
        assert via_index == via_scan


def test_query_k_validation():
    table = random_table(np.random.default_rng(0), 5, 3)
    with pytest.raises(ValueError):
        build(table).query_topk(random_query(np.random.default_rng(1), 3), 0)


# -- quadrant queries ----------------------------------------------------------


def test_quadrant_full_range_returns_all():
    rng = np.random.default_rng(3)
    table = random_table(rng, 60, 5)
    index = build(table)
    q = random_query(rng, 5)
    hits = index.query_quadrant(q, (0.0, 1.0), (0.0, 1.0), HARD)
    assert len(hits) == 60


def test_quadrant_partition_counts_each_entry_once():
    rng = np.random.default_rng(4)
    table = random_table(rng, 80, 4)
    index = build(table)
    q = random_query(rng, 4)
    bands = [(0.0, 0.3), (0.3, 0.7), (0.7, 1.0)]
    total = 0
    seen = set()
    for er in bands:
        for cr in bands:
            hits = index.query_quadrant(q, er, cr, HARD)
            total += len(hits)
            seen.update(h.id for h in hits)
    assert total == 80
    assert len(seen) == 80


def test_quadrant_containment_band():
    index = BoxIndex(["outer"], np.array([[0.0, 0.0]]), np.array([[4.0, 4.0]]))
    q = box([1.0, 1.0], [2.0, 2.0])
    high = index.query_quadrant(q, (0.9, 1.0), (0.0, 1.0), HARD)
    assert [h.id for h in high] == ["outer"]
    assert high[0].enclosure == 1.0


def test_quadrant_disjoint_only_in_zero_band():
    index = BoxIndex(["far"], np.array([[50.0]]), np.array([[51.0]]))
    q = box([0.0], [1.0])
    assert index.query_quadrant(q, (0.0, 0.5), (0.0, 0.5), HARD)
    assert not index.query_quadrant(q, (0.5, 1.0), (0.0, 1.0), HARD)


def test_quadrant_invalid_range():
    index = BoxIndex(["a"], np.array([[0.0]]), np.array([[1.0]]))
    with pytest.raises(ValueError, match="invalid range"):
        index.query_quadrant(box([0.0], [1.0]), (0.7, 0.3), (0.0, 1.0))


def test_index_insertion_order_independent():
    rng = np.random.default_rng(5)
    table = random_table(rng, 40, 6)
    perm = rng.permutation(40)
    lowers, uppers = table.bounds()
    a = BoxIndex(table.ids, lowers, uppers)
    b = BoxIndex([table.ids[i] for i in perm], lowers[perm], uppers[perm])
    q = random_query(rng, 6)
    assert a.query_topk(q, 10, HARD) == b.query_topk(q, 10, HARD)
