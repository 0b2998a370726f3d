# tests/test_evaluation.py

from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attention_reid.errors import DimensionError, ProtocolError
from attention_reid.evaluation import (
    REPORT_FIELDS,
    CmcSetting,
    Embedding,
    average_precision,
    cmc,
    distance_matrix,
    evaluate,
    mean_average_precision,
    read_embeddings_csv,
    sanity_pairs,
    split_query_gallery,
    write_embeddings_csv,
)

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def _make_embeddings(values, ids, cams=None):
    cams = cams if cams is not None else [0] * len(ids)
    return [Embedding(v, i, c, f"s{k}") for k, (v, i, c) in enumerate(zip(values, ids, cams))]


def _random_set(rng, n_ids, per_id, dim=4, camera=0):
    values = rng.standard_normal((n_ids * per_id, dim))
    ids = np.repeat(np.arange(n_ids), per_id)
    return _make_embeddings(values, ids, [camera] * ids.size)


def _oracle_first_match_rank(dist, i, keep=None):
    cols = [j for j in range(dist.shape[1]) if keep is None or keep[j]]
    ranked = sorted(cols, key=lambda j: (dist.values[i, j], j))
    return next(r for r, j in enumerate(ranked) if dist.gallery_ids[j] == dist.query_ids[i])


def _oracle_map(dist):
    total = 0.0
    for i in range(dist.shape[0]):
        qid, qcam = dist.query_ids[i], dist.query_cams[i]
        cols = [
            j
            for j in range(dist.shape[1])
            if not (dist.gallery_ids[j] == qid and dist.gallery_cams[j] == qcam)
        ]
        ranked = sorted(cols, key=lambda j: (dist.values[i, j], j))
        hits, precisions = 0, []
        for r, j in enumerate(ranked, start=1):
            if dist.gallery_ids[j] == qid:
                hits += 1
                precisions.append(hits / r)
        total += sum(precisions) / len(precisions)
    return total / dist.shape[0]


# ---------------------------------------------------------------------- #
# distance_matrix
# ---------------------------------------------------------------------- #


def test_distance_examples():
    a = _make_embeddings([[1.0, 0.0]], [0])
    b = _make_embeddings([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    values = distance_matrix(a, b).values
    assert values[0, 0] == 0.0
    assert values[0, 1] == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_distance_matches_a_triple_loop():
    rng = np.random.default_rng(0)
    q, g = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
    dist = distance_matrix(_make_embeddings(q, range(5)), _make_embeddings(g, range(7)))
    for i in range(5):
        for j in range(7):
            expected = math.sqrt(sum((q[i, k] - g[j, k]) ** 2 for k in range(3)))
            assert dist.values[i, j] == pytest.approx(expected, abs=1e-12)


def test_distance_dimension_mismatch():
    with pytest.raises(DimensionError):
        distance_matrix(_make_embeddings([[1.0]], [0]), _make_embeddings([[1.0, 2.0]], [0]))


# ---------------------------------------------------------------------- #
# cmc
# ---------------------------------------------------------------------- #


def test_self_retrieval_is_rank_one():
    queries, gallery = sanity_pairs(_random_set(np.random.default_rng(1), 6, 2))
    curve = cmc(distance_matrix(queries, gallery))
    assert curve.rank(1) == 1.0


def test_hand_built_half_then_full_curve():
    # the second query sits nearer to identity 0 than to its own
    queries = _make_embeddings([[0.0], [4.0]], [0, 1])
    gallery = _make_embeddings([[0.1], [9.0]], [0, 1])
    curve = cmc(distance_matrix(queries, gallery))
    assert curve.accuracy_at_rank.tolist() == [0.5, 1.0]


def test_ties_break_by_gallery_index():
    queries = _make_embeddings([[0.0]], [1])
    first = cmc(distance_matrix(queries, _make_embeddings([[1.0], [-1.0]], [1, 0])))
    second = cmc(distance_matrix(queries, _make_embeddings([[1.0], [-1.0]], [0, 1])))
    assert first.rank(1) == 1.0
    assert second.rank(1) == 0.0


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(min_value=2, max_value=20))
def test_single_shot_matches_an_exhaustive_sort(seed, n):
    rng = np.random.default_rng(seed)
    queries = _random_set(rng, n, 1, camera=0)
    gallery = _random_set(rng, n, 1, camera=1)
    dist = distance_matrix(queries, gallery)
    expected = np.zeros(n)
    for i in range(n):
        expected[_oracle_first_match_rank(dist, i):] += 1
    assert np.array_equal(cmc(dist, repeats=3, seed=seed).accuracy_at_rank, expected / n)


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(min_value=1, max_value=10), st.integers(min_value=1, max_value=4))
def test_multi_gallery_matches_an_exhaustive_sort(seed, n_ids, per_id):
    rng = np.random.default_rng(seed)
    queries = _random_set(rng, n_ids, 2, camera=0)
    gallery = _random_set(rng, n_ids, per_id, camera=1) + _random_set(rng, n_ids, 1, camera=0)
    dist = distance_matrix(queries, gallery)
    expected = np.zeros(dist.shape[1])
    for i in range(dist.shape[0]):
        keep = ~((dist.gallery_ids == dist.query_ids[i]) & (dist.gallery_cams == dist.query_cams[i]))
        expected[_oracle_first_match_rank(dist, i, keep):] += 1
    curve = cmc(dist, CmcSetting.MULTI_GALLERY)
    assert np.array_equal(curve.accuracy_at_rank, expected / dist.shape[0])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_curves_are_monotone_and_reach_one(seed):
    rng = np.random.default_rng(seed)
    queries = _random_set(rng, 5, 2, camera=0)
    gallery = _random_set(rng, 5, 3, camera=1)
    curve = cmc(distance_matrix(queries, gallery), repeats=4, seed=seed).accuracy_at_rank
    assert np.all(np.diff(curve) >= 0)
    assert curve[-1] == pytest.approx(1.0, abs=1e-12)


def test_single_shot_is_reproducible_per_seed():
    rng = np.random.default_rng(3)
    dist = distance_matrix(_random_set(rng, 5, 2), _random_set(rng, 5, 3, camera=1))
    a = cmc(dist, repeats=10, seed=7).accuracy_at_rank
    b = cmc(dist, repeats=10, seed=7).accuracy_at_rank
    assert np.array_equal(a, b)


def test_missing_query_identity_is_named():
    dist = distance_matrix(_make_embeddings([[0.0]], [42]), _make_embeddings([[1.0]], [0]))
    with pytest.raises(ProtocolError, match="42"):
        cmc(dist)


def test_no_queries_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        cmc(distance_matrix([], _make_embeddings([[1.0]], [0])))


def test_rank_saturates_past_the_gallery():
    curve = cmc(distance_matrix(_make_embeddings([[0.0]], [0]), _make_embeddings([[0.0], [1.0]], [0, 1])))
    assert curve.rank(20) == 1.0
    with pytest.raises(ValueError):
        curve.rank(0)


# ---------------------------------------------------------------------- #
# mean_average_precision
# ---------------------------------------------------------------------- #


def test_average_precision_hand_cases():
    assert average_precision(np.array([False, True, False, False, False])) == 0.5
    assert average_precision(np.array([True, True, False])) == 1.0


def test_single_query_with_its_match_second_of_five():
    queries = _make_embeddings([[0.0]], [0], [0])
    gallery = _make_embeddings([[1.0], [2.0], [3.0], [4.0], [5.0]], [1, 0, 2, 3, 4], [1] * 5)
    assert mean_average_precision(distance_matrix(queries, gallery)) == 0.5


def test_same_camera_matches_are_ignored():
    queries = _make_embeddings([[0.0]], [0], [0])
    gallery = _make_embeddings([[0.0], [1.0], [2.0]], [0, 1, 0], [0, 1, 1])
    assert mean_average_precision(distance_matrix(queries, gallery)) == 0.5


def test_query_without_cross_camera_match():
    dist = distance_matrix(_make_embeddings([[0.0]], [0], [0]), _make_embeddings([[0.0]], [0], [0]))
    with pytest.raises(ProtocolError):
        mean_average_precision(dist)


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(min_value=1, max_value=10), st.integers(min_value=1, max_value=4))
def test_map_matches_an_exhaustive_oracle(seed, n_ids, per_id):
    rng = np.random.default_rng(seed)
    queries = _random_set(rng, n_ids, 2, camera=0)
    gallery = _random_set(rng, n_ids, per_id, camera=1) + _random_set(rng, n_ids, 1, camera=0)
    dist = distance_matrix(queries, gallery)
    result = mean_average_precision(dist)
    assert 0.0 <= result <= 1.0
    assert result == pytest.approx(_oracle_map(dist), abs=1e-12)


def test_map_is_one_when_matches_come_first():
    queries = _make_embeddings([[0.0], [100.0]], [0, 1], [0, 0])
    gallery = _make_embeddings([[0.1], [0.2], [100.1], [100.2]], [0, 0, 1, 1], [1, 1, 1, 1])
    assert mean_average_precision(distance_matrix(queries, gallery)) == 1.0


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_orthogonal_transform_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    q_vals, g_vals = rng.standard_normal((6, 4)), rng.standard_normal((12, 4))
    q_ids, g_ids = np.repeat(np.arange(3), 2), np.repeat(np.arange(3), 4)
    basis, _ = np.linalg.qr(rng.standard_normal((4, 4)))

    def run(q, g):
        dist = distance_matrix(_make_embeddings(q, q_ids), _make_embeddings(g, g_ids, [1] * 12))
        return dist, cmc(dist, seed=1).accuracy_at_rank, mean_average_precision(dist)

    d0, c0, m0 = run(q_vals, g_vals)
    d1, c1, m1 = run(q_vals @ basis, g_vals @ basis)
    assert np.allclose(d0.values, d1.values, atol=1e-10)
    assert np.array_equal(c0, c1)
    assert m0 == pytest.approx(m1, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_gallery_order_does_not_matter_without_ties(seed):
    rng = np.random.default_rng(seed)
    queries = _random_set(rng, 4, 1, camera=0)
    gallery = _random_set(rng, 4, 3, camera=1)
    shuffled = [gallery[i] for i in rng.permutation(len(gallery))]
    a, b = distance_matrix(queries, gallery), distance_matrix(queries, shuffled)
    assert np.array_equal(cmc(a, CmcSetting.MULTI_GALLERY).accuracy_at_rank, cmc(b, CmcSetting.MULTI_GALLERY).accuracy_at_rank)
    assert mean_average_precision(a) == pytest.approx(mean_average_precision(b), abs=1e-12)


# ---------------------------------------------------------------------- #
# assembly and reporting
# ---------------------------------------------------------------------- #


def test_query_gallery_split_by_camera():
    embeddings = _make_embeddings(np.eye(4), [0, 0, 1, 1], [0, 1, 0, 1])
    queries, gallery = split_query_gallery(embeddings)
    assert [e.camera for e in queries] == [0, 0]
    assert [e.camera for e in gallery] == [1, 1]


def test_sanity_evaluation_has_no_map_but_full_rank_one():
    queries, gallery = sanity_pairs(_random_set(np.random.default_rng(5), 4, 2))
    report = evaluate(queries, gallery, label="sanity", sanity=True)
    assert report.rank1 == 1.0
    assert math.isnan(report.mean_ap)


def test_missing_cross_camera_match_fails_outside_sanity_mode():
    queries, gallery = sanity_pairs(_random_set(np.random.default_rng(5), 4, 2))
    with pytest.raises(ProtocolError, match="cross-camera"):
        evaluate(queries, gallery, label="can")


def test_report_rows_append_under_one_header(tmp_path):
    rng = np.random.default_rng(6)
    queries, gallery = _random_set(rng, 3, 1), _random_set(rng, 3, 2, camera=1)
    path = tmp_path / "report.csv"
    evaluate(queries, gallery, label="a").append_csv(path)
    evaluate(queries, gallery, label="b").append_csv(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == REPORT_FIELDS
        rows = list(reader)
    assert [r["label"] for r in rows] == ["a", "b"]
    assert rows[0]["rank1"] == rows[1]["rank1"]
    assert len(rows[0]["curve"].split()) == 3


def test_embeddings_csv_keeps_full_precision(tmp_path):
    embeddings = _random_set(np.random.default_rng(8), 2, 2)
    back = read_embeddings_csv(write_embeddings_csv(tmp_path / "e.csv", embeddings))
    for a, b in zip(embeddings, back):
        assert np.array_equal(a.values, b.values)
        assert (a.identity, a.camera, a.source) == (b.identity, b.camera, b.source)
