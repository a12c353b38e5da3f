"""Protocol metrics against a brute-force oracle, pooling, and re-ranking."""

import numpy as np
import pytest

from stripereid.errors import ConfigError
from stripereid.evaluation import (evaluate, evaluate_features,
                                   pairwise_distances, pool_multi_query,
                                   pool_query_matrix, rerank)
from stripereid.infer import FeatureMatrix


# ---------------------------------------------------------------------------
# brute-force per-definition oracle (scalar loops, python sums)


def oracle_eval(dist, qids, qcams, gids, gcams, ranks=(1, 5, 10)):
    nq, ng = dist.shape
    cmc_counts = {k: 0 for k in ranks}
    aps, per_ap = [], []
    skipped = 0
    for q in range(nq):
        order = sorted(range(ng), key=lambda g: (dist[q][g], g))
        kept = [g for g in order
                if gids[g] >= 0 and not (gids[g] == qids[q] and gcams[g] == qcams[q])]
        hits = [r for r, g in enumerate(kept) if gids[g] == qids[q]]
        if not hits:
            skipped += 1
            per_ap.append(None)
            continue
        ap = sum((j + 1) / (p + 1) for j, p in enumerate(hits)) / len(hits)
        per_ap.append(ap)
        aps.append(ap)
        for k in ranks:
            if hits[0] < k:
                cmc_counts[k] += 1
    cmc = {k: cmc_counts[k] / len(aps) for k in ranks}
    return cmc, sum(aps) / len(aps), per_ap, skipped


def random_instance(rng):
    nq = int(rng.integers(1, 21))
    ng = int(rng.integers(5, 101))
    gids = rng.integers(0, 8, size=ng)
    gids[rng.random(ng) < 0.1] = -1                  # junk entries
    gcams = rng.integers(1, 4, size=ng)
    qids = rng.integers(0, 8, size=nq)
    qcams = rng.integers(1, 4, size=nq)
    # guarantee at least one scorable query
    gids[0] = qids[0]
    gcams[0] = qcams[0] % 3 + 1
    dist = rng.random((nq, ng))
    return dist, qids, qcams, gids, gcams


def test_metrics_match_oracle_on_200_random_instances():
    rng = np.random.default_rng(1234)
    for _ in range(200):
        dist, qids, qcams, gids, gcams = random_instance(rng)
        report = evaluate(dist, qids, qcams, gids, gcams)
        cmc, mAP, per_ap, skipped = oracle_eval(dist, qids, qcams, gids, gcams)
        assert report.cmc == cmc                       # integer-ratio, exact
        assert report.num_skipped_queries == skipped
        # summation order may differ by float associativity only
        assert report.mAP == pytest.approx(mAP, abs=1e-12)
        for got, want in zip(report.per_query_ap, per_ap):
            if want is None:
                assert np.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# hand-evaluated cases


def test_single_positive_at_rank_one():
    dist = np.array([[0.1, 0.5, 0.9]])
    report = evaluate(dist, [7], [1], [7, 3, 4], [2, 1, 1])
    assert report.mAP == 1.0
    assert report.cmc[1] == 1.0


def test_two_positives_at_ranks_one_and_three():
    # filtered ranking: positive, negative, positive -> AP = (1/1 + 2/3) / 2
    dist = np.array([[0.1, 0.2, 0.3]])
    report = evaluate(dist, [7], [1], [7, 3, 7], [2, 1, 3])
    assert report.mAP == pytest.approx(5.0 / 6.0, abs=1e-15)


def test_same_camera_and_junk_are_excluded():
    # nearest two entries are the query's own camera shot and a junk file;
    # the real positive sits behind them and must become filtered rank 1
    dist = np.array([[0.05, 0.1, 0.5, 0.9]])
    report = evaluate(dist, [7], [1], [7, -1, 7, 5], [1, 1, 2, 2])
    assert report.cmc[1] == 1.0
    assert report.mAP == 1.0


def test_zero_positive_queries_are_dropped_and_counted():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    report = evaluate(dist, [1, 9], [1, 1], [1, 2], [2, 2])
    assert report.num_valid_queries == 1
    assert report.num_skipped_queries == 1
    assert np.isnan(report.per_query_ap[1])


def test_all_queries_invalid_raises():
    with pytest.raises(ValueError):
        evaluate(np.array([[0.5]]), [1], [1], [2], [1])


def test_non_finite_distances_rejected():
    with pytest.raises(ValueError):
        evaluate(np.array([[np.nan]]), [1], [1], [1], [2])


# ---------------------------------------------------------------------------
# metric invariances


def test_cmc_monotonicity():
    rng = np.random.default_rng(9)
    for _ in range(50):
        dist, qids, qcams, gids, gcams = random_instance(rng)
        r = evaluate(dist, qids, qcams, gids, gcams)
        assert r.cmc[1] <= r.cmc[5] <= r.cmc[10]


def test_gallery_permutation_invariance():
    rng = np.random.default_rng(10)
    dist, qids, qcams, gids, gcams = random_instance(rng)
    base = evaluate(dist, qids, qcams, gids, gcams)
    perm = rng.permutation(dist.shape[1])
    permuted = evaluate(dist[:, perm], qids, qcams, gids[perm], gcams[perm])
    assert permuted.cmc == base.cmc
    assert permuted.mAP == pytest.approx(base.mAP, abs=1e-12)


def test_distance_scaling_invariance():
    rng = np.random.default_rng(11)
    dist, qids, qcams, gids, gcams = random_instance(rng)
    base = evaluate(dist, qids, qcams, gids, gcams)
    scaled = evaluate(dist * 37.5, qids, qcams, gids, gcams)
    assert scaled.cmc == base.cmc and scaled.mAP == base.mAP


def test_map_is_one_exactly_when_positives_lead_the_ranking():
    # positives contiguously from rank 1 -> mAP == 1
    dist = np.array([[0.1, 0.2, 0.5, 0.9]])
    r = evaluate(dist, [1], [1], [1, 1, 2, 3], [2, 2, 1, 1])
    assert r.mAP == 1.0
    # one interloper -> strictly below 1
    dist = np.array([[0.1, 0.2, 0.5, 0.9]])
    r = evaluate(dist, [1], [1], [1, 2, 1, 3], [2, 2, 2, 1])
    assert r.mAP < 1.0


# ---------------------------------------------------------------------------
# distances and pooling


def test_pairwise_distances_basics():
    a = np.array([[1.0, 0.0]])
    assert np.array_equal(pairwise_distances(a, a), [[0.0]])
    e = np.eye(2)
    assert pairwise_distances(e[:1], e[1:])[0, 0] == pytest.approx(np.sqrt(2))


def test_pairwise_distances_matches_scalar_loop():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((10, 7))
    b = rng.standard_normal((10, 7))
    got = pairwise_distances(a, b)
    for i in range(10):
        for j in range(10):
            want = np.sqrt(((a[i] - b[j]) ** 2).sum())
            assert got[i, j] == pytest.approx(want, abs=1e-5)


def test_pairwise_distances_dim_mismatch():
    with pytest.raises(ValueError):
        pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))


def test_pool_multi_query():
    f = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.array_equal(pool_multi_query(f[:1], "avg"), f[0])
    assert np.array_equal(pool_multi_query(f[:1], "max"), f[0])
    assert np.array_equal(pool_multi_query(f, "avg"), [0.5, 1.0])
    assert np.array_equal(pool_multi_query(f, "max"), [1.0, 2.0])
    with pytest.raises(ValueError):
        pool_multi_query(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        pool_multi_query(f, "median")


def _fm(features, ids, cams, config_hash="h"):
    features = np.asarray(features, dtype=np.float32)
    return FeatureMatrix(features=features, feature_names=["f"],
                         config_hash=config_hash,
                         paths=[f"p{i}" for i in range(len(ids))],
                         identities=np.asarray(ids),
                         cameras=np.asarray(cams))


def test_pool_query_matrix_groups_by_identity_and_camera():
    fm = _fm([[2.0, 0.0], [0.0, 2.0], [4.0, 4.0]], [1, 1, 2], [1, 1, 1])
    pooled = pool_query_matrix(fm, "avg")
    assert pooled.features.shape == (2, 2)
    assert np.array_equal(pooled.identities, [1, 2])
    assert np.allclose(pooled.features[0], [1.0, 1.0])


def test_evaluate_features_refuses_mismatched_config_hashes():
    q = _fm([[0.0, 0.0]], [1], [1], config_hash="a")
    g = _fm([[0.0, 0.0]], [1], [2], config_hash="b")
    with pytest.raises(ConfigError):
        evaluate_features(q, g)


# ---------------------------------------------------------------------------
# re-ranking


def cluster_features(rng, n_ids=6, per_id=8, d=16, spread=0.45):
    centers = rng.standard_normal((n_ids, d)) * 3.0
    ids, feats, cams = [], [], []
    for i in range(n_ids):
        for j in range(per_id):
            feats.append(centers[i] + rng.standard_normal(d) * spread)
            ids.append(i)
            cams.append(1 if j % 2 == 0 else 2)
    return np.asarray(feats), np.asarray(ids), np.asarray(cams)


def test_rerank_lambda_one_preserves_ordering():
    rng = np.random.default_rng(21)
    q = rng.standard_normal((6, 8))
    g = rng.standard_normal((20, 8))
    dqg = pairwise_distances(q, g)
    out = rerank(dqg, pairwise_distances(q, q), pairwise_distances(g, g),
                 k1=5, k2=3, lambda_value=1.0)
    for row_out, row_in in zip(out, dqg):
        assert np.array_equal(np.argsort(row_out, kind="stable"),
                              np.argsort(row_in, kind="stable"))


def test_rerank_improves_map_on_clustered_embeddings():
    rng = np.random.default_rng(22)
    feats, ids, cams = cluster_features(rng, per_id=10, spread=2.8)
    is_query = cams == 1
    qf, gf = feats[is_query], feats[~is_query]
    dqg = pairwise_distances(qf, gf)
    base = evaluate(dqg, ids[is_query], cams[is_query],
                    ids[~is_query], cams[~is_query])
    reranked_d = rerank(dqg, pairwise_distances(qf, qf),
                        pairwise_distances(gf, gf), k1=6, k2=3,
                        lambda_value=0.3)
    reranked = evaluate(reranked_d, ids[is_query], cams[is_query],
                        ids[~is_query], cams[~is_query])
    assert base.mAP < 1.0
    assert reranked.mAP >= base.mAP


def test_rerank_matches_hand_traced_toy_case():
    # 1-D layout: query at 0.0, gallery at 0.1, 0.2, 5.0. With k1=2, k2=1,
    # lambda=0 the mutual-neighbor sets are {q,g1,g2} for the close points
    # and {g3} alone, giving softmax weight rows over {q,g1,g2}; the traced
    # Jaccard distances from the query are 0.017767 (g1), 0.026857 (g2) and
    # exactly 1 for the disjoint g3.
    pts = np.array([[0.0], [0.1], [0.2], [5.0]])
    d = pairwise_distances(pts, pts)
    out = rerank(d[:1, 1:], d[:1, :1], d[1:, 1:], k1=2, k2=1, lambda_value=0.0)
    assert out.shape == (1, 3)
    assert out[0, 0] == pytest.approx(0.017767, abs=1e-5)
    assert out[0, 1] == pytest.approx(0.026857, abs=1e-5)
    assert out[0, 2] == pytest.approx(1.0, abs=0)
    assert out[0, 0] < out[0, 1] < out[0, 2]


def test_rerank_validates_arguments():
    d = np.ones((2, 3))
    qq = np.zeros((2, 2))
    gg = np.zeros((3, 3))
    with pytest.raises(ValueError):
        rerank(d, qq, gg, k1=4)           # k1 > gallery size
    with pytest.raises(ValueError):
        rerank(d, qq, gg, k1=2, k2=4)     # k2 > gallery size
    with pytest.raises(ValueError):
        rerank(d, qq, gg, lambda_value=1.5)
    with pytest.raises(ValueError):
        rerank(d, np.zeros((3, 3)), gg)   # inconsistent shapes


def test_report_table_and_json_roundtrip():
    rng = np.random.default_rng(30)
    dist, qids, qcams, gids, gcams = random_instance(rng)
    r = evaluate(dist, qids, qcams, gids, gcams, protocol={"mode": "single-query"})
    text = r.table()
    assert "Rank-1" in text and "mAP" in text and "single-query" in text
    decoded = r.to_dict()
    assert decoded["cmc"]["1"] == r.cmc[1]
