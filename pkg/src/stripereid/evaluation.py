"""Retrieval evaluation: distances, protocol-correct CMC/mAP, re-ranking.

The matching protocol follows standard re-id practice: for each query,
gallery entries sharing both its identity and its camera are removed, junk
entries (negative identity) are removed, and metrics are computed over the
remaining ranked list. Average precision is the mean of precision-at-hit
over a query's positives; CMC at rank k is the fraction of queries with a
correct match somewhere in the top k. Distance ties break by gallery index
so reports are deterministic. Queries with no valid positive are dropped
from both denominators (counted and logged).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .infer import FeatureMatrix

log = logging.getLogger(__name__)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix [len(a), len(b)], clamped at zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"feature dimensionality mismatch: {a.shape} vs {b.shape}")
    sq_a = (a * a).sum(axis=1)[:, None]
    sq_b = (b * b).sum(axis=1)[None, :]
    d2 = sq_a + sq_b - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class RankingReport:
    """CMC rates, mAP, per-query APs, and the protocol that produced them."""

    cmc: dict[int, float]
    mAP: float
    per_query_ap: np.ndarray          # NaN for queries without valid positives
    num_valid_queries: int
    num_skipped_queries: int
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "mAP": self.mAP,
            "per_query_ap": [None if np.isnan(v) else float(v)
                             for v in self.per_query_ap],
            "num_valid_queries": self.num_valid_queries,
            "num_skipped_queries": self.num_skipped_queries,
            "protocol": self.protocol,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def table(self) -> str:
        """Human-readable summary mirroring the usual results-table style."""
        cols = [f"Rank-{k}" for k in sorted(self.cmc)] + ["mAP"]
        vals = [f"{100 * self.cmc[k]:.1f}" for k in sorted(self.cmc)]
        vals.append(f"{100 * self.mAP:.1f}")
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        body = " | ".join(v.rjust(w) for v, w in zip(vals, widths))
        desc = ", ".join(f"{k}={v}" for k, v in self.protocol.items()) or "default"
        return (f"protocol: {desc}\n"
                f"queries:  {self.num_valid_queries} evaluated, "
                f"{self.num_skipped_queries} skipped (no valid positive)\n"
                f"{head}\n{'-' * len(head)}\n{body}")


def evaluate(dist: np.ndarray, query_ids, query_cams, gallery_ids, gallery_cams,
             ranks: tuple[int, ...] = (1, 5, 10),
             protocol: dict | None = None) -> RankingReport:
    """Score a [Q,G] distance matrix under the re-id matching protocol."""
    dist = np.asarray(dist)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    nq, ng = dist.shape
    if len(query_ids) != nq or len(gallery_ids) != ng:
        raise ValueError("metadata length does not match the distance matrix")
    if not np.isfinite(dist).all():
        raise ValueError("distance matrix contains non-finite entries")

    junk = gallery_ids < 0
    max_rank = max(ranks)
    cmc_hits = np.zeros(max_rank, dtype=np.int64)
    aps = np.full(nq, np.nan)
    valid = 0

    for q in range(nq):
        order = np.argsort(dist[q], kind="stable")
        g_ids = gallery_ids[order]
        g_cams = gallery_cams[order]
        keep = ~(junk[order] | ((g_ids == query_ids[q]) & (g_cams == query_cams[q])))
        matches = (g_ids[keep] == query_ids[q])
        n_pos = int(matches.sum())
        if n_pos == 0:
            continue
        valid += 1
        positions = np.flatnonzero(matches)          # 0-based ranks of the hits
        first = positions[0]
        if first < max_rank:
            cmc_hits[first:] += 1
        precision_at_hit = (np.arange(1, n_pos + 1)) / (positions + 1.0)
        aps[q] = precision_at_hit.mean()

    skipped = nq - valid
    if skipped:
        log.info("evaluate: %d of %d queries had no valid positive and were "
                 "excluded from CMC/mAP", skipped, nq)
    if valid == 0:
        raise ValueError("no query has a valid gallery positive; nothing to score")
    cmc = {k: float(cmc_hits[k - 1] / valid) for k in ranks}
    return RankingReport(
        cmc=cmc,
        mAP=float(np.nanmean(aps)),
        per_query_ap=aps,
        num_valid_queries=valid,
        num_skipped_queries=skipped,
        protocol=protocol or {},
    )


def pool_multi_query(features: np.ndarray, mode: str = "avg") -> np.ndarray:
    """Merge the features of one (identity, camera) group into a single row."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("pooling needs a non-empty [M, D] feature block")
    if mode == "avg":
        return features.mean(axis=0)
    if mode == "max":
        return features.max(axis=0)
    raise ValueError(f"unknown pooling mode '{mode}' (use 'avg' or 'max')")


def pool_query_matrix(fm: FeatureMatrix, mode: str = "avg") -> FeatureMatrix:
    """Collapse a query FeatureMatrix to one pooled row per (identity, camera)."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (pid, cam) in enumerate(zip(fm.identities, fm.cameras)):
        groups.setdefault((int(pid), int(cam)), []).append(i)
    keys = sorted(groups)
    pooled = np.stack([pool_multi_query(fm.features[groups[k]], mode) for k in keys]) \
        if keys else np.zeros((0, fm.features.shape[1]), fm.features.dtype)
    return FeatureMatrix(
        features=pooled.astype(np.float32),
        feature_names=fm.feature_names,
        config_hash=fm.config_hash,
        paths=[fm.paths[groups[k][0]] for k in keys],
        identities=np.asarray([k[0] for k in keys], dtype=np.int64),
        cameras=np.asarray([k[1] for k in keys], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking


def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def rerank(dist_qg: np.ndarray, dist_qq: np.ndarray, dist_gg: np.ndarray,
           k1: int = 20, k2: int = 6, lambda_value: float = 0.3) -> np.ndarray:
    """Refine query-gallery distances with k-reciprocal neighbor statistics.

    Mutual (k-reciprocal) neighbor sets are expanded with strongly
    overlapping candidates, encoded as softmax-weighted sparse vectors,
    smoothed by averaging over each point's k2 nearest neighbors, and
    compared with a Jaccard distance. The result blends the original
    distances with the Jaccard term: lambda * original + (1 - lambda) *
    jaccard, so lambda=1 reproduces the original per-query ordering.

    Args:
        dist_qg: [Q, G] query-gallery distances.
        dist_qq: [Q, Q] query-query distances.
        dist_gg: [G, G] gallery-gallery distances.
        k1: neighborhood size for reciprocal sets.
        k2: local expansion size (1 disables expansion).
        lambda_value: weight of the original distances in the blend.
    """
    dist_qg = np.asarray(dist_qg, dtype=np.float64)
    nq, ng = dist_qg.shape
    if dist_qq.shape != (nq, nq) or dist_gg.shape != (ng, ng):
        raise ValueError("distance matrices have inconsistent shapes")
    if not 0.0 <= lambda_value <= 1.0:
        raise ValueError("lambda_value must lie in [0, 1]")
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    if k1 > ng or k2 > ng:
        raise ValueError(f"k1={k1}, k2={k2} exceed the gallery size {ng}")

    n = nq + ng
    original = np.block([[dist_qq, dist_qg], [dist_qg.T, dist_gg]])
    # per-point rescale (divide by column max, then transpose): keeps every
    # row's ordering while making the exp(-d) weights scale-free
    colmax = np.maximum(original.max(axis=0), np.finfo(np.float64).tiny)
    original = (original / colmax).T
    initial_rank = np.argsort(original, axis=1, kind="stable")

    weights = np.zeros((n, n))
    for i in range(n):
        k_recip = _k_reciprocal(initial_rank, i, k1)
        expansion = k_recip
        for candidate in k_recip:
            cand_recip = _k_reciprocal(initial_rank, int(candidate),
                                       int(round(k1 / 2)))
            if len(np.intersect1d(cand_recip, k_recip)) > 2 / 3 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        w = np.exp(-original[i, expansion])
        weights[i, expansion] = w / w.sum()

    if k2 != 1:
        weights = np.stack([weights[initial_rank[i, :k2]].mean(axis=0)
                            for i in range(n)])

    original_q = original[:nq]
    nonzero_by_col = [np.flatnonzero(weights[:, j]) for j in range(n)]
    jaccard = np.zeros((nq, n))
    for i in range(nq):
        overlap = np.zeros(n)
        for j in np.flatnonzero(weights[i]):
            rows = nonzero_by_col[j]
            overlap[rows] += np.minimum(weights[i, j], weights[rows, j])
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    final = (1 - lambda_value) * jaccard + lambda_value * original_q
    return final[:, nq:]


def evaluate_features(query: FeatureMatrix, gallery: FeatureMatrix,
                      ranks: tuple[int, ...] = (1, 5, 10),
                      multi_query: bool = False, pool: str = "avg",
                      use_rerank: bool = False, k1: int = 20, k2: int = 6,
                      lambda_value: float = 0.3) -> RankingReport:
    """End-to-end scoring of two feature files, with optional MQ/re-ranking."""
    if query.config_hash != gallery.config_hash:
        raise ConfigError(
            "query and gallery features were produced under different model "
            f"configs ({query.config_hash} vs {gallery.config_hash})")
    if multi_query:
        query = pool_query_matrix(query, pool)
    dist = pairwise_distances(query.features, gallery.features)
    if use_rerank:
        dist = rerank(dist,
                      pairwise_distances(query.features, query.features),
                      pairwise_distances(gallery.features, gallery.features),
                      k1=k1, k2=k2, lambda_value=lambda_value)
    protocol = {
        "mode": "multi-query" if multi_query else "single-query",
        "reranked": use_rerank,
        "config_hash": query.config_hash,
    }
    if multi_query:
        protocol["pool"] = pool
    return evaluate(dist, query.identities, query.cameras,
                    gallery.identities, gallery.cameras, ranks=ranks,
                    protocol=protocol)
