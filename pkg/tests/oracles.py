"""Independent reference implementations used by unit and acceptance tests.

Everything here is a direct transcription of a definition: per-anchor loops,
explicit filtered rankings, sequential precision sums.  No shortcuts shared
with the library code.
"""

import numpy as np


def triplet_oracle(feats: np.ndarray, ids: np.ndarray, margin: float) -> float:
    """Exhaustive per-anchor enumeration of the batch-hard definition."""
    n = feats.shape[0]
    per_anchor = []
    for a in range(n):
        pos = [
            np.sqrt(((feats[a] - feats[j]) ** 2).sum())
            for j in range(n)
            if ids[j] == ids[a]
        ]
        neg = [
            np.sqrt(((feats[a] - feats[j]) ** 2).sum())
            for j in range(n)
            if ids[j] != ids[a]
        ]
        per_anchor.append(max(0.0, (max(pos) - min(neg)) + margin))
    return float(np.mean(np.asarray(per_anchor, dtype=feats.dtype)))


def reference_cmc_map(dist, query_pids, query_cams, gallery_pids, gallery_cams, max_rank):
    """Definitional single-query CMC/mAP with the same exclusions and the
    distance-then-index tie rule.  Returns (cmc, mAP, per_query_ap, valid)."""
    n_q, n_g = dist.shape
    cmc_hits = np.zeros(max_rank, dtype=np.int64)
    per_query_ap = []
    valid = 0
    for i in range(n_q):
        ranked = sorted(
            (
                (float(dist[i, j]), j)
                for j in range(n_g)
                if gallery_pids[j] >= 0
                and not (
                    gallery_pids[j] == query_pids[i]
                    and gallery_cams[j] == query_cams[i]
                )
            ),
            key=lambda pair: (pair[0], pair[1]),
        )
        flags = [gallery_pids[j] == query_pids[i] for _, j in ranked]
        if not any(flags):
            per_query_ap.append(None)
            continue
        valid += 1
        first = flags.index(True)
        for k in range(first, max_rank):
            cmc_hits[k] += 1
        hits, precision_sum = 0, 0.0
        for rank, flag in enumerate(flags, start=1):
            if flag:
                hits += 1
                precision_sum += hits / rank
        per_query_ap.append(precision_sum / hits)
    if valid == 0:
        raise ValueError("no valid queries")
    aps = np.array([ap for ap in per_query_ap if ap is not None])
    return cmc_hits / valid, float(np.mean(aps)), per_query_ap, valid
