"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def tar_at_far_bruteforce(genuine, impostor, far):
    """Scan every candidate threshold in ascending order; return (threshold, TAR)."""
    gen = [float(g) for g in genuine]
    imp = [float(i) for i in impostor]
    for t in sorted(set(imp)) + [float("inf")]:
        false_accepts = sum(1 for i in imp if i > t)
        if false_accepts <= far * len(imp):
            return t, sum(1 for g in gen if g > t) / len(gen)
    raise AssertionError("unreachable: +inf always qualifies")


def rank_n_bruteforce(scores, gallery_ids, probe_ids, n):
    hits = 0
    for j, pid in enumerate(probe_ids):
        best = {}
        for i, gid in enumerate(gallery_ids):
            best[gid] = max(best.get(gid, -np.inf), scores[i][j])
        ranking = sorted(best.values(), reverse=True)
        true = best[pid]
        # ties count against the probe
        position = sum(1 for v in ranking if v >= true)
        hits += position <= n
    return hits / len(probe_ids)


def mean_classifier_bruteforce(embeddings, labels, n_classes):
    cols = []
    for c in range(n_classes):
        total = np.zeros(embeddings.shape[1], dtype=np.float64)
        for e, lab in zip(embeddings, labels):
            if lab == c:
                total = total + e
        cols.append(total / np.sqrt(sum(v * v for v in total)))
    return np.stack(cols, axis=1)


def far_threshold_exhaustive(genuine, impostor, far, block=512):
    """Vectorized exhaustive scan: false-accept count of every candidate threshold."""
    imp = np.asarray(impostor, dtype=np.float64)
    cand = np.append(np.sort(np.unique(imp)), np.inf)
    counts = np.concatenate([(imp[None, :] > cand[i : i + block, None]).sum(1)
                             for i in range(0, len(cand), block)])
    t = cand[np.flatnonzero(counts <= far * imp.size)[0]]
    return float(t), int(np.sum(np.asarray(genuine) > t))


def rank_n_sort(scores, gallery_ids, probe_ids, n):
    """Full-sort oracle over per-identity best scores, ties counted against the probe."""
    g = np.asarray(gallery_ids)
    ids = sorted(set(g.tolist()))
    best = np.stack([np.asarray(scores)[g == i].max(axis=0) for i in ids])
    true = best[[ids.index(p) for p in probe_ids], np.arange(len(probe_ids))]
    order = -np.sort(-best, axis=0)
    position = (order >= true[None, :]).sum(axis=0)
    return float(np.mean(position <= n))
