"""Plain-python reference implementations used as test oracles."""


def brute_force_retrieval(dist, q_pids, g_pids, q_cams, g_cams, max_rank):
    """mAP and CMC by explicit counting: rank = 1 + items strictly ahead under (distance, index)."""
    aps, firsts, n_valid = [], [], 0
    for i in range(len(q_pids)):
        items = [j for j in range(len(g_pids)) if not (g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i])]
        ranks = {}
        for j in items:
            ahead = 0
            for m in items:
                if dist[i][m] < dist[i][j] or (dist[i][m] == dist[i][j] and m < j):
                    ahead += 1
            ranks[j] = ahead + 1
        hit_ranks = sorted(ranks[j] for j in items if g_pids[j] == q_pids[i])
        if not hit_ranks:
            continue
        n_valid += 1
        precisions = [(n + 1) / r for n, r in enumerate(hit_ranks)]
        aps.append(sum(precisions) / len(precisions))
        firsts.append(hit_ranks[0])
    if not n_valid:
        return 0.0, [0.0] * max_rank, 0
    cmc = [sum(1 for f in firsts if f <= k) / n_valid for k in range(1, max_rank + 1)]
    return sum(aps) / n_valid, cmc, n_valid


def random_instance(rng):
    nq, ng = int(rng.integers(1, 6)), int(rng.integers(1, 12))
    ids, cams = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    # coarse grid so ties occur
    dist = rng.integers(0, 6, (nq, ng)).astype(float) / 5
    return (dist, rng.integers(0, ids, nq), rng.integers(0, ids, ng),
            rng.integers(0, cams, nq), rng.integers(0, cams, ng))
