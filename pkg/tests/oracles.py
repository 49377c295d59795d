"""Independent reference implementations used as test oracles (plain Python loops, no sorting)."""

import itertools
import math


def triplet_oracle(e, labels, margin: float) -> tuple[float, int]:
    """Enumerate every (anchor, positive, negative) triple for every part."""
    b, _, parts = e.shape
    values, count = [], 0
    for a, p, n in itertools.product(range(b), repeat=3):
        if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
            continue
        count += 1
        for k in range(parts):
            d_ap = math.sqrt(sum((e[a, c, k] - e[p, c, k]) ** 2 for c in range(e.shape[1])))
            d_an = math.sqrt(sum((e[a, c, k] - e[n, c, k]) ** 2 for c in range(e.shape[1])))
            values.append(max(d_ap - d_an + margin, 0.0))
    return (sum(values) / len(values) if values else 0.0), count


def ce_oracle(logits, labels) -> float:
    b, _, parts = logits.shape
    total = 0.0
    for i in range(b):
        for p in range(parts):
            z = logits[i, :, p]
            total -= z[labels[i]] - math.log(sum(math.exp(v) for v in z))
    return total / (b * parts)


def brute_force(dist, pl, gl, excl):
    """Sort-free reference: a gallery item's rank counts the kept items ahead of it (ties by index)."""
    out = {"first": [], "ap": [], "inp": []}
    for i in range(len(pl)):
        keep = [j for j in range(len(gl)) if not excl[i][j]]
        match_ranks = []
        for j in keep:
            if gl[j] != pl[i]:
                continue
            ahead = sum(1 for m in keep if dist[i][m] < dist[i][j] or (dist[i][m] == dist[i][j] and m < j))
            match_ranks.append(ahead + 1)
        if not match_ranks:
            continue
        match_ranks.sort()
        out["first"].append(match_ranks[0])
        out["ap"].append(sum((n + 1) / r for n, r in enumerate(match_ranks)) / len(match_ranks))
        out["inp"].append(len(match_ranks) / match_ranks[-1])
    return out


def matmul_oracle(coef, coords):
    """vertices[n, v, c] = sum_k coef[n, v, k] * coords[n, k, c], one scalar at a time."""
    n_batch, n_vert, n_kp = len(coef), len(coef[0]), len(coef[0][0])
    out = [[[0.0] * 3 for _ in range(n_vert)] for _ in range(n_batch)]
    for n in range(n_batch):
        for v in range(n_vert):
            row = coef[n][v]
            for c in range(3):
                acc = 0.0
                for k in range(n_kp):
                    acc += row[k] * coords[n][k][c]
                out[n][v][c] = acc
    return out
