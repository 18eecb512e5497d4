"""Straight-line per-element reference for entropy and selective voting.

Deliberately written with Python loops and the math module only, so it
shares no code path with the tensor implementation it checks.
"""

import math


def binary_entropy(p):
    h = 0.0
    for q in (p, 1.0 - p):
        if q > 0.0:
            h -= q * math.log(q)
    return h


def entropy_grid(grid):
    return [[binary_entropy(v) for v in row] for row in grid]


def grid_mean(grid):
    values = [v for row in grid for v in row]
    return sum(values) / len(values)


def selective_vote(p, p_augs, alpha, delta, lambda1, lambda2, threshold=0.5):
    """Return (H, H_S, Z, U, enhanced) for one image given as nested lists."""
    h = entropy_grid(p)
    h_augs = [entropy_grid(q) for q in p_augs]
    kept = [g for g in h_augs if grid_mean(g) >= delta] or h_augs
    rows, cols = len(p), len(p[0])
    fused = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            if kept:
                agg = sum(g[i][j] for g in kept) / len(kept)
                fused[i][j] = alpha * h[i][j] + (1 - alpha) * agg
            else:
                fused[i][j] = h[i][j]
    lo = min(v for row in fused for v in row)
    hi = max(v for row in fused for v in row)
    h_s = [[(v - lo) / (hi - lo) if hi > lo else 0.0 for v in row] for row in fused]
    z = [[1 if v >= 0.5 else 0 for v in row] for row in h_s]
    u = [[1 if lambda1 < v < lambda2 else 0 for v in row] for row in p]
    base = [[1 if v >= threshold else 0 for v in row] for row in p]
    enhanced = [[1 if base[i][j] == 1 or (z[i][j] == 1 and u[i][j] == 1) else 0 for j in range(cols)] for i in range(rows)]
    return h, h_s, z, u, enhanced
