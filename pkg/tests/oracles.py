"""Independent reference implementations used as test oracles.

They favour obviousness over speed: plain loops, explicit column subsets and
exhaustive enumeration.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_knn(references, query, j, K):
    """K nearest references to ``query`` ignoring column j; ties by ascending index."""
    refs = np.asarray(references, float)
    q = np.asarray(query, float)
    keep = [c for c in range(q.shape[1]) if c != j]
    dists = []
    for i, ref in enumerate(refs):
        diff = ref[:, keep] - q[:, keep]
        dists.append((math.sqrt(float(np.sum(diff * diff))), i))
    dists.sort()
    return [i for _, i in dists[:K]], [d for d, _ in dists[:K]]


def brute_w1(P, Q):
    """Minimum over all permutations of the mean matched Euclidean distance."""
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    n = len(P)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(math.sqrt(float(np.sum((P[i] - Q[perm[i]]) ** 2))) for i in range(n))
        best = min(best, cost / n)
    return best


def brute_recall(ranking, S, K):
    top = list(ranking)[:K]
    return sum(1 for j in S if j in top) / len(S)


def brute_cw(scores, ranking, S, K):
    total = sum(abs(s) for s in scores)
    if total == 0:
        return 0.0
    top = list(ranking)[:K]
    return sum(abs(scores[j]) / total for j in S if j in top) / len(S)
