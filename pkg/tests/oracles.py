"""Independent brute-force references shared by unit and acceptance tests."""

import math

import numpy as np

from alignkit.records import Choice


def pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def ranks(x):
    # rank = 1 + (#strictly smaller) + (#equal others) / 2, counted pair by pair
    return [1 + sum(b < a for b in x) + 0.5 * (sum(b == a for b in x) - 1) for a in x]


def spearman(x, y):
    return pearson(ranks(x), ranks(y))


def kendall_b(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0:
                tx += 1
            if dy == 0:
                ty += 1
            if dx * dy > 0:
                conc += 1
            elif dx * dy < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def random_vectors(seed, count=1000):
    """Score vectors of length 3..50; every other one is integer-valued so ties are common."""
    rng = np.random.default_rng(seed)
    for k in range(count):
        n = int(rng.integers(3, 51))
        if k % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if len(set(x)) > 1 and len(set(y)) > 1:
            yield list(x), list(y)


def advantages(r):
    r = np.asarray(r, dtype=float)
    mu = sum(r) / len(r)
    var = sum((x - mu) ** 2 for x in r) / len(r)
    return (r - mu) / math.sqrt(var)


def table_judge(outcomes):
    """Judge answering from {(i, j): Choice} keyed by candidate index, first coordinate = index."""

    def judge(a, b, prompt_id):
        i, j = int(a[0]), int(b[0])
        if (i, j) in outcomes:
            return outcomes[(i, j)]
        return Choice.B if outcomes[(j, i)] is Choice.A else Choice.A

    return judge


def tournament(n, outcomes):
    """(winner, loser) by win count with lowest-index tie-breaks; (0, 1) when all counts agree."""
    wins = [0] * n
    for (i, j), v in outcomes.items():
        wins[i if v is Choice.A else j] += 1
    best, worst = max(wins), min(wins)
    if best == worst:
        return 0, 1
    return min(k for k in range(n) if wins[k] == best), min(k for k in range(n) if wins[k] == worst)
