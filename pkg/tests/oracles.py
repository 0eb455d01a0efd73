"""Brute-force reference implementations written with explicit loops."""

import math


def beat_align_oracle(kinematic, reference, sigma=3.0):
    if not kinematic:
        return 0.0
    total = 0.0
    for b in kinematic:
        best = None
        for r in reference:
            d = abs(b - r)
            if best is None or d < best:
                best = d
        total += math.exp(-best * best / (2 * sigma * sigma))
    return total / len(kinematic)


def f1_oracle(kinematic, reference, theta):
    if not kinematic or not reference:
        return 0.0, 0.0, 0.0
    tp_p = 0
    for b in kinematic:
        if min(abs(b - r) for r in reference) < theta:
            tp_p += 1
    tp_r = 0
    for r in reference:
        if min(abs(b - r) for b in kinematic) < theta:
            tp_r += 1
    p = tp_p / len(kinematic)
    r = tp_r / len(reference)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def random_instance(rng, max_beats=50, span=2000):
    """Two sorted lists of distinct frame indices (kinematic may be empty)."""
    nk = int(rng.integers(0, max_beats + 1))
    nr = int(rng.integers(1, max_beats + 1))
    bk = sorted(int(x) for x in rng.choice(span, size=nk, replace=False))
    br = sorted(int(x) for x in rng.choice(span, size=nr, replace=False))
    return bk, br
