"""Deliberately naive reference implementations used as test oracles."""

import math


def naive_repetition(tokens, max_period=8, min_repeats=3):
    """Try every period and every repeat count by direct slicing.

    Returns ``(period, ngram, repeats)`` or ``None``.
    """
    seq = list(tokens)
    T = len(seq)
    for q in range(1, max_period + 1):
        if q * min_repeats > T:
            continue
        gram = seq[T - q:]
        best = 0
        for r in range(1, T // q + 1):
            if seq[T - r * q:] == gram * r:
                best = r
            else:
                break
        if best >= min_repeats:
            return q, tuple(gram), best
    return None


def naive_trajectory_entropy(probs):
    """Mean over steps of ``-sum p log2 p``, one scalar at a time."""
    total = 0.0
    for row in probs:
        h = 0.0
        for p in row:
            if p > 0:
                h -= p * math.log2(p)
        total += h
    return total / len(probs)


def naive_anchor(matrix, table):
    """Per-row softmax of inner products, computed with explicit loops."""
    out = []
    for v in matrix:
        scores = []
        for e in table:
            s = 0.0
            for a, b in zip(v, e):
                s += a * b
            scores.append(s)
        m = max(scores)
        ex = [math.exp(s - m) for s in scores]
        z = sum(ex)
        out.append([x / z for x in ex])
    return out
