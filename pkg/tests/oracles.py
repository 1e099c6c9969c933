"""Independent brute-force references shared by the unit and acceptance tests.

These deliberately avoid the package's code paths: loops, Fractions, float64.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def otsu_exhaustive(values, bins=256):
    """(boundary, threshold, bits) by scanning every boundary with exact
    between-class variance on bin-centre values. None boundary for constant maps."""
    x = [float(v) for v in np.ravel(values)]
    lo, hi = min(x), max(x)
    if lo == hi:
        return None, None, [0] * len(x)
    idx = [min(max(math.floor((v - lo) / (hi - lo) * bins), 0), bins - 1) for v in x]
    # exact rationals on bin centres (k + 1/2); the affine map to real centres
    # does not change the argmax
    n = len(x)
    counts = [0] * bins
    for i in idx:
        counts[i] += 1
    best, best_k = None, None
    for k in range(1, bins):
        n0 = sum(counts[:k])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        # twice the class sums of bin centres, as integers
        s0 = sum((2 * i + 1) * counts[i] for i in range(k))
        s1 = sum((2 * i + 1) * counts[i] for i in range(k, bins))
        w0, w1 = Fraction(n0, n), Fraction(n1, n)
        var_b = w0 * w1 * (Fraction(s0, 2 * n0) - Fraction(s1, 2 * n1)) ** 2
        if best is None or var_b > best:
            best, best_k = var_b, k
    threshold = lo + best_k * (hi - lo) / bins
    return best_k, threshold, [1 if v > threshold else 0 for v in x]


def first_occurrence_sets(scene_casts):
    """(present, new, old) per scene by scanning scene order."""
    out = []
    for i, cast in enumerate(scene_casts):
        earlier = set()
        for j in range(i):
            earlier |= set(scene_casts[j])
        cast = set(cast)
        out.append((cast, {c for c in cast if c not in earlier}, {c for c in cast if c in earlier}))
    return out


def lowest_cv_assignment(bits_list, cvs, ids):
    """Per cell, keep the claimant with the lowest (cv, id)."""
    n = len(bits_list[0])
    out = [[0] * n for _ in bits_list]
    for cell in range(n):
        claim = [m for m in range(len(bits_list)) if bits_list[m][cell]]
        if claim:
            win = min(claim, key=lambda m: (cvs[m], ids[m]))
            out[win][cell] = 1
    return out


def normalize_map_ref(values):
    x = [float(v) for v in np.ravel(values)]
    peak = max(x)
    if peak == 0:
        return [0.0] * len(x)
    s = sorted(x)
    mid = len(s) // 2
    med = s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2
    return [min(max((v - med) / peak, 0.0), 1.0) for v in x]


def softmax64(logits):
    m = max(logits)
    e = [0.0 if v == -math.inf else math.exp(v - m) for v in logits]
    z = sum(e)
    return [v / z for v in e]


def isolated_attention_ref(tokens, wq, wk, wv, refs, masks, rws):
    """Float64 composition of concat, isolation, softmax, reweight.

    ``refs``/``masks``/``rws`` are dicts keyed by character id; reference
    columns follow ascending id order.
    """
    I = np.asarray(tokens, np.float64)
    hw, d = I.shape
    q = I @ np.asarray(wq, np.float64)
    cids = sorted(refs)
    ctx = np.concatenate([I] + [np.asarray(refs[c], np.float64) for c in cids])
    k = ctx @ np.asarray(wk, np.float64)
    v = ctx @ np.asarray(wv, np.float64)
    cols = {}
    start = hw
    for c in cids:
        cols[c] = range(start, start + len(refs[c]))
        start += len(refs[c])
    weights = np.zeros((hw, start))
    for r in range(hw):
        logits = []
        for j in range(start):
            s = float(q[r] @ k[j]) / math.sqrt(q.shape[1])
            for c in cids:
                if j in cols[c] and not masks[c][r]:
                    s = -math.inf
            logits.append(s)
        row = softmax64(logits)
        for c in cids:
            if masks[c][r] and c in rws:
                row = [row[j] * rws[c][j] if j < hw else row[j] for j in range(start)]
                z = sum(row)
                row = [x / z for x in row]
        weights[r] = row
    return weights, weights @ v


def cosine64(a, b):
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


NAME_POOL = ["Ava", "Bram", "Cleo", "Dax", "Esme", "Finn", "Old Tom", "Lady Mae"]
FILLER = ["walks", "the", "river", "quietly", "laughs", "near", "a", "tower", "at", "night", "with", "lantern"]


def random_script(rng, n_chars, n_scenes):
    """Script text plus the cast (character ids) of each scene."""
    names = list(rng.choice(NAME_POOL, size=n_chars, replace=False))
    lines = [f"character {n}: {' '.join(rng.choice(FILLER, size=4))}" for n in names]
    casts = []
    for _ in range(n_scenes):
        cast = sorted(int(i) for i in np.flatnonzero(rng.random(n_chars) < 0.5))
        words = list(rng.choice(FILLER, size=int(rng.integers(2, 7))))
        for cid in cast:
            words.insert(int(rng.integers(0, len(words) + 1)), names[cid])
        lines.append("scene: " + " ".join(words))
        casts.append(cast)
    return "\n".join(lines) + "\n", casts
