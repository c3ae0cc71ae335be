"""Independent reference computations used by the tests (plain loops, no library code)."""
from __future__ import annotations

import math

import numpy as np


def numeric_grad(f, arrays, h=1e-4):
    """Central differences of scalar ``f(arrays)`` with respect to every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            hi = f(arrays)
            a[i] = old - h
            lo = f(arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)), 1e-8)
    return num / den


def attention_loop(tp, rp, w, rmask=None):
    """impact[i, j] = exp(t_i . r_j) / sum_k exp(t_i . r_k) over unmasked j; out = impact r W."""
    nt, d = tp.shape
    nl = rp.shape[0]
    if rmask is None:
        rmask = [True] * nl
    impact = [[0.0] * nl for _ in range(nt)]
    for i in range(nt):
        scores = []
        for j in range(nl):
            s = 0.0
            for c in range(d):
                s += tp[i, c] * rp[j, c]
            scores.append(s)
        live = [scores[j] for j in range(nl) if rmask[j]]
        if not live:
            continue
        top = max(live)
        z = sum(math.exp(s - top) for s in live)
        for j in range(nl):
            if rmask[j]:
                impact[i][j] = math.exp(scores[j] - top) / z
    out = np.zeros((nt, d))
    for i in range(nt):
        filt = [0.0] * d
        for j in range(nl):
            for c in range(d):
                filt[c] += impact[i][j] * rp[j, c]
        for e in range(d):
            s = 0.0
            for c in range(d):
                s += filt[c] * w[c, e]
            out[i, e] = s
    return np.array(impact), out


def cross_entropy_loop(logits, labels, weights):
    n, c = logits.shape
    total = 0.0
    for i in range(n):
        top = max(logits[i])
        z = sum(math.exp(logits[i, k] - top) for k in range(c))
        logp = logits[i, labels[i]] - top - math.log(z)
        total += -weights[i] * logp
    return total / n


def pearson_loop(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def conv_loop(x, w, stride=1):
    """Single-image, single-channel cross-correlation."""
    h, wd = x.shape
    kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            s = 0.0
            for a in range(kh):
                for b in range(kw):
                    s += x[i * stride + a, j * stride + b] * w[a, b]
            out[i, j] = s
    return out


def simulate_rounds(n, classes):
    """Replay the 5-frame round rules with a scripted class sequence.

    Returns the (start, end) isotope index pairs of emitted features.
    """
    seq = iter(classes)
    out, i = [], 0
    while i < n:
        c = next(seq)
        if c == 0:
            i += 1
            continue
        end = min(i + c, n - 1)
        while c == 4 and end < n - 1:
            c = next(seq)
            end = min(end + c, n - 1)
        if end > i:
            out.append((i, end))
            i = end + 1
        else:
            i += 1
    return out
