"""Independent reference implementations used only by the tests.

Each one is deliberately naive and shares no code path with the package
function it checks.
"""

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for x in range(k):
                s += a[i, x] * b[x, j]
            out[i, j] = s
    return out


def attention_loops(q, k, v, heads, p):
    """Per-head, per-query reference for multi-head attention."""
    P = {n: np.asarray(t.data if hasattr(t, "data") else t) for n, t in p.items()}
    q, k, v = (np.asarray(x) for x in (q, k, v))
    L, d = q.shape
    T = k.shape[0]
    dk = d // heads
    Q = q @ P["wq"] + P["bq"]
    K = k @ P["wk"] + P["bk"]
    Vv = v @ P["wv"] + P["bv"]
    ctx = np.zeros((L, d))
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        for i in range(L):
            scores = []
            for j in range(T):
                scores.append(sum(Q[i, x] * K[j, x] for x in range(lo, hi)) / math.sqrt(dk))
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for j in range(T):
                ctx[i, lo:hi] += (w[j] / z) * Vv[j, lo:hi]
    return ctx @ P["wo"] + P["bo"]


def collapse_ref(path, blank=0):
    out = []
    for i, a in enumerate(path):
        if a == blank:
            continue
        if i > 0 and path[i - 1] == a:
            continue
        out.append(a)
    return out


def complete_probs(log_probs, blank=0):
    """{output sequence: probability} by enumerating all alignments."""
    T, V = log_probs.shape
    probs = np.exp(log_probs)
    out = {}
    for path in itertools.product(range(V), repeat=T):
        p = 1.0
        for t, k in enumerate(path):
            p *= probs[t, k]
        key = tuple(collapse_ref(list(path), blank))
        out[key] = out.get(key, 0.0) + p
    return out


def prefix_prob(table, prefix):
    n = len(prefix)
    return sum(p for k, p in table.items() if k[:n] == tuple(prefix))


def exhaustive_joint_argmax(table, att_log_probs, L_hat, real_ids, eos, mu, L_max,
                            eos_prob=0.9):
    """Best eos-terminated sequence over every sequence the search can emit.

    ``table`` maps output sequences to CTC probabilities. A hypothesis
    completed at step l holds l - 1 real tokens, so lengths 0..L_max-1.
    """
    n_real = len(real_ids)

    def att(l, c):
        if l <= L_hat:
            return att_log_probs[l - 1, c]
        return math.log(eos_prob) if c == eos else math.log((1 - eos_prob) / n_real)

    best = None
    for n in range(L_max):
        for seq in itertools.product(real_ids, repeat=n):
            p = table.get(tuple(seq), 0.0)
            a_ctc = math.log(p) if p > 0 else -math.inf
            a_att = sum(att(i + 1, c) for i, c in enumerate(seq)) + att(n + 1, eos)
            if mu == 0:
                score = a_att
            elif mu == 1:
                score = a_ctc
            else:
                score = mu * a_ctc + (1 - mu) * a_att
            if best is None or score > best[0]:
                best = (score, tuple(seq))
    return best


def log_softmax_ref(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        m = max(row)
        z = math.log(sum(math.exp(r - m) for r in row))
        out[idx] = row - m - z
    return out
