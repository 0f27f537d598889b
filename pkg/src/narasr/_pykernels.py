"""Pure numpy implementations of the hot CTC kernels.

Loops run over frames; the inner dimension (label states or candidate
tokens) is vectorised. :mod:`narasr._ckernels` mirrors these signatures.
"""

import numpy as np

NEG_INF = -np.inf


def ctc_forward_backward(log_probs, target, blank):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is ``(T, V)`` frame log-posteriors. The caller guarantees
    the target is alignable in ``T`` frames.
    """
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, V = log_probs.shape
    S = 2 * len(target) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)  # s may be entered from s - 2
    if len(target) > 1:
        skip[3::2] = target[1:] != target[:-1]

    y = log_probs[:, ext]  # (T, S)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = y[0, 0]
    if S > 1:
        alpha[0, 1] = y[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + y[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = y[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = y[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + y[t]

    if S > 1:
        loglik = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        loglik = alpha[T - 1, 0]
    occ_states = np.exp(alpha + beta - y - loglik)
    grad = np.zeros((T, V))
    for s in range(S):
        grad[:, ext[s]] -= occ_states[:, s]
    return float(-loglik), grad


def prefix_extend(log_probs, r_n, r_b, last, cands, blank):
    """Extend one CTC prefix by every token in ``cands`` at once.

    ``r_n``/``r_b`` are the prefix's forward variables (alignments ending in
    its last label / in blank, per frame); ``last`` is its last label or -1
    for the empty prefix. Returns ``(psi, r_n_new, r_b_new)`` where ``psi[i]``
    is the log prefix probability of ``prefix + cands[i]`` and the new
    forward variables have shape ``(len(cands), T)``.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    cands = np.asarray(cands, dtype=np.int64)
    T = log_probs.shape[0]
    n = len(cands)
    yc = log_probs[:, cands]  # (T, n)
    yb = log_probs[:, blank]
    phi = np.repeat(r_b[:, None], n, axis=1)
    differ = cands != last
    if differ.any():
        phi[:, differ] = np.logaddexp(r_b, r_n)[:, None]

    new_n = np.full((T, n), NEG_INF)
    new_b = np.full((T, n), NEG_INF)
    if last < 0:
        new_n[0] = yc[0]
    for t in range(1, T):
        new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + yc[t]
        new_b[t] = np.logaddexp(new_n[t - 1], new_b[t - 1]) + yb[t]
    if T > 1:
        terms = np.vstack([new_n[:1], phi[:-1] + yc[1:]])
    else:
        terms = new_n[:1]
    m = terms.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        psi = safe + np.log(np.exp(terms - safe).sum(axis=0))
    psi = np.where(np.isfinite(m), psi, NEG_INF)
    return psi, np.ascontiguousarray(new_n.T), np.ascontiguousarray(new_b.T)
