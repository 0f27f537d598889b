"""CTC loss, greedy decoding and the incremental prefix scorer.

All probability arithmetic is in the natural-log domain. The prefix scorer
keeps, for a prefix ``g``, two per-frame forward variables: ``gamma_n[t]``
(alignments of frames ``0..t`` collapsing to ``g`` and ending in ``g``'s last
label) and ``gamma_b[t]`` (same, ending in blank). Extending by one token is
a single O(T) sweep.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .autodiff import Tensor, _make, log_softmax
from .errors import CtcInfeasibleError, UsageError

NEG_INF = -np.inf

# V**T alignments the brute-force oracle will enumerate before refusing
BRUTE_FORCE_LIMIT = 4**8


def log_softmax_np(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target, T, blank):
    if any(int(c) == blank for c in target):
        raise ValueError("CTC target must not contain blank")
    need = min_frames(target)
    if need > T:
        raise CtcInfeasibleError(f"target needs at least {need} frames, only {T} available")


def _ctc_nll_op(log_probs: Tensor, targets, lengths, blank: int) -> Tensor:
    """Per-utterance CTC negative log-likelihood for ``(B, T, V)`` log-probs."""
    lp = log_probs.data
    B = lp.shape[0]
    losses = np.empty(B)
    grads = np.zeros_like(lp)
    for b in range(B):
        T = int(lengths[b])
        tgt = np.asarray(targets[b], dtype=np.int64)
        _check_target(tgt, T, blank)
        losses[b], grads[b, :T] = kernels.ctc_forward_backward(lp[b, :T], tgt, blank)

    def backward(g):
        return (grads * g[:, None, None],)

    return _make(losses, (log_probs,), backward)


def ctc_loss(frame_logits, target: Sequence[int], blank: int = 0) -> Tensor:
    """-log p(target | x), summed over all alignments.

    ``frame_logits`` is ``(T, V)``; log-softmax is applied here. Returns a
    scalar Tensor that is differentiable when the logits are.
    """
    logits = frame_logits if isinstance(frame_logits, Tensor) else Tensor(frame_logits)
    if logits.ndim != 2:
        raise ValueError(f"frame_logits must be (T, V), got {logits.shape}")
    lp = log_softmax(logits.reshape((1,) + logits.shape))
    out = _ctc_nll_op(lp, [list(target)], [logits.shape[0]], blank)
    return out.reshape(())


def ctc_loss_batch(frame_logits: Tensor, targets, frame_lengths, blank: int = 0) -> Tensor:
    """``(B,)`` CTC losses for padded ``(B, T_max, V)`` logits.

    Padding frames beyond each utterance's length receive zero gradient.
    """
    return _ctc_nll_op(log_softmax(frame_logits), targets, frame_lengths, blank)


def collapse(alignment: Sequence[int], blank: int = 0) -> list[int]:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def ctc_greedy(frame_logits, blank: int = 0) -> tuple[list[int], int]:
    """Best-path decoding; the collapsed length is the predicted target length."""
    data = frame_logits.data if isinstance(frame_logits, Tensor) else np.asarray(frame_logits)
    tokens = collapse(data.argmax(axis=-1), blank)
    return tokens, len(tokens)


@dataclass(frozen=True, eq=False)
class CtcPrefixState:
    prefix: tuple[int, ...]
    gamma_n: np.ndarray
    gamma_b: np.ndarray
    prefix_logprob: float
    log_probs: np.ndarray = field(repr=False)
    blank: int = 0
    eos: int | None = None
    terminal: bool = False

    @property
    def last(self) -> int:
        return self.prefix[-1] if self.prefix else -1

    def complete_logprob(self) -> float:
        """log p(prefix is the whole output | x)."""
        return float(np.logaddexp(self.gamma_n[-1], self.gamma_b[-1]))


def prefix_init(frame_log_probs, blank: int = 0, eos: int | None = None) -> CtcPrefixState:
    """State of the empty prefix: all-blank paths, probability one overall."""
    lp = np.ascontiguousarray(frame_log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("frame log-probs must be a non-empty (T, V) matrix")
    gamma_b = np.cumsum(lp[:, blank])
    gamma_n = np.full(lp.shape[0], NEG_INF)
    return CtcPrefixState((), gamma_n, gamma_b, 0.0, lp, blank, eos)


def prefix_scores(state: CtcPrefixState, cands) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw kernel call: prefix log-probs and forward variables for each candidate."""
    if state.terminal:
        raise UsageError("cannot extend a completed (eos-terminated) prefix")
    return kernels.prefix_extend(state.log_probs, state.gamma_n, state.gamma_b,
                                 state.last, np.asarray(cands, dtype=np.int64), state.blank)


def prefix_extend(state: CtcPrefixState, c: int) -> tuple[float, CtcPrefixState]:
    """Score ``prefix + c`` and return its state.

    Extending by the state's eos id returns the log-probability that the
    prefix is the complete output, with a terminal state.
    """
    if state.terminal:
        raise UsageError("cannot extend a completed (eos-terminated) prefix")
    if c == state.blank:
        raise ValueError("cannot extend a prefix by blank")
    if state.eos is not None and c == state.eos:
        score = state.complete_logprob()
        return score, CtcPrefixState(state.prefix + (c,), state.gamma_n, state.gamma_b, score,
                                     state.log_probs, state.blank, state.eos, terminal=True)
    psi, new_n, new_b = prefix_scores(state, [c])
    score = float(psi[0])
    return score, CtcPrefixState(state.prefix + (int(c),), new_n[0], new_b[0], score,
                                 state.log_probs, state.blank, state.eos)


def alignment_masses(frame_log_probs, blank: int = 0) -> dict[tuple[int, ...], float]:
    """Enumerate every alignment; log total mass of each collapsed output.

    Columns whose log-probability is -inf in every frame are skipped, so
    instances with zero-mass units stay cheap. Refuses instances with more
    than ``BRUTE_FORCE_LIMIT`` alignments.
    """
    lp = np.ascontiguousarray(frame_log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError("expected a (T, V) matrix")
    return dict(_masses(lp.tobytes(), lp.shape, blank))


@functools.lru_cache(maxsize=64)
def _masses(raw: bytes, shape: tuple[int, int], blank: int) -> tuple[tuple[tuple[int, ...], float], ...]:
    # keyed on the raw bytes so that many prefix queries on one instance share the enumeration
    lp = np.frombuffer(raw, dtype=np.float64).reshape(shape)
    T, V = shape
    active = [k for k in range(V) if np.isfinite(lp[:, k]).any()]
    if len(active) ** T > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force over {len(active)}^{T} alignments refused "
                         f"(limit {BRUTE_FORCE_LIMIT})")
    paths = np.array(list(itertools.product(active, repeat=T)), dtype=np.intp).reshape(-1, T)
    with np.errstate(invalid="ignore"):
        scores = lp[np.arange(T), paths].sum(axis=1)
    buckets: dict[tuple[int, ...], list[float]] = {}
    for path, score in zip(paths.tolist(), scores.tolist()):
        if score == NEG_INF:
            continue
        buckets.setdefault(tuple(collapse(path, blank)), []).append(score)
    out = []
    for key, vals in buckets.items():
        v = np.array(vals)
        m = v.max()
        out.append((key, float(m + np.log(np.exp(v - m).sum()))))
    return tuple(out)


def brute_force_prefix(frame_log_probs, prefix: Sequence[int], complete: bool = False,
                       blank: int = 0) -> float:
    """log of the total mass of alignments whose collapse starts with (or,
    with ``complete=True``, equals) ``prefix``."""
    prefix = tuple(int(p) for p in prefix)
    masses = alignment_masses(frame_log_probs, blank)
    n = len(prefix)
    if complete:
        vals = [masses[prefix]] if prefix in masses else []
    else:
        vals = [v for k, v in masses.items() if k[:n] == prefix]
    if not vals:
        return NEG_INF
    v = np.array(vals)
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))
