"""Cache-based joint CTC/attention beam search.

The NAR network is run once per utterance at the CTC-predicted length
``L_hat``; its log-softmaxed fused logits form a :class:`ScoreCache`. The
search then grows hypotheses one token per step, scoring each extension as

    joint = mu * log p_ctc(prefix, ... | x) + (1 - mu) * sum of cached token scores

Past ``L_hat`` the cache is exhausted and a fixed distribution takes over:
eos gets ``eos_forced_prob``, every real token shares the rest evenly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctc import CtcPrefixState, log_softmax_np, prefix_init, prefix_scores
from .errors import ConfigurationError, ContractViolation
from .model import ForwardTrace
from .vocab import Vocabulary


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 10
    mu: float = 0.3
    L_max: int | None = None  # None: max(2 * L_hat, L_hat + 10)
    eos_forced_prob: float = 0.9
    end_detect_margin: float = 10.0
    end_detect_window: int = 3
    end_detect: bool = True
    # False reproduces the literal per-token attention term (no accumulation)
    cumulative_attention: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"mu must lie in [0, 1], got {self.mu}")
        if self.beam_width < 1:
            raise ConfigurationError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.L_max is not None and self.L_max < 1:
            raise ConfigurationError(f"L_max must be >= 1, got {self.L_max}")
        if not 0.0 < self.eos_forced_prob < 1.0:
            raise ConfigurationError(f"eos_forced_prob must lie in (0, 1), got {self.eos_forced_prob}")
        if self.end_detect_window < 1:
            raise ConfigurationError("end_detect_window must be >= 1")

    def max_length(self, L_hat: int) -> int:
        if self.L_max is not None:
            return self.L_max
        return max(2 * L_hat, L_hat + 10)


@dataclass(frozen=True, eq=False)
class ScoreCache:
    att_log_probs: np.ndarray  # (L_hat, V)
    L_hat: int
    eos_id: int
    num_real: int
    forward_pass_count: int = 1


def build_cache(trace: ForwardTrace, L_hat: int, vocab: Vocabulary) -> ScoreCache:
    rows = trace.L_f.shape[-2]
    if rows != L_hat:
        raise ContractViolation(f"trace has {rows} token positions but L_hat={L_hat}")
    att = log_softmax_np(trace.L_f.data) if L_hat else np.zeros((0, vocab.V))
    att.setflags(write=False)
    return ScoreCache(att, L_hat, vocab.eos_id, vocab.num_real, trace.forward_passes)


def forced_scores(config: DecodeConfig, num_real: int) -> tuple[float, float]:
    """(eos, non-eos) log-scores used beyond the cached length."""
    return math.log(config.eos_forced_prob), math.log((1.0 - config.eos_forced_prob) / num_real)


def token_score(cache: ScoreCache, l: int, c: int, config: DecodeConfig) -> float:
    """Attention log-score of token ``c`` at 1-based position ``l``."""
    if l < 1:
        raise ValueError("positions are 1-based")
    if l <= cache.L_hat:
        return float(cache.att_log_probs[l - 1, c])
    eos_score, other = forced_scores(config, cache.num_real)
    return eos_score if c == cache.eos_id else other


def _score_row(cache, l, cands, config):
    if l <= cache.L_hat:
        row = cache.att_log_probs[l - 1]
        return row[cands], float(row[cache.eos_id])
    eos_score, other = forced_scores(config, cache.num_real)
    return np.full(len(cands), other), eos_score


def _combine(mu, a_ctc, a_att):
    # zero-weighted terms are dropped so that -inf * 0 never yields NaN
    if mu == 0.0:
        return a_att
    if mu == 1.0:
        return a_ctc
    return mu * a_ctc + (1.0 - mu) * a_att


@dataclass(frozen=True, eq=False)
class Hypothesis:
    tokens: tuple[int, ...]
    alpha_ctc: float
    alpha_att: float
    joint: float
    ctc_state: CtcPrefixState = field(repr=False)

    @property
    def complete(self) -> bool:
        return self.ctc_state.terminal


def rank_key(h: Hypothesis):
    """Sort key: best joint first, then shorter, then lexicographic ids."""
    return (-h.joint, len(h.tokens), h.tokens)


def prune(queue: list[Hypothesis], beam_width: int) -> list[Hypothesis]:
    if len(queue) <= beam_width:
        return list(queue)
    return sorted(queue, key=rank_key)[:beam_width]


def end_detect(completed: list[Hypothesis], l: int, config: DecodeConfig) -> bool:
    """True when each of the last M lengths' best completion trails the global
    best completion by more than D. A length without completions does not
    count towards M."""
    if not completed:
        return False
    best = max(h.joint for h in completed)
    best_at: dict[int, float] = {}
    for h in completed:
        n = len(h.tokens)
        if h.joint > best_at.get(n, -np.inf):
            best_at[n] = h.joint
    for m in range(config.end_detect_window):
        score = best_at.get(l - m)
        if score is None or not score - best < -config.end_detect_margin:
            return False
    return True


@dataclass
class DecodeResult:
    best: Hypothesis
    completed: list[Hypothesis]
    degraded: bool = False
    steps: int = 0
    cache_lookups: int = 0
    extensions: int = 0

    @property
    def tokens(self) -> list[int]:
        """Output ids without the trailing eos."""
        toks = list(self.best.tokens)
        if toks and toks[-1] == self.best.ctc_state.eos:
            toks.pop()
        return toks


def joint_decode(frame_log_probs, cache: ScoreCache, config: DecodeConfig,
                 vocab: Vocabulary) -> DecodeResult:
    """Length-synchronous beam search over the cached attention scores.

    Completed (eos-terminated) hypotheses are never pruned or re-extended;
    the highest joint score among them is returned.
    """
    lp = np.asarray(frame_log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("joint_decode needs non-empty (T, V) frame log-probabilities")
    mu = config.mu
    eos = vocab.eos_id
    cands = np.array(vocab.real_ids, dtype=np.int64)
    cand_list = cands.tolist()
    root = Hypothesis((), 0.0, 0.0, 0.0, prefix_init(lp, vocab.blank_id, eos))
    partial = [root]
    completed: list[Hypothesis] = []
    result = DecodeResult(root, completed)
    L_max = config.max_length(cache.L_hat)

    for l in range(1, L_max + 1):
        if not partial:
            break
        result.steps = l
        if l <= cache.L_hat:
            result.cache_lookups += 1
        row, eos_score = _score_row(cache, l, cands, config)
        joints, alphas_ctc, alphas_att, kernels_out = [], [], [], []
        for g in partial:
            base = g.alpha_att if config.cumulative_attention else 0.0
            st = g.ctc_state
            a_ctc = st.complete_logprob()
            a_att = base + eos_score
            done_state = CtcPrefixState(g.tokens + (eos,), st.gamma_n, st.gamma_b, a_ctc,
                                        st.log_probs, st.blank, st.eos, terminal=True)
            completed.append(Hypothesis(g.tokens + (eos,), a_ctc, a_att,
                                        _combine(mu, a_ctc, a_att), done_state))
            psi, new_n, new_b = prefix_scores(st, cands)
            att = base + row
            joints.append(_combine(mu, psi, att))
            alphas_ctc.append(psi)
            alphas_att.append(att)
            kernels_out.append((new_n, new_b))
            result.extensions += len(cands) + 1

        joint = np.concatenate(joints)
        n_c = len(cands)
        if len(joint) > config.beam_width:
            thresh = np.partition(joint, len(joint) - config.beam_width)[len(joint) - config.beam_width]
            pool = np.nonzero(joint >= thresh)[0] if np.isfinite(thresh) else np.arange(len(joint))
        else:
            pool = np.arange(len(joint))
        ranked = sorted(pool.tolist(),
                        key=lambda i: (-joint[i], partial[i // n_c].tokens + (cand_list[i % n_c],)))
        survivors = []
        for i in ranked[: config.beam_width]:
            gi, ci = divmod(i, n_c)
            g = partial[gi]
            new_n, new_b = kernels_out[gi]
            toks = g.tokens + (cand_list[ci],)
            st = g.ctc_state
            state = CtcPrefixState(toks, new_n[ci], new_b[ci], float(alphas_ctc[gi][ci]),
                                   st.log_probs, st.blank, st.eos)
            survivors.append(Hypothesis(toks, float(alphas_ctc[gi][ci]), float(alphas_att[gi][ci]),
                                        float(joint[i]), state))
        partial = survivors
        if config.end_detect and end_detect(completed, l, config):
            break

    if completed:
        result.best = min(completed, key=rank_key)
    else:
        g = min(partial, key=rank_key)
        st = g.ctc_state
        state = CtcPrefixState(g.tokens + (eos,), st.gamma_n, st.gamma_b, g.alpha_ctc,
                               st.log_probs, st.blank, st.eos, terminal=True)
        result.best = Hypothesis(g.tokens + (eos,), g.alpha_ctc, g.alpha_att, g.joint, state)
        result.degraded = True
    return result


def greedy_tokens(trace: ForwardTrace, vocab: Vocabulary) -> list[int]:
    """Pure NAR output: per-position argmax of the fused logits over real tokens."""
    if trace.L_f.shape[-2] == 0:
        return []
    real = np.array(vocab.real_ids)
    return real[trace.L_f.data[:, real].argmax(axis=-1)].tolist()
