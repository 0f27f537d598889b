"""Corpus-level decoding, scoring and timing."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ctc import log_softmax_np
from .decoder import DecodeConfig, build_cache, greedy_tokens, joint_decode
from .model import ModelParams, PassCounter, infer
from .vocab import ErrorCounts, edit_distance

MODES = ("greedy", "joint")


@dataclass
class UtteranceResult:
    utt_id: str
    tokens: list[int]
    seconds: float
    forward_passes: int
    L_hat: int
    degraded: bool = False
    cache_lookups: int = 0


def decode_utterance(features, params: ModelParams, mode: str, config: DecodeConfig,
                     utt_id: str = "") -> UtteranceResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    counter = PassCounter()
    t0 = time.perf_counter()
    trace, L_hat = infer(features, params, counter)
    degraded = False
    lookups = 0
    if mode == "greedy":
        tokens = greedy_tokens(trace, params.vocab)
    else:
        cache = build_cache(trace, L_hat, params.vocab)
        res = joint_decode(log_softmax_np(trace.frame_logits.data), cache, config, params.vocab)
        tokens, degraded, lookups = res.tokens, res.degraded, res.cache_lookups
    return UtteranceResult(utt_id, tokens, time.perf_counter() - t0, counter.count, L_hat,
                           degraded, lookups)


@dataclass
class CorpusResult:
    mode: str
    results: list[UtteranceResult]
    counts: ErrorCounts = field(default_factory=ErrorCounts)

    @property
    def cer(self) -> float:
        return self.counts.rate

    @property
    def hypotheses(self) -> list[list[int]]:
        return [r.tokens for r in self.results]

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.results]))

    @property
    def forward_passes(self) -> list[int]:
        return [r.forward_passes for r in self.results]


def decode_corpus(params: ModelParams, utterances, mode: str, config: DecodeConfig | None = None,
                  workers: int = 1) -> CorpusResult:
    """Decode every utterance; results stay in input order whatever ``workers`` is."""
    config = config or DecodeConfig()

    def one(u):
        return decode_utterance(u.features, params, mode, config, u.utt_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, utterances))
    else:
        results = [one(u) for u in utterances]
    counts = ErrorCounts()
    for u, r in zip(utterances, results):
        counts = counts + edit_distance(u.tokens, r.tokens)
    return CorpusResult(mode, results, counts)


@dataclass
class BenchReport:
    n_utterances: int
    beam_width: int
    greedy_mean_s: float
    joint_mean_s: float
    greedy_passes_per_utt: float
    joint_passes_per_utt: float
    mean_L_hat: float
    naive_ar_evals_per_utt: float
    greedy_cer: float
    joint_cer: float

    @property
    def ratio(self) -> float:
        return self.joint_mean_s / self.greedy_mean_s

    def table(self) -> str:
        rows = [
            ("mode", "mean ms/utt", "forward passes/utt", "CER"),
            ("greedy", f"{1e3 * self.greedy_mean_s:.3f}", f"{self.greedy_passes_per_utt:.2f}",
             f"{self.greedy_cer:.4f}"),
            (f"joint (beam {self.beam_width})", f"{1e3 * self.joint_mean_s:.3f}",
             f"{self.joint_passes_per_utt:.2f}", f"{self.joint_cer:.4f}"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"joint/greedy time ratio: {self.ratio:.2f}")
        lines.append(f"utterances: {self.n_utterances}, mean L_hat: {self.mean_L_hat:.2f}, "
                     f"naive AR decoder would need ~{self.naive_ar_evals_per_utt:.1f} "
                     f"network evaluations/utt")
        return "\n".join(lines)


def bench(params: ModelParams, utterances, config: DecodeConfig | None = None,
          warmup: int = 3) -> BenchReport:
    """Single-threaded timing of greedy vs joint decoding on the same utterances."""
    config = config or DecodeConfig()
    for u in utterances[:warmup]:
        decode_utterance(u.features, params, "greedy", config)
        decode_utterance(u.features, params, "joint", config)
    greedy = decode_corpus(params, utterances, "greedy", config)
    joint = decode_corpus(params, utterances, "joint", config)
    mean_L_hat = float(np.mean([r.L_hat for r in joint.results]))
    return BenchReport(
        n_utterances=len(utterances),
        beam_width=config.beam_width,
        greedy_mean_s=greedy.mean_seconds,
        joint_mean_s=joint.mean_seconds,
        greedy_passes_per_utt=float(np.mean(greedy.forward_passes)),
        joint_passes_per_utt=float(np.mean(joint.forward_passes)),
        mean_L_hat=mean_L_hat,
        naive_ar_evals_per_utt=mean_L_hat * config.beam_width,
        greedy_cer=greedy.cer,
        joint_cer=joint.cer,
    )
