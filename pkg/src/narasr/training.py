"""Joint CTC/CE training and masked-LM pretraining of the toy LM."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, backward, log_softmax, take_last
from .ctc import ctc_loss, ctc_loss_batch
from .errors import ConfigurationError, ContractViolation, NonFiniteError, TrainingDivergence
from .model import (ENCODER_PREFIXES, LM_PREFIXES, ForwardTrace, ModelParams, forward_batch,
                    lm_logits_from_tokens)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.5  # CE on fused logits
    lambda2: float = 0.5  # CE on preliminary (acoustic) logits
    beta: float = 0.3  # CTC weight
    lr: float = 1e-3
    steps: int = 4000
    batch_size: int = 8
    seed: int = 0
    freeze_encoder_steps: int = 0
    freeze_lm_steps: int = 0
    log_every: int = 250

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError(f"invalid training config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def _ce_rows(logits: Tensor, target) -> Tensor:
    """Mean over positions of -log softmax(logits)[l, target[l]]."""
    picked = take_last(log_softmax(logits), np.asarray(target))
    return -picked.mean()


def joint_loss(trace: ForwardTrace, target, config: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """(1 - beta) (lambda1 CE_f + lambda2 CE_a) + beta CTC for one utterance."""
    target = list(target)
    if trace.L != len(target):
        raise ContractViolation(f"trace built for L={trace.L}, target has {len(target)} tokens")
    ce_f = _ce_rows(trace.L_f, target)
    ce_a = _ce_rows(trace.L_a, target)
    ctc = ctc_loss(trace.frame_logits, target)
    b = config.beta
    loss = (ce_f * config.lambda1 + ce_a * config.lambda2) * (1.0 - b) + ctc * b
    parts = {"ce_f": ce_f.item(), "ce_a": ce_a.item(), "ctc": ctc.item(), "total": loss.item()}
    return loss, parts


def joint_loss_batch(features, targets, params: ModelParams, config: TrainConfig):
    """Mean joint loss over a padded batch (ground-truth target lengths)."""
    lengths = np.array([len(t) for t in targets])
    trace = forward_batch(features, lengths, params)
    B, L = len(targets), int(lengths.max())
    tgt = np.zeros((B, L), dtype=np.intp)
    valid = np.zeros((B, L))
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = t
        valid[i, : len(t)] = 1.0 / len(t)
    ce_f = -(take_last(log_softmax(trace.L_f), tgt) * valid).sum(axis=1)
    ce_a = -(take_last(log_softmax(trace.L_a), tgt) * valid).sum(axis=1)
    ctc = ctc_loss_batch(trace.frame_logits, targets, trace.frame_lengths)
    b = config.beta
    per_utt = (ce_f * config.lambda1 + ce_a * config.lambda2) * (1.0 - b) + ctc * b
    loss = per_utt.mean()
    parts = {"ce_f": float(ce_f.data.mean()), "ce_a": float(ce_a.data.mean()),
             "ctc": float(ctc.data.mean()), "total": loss.item()}
    return loss, parts


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, frozen: tuple[str, ...] = ()):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None or (frozen and k.startswith(frozen)):
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


def _frozen_prefixes(step: int, config: TrainConfig) -> tuple[str, ...]:
    out: tuple[str, ...] = ()
    if step < config.freeze_encoder_steps:
        out += ENCODER_PREFIXES
    if step < config.freeze_lm_steps:
        out += LM_PREFIXES
    return out


def train(utterances, config: TrainConfig, params: ModelParams, callback=None) -> Checkpoint:
    """Mini-batch Adam on the joint loss. Works on a copy of ``params``.

    ``callback(step, parts, params)`` runs after every update.
    """
    if not utterances:
        raise ValueError("training set is empty")
    params = params.copy()
    opt = Adam(params.tensors, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    history = []
    last_good = params.copy()
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(utterances)).tolist())
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = [utterances[i] for i in idx]
        try:
            # overflow surfaces as NonFiniteError from the graph, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, parts = joint_loss_batch([u.features for u in batch], [u.tokens for u in batch],
                                               params, config)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"non-finite value at step {step}: {exc}", last_good, step) from exc
        if not np.isfinite(parts["total"]):
            raise TrainingDivergence(f"loss is {parts['total']} at step {step}", last_good, step)
        last_good = params.copy()
        opt.zero_grad()
        backward(loss)
        opt.step(_frozen_prefixes(step, config))
        parts["step"] = step
        history.append(parts)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total %.4f ce_f %.4f ce_a %.4f ctc %.4f", step, parts["total"],
                     parts["ce_f"], parts["ce_a"], parts["ctc"])
        if callback is not None:
            callback(step, parts, params)
    return Checkpoint(params, history)


@dataclass(frozen=True)
class MlmConfig:
    mask_prob: float = 0.15
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigurationError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")


MLM_PREFIXES = LM_PREFIXES + ("out.",)


def mlm_loss(params: ModelParams, sentences, mask_prob: float, rng: np.random.Generator):
    """Masked-token CE; masked inputs are replaced by unk. Returns (loss, n_masked)."""
    lengths = np.array([len(s) for s in sentences])
    B, L = len(sentences), int(lengths.max())
    ids = np.zeros((B, L), dtype=np.intp)
    for i, s in enumerate(sentences):
        ids[i, : len(s)] = s
    real = np.arange(L)[None, :] < lengths[:, None]
    masked = (rng.random((B, L)) < mask_prob) & real
    n = int(masked.sum())
    inputs = np.where(masked, params.vocab.unk_id, ids)
    logits = lm_logits_from_tokens(inputs, params, lengths)
    weight = masked / max(n, 1)
    loss = -(take_last(log_softmax(logits), ids) * weight).sum()
    return loss, n


def mlm_pretrain(params: ModelParams, corpus, config: MlmConfig) -> tuple[ModelParams, list[float]]:
    """Train the LM blocks, M_BERT and the output head to recover masked tokens.

    Returns updated params (a copy) and the per-step loss curve.
    """
    if not corpus:
        raise ValueError("LM corpus is empty")
    params = params.copy()
    trainable = {k: v for k, v in params.tensors.items() if k.startswith(MLM_PREFIXES)}
    opt = Adam(trainable, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    curve = []
    for _ in range(config.steps):
        idx = rng.integers(len(corpus), size=config.batch_size)
        loss, _ = mlm_loss(params, [corpus[i] for i in idx], config.mask_prob, rng)
        opt.zero_grad()
        backward(loss, trainable.values())
        opt.step()
        curve.append(loss.item())
    return params, curve
