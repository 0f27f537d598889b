"""The NAR CTC/attention network.

Data flow for one utterance::

    features --encode--> H_AC --ctc_branch--> frame logits
    H_AC --convert_length (positional queries)--> H --W--> L_a
    L_a --softmax--> W_a --(W_a . M_BERT)--> H_LM --lm_encode--> L_l
    L_f = alpha * L_l + L_a

Every function accepts a single utterance (``(T, d)`` arrays) or a padded
batch (``(B, T, d)``) with per-utterance lengths; padded keys are masked
out of attention.
"""

from __future__ import annotations

import functools
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (Tensor, embedding, gelu, layer_norm, matmul, multi_head_attention,
                       no_grad, softmax_rows)
from .ctc import ctc_greedy
from .errors import ConfigurationError, DimensionError
from .vocab import Vocabulary

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_in: int
    d_model: int = 64
    heads: int = 4
    n_enc: int = 2
    n_lm: int = 2
    d_ff: int = 256
    alpha: float = 0.3

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be at least 4")
        if min(self.d_in, self.d_model, self.d_ff, self.heads) < 1 or min(self.n_enc, self.n_lm) < 0:
            raise ConfigurationError(f"invalid model dimensions: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"enc.in.w": (cfg.d_in, d), "enc.in.b": (d,)}

    def attention(p):
        for n in "qkvo":
            shapes[f"{p}.w{n}"] = (d, d)
            shapes[f"{p}.b{n}"] = (d,)

    def block(p):
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        attention(f"{p}.attn")
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, cfg.d_ff)
        shapes[f"{p}.ff.b1"] = (cfg.d_ff,)
        shapes[f"{p}.ff.w2"] = (cfg.d_ff, d)
        shapes[f"{p}.ff.b2"] = (d,)

    for i in range(cfg.n_enc):
        block(f"enc.{i}")
    shapes["enc.ln.g"] = (d,)
    shapes["enc.ln.b"] = (d,)
    shapes["ctc.w"] = (d, V)
    shapes["ctc.b"] = (V,)
    attention("mcm")
    shapes["W"] = (d, V)
    shapes["M_BERT"] = (V, d)
    for i in range(cfg.n_lm):
        block(f"lm.{i}")
    shapes["lm.ln.g"] = (d,)
    shapes["lm.ln.b"] = (d,)
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


# parameter groups that the freeze flags address
ENCODER_PREFIXES = ("enc.",)
LM_PREFIXES = ("lm.", "M_BERT")


@dataclass
class ModelParams:
    """All trainable tensors plus the config and vocabulary they were built for."""

    config: ModelConfig
    vocab: Vocabulary
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.vocab.V != self.config.vocab_size:
            raise DimensionError(f"vocabulary has {self.vocab.V} tokens, "
                                 f"config expects {self.config.vocab_size}")
        expected = _param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise DimensionError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def group(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefixes)}

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.vocab,
                           {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                            for k, v in self.tensors.items()})


def init_params(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> ModelParams:
    """Scaled-normal weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, shape[0] ** -0.5, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, vocab, tensors)


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass (one utterance)."""

    H_AC: Tensor
    frame_logits: Tensor
    H_PE: np.ndarray
    H: Tensor
    L_a: Tensor
    W_a: Tensor
    H_LM: Tensor
    L_l: Tensor
    L_f: Tensor
    forward_passes: int = 1

    @property
    def T(self) -> int:
        return self.frame_logits.shape[-2]

    @property
    def L(self) -> int:
        return self.L_f.shape[-2]


class PassCounter:
    """Counts full model forward passes; thread-safe."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def tick(self):
        with self._lock:
            self._n += 1

    @property
    def count(self) -> int:
        return self._n


# ---------------------------------------------------------------- helpers


@functools.lru_cache(maxsize=256)
def _sinusoid(L: int, d: int) -> np.ndarray:
    pos = np.arange(L, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    pe.setflags(write=False)
    return pe


def positional_embedding(L: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos."""
    if L < 1:
        raise ValueError(f"target length must be >= 1, got {L}")
    return _sinusoid(int(L), int(d))


def key_mask(lengths, max_len: int) -> np.ndarray:
    """Additive ``(B, 1, 1, max_len)`` mask hiding padded keys."""
    lengths = np.asarray(lengths)
    pad = np.arange(max_len)[None, :] >= lengths[:, None]
    return np.where(pad, MASK_VALUE, 0.0)[:, None, None, :]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _block(x: Tensor, p: dict, heads: int, mask) -> Tensor:
    h = layer_norm(x, p["ln1.g"], p["ln1.b"])
    attn = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    x = x + multi_head_attention(h, h, h, heads, attn, key_mask=mask)
    h = layer_norm(x, p["ln2.g"], p["ln2.b"])
    h = gelu(h @ p["ff.w1"] + p["ff.b1"]) @ p["ff.w2"] + p["ff.b2"]
    return x + h


# ---------------------------------------------------------------- network stages


def encode(features, params: ModelParams, frame_lengths=None) -> Tensor:
    """Frame projection + sinusoidal positions + pre-norm blocks + final norm."""
    x = _as_tensor(features)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("encode needs at least one frame")
    if x.shape[-1] != params.config.d_in:
        raise DimensionError(f"feature dim {x.shape[-1]} != d_in {params.config.d_in}")
    T, d = x.shape[-2], params.config.d_model
    mask = None
    if frame_lengths is not None and x.ndim == 3:
        mask = key_mask(frame_lengths, T)
    h = x @ params["enc.in.w"] + params["enc.in.b"] + positional_embedding(T, d)
    for i in range(params.config.n_enc):
        h = _block(h, params.sub(f"enc.{i}"), params.config.heads, mask)
    return layer_norm(h, params["enc.ln.g"], params["enc.ln.b"])


def ctc_branch(H_AC: Tensor, params: ModelParams) -> Tensor:
    return H_AC @ params["ctc.w"] + params["ctc.b"]


def convert_length(H_AC: Tensor, L: int, params: ModelParams, frame_lengths=None) -> Tensor:
    """Cross attention from L positional queries onto the acoustic frames."""
    H_PE = positional_embedding(L, params.config.d_model)
    mask = None
    if frame_lengths is not None and H_AC.ndim == 3:
        mask = key_mask(frame_lengths, H_AC.shape[-2])
    return multi_head_attention(H_PE, H_AC, H_AC, params.config.heads, params.sub("mcm"),
                                key_mask=mask)


def preliminary_logits(H: Tensor, params: ModelParams) -> Tensor:
    return matmul(H, params["W"])


def modality_convert(L_a: Tensor, M_BERT: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax weights over LM tokens and the resulting convex mix of embeddings."""
    L_a = _as_tensor(L_a)
    M_BERT = _as_tensor(M_BERT)
    if M_BERT.shape[0] != L_a.shape[-1]:
        raise DimensionError(f"M_BERT has {M_BERT.shape[0]} rows, logits have {L_a.shape[-1]} columns")
    W_a = softmax_rows(L_a)
    return W_a, W_a @ M_BERT


def lm_encode(H_LM: Tensor, params: ModelParams, target_lengths=None) -> Tensor:
    """Bidirectional LM blocks over the converted embeddings, then the output head."""
    L, d = H_LM.shape[-2], params.config.d_model
    mask = None
    if target_lengths is not None and H_LM.ndim == 3:
        mask = key_mask(target_lengths, L)
    h = H_LM + positional_embedding(L, d)
    for i in range(params.config.n_lm):
        h = _block(h, params.sub(f"lm.{i}"), params.config.heads, mask)
    h = layer_norm(h, params["lm.ln.g"], params["lm.ln.b"])
    return h @ params["out.w"] + params["out.b"]


def fuse_logits(L_l: Tensor, L_a: Tensor, alpha: float) -> Tensor:
    L_l, L_a = _as_tensor(L_l), _as_tensor(L_a)
    if L_l.shape != L_a.shape:
        raise DimensionError(f"cannot fuse logits of shapes {L_l.shape} and {L_a.shape}")
    return L_l * alpha + L_a


def _decoder_side(H_AC, L, params, frame_lengths=None, target_lengths=None):
    H = convert_length(H_AC, L, params, frame_lengths)
    L_a = preliminary_logits(H, params)
    W_a, H_LM = modality_convert(L_a, params["M_BERT"])
    L_l = lm_encode(H_LM, params, target_lengths)
    L_f = fuse_logits(L_l, L_a, params.config.alpha)
    return H, L_a, W_a, H_LM, L_l, L_f


def forward_nar(features, L: int, params: ModelParams, counter: PassCounter | None = None) -> ForwardTrace:
    """One full forward pass with target length ``L`` (ground truth in training)."""
    if L < 1:
        raise ValueError(f"target length must be >= 1, got {L}")
    if counter is not None:
        counter.tick()
    H_AC = encode(features, params)
    frame_logits = ctc_branch(H_AC, params)
    H, L_a, W_a, H_LM, L_l, L_f = _decoder_side(H_AC, L, params)
    return ForwardTrace(H_AC, frame_logits, positional_embedding(L, params.config.d_model),
                        H, L_a, W_a, H_LM, L_l, L_f)


def infer(features, params: ModelParams, counter: PassCounter | None = None) -> tuple[ForwardTrace, int]:
    """Inference pass: encode once, predict L_hat by CTC greedy search, then
    run the conversion and LM stages at that length.

    With ``L_hat == 0`` the token-level tensors have zero rows.
    """
    if counter is not None:
        counter.tick()
    with no_grad():
        H_AC = encode(features, params)
        frame_logits = ctc_branch(H_AC, params)
        _, L_hat = ctc_greedy(frame_logits, params.vocab.blank_id)
        d, V = params.config.d_model, params.config.vocab_size
        if L_hat == 0:
            zeros = lambda n: Tensor(np.zeros((0, n)))  # noqa: E731
            trace = ForwardTrace(H_AC, frame_logits, np.zeros((0, d)), zeros(d), zeros(V),
                                 zeros(V), zeros(d), zeros(V), zeros(V))
        else:
            H, L_a, W_a, H_LM, L_l, L_f = _decoder_side(H_AC, L_hat, params)
            trace = ForwardTrace(H_AC, frame_logits, positional_embedding(L_hat, d),
                                 H, L_a, W_a, H_LM, L_l, L_f)
    return trace, L_hat


@dataclass
class BatchTrace:
    frame_logits: Tensor  # (B, T_max, V)
    L_a: Tensor  # (B, L_max, V)
    L_f: Tensor  # (B, L_max, V)
    frame_lengths: np.ndarray
    target_lengths: np.ndarray


def pad_features(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(f) for f in features])
    out = np.zeros((len(features), lengths.max(), features[0].shape[1]))
    for i, f in enumerate(features):
        out[i, : len(f)] = f
    return out, lengths


def forward_batch(features: list[np.ndarray], target_lengths, params: ModelParams) -> BatchTrace:
    """Padded-batch forward used for training; matches ``forward_nar`` per utterance."""
    x, frame_lengths = pad_features(features)
    target_lengths = np.asarray(target_lengths)
    H_AC = encode(x, params, frame_lengths)
    frame_logits = ctc_branch(H_AC, params)
    _, L_a, _, _, _, L_f = _decoder_side(H_AC, int(target_lengths.max()), params,
                                         frame_lengths, target_lengths)
    return BatchTrace(frame_logits, L_a, L_f, frame_lengths, target_lengths)


def lm_logits_from_tokens(ids: np.ndarray, params: ModelParams, lengths=None) -> Tensor:
    """LM applied to hard token ids (masked-LM pretraining path)."""
    return lm_encode(embedding(params["M_BERT"], ids), params, lengths)
