"""Toy-scale non-autoregressive CTC/attention speech recognition.

The model encodes acoustic frames, predicts the output length with CTC
greedy search, converts acoustic features to LM token embeddings through
positional-query cross attention and fuses the LM logits back in. Decoding
is either a per-position argmax or a joint CTC/attention beam search whose
attention scores come from a single cached forward pass.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import DecodeConfig, joint_decode
from .errors import (ConfigurationError, ContractViolation, CtcInfeasibleError, DimensionError,
                     FormatError, NarAsrError, NonFiniteError, TrainingDivergence, UsageError)
from .kernels import BACKEND
from .model import ModelConfig, ModelParams, forward_nar, infer, init_params
from .pipeline import bench, decode_corpus
from .synthetic import SyntheticSpec, gen_synthetic, load_dataset
from .training import MlmConfig, TrainConfig, mlm_pretrain, train
from .vocab import Vocabulary, corpus_error_rate, edit_distance

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigurationError", "ContractViolation", "CtcInfeasibleError", "DecodeConfig",
    "DimensionError", "FormatError", "MlmConfig", "ModelConfig", "ModelParams", "NarAsrError",
    "NonFiniteError", "SyntheticSpec", "TrainConfig", "TrainingDivergence", "UsageError", "Vocabulary",
    "bench", "corpus_error_rate", "decode_corpus", "edit_distance", "forward_nar", "gen_synthetic",
    "infer", "init_params", "joint_decode", "load_checkpoint", "load_dataset", "mlm_pretrain",
    "save_checkpoint", "train",
]
