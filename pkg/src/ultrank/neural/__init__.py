"""Neural scorer: autodiff engine, wide-and-deep model, AdamW, checkpoints."""

from . import autodiff
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .model import (
    CLS_ID,
    NUM_RESERVED_IDS,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    ScorerConfig,
    WideDeepScorer,
    build_vocab,
    encode_pair,
    expected_param_count,
    forward_backward,
    grad_check,
)
from .optim import AdamWState, adamw_init, adamw_step

__all__ = [
    "autodiff",
    "FORMAT_VERSION",
    "load_checkpoint",
    "save_checkpoint",
    "CLS_ID",
    "NUM_RESERVED_IDS",
    "PAD_ID",
    "SEP_ID",
    "UNK_ID",
    "ScorerConfig",
    "WideDeepScorer",
    "build_vocab",
    "encode_pair",
    "expected_param_count",
    "forward_backward",
    "grad_check",
    "AdamWState",
    "adamw_init",
    "adamw_step",
]
