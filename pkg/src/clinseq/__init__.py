"""Transformer toolkit for clinical event sequences.

Quantile tokenization of time-stamped measurements, patient-isolated and
windowed block-sparse attention masks, rotary attention, a U-Net style
layer stack, a hybrid orthogonalized-momentum/Adam optimizer and ordinal
evaluation metrics, all on a small reverse-mode autodiff core in float64.
"""

from .checkpoint import Checkpoint, CheckpointError
from .datagen import CohortSpec, PackedBatch, generate_cohort, pack_batches, pack_sequences
from .masking import (BlockMask, MaskSpec, SequenceLayout, adaptive_window, compile_block_mask, materialize,
                      patient_mask, window_mask)
from .metrics import UNDEFINED, EvalRecord, evaluate, report_json
from .model import ModelConfig, forward, generate, init_params, loss
from .numerics import Tensor, grad_check
from .optim import HybridOptimizer, OptimConfig, newton_schulz_orth
from .tokenizer import Event, PatientTimeline, QuantileBinner, Tokenizer, Vocabulary
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BlockMask", "Checkpoint", "CheckpointError", "CohortSpec", "EvalRecord", "Event", "HybridOptimizer",
    "MaskSpec", "ModelConfig", "OptimConfig", "PackedBatch", "PatientTimeline", "QuantileBinner",
    "SequenceLayout", "Tensor", "Tokenizer", "TrainConfig", "UNDEFINED", "Vocabulary", "adaptive_window",
    "compile_block_mask", "evaluate", "forward", "generate", "generate_cohort", "grad_check", "init_params",
    "loss", "materialize", "newton_schulz_orth", "pack_batches", "pack_sequences", "patient_mask",
    "report_json", "train", "window_mask",
]
