"""Attention-guided active sampling for gated-attention MIL slide classifiers."""

from drasmil.kernels import BACKEND
from drasmil.model import (
    AttentionResult,
    ModelParams,
    TrainConfig,
    attention_forward,
    classify,
    load_checkpoint,
    save_checkpoint,
    train,
)
from drasmil.sampler import SamplingConfig, SamplingResult, run_dras, run_full, run_random
from drasmil.slide import Bag, SynthSpec, generate_synthetic, synthetic_dataset

__version__ = "0.1.0"
