"""Toy decoder-only transformer, generation, synthetic data and metrics."""

from .data import SynthConfig, SynthDataset, bayes_scores, synth_data, synth_offdomain
from .generate import generate, generate_batch
from .metrics import auc
from .model import (
    EOS,
    NO,
    PAD,
    YES,
    ForwardResult,
    KVCache,
    ModelConfig,
    ToyModel,
    attention_params,
    backward,
    backward_from,
    count_params,
    flops_prefill,
    forward,
    forward_train,
    init_model,
    log_softmax,
    softmax,
)
