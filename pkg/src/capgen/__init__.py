"""Desk-scale image captioning pipeline.

Trains a word-level caption generator on precomputed image embeddings:
an affine image projection and a word-embedding table feed two stacked
bidirectional LSTM layers, read out through a softmax over the vocabulary.
Training is plain SGD on cross entropy with hand-written backpropagation;
generation is greedy, one word at a time; evaluation is BLEU.
"""

from capgen.model import ModelConfig, ModelParams, SequenceInput, forward, init_params
from capgen.text import Vocabulary, build_vocabulary, encode, decode_ids, normalize_and_tokenize
from capgen.train import TrainConfig, TrainingReport, backward, grad_check, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ModelParams",
    "SequenceInput",
    "TrainConfig",
    "TrainingReport",
    "Vocabulary",
    "backward",
    "build_vocabulary",
    "decode_ids",
    "encode",
    "forward",
    "grad_check",
    "init_params",
    "normalize_and_tokenize",
    "sgd_step",
    "train",
]
