"""Joint intent detection and slot filling with an action-guided decoder."""

__version__ = "0.1.0"

from .labels import LabelSchema
from .data import (SyntheticLanguageSpec, TemplateGrammar, UtteranceRecord,
                   Vocabulary, build_vocab, generate_synthetic_pair,
                   kshot_sample, load_conll, load_jsonl, write_conll,
                   write_jsonl)
from .model import ModelConfig, ModelParams, init_params
from .training import TrainConfig, train, adapt
from .decoding import DecodeConfig, beam_decode, greedy_decode, predict_slu
from .metrics import evaluate, prf1, span_f1

__all__ = [
    "LabelSchema", "SyntheticLanguageSpec", "TemplateGrammar",
    "UtteranceRecord", "Vocabulary", "build_vocab", "generate_synthetic_pair",
    "kshot_sample", "load_conll", "load_jsonl", "write_conll", "write_jsonl",
    "ModelConfig", "ModelParams", "init_params", "TrainConfig", "train",
    "adapt", "DecodeConfig", "beam_decode", "greedy_decode", "predict_slu",
    "evaluate", "prf1", "span_f1",
]
