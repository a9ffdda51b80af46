"""Streaming conformer transducer that reads the previous turn's text as prompts."""
from .attention import (AttentionBlockParams, ModeMismatchError, build_window_mask,
                        feature_concat, mhca_biasing, mhsa_plain, mhsa_prompted)
from .data import (CorpusFormatError, SynthConfig, Utterance, build_lexicon, context_coverage,
                   gen_corpus, read_corpus, spec_augment, write_corpus)
from .encoder import ConsumptionMode, EncoderConfig, encode, init_encoder_params
from .estimator import ContextualTransducer
from .model import Architecture, IncompatibleCheckpointError, TransducerModel
from .tensor import (DimensionError, GradCheckError, InvalidMaskError, Tensor, grad_check,
                     no_grad)
from .text import (ContextEncoderKind, FrozenTextEncoder, IncompatibleCopyError, PromptConfig,
                   Vocabulary, tokenize)
from .train import (Adam, DivergenceError, FreezeMask, Regime, TrainConfig, checkpoint_average,
                    evaluate, learning_rate, load_checkpoint, rwerr, save_checkpoint, train, wer)
from .transducer import greedy_decode, rnnt_loss, transducer_loss

__version__ = "0.1.0"

__all__ = [
    "Adam", "Architecture", "AttentionBlockParams", "ConsumptionMode", "ContextEncoderKind",
    "ContextualTransducer", "CorpusFormatError", "DimensionError", "DivergenceError",
    "EncoderConfig", "FreezeMask", "FrozenTextEncoder", "GradCheckError",
    "IncompatibleCheckpointError", "IncompatibleCopyError", "InvalidMaskError",
    "ModeMismatchError", "PromptConfig", "Regime", "SynthConfig", "Tensor", "TrainConfig",
    "TransducerModel", "Utterance", "Vocabulary", "build_lexicon", "build_window_mask",
    "checkpoint_average", "context_coverage", "encode", "evaluate", "feature_concat",
    "gen_corpus", "grad_check", "greedy_decode", "init_encoder_params", "learning_rate",
    "load_checkpoint", "mhca_biasing", "mhsa_plain", "mhsa_prompted", "no_grad", "read_corpus",
    "rnnt_loss", "rwerr", "save_checkpoint", "spec_augment", "tokenize", "train",
    "transducer_loss", "wer", "write_corpus",
]
