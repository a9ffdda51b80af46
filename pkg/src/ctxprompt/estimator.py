"""scikit-learn style front end for the context-prompted transducer."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import Architecture, TransducerModel
from .tensor import no_grad
from .text import Vocabulary
from .train import TrainConfig, evaluate, train
from .validation import check_context_mode, check_corpus, check_transcripts


class ContextualTransducer(BaseEstimator):
    """Streaming conformer-transducer that can read the previous turn's text.

    ``consumption`` picks how context enters the encoder (``none``,
    ``feature-concat``, ``cross-attention`` or ``prompt``), ``generator`` how
    context text becomes rows (``frozen-sent``, ``frozen-tok``, ``spm-tok``)
    and ``regime`` which parameters training may change.

    ``fit`` takes a list of :class:`~ctxprompt.data.Utterance`; pass
    ``init_params`` (a name -> array mapping, e.g. a loaded checkpoint) to
    fine-tune from a context-free seed instead of training from scratch.
    """

    def __init__(self, vocab: Optional[Vocabulary] = None, consumption="none",
                 generator="spm-tok", cp=False, regime="all", d_feat=16, d_model=32,
                 n_blocks=2, heads=2, d_head=8, conv_kernel=3, subsample_factor=3, cw=8,
                 token_window=30, truncate_keep="first", prompt_blocks=None, steps=1000,
                 batch_size=8, lr_peak=2e-3, warmup_steps=100, decay_rate=0.5,
                 decay_interval=1000, checkpoint_interval=50, n_average=10,
                 spec_augment=True, use_context=True, max_symbols_per_frame=4,
                 random_state=0):
        self.vocab = vocab
        self.consumption = consumption
        self.generator = generator
        self.cp = cp
        self.regime = regime
        self.d_feat = d_feat
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.heads = heads
        self.d_head = d_head
        self.conv_kernel = conv_kernel
        self.subsample_factor = subsample_factor
        self.cw = cw
        self.token_window = token_window
        self.truncate_keep = truncate_keep
        self.prompt_blocks = prompt_blocks
        self.steps = steps
        self.batch_size = batch_size
        self.lr_peak = lr_peak
        self.warmup_steps = warmup_steps
        self.decay_rate = decay_rate
        self.decay_interval = decay_interval
        self.checkpoint_interval = checkpoint_interval
        self.n_average = n_average
        self.spec_augment = spec_augment
        self.use_context = use_context
        self.max_symbols_per_frame = max_symbols_per_frame
        self.random_state = random_state

    def architecture(self) -> Architecture:
        if self.vocab is None:
            raise ValueError("a vocabulary is required")
        return Architecture(
            vocab_size=len(self.vocab), consumption=self.consumption, generator=self.generator,
            cp=self.cp, d_feat=self.d_feat, d_model=self.d_model, n_blocks=self.n_blocks,
            heads=self.heads, d_head=self.d_head, conv_kernel=self.conv_kernel,
            subsample_factor=self.subsample_factor, cw=self.cw, token_window=self.token_window,
            truncate_keep=self.truncate_keep,
            prompt_blocks=None if self.prompt_blocks is None else sorted(self.prompt_blocks))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_peak=self.lr_peak, warmup_steps=self.warmup_steps, decay_rate=self.decay_rate,
            decay_interval=self.decay_interval, total_steps=self.steps,
            batch_size=self.batch_size, regime=self.regime,
            checkpoint_interval=self.checkpoint_interval, n_average=self.n_average,
            spec_augment=self.spec_augment, use_context=self.use_context)

    def fit(self, X, y=None, init_params: Optional[dict] = None, checkpoint_dir=None, log=None):
        corpus = check_corpus(X, self.d_feat)
        arch = self.architecture()
        cfg = self.train_config()
        check_transcripts(corpus, self.vocab)
        self.model_ = TransducerModel(arch, self.vocab, seed=self.random_state)
        self.fresh_params_ = (self.model_.load_shared(init_params)
                              if init_params is not None else list(self.model_.params))
        out = train(self.model_, corpus, cfg, self.random_state, checkpoint_dir, log)
        self.history_ = out["history"]
        self.checkpoints_ = out["checkpoints"]
        return self

    @classmethod
    def from_params(cls, params: dict, vocab: Vocabulary, **kwargs) -> "ContextualTransducer":
        """A fitted estimator around existing parameters (e.g. a loaded checkpoint)."""
        est = cls(vocab=vocab, **kwargs)
        est.model_ = TransducerModel(est.architecture(), vocab, seed=est.random_state)
        missing = est.model_.load_shared(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {missing}")
        est.fresh_params_ = []
        est.history_ = []
        est.checkpoints_ = []
        return est

    def predict(self, X, context: str = "as-labeled") -> list:
        """Greedy transcripts as lists of pieces."""
        check_is_fitted(self, "model_")
        context = check_context_mode(context)
        out = []
        for u in check_corpus(X, self.d_feat):
            ctx = u.context_text if context == "as-labeled" else ""
            ids = self.model_.decode(u.features, ctx, self.max_symbols_per_frame)
            out.append([self.vocab.piece(i) for i in ids])
        return out

    def transform(self, X, context: str = "as-labeled") -> list:
        """Encoder outputs ``[T', d_model]`` per utterance."""
        check_is_fitted(self, "model_")
        context = check_context_mode(context)
        out = []
        with no_grad():
            for u in check_corpus(X, self.d_feat):
                ctx = u.context_text if context == "as-labeled" else ""
                out.append(np.array(self.model_.encode(u.features, ctx).data))
        return out

    def evaluate(self, X, context: str = "as-labeled") -> dict:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_corpus(X, self.d_feat), check_context_mode(context),
                        self.max_symbols_per_frame)

    def score(self, X, y=None) -> float:
        """``1 - WER`` over the corpus, so larger is better."""
        return 1.0 - self.evaluate(X)["wer_all"]

    @property
    def params_(self) -> dict:
        check_is_fitted(self, "model_")
        return {n: w.data for n, w in self.model_.params.items()}
