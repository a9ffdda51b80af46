"""A context-prompted transducer: architecture, parameters and per-utterance passes."""
from __future__ import annotations

import enum
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .encoder import ConsumptionMode, EncoderConfig, encode, init_encoder_params
from .tensor import Tensor, no_grad
from .text import (ContextEncoderKind, FrozenTextEncoder, PromptConfig, Vocabulary,
                   encode_context, init_copied, init_prompt_params, project_prompt, tokenize)
from .transducer import greedy_decode, init_transducer_params, transducer_loss


class Generator(enum.Enum):
    FROZEN_SENT = "frozen-sent"
    FROZEN_TOK = "frozen-tok"
    SPM_TOK = "spm-tok"


class IncompatibleCheckpointError(ValueError):
    """A shared parameter differs in shape between checkpoint and model."""


@dataclass
class Architecture:
    vocab_size: int
    consumption: str = "none"
    generator: str = "spm-tok"
    cp: bool = False
    d_feat: int = 16
    d_model: int = 32
    n_blocks: int = 2
    heads: int = 2
    d_head: int = 8
    conv_kernel: int = 3
    ff_expansion: int = 2
    subsample_factor: int = 3
    cw: int = 8
    token_window: int = 30
    truncate_keep: str = "first"
    prompt_blocks: Optional[list] = None
    n_prompt_layers: int = 2
    d_emb: int = 32
    d_pred: int = 32
    d_joint: int = 32
    frozen_seed: int = 1234

    def __post_init__(self):
        mode = ConsumptionMode(self.consumption)
        gen = Generator(self.generator)
        if mode is ConsumptionMode.FEATURE_CONCAT and gen is not Generator.FROZEN_SENT:
            raise ValueError("feature-concat consumes a single summary row: use generator frozen-sent")
        if self.cp and gen is not Generator.SPM_TOK:
            raise ValueError("cp (copying) is only defined for the spm-tok generator")

    @property
    def mode(self) -> ConsumptionMode:
        return ConsumptionMode(self.consumption)

    @property
    def has_context(self) -> bool:
        return self.mode is not ConsumptionMode.NONE

    @property
    def context_kind(self) -> ContextEncoderKind:
        gen = Generator(self.generator)
        if gen is Generator.FROZEN_SENT:
            return ContextEncoderKind.FROZEN_SENTENCE
        if gen is Generator.FROZEN_TOK:
            return ContextEncoderKind.FROZEN_TOKEN
        return ContextEncoderKind.LEARNED_COPIED if self.cp else ContextEncoderKind.LEARNED_RANDOM

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_feat=self.d_feat, n_blocks=self.n_blocks, d_model=self.d_model,
            heads=self.heads, d_head=self.d_head, conv_kernel=self.conv_kernel,
            ff_expansion=self.ff_expansion, subsample_factor=self.subsample_factor,
            cw=self.cw, mode=self.mode, prompt_blocks=self.prompt_blocks,
            token_window=self.token_window)

    def prompt_config(self) -> Optional[PromptConfig]:
        if not self.has_context:
            return None
        d_enc = FrozenTextEncoder.width if self.context_kind.frozen else self.d_emb
        return PromptConfig(d_enc=d_enc, d_model=self.d_model, n_layers=self.n_prompt_layers,
                            token_window=self.token_window, keep=self.truncate_keep)

    def to_dict(self) -> dict:
        return asdict(self)

    def context_free(self) -> "Architecture":
        d = self.to_dict()
        d.update(consumption="none", generator="spm-tok", cp=False)
        return Architecture(**d)


class TransducerModel:
    """Parameters plus the forward passes of one architecture.

    ``params`` maps dotted names to trainable tensors; the frozen text encoder,
    when used, lives outside it and never receives gradients.
    """

    def __init__(self, arch: Architecture, vocab: Vocabulary, seed: int = 0,
                 params: Optional[dict] = None):
        if len(vocab) != arch.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} pieces, architecture expects {arch.vocab_size}")
        self.arch = arch
        self.vocab = vocab
        self.enc_cfg = arch.encoder_config()
        self.prompt_cfg = arch.prompt_config()
        self.frozen = (FrozenTextEncoder(arch.vocab_size, arch.frozen_seed)
                       if arch.has_context and arch.context_kind.frozen else None)
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng([seed, 7])
        params = init_encoder_params(self.enc_cfg, rng)
        params.update(init_transducer_params(self.arch.vocab_size, self.arch.d_model, rng,
                                             self.arch.d_emb, self.arch.d_pred, self.arch.d_joint))
        if self.prompt_cfg is not None:
            prompt = init_prompt_params(self.prompt_cfg, rng)
            kind = self.arch.context_kind
            if kind is ContextEncoderKind.LEARNED_RANDOM:
                prompt["prompt.embed"] = Tensor(
                    rng.normal(0, 1.0, (self.arch.vocab_size, self.arch.d_emb)), requires_grad=True)
            elif kind is ContextEncoderKind.LEARNED_COPIED:
                prompt = init_copied(params["pred.embed"], prompt, params["joint.w_pred"])
            params.update(prompt)
        return params

    def load_shared(self, source: dict) -> list:
        """Copy every same-named parameter from ``source``; return names left fresh.

        Copying-initialised prompt parameters are re-derived from the loaded
        prediction and joint networks.
        """
        for name, w in self.params.items():
            src = source.get(name)
            if src is not None and np.shape(src) != w.shape:
                raise IncompatibleCheckpointError(
                    f"{name}: checkpoint shape {np.shape(src)} vs model {w.shape}")
        fresh = []
        for name, w in self.params.items():
            src = source.get(name)
            if src is None:
                fresh.append(name)
            else:
                w.data = np.array(src.data if isinstance(src, Tensor) else src, dtype=np.float64)
        if self.arch.context_kind is ContextEncoderKind.LEARNED_COPIED and self.prompt_cfg is not None:
            copied = init_copied(self.params["pred.embed"], self.params, self.params["joint.w_pred"])
            for name in ("prompt.embed", "prompt.proj0.w"):
                if name in fresh:
                    self.params[name].data = copied[name].data
        return fresh

    # passes ---------------------------------------------------------------
    def prompt(self, context_text: str) -> Optional[Tensor]:
        """Prompt rows for ``context_text``; ``None`` for context-free models."""
        if self.prompt_cfg is None:
            return None
        tokens = tokenize(context_text, self.vocab)
        if not tokens:
            return Tensor(np.zeros((0, self.arch.d_model)))
        rows = encode_context(tokens, self.arch.context_kind, self.params, self.frozen)
        return project_prompt(rows, self.params, self.prompt_cfg)

    def encode(self, features, context_text: str = "") -> Tensor:
        return encode(features, self.prompt(context_text), self.enc_cfg, self.params)

    def loss(self, features, targets, context_text: str = "") -> Tensor:
        return transducer_loss(self.encode(features, context_text), targets, self.params)

    def decode(self, features, context_text: str = "", max_symbols_per_frame: int = 4) -> list:
        with no_grad():
            enc = self.encode(features, context_text)
        return greedy_decode(enc, self.params, max_symbols_per_frame)

    # accounting -----------------------------------------------------------
    def n_params(self, predicate=None) -> int:
        return sum(w.size for n, w in self.params.items() if predicate is None or predicate(n))

    def n_added_params(self) -> int:
        """Trainable parameters absent from the context-free architecture."""
        return self.n_params(is_context_param)


def is_context_param(name: str) -> bool:
    return name.startswith("prompt.") or ".mhca." in name or name == "encoder.input.w_ctx"
