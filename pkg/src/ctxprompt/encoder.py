"""Streaming conformer encoder with a per-block context-consumption mode."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (AttentionBlockParams, ModeMismatchError, build_window_mask,
                        feature_concat, mhca_biasing, mhsa_plain, mhsa_prompted)
from .tensor import Tensor, concat, depthwise_conv1d_causal, layer_norm, sigmoid, swish
from .text import glorot


class ConsumptionMode(enum.Enum):
    NONE = "none"
    FEATURE_CONCAT = "feature-concat"
    CROSS_ATTENTION = "cross-attention"
    PROMPT = "prompt"


@dataclass
class EncoderConfig:
    d_feat: int = 16
    n_blocks: int = 2
    d_model: int = 32
    heads: int = 2
    d_head: int = 8
    conv_kernel: int = 3
    ff_expansion: int = 2
    subsample_factor: int = 3
    cw: int = 8
    mode: ConsumptionMode = ConsumptionMode.NONE
    prompt_blocks: Optional[frozenset] = None
    token_window: int = 30

    def __post_init__(self):
        self.mode = ConsumptionMode(self.mode)
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.prompt_blocks is None:
            self.prompt_blocks = frozenset(range(self.n_blocks))
        self.prompt_blocks = frozenset(int(b) for b in self.prompt_blocks)
        if not self.prompt_blocks <= set(range(self.n_blocks)):
            raise ValueError(f"prompt_blocks {sorted(self.prompt_blocks)} outside 0..{self.n_blocks - 1}")

    def uses_block_context(self, block: int) -> bool:
        return (self.mode in (ConsumptionMode.PROMPT, ConsumptionMode.CROSS_ATTENTION)
                and block in self.prompt_blocks)


def _dense(params, name, rng, d_in, d_out):
    params[f"{name}.w"] = glorot(rng, d_in, d_out)
    params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)


def _norm(params, name, d):
    params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    d, inner = cfg.d_model, cfg.heads * cfg.d_head
    params: dict = {}
    _dense(params, "encoder.input", rng, cfg.d_feat * cfg.subsample_factor, d)
    if cfg.mode is ConsumptionMode.FEATURE_CONCAT:
        params["encoder.input.w_ctx"] = Tensor(np.zeros((d, d)), requires_grad=True)
    for b in range(cfg.n_blocks):
        pre = f"encoder.block{b}"
        for ff in ("ff1", "ff2"):
            _norm(params, f"{pre}.{ff}.ln", d)
            _dense(params, f"{pre}.{ff}.l1", rng, d, d * cfg.ff_expansion)
            _dense(params, f"{pre}.{ff}.l2", rng, d * cfg.ff_expansion, d)
        _norm(params, f"{pre}.mhsa.ln", d)
        for k in ("w_q", "w_k", "w_v"):
            params[f"{pre}.mhsa.{k}"] = glorot(rng, d, inner)
        params[f"{pre}.mhsa.w_o"] = glorot(rng, inner, d)
        if cfg.mode is ConsumptionMode.CROSS_ATTENTION and b in cfg.prompt_blocks:
            for k in ("w_q", "w_k", "w_v"):
                params[f"{pre}.mhca.{k}"] = glorot(rng, d, inner)
            # zero output kernel: the biasing branch starts as an exact no-op
            params[f"{pre}.mhca.w_o"] = Tensor(np.zeros((inner, d)), requires_grad=True)
        _norm(params, f"{pre}.conv.ln", d)
        _dense(params, f"{pre}.conv.pw1", rng, d, 2 * d)
        params[f"{pre}.conv.dw.w"] = Tensor(
            rng.uniform(-1, 1, (cfg.conv_kernel, d)) / np.sqrt(cfg.conv_kernel), requires_grad=True)
        params[f"{pre}.conv.dw.b"] = Tensor(np.zeros(d), requires_grad=True)
        _norm(params, f"{pre}.conv.norm", d)
        _dense(params, f"{pre}.conv.pw2", rng, d, d)
        _norm(params, f"{pre}.final_ln", d)
    return params


def subsample(features, factor: int) -> Tensor:
    """Stack groups of ``factor`` frames; the tail is zero-padded to a full group."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    T, d = x.shape
    if T < 1:
        raise ValueError("need at least one frame")
    n = -(-T // factor)
    padded = np.zeros((n * factor, d))
    padded[:T] = x
    return Tensor(padded.reshape(n, factor * d))


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _ff(x, params, name):
    h = layer_norm(x, params[f"{name}.ln.g"], params[f"{name}.ln.b"])
    h = swish(h @ params[f"{name}.l1.w"] + params[f"{name}.l1.b"])
    return h @ params[f"{name}.l2.w"] + params[f"{name}.l2.b"]


def _conv_module(x, params, pre, d):
    h = layer_norm(x, params[f"{pre}.ln.g"], params[f"{pre}.ln.b"])
    h = h @ params[f"{pre}.pw1.w"] + params[f"{pre}.pw1.b"]
    h = h[:, :d] * sigmoid(h[:, d:])
    h = depthwise_conv1d_causal(h, params[f"{pre}.dw.w"]) + params[f"{pre}.dw.b"]
    h = swish(layer_norm(h, params[f"{pre}.norm.g"], params[f"{pre}.norm.b"]))
    return h @ params[f"{pre}.pw2.w"] + params[f"{pre}.pw2.b"]


def conformer_block(x: Tensor, P: Optional[Tensor], params: dict, block: int,
                    cfg: EncoderConfig, mask: Optional[np.ndarray] = None) -> Tensor:
    """Macaron FF, attention stage per mode, causal conv, FF, final LN."""
    pre = f"encoder.block{block}"
    T = x.shape[0]
    n_prompt = 0 if P is None else P.shape[0]
    uses_context = cfg.uses_block_context(block)
    if n_prompt and not uses_context:
        raise ModeMismatchError(f"block {block} in mode {cfg.mode.value} does not take a prompt")
    attn_prompt = n_prompt if cfg.mode is ConsumptionMode.PROMPT and uses_context else 0
    if mask is None:
        mask = build_window_mask(T, attn_prompt, cfg.cw)

    x = x + 0.5 * _ff(x, params, f"{pre}.ff1")
    h = layer_norm(x, params[f"{pre}.mhsa.ln.g"], params[f"{pre}.mhsa.ln.b"])
    p = AttentionBlockParams.from_params(params, pre, cfg.heads, cfg.d_head)
    if attn_prompt:
        a = mhsa_prompted(h, P, p, mask, cfg.token_window)
    else:
        a = mhsa_plain(h, p, mask[:, mask.shape[1] - T:])
    if cfg.mode is ConsumptionMode.CROSS_ATTENTION and uses_context:
        a = mhca_biasing(a, P if P is not None else Tensor(np.zeros((0, cfg.d_model))), p)
    x = x + a
    x = x + _conv_module(x, params, f"{pre}.conv", cfg.d_model)
    x = x + 0.5 * _ff(x, params, f"{pre}.ff2")
    return layer_norm(x, params[f"{pre}.final_ln.g"], params[f"{pre}.final_ln.b"])


def encode(features, P: Optional[Tensor], cfg: EncoderConfig, params: dict) -> Tensor:
    """Raw frames ``[T, d_feat]`` to encoder rows ``[ceil(T/f), d_model]``."""
    x = subsample(features, cfg.subsample_factor)
    n_prompt = 0 if P is None else P.shape[0]
    if cfg.mode is ConsumptionMode.FEATURE_CONCAT:
        if n_prompt > 1:
            raise ModeMismatchError(f"feature concatenation needs S' <= 1, got {n_prompt}")
        ctx = P if P is not None else Tensor(np.zeros((0, cfg.d_model)))
        x = feature_concat(ctx, x, cfg.d_model)
        w = concat([params["encoder.input.w_ctx"], params["encoder.input.w"]], axis=0)
        P = None
    else:
        if n_prompt and cfg.mode is ConsumptionMode.NONE:
            raise ModeMismatchError("prompt given to an encoder without context consumption")
        w = params["encoder.input.w"]
    x = x @ w + params["encoder.input.b"]
    T = x.shape[0]
    x = x + Tensor(positional_encoding(T, cfg.d_model))
    mask = None
    if cfg.mode is ConsumptionMode.PROMPT:
        mask = build_window_mask(T, n_prompt, cfg.cw)
    else:
        mask = build_window_mask(T, 0, cfg.cw)
    for b in range(cfg.n_blocks):
        use = P if cfg.uses_block_context(b) else None
        block_mask = mask if use is not None else mask[:, mask.shape[1] - T:]
        x = conformer_block(x, use, params, b, cfg, block_mask)
    return x
