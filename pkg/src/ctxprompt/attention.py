"""Context consumption inside (or beside) the encoder's attention.

Three ways to feed prompt rows ``P`` to the acoustic stream ``A``:

* :func:`mhsa_prompted` prepends ``P`` to the keys/values of self-attention,
  reusing the block's own kernels; queries come from ``A`` only.
* :func:`mhca_biasing` adds a separate cross-attention residual after the
  plain self-attention.
* :func:`feature_concat` glues a single summary row onto every input frame.

Acoustic queries only see a causal sliding window of ``CW`` past frames; all
prompt columns are visible to every query.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (Tensor, DimensionError, concat, matmul, softmax_masked,
                     transpose)


class ModeMismatchError(ValueError):
    """Context supplied in a form the consumption mode cannot take."""


@dataclass
class AttentionBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    d_head: int
    w_qca: Optional[Tensor] = None
    w_kca: Optional[Tensor] = None
    w_vca: Optional[Tensor] = None
    w_oca: Optional[Tensor] = None

    def __post_init__(self):
        inner = self.heads * self.d_head
        for name in ("w_q", "w_k", "w_v", "w_qca", "w_kca", "w_vca"):
            w = getattr(self, name)
            if w is not None and w.shape[1] != inner:
                raise DimensionError(f"{name} has shape {w.shape}, expected (*, {inner})")
        for name in ("w_o", "w_oca"):
            w = getattr(self, name)
            if w is not None and w.shape[0] != inner:
                raise DimensionError(f"{name} has shape {w.shape}, expected ({inner}, *)")

    @property
    def has_cross(self) -> bool:
        return self.w_qca is not None

    @classmethod
    def from_params(cls, params: dict, prefix: str, heads: int, d_head: int):
        ca = f"{prefix}.mhca"
        sa = f"{prefix}.mhsa"
        return cls(params[f"{sa}.w_q"], params[f"{sa}.w_k"], params[f"{sa}.w_v"],
                   params[f"{sa}.w_o"], heads, d_head,
                   params.get(f"{ca}.w_q"), params.get(f"{ca}.w_k"),
                   params.get(f"{ca}.w_v"), params.get(f"{ca}.w_o"))


def build_window_mask(n_frames: int, n_prompt: int, cw: int) -> np.ndarray:
    """Boolean ``[T, S'+T]`` visibility; True means the key is visible.

    Query ``i`` sees every prompt column and acoustic frames ``i-cw .. i``.
    """
    if n_frames < 1 or cw < 0 or n_prompt < 0:
        raise ValueError(f"invalid mask request T={n_frames} S'={n_prompt} CW={cw}")
    i = np.arange(n_frames)[:, None]
    j = np.arange(n_frames)[None, :]
    acoustic = (j <= i) & (j >= i - cw)
    return np.concatenate([np.ones((n_frames, n_prompt), dtype=bool), acoustic], axis=1)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, w_q: Tensor, w_k: Tensor,
                         w_v: Tensor, w_o: Tensor, heads: int, d_head: int,
                         mask: np.ndarray) -> Tensor:
    T, L = q_in.shape[0], kv_in.shape[0]
    if mask.shape != (T, L):
        raise DimensionError(f"mask {mask.shape} does not match queries {T} x keys {L}")
    q = transpose((q_in @ w_q).reshape(T, heads, d_head), (1, 0, 2))
    k = transpose((kv_in @ w_k).reshape(L, heads, d_head), (1, 2, 0))
    v = transpose((kv_in @ w_v).reshape(L, heads, d_head), (1, 0, 2))
    scores = matmul(q, k) * (1.0 / np.sqrt(d_head))
    att = softmax_masked(scores, mask[None])
    ctx = transpose(matmul(att, v), (1, 0, 2)).reshape(T, heads * d_head)
    return ctx @ w_o


def mhsa_plain(A: Tensor, p: AttentionBlockParams, mask: np.ndarray) -> Tensor:
    if mask.shape != (A.shape[0], A.shape[0]):
        raise DimensionError(f"plain self-attention needs a [T,T] mask, got {mask.shape}")
    return multi_head_attention(A, A, p.w_q, p.w_k, p.w_v, p.w_o, p.heads, p.d_head, mask)


def mhsa_prompted(A: Tensor, P: Tensor, p: AttentionBlockParams, mask: np.ndarray,
                  token_window: Optional[int] = None) -> Tensor:
    """Self-attention whose keys/values are ``(P ⊕ A)`` under the shared kernels."""
    n_prompt = P.shape[0]
    if token_window is not None and n_prompt > token_window:
        raise ModeMismatchError(f"{n_prompt} prompt rows exceed token window {token_window}")
    if mask.shape != (A.shape[0], n_prompt + A.shape[0]):
        raise DimensionError(
            f"mask {mask.shape} was not built for T={A.shape[0]}, S'={n_prompt}")
    if n_prompt == 0:
        return mhsa_plain(A, p, mask)
    kv = concat([P, A], axis=0)
    return multi_head_attention(A, kv, p.w_q, p.w_k, p.w_v, p.w_o, p.heads, p.d_head, mask)


def mhca_biasing(mhsa_out: Tensor, P: Tensor, p: AttentionBlockParams) -> Tensor:
    """``mhsa_out + MHA(mhsa_out W_qca, P W_kca, P W_vca) W_oca``; identity if ``P`` is empty."""
    if not p.has_cross:
        raise ModeMismatchError("cross-attention kernels are missing")
    if P.shape[0] == 0:
        return mhsa_out
    mask = np.ones((mhsa_out.shape[0], P.shape[0]), dtype=bool)
    ca = multi_head_attention(mhsa_out, P, p.w_qca, p.w_kca, p.w_vca, p.w_oca,
                              p.heads, p.d_head, mask)
    return mhsa_out + ca


def feature_concat(P_cls: Tensor, A_input: Tensor, d_p: Optional[int] = None) -> Tensor:
    """Prepend the single summary row to every frame along the feature axis.

    An empty prompt stands for absent context and is replaced by zeros, which
    needs ``d_p`` when ``P_cls`` has no columns to read it from.
    """
    if P_cls.shape[0] > 1:
        raise ModeMismatchError(
            f"feature concatenation takes one summary row, got {P_cls.shape[0]}")
    T = A_input.shape[0]
    width = P_cls.shape[1] if P_cls.ndim == 2 and P_cls.shape[1] else d_p
    if P_cls.shape[0] == 0:
        if width is None:
            raise DimensionError("empty prompt needs an explicit width")
        rows = Tensor(np.zeros((T, width)))
    else:
        rows = P_cls + Tensor(np.zeros((T, P_cls.shape[1])))
    return concat([rows, A_input], axis=1)
