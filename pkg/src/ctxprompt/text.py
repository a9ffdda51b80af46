"""Previous-turn text to prompt rows.

Context text is tokenized with the transducer's own sub-word vocabulary,
encoded by one of four generators (frozen sentence / frozen token / learned
table with random or copied init), pushed through a stack of dense+tanh
projections into the encoder width, layer-normalised and truncated to the
token window.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, DimensionError, embedding, layer_norm, tanh

BLANK = 0
UNK = 1
SPECIALS = ("<blank>", "<unk>")


class Vocabulary:
    """Ordered sub-word pieces; line index in the vocab file is the id."""

    def __init__(self, pieces: Sequence[str]):
        pieces = tuple(pieces)
        if pieces[:2] != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(pieces)) != len(pieces):
            raise ValueError("vocabulary pieces must be unique")
        self.pieces = pieces
        self._ids = {p: i for i, p in enumerate(pieces)}
        self._max_len = max((len(p) for p in pieces[2:]), default=1)

    def __len__(self):
        return len(self.pieces)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.pieces == other.pieces

    def __hash__(self):
        return hash(self.pieces)

    def __repr__(self):
        return f"Vocabulary({len(self)} pieces)"

    def id(self, piece: str) -> int:
        return self._ids.get(piece, UNK)

    def ids(self, pieces: Sequence[str]) -> list:
        return [self.id(p) for p in pieces]

    def piece(self, idx: int) -> str:
        return self.pieces[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for p in self.pieces:
                fh.write(p + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def tokenize(text: str, vocab: Vocabulary) -> list:
    """Greedy longest-match segmentation; characters with no piece map to unk."""
    out = []
    i, n = 0, len(text)
    while i < n:
        for j in range(min(n, i + vocab._max_len), i, -1):
            idx = vocab._ids.get(text[i:j])
            if idx is not None and idx > UNK:
                out.append(idx)
                i = j
                break
        else:
            out.append(UNK)
            i += 1
    return out


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return "".join(vocab.pieces[i] for i in ids)


class ContextEncoderKind(enum.Enum):
    FROZEN_SENTENCE = "frozen-sentence"
    FROZEN_TOKEN = "frozen-token"
    LEARNED_RANDOM = "learned-random"
    LEARNED_COPIED = "learned-copied"

    @property
    def frozen(self) -> bool:
        return self in (ContextEncoderKind.FROZEN_SENTENCE, ContextEncoderKind.FROZEN_TOKEN)


class FrozenTextEncoder:
    """Tiny BERT-shaped transformer with fixed seeded random weights.

    Two post-LN encoder layers of width 128 with 2 heads, a 512-wide GELU
    feed-forward, learned absolute position rows and a prepended CLS row.
    Nothing here is trainable; outputs are cached per token sequence.
    """

    width = 128
    n_layers = 2
    n_heads = 2
    ffn = 512
    max_positions = 512

    def __init__(self, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, f = self.width, self.ffn
        std = 0.2
        self.tok = rng.normal(0, 1.0, (vocab_size, d))
        self.cls = rng.normal(0, 1.0, d)
        self.pos = rng.normal(0, 0.1, (self.max_positions, d))
        self.layers = []
        for _ in range(self.n_layers):
            self.layers.append({
                "wq": rng.normal(0, std, (d, d)), "wk": rng.normal(0, std, (d, d)),
                "wv": rng.normal(0, std, (d, d)), "wo": rng.normal(0, std, (d, d)),
                "w1": rng.normal(0, std, (d, f)), "w2": rng.normal(0, std, (f, d)),
            })
        self._cache: dict = {}

    @property
    def n_params(self) -> int:
        return (self.tok.size + self.cls.size + self.pos.size
                + sum(w.size for layer in self.layers for w in layer.values()))

    def forward(self, tokens: Sequence[int]) -> tuple:
        """Return ``(rows [(S+1) x 128], truncated)``; row 0 is CLS."""
        tokens = tuple(int(t) for t in tokens)
        truncated = len(tokens) > self.max_positions - 1
        tokens = tokens[: self.max_positions - 1]
        hit = self._cache.get(tokens)
        if hit is None:
            hit = self._compute(tokens)
            hit.setflags(write=False)
            self._cache[tokens] = hit
        return hit, truncated

    def __call__(self, tokens: Sequence[int]) -> Tensor:
        return Tensor(self.forward(tokens)[0])

    def _compute(self, tokens: tuple) -> np.ndarray:
        x = np.vstack([self.cls[None], self.tok[list(tokens)]]) if tokens else self.cls[None].copy()
        x = x + self.pos[: x.shape[0]]
        x = _ln(x)
        h, dh = self.n_heads, self.width // self.n_heads
        L = x.shape[0]
        for p in self.layers:
            q = (x @ p["wq"]).reshape(L, h, dh).transpose(1, 0, 2)
            k = (x @ p["wk"]).reshape(L, h, dh).transpose(1, 0, 2)
            v = (x @ p["wv"]).reshape(L, h, dh).transpose(1, 0, 2)
            s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            a = (s @ v).transpose(1, 0, 2).reshape(L, self.width)
            x = _ln(x + a @ p["wo"])
            u = x @ p["w1"]
            u = 0.5 * u * (1.0 + np.tanh(0.7978845608028654 * (u + 0.044715 * u ** 3)))
            x = _ln(x + u @ p["w2"])
        return x


def _ln(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def encode_context(tokens: Sequence[int], kind: ContextEncoderKind, params: dict,
                   frozen: Optional[FrozenTextEncoder] = None) -> Tensor:
    """Token ids to encoder rows ``[S x d_enc]``.

    Frozen kinds read from ``frozen`` and produce constants (no gradient);
    learned kinds look rows up in ``params["prompt.embed"]``.
    """
    if kind.frozen:
        if frozen is None:
            raise ValueError(f"{kind.value} needs a frozen text encoder")
        rows, _ = frozen.forward(tokens)
        if kind is ContextEncoderKind.FROZEN_SENTENCE:
            return Tensor(rows[:1])
        return Tensor(rows[1:])
    return embedding(params["prompt.embed"], tokens)


@dataclass
class PromptConfig:
    d_enc: int
    d_model: int
    n_layers: int = 2
    token_window: int = 30
    keep: str = "first"

    def __post_init__(self):
        if self.token_window < 1:
            raise ValueError("token_window must be >= 1")
        if self.keep not in ("first", "last"):
            raise ValueError("keep must be 'first' or 'last'")


def init_prompt_params(cfg: PromptConfig, rng: np.random.Generator) -> dict:
    """Projection stack ``d_enc -> d_enc -> ... -> d_model`` plus the output LN."""
    params = {}
    dims = [cfg.d_enc] * cfg.n_layers + [cfg.d_model]
    for i in range(cfg.n_layers):
        params[f"prompt.proj{i}.w"] = glorot(rng, dims[i], dims[i + 1])
        params[f"prompt.proj{i}.b"] = Tensor(np.zeros(dims[i + 1]), requires_grad=True)
    params["prompt.ln.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
    params["prompt.ln.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
    return params


def project_prompt(enc: Tensor, params: dict, cfg: PromptConfig) -> Tensor:
    """Dense+tanh stack, layer norm, then keep at most ``token_window`` rows."""
    w0 = params["prompt.proj0.w"]
    if enc.ndim != 2 or enc.shape[1] != w0.shape[0]:
        raise DimensionError(
            f"context rows {enc.shape} do not match first projection {w0.shape}")
    if enc.shape[0] == 0:
        return Tensor(np.zeros((0, cfg.d_model)))
    x = enc
    for i in range(cfg.n_layers):
        x = tanh(x @ params[f"prompt.proj{i}.w"] + params[f"prompt.proj{i}.b"])
    x = layer_norm(x, params["prompt.ln.g"], params["prompt.ln.b"])
    if x.shape[0] > cfg.token_window:
        x = x[: cfg.token_window] if cfg.keep == "first" else x[-cfg.token_window:]
    return x


class IncompatibleCopyError(ValueError):
    """Source weights cannot be copied into the prompt path."""


def init_copied(embedding_source: Tensor, prompt_params: dict,
                cp_source: Optional[Tensor] = None) -> dict:
    """Copy-initialise the learned prompt path.

    The embedding table becomes a value copy of ``embedding_source`` (the
    prediction network's table). When ``cp_source`` is given it must match the
    first projection's shape and is copied into it. Shapes are checked before
    anything is written.
    """
    table = prompt_params.get("prompt.embed")
    if table is not None and table.shape != embedding_source.shape:
        raise IncompatibleCopyError(
            f"embedding table {table.shape} vs source {embedding_source.shape}")
    w0 = prompt_params["prompt.proj0.w"]
    if w0.shape[0] != embedding_source.shape[1]:
        raise IncompatibleCopyError(
            f"embedding width {embedding_source.shape[1]} does not feed projection {w0.shape}")
    if cp_source is not None and cp_source.shape != w0.shape:
        raise IncompatibleCopyError(
            f"cannot copy {cp_source.shape} into first projection {w0.shape}")
    out = dict(prompt_params)
    out["prompt.embed"] = Tensor(embedding_source.data.copy(), requires_grad=True)
    if cp_source is not None:
        out["prompt.proj0.w"] = Tensor(cp_source.data.copy(), requires_grad=True)
    return out


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, (d_in, d_out)), requires_grad=True)
