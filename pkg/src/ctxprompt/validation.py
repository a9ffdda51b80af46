"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .data import Utterance
from .text import UNK, Vocabulary


def check_corpus(X, d_feat: int | None = None) -> list:
    """Return ``X`` as a list of utterances, rejecting malformed input early."""
    if isinstance(X, Utterance):
        X = [X]
    corpus = list(X)
    if not corpus:
        raise ValueError("corpus is empty")
    for u in corpus:
        if not isinstance(u, Utterance):
            raise TypeError(f"expected Utterance, got {type(u).__name__}")
        f = u.features
        if not isinstance(f, np.ndarray) or f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"{u.id}: features must be a non-empty [T, d_feat] array")
        if d_feat is not None and f.shape[1] != d_feat:
            raise ValueError(f"{u.id}: feature width {f.shape[1]} != expected {d_feat}")
        if not np.isfinite(f).all():
            raise ValueError(f"{u.id}: non-finite feature values")
    return corpus


def check_transcripts(corpus: list, vocab: Vocabulary) -> None:
    for u in corpus:
        if not u.transcript:
            raise ValueError(f"{u.id}: empty transcript")
        bad = [p for p, i in zip(u.transcript, vocab.ids(u.transcript)) if i <= UNK]
        if bad:
            raise ValueError(f"{u.id}: transcript pieces not in vocabulary: {bad}")


def check_context_mode(context: str) -> str:
    if context not in ("as-labeled", "force-empty"):
        raise ValueError(f"context must be 'as-labeled' or 'force-empty', got {context!r}")
    return context
