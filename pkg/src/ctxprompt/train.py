"""Optimisation, freeze regimes, checkpoints and WER evaluation."""
from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Utterance, spec_augment
from .model import TransducerModel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTXPCKPT"
CHECKPOINT_VERSION = 1


class Regime(enum.Enum):
    ALL = "all"
    MHA_AND_PROJECTIONS = "mha-and-projections"
    PROJECTIONS_ONLY = "projections-only"


class FreezeMask:
    """Which named parameters a regime lets the optimiser touch."""

    def __init__(self, regime):
        self.regime = Regime(regime)

    def __call__(self, name: str) -> bool:
        if self.regime is Regime.ALL:
            return True
        if name.startswith("prompt."):
            return True
        if self.regime is Regime.MHA_AND_PROJECTIONS:
            return ".mhsa." in name or ".mhca." in name
        return False

    def __repr__(self):
        return f"FreezeMask({self.regime.value})"


@dataclass
class TrainConfig:
    lr_peak: float = 3e-3
    warmup_steps: int = 200
    decay_rate: float = 0.5
    decay_interval: int = 1000
    total_steps: int = 2000
    batch_size: int = 8
    regime: str = "all"
    checkpoint_interval: int = 50
    n_average: int = 10
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    spec_augment: bool = True
    time_masks: int = 1
    time_width: int = 2
    feat_masks: int = 1
    feat_width: int = 2
    use_context: bool = True

    def __post_init__(self):
        Regime(self.regime)
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        if self.n_average < 1:
            raise ValueError("n_average must be >= 1")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr_peak`` then exponential decay."""
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * cfg.decay_rate ** ((step - cfg.warmup_steps) / cfg.decay_interval)


class Adam:
    """Adam with bias correction over a dict of named tensors.

    Parameters rejected by ``trainable`` are never read or written.
    """

    def __init__(self, params: dict, cfg: TrainConfig, trainable: Callable[[str], bool] = lambda n: True):
        self.cfg = cfg
        self.names = [n for n in params if trainable(n)]
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.step_count = 0

    def step(self, params: dict, grads: Optional[dict] = None, lr: Optional[float] = None) -> float:
        """Apply one update; ``grads`` defaults to each tensor's ``.grad``."""
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        lr = learning_rate(t, cfg) if lr is None else lr
        if grads is None:
            grads = {n: params[n].grad for n in self.names}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
        scale = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            g = g * scale
            self.m[n] = cfg.beta1 * self.m[n] + (1 - cfg.beta1) * g
            self.v[n] = cfg.beta2 * self.v[n] + (1 - cfg.beta2) * g * g
            mhat = self.m[n] / (1 - cfg.beta1 ** t)
            vhat = self.v[n] / (1 - cfg.beta2 ** t)
            params[n].data = params[n].data - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        return lr


# checkpoints -------------------------------------------------------------------

def save_checkpoint(params: dict, path) -> None:
    """Binary layout: magic, version, count, then per parameter
    ``name_len, name, rank, extents..., float64 payload`` (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(_array(params[name]), dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out


def _array(x) -> np.ndarray:
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def checkpoint_average(checkpoints: Sequence) -> dict:
    """Elementwise mean of checkpoints given as dicts or file paths."""
    if not checkpoints:
        raise ValueError("nothing to average")
    loaded = [c if isinstance(c, dict) else load_checkpoint(c) for c in checkpoints]
    names = set(loaded[0])
    for ck in loaded[1:]:
        if set(ck) != names:
            raise ValueError(f"parameter names differ: {sorted(names ^ set(ck))}")
        for n in names:
            if _array(ck[n]).shape != _array(loaded[0][n]).shape:
                raise ValueError(f"{n}: shapes differ across checkpoints")
    return {n: sum(_array(ck[n]) for ck in loaded) / len(loaded) for n in sorted(names)}


# metrics -----------------------------------------------------------------------

def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp: Sequence, ref: Sequence) -> float:
    if not ref:
        raise ValueError("reference must not be empty")
    return edit_distance(hyp, ref) / len(ref)


def rwerr(baseline_wer: float, candidate_wer: float) -> float:
    """Relative WER reduction in percent."""
    if baseline_wer <= 0:
        raise ValueError("baseline WER must be positive")
    return 100.0 * (baseline_wer - candidate_wer) / baseline_wer


def evaluate(model: TransducerModel, corpus: Sequence[Utterance], context: str = "as-labeled",
             max_symbols_per_frame: int = 4) -> dict:
    """Corpus-level WERs (total edits over total reference tokens) per subset.

    ``ambiguous`` is the subset of utterances containing a homophone;
    ``with_context``/``without_context`` split by whether previous-turn text
    is attached. ``context="force-empty"`` drops all context at decode time.
    """
    if context not in ("as-labeled", "force-empty"):
        raise ValueError(f"unknown context mode {context!r}")
    if not corpus:
        raise ValueError("empty corpus")
    counts = {k: [0, 0, 0] for k in ("all", "with_context", "without_context", "ambiguous",
                                      "ambiguous_with_context")}
    hyps = []
    for u in corpus:
        ctx = u.context_text if context == "as-labeled" else ""
        hyp = model.decode(u.features, ctx, max_symbols_per_frame)
        ref = model.vocab.ids(u.transcript)
        e = edit_distance(hyp, ref)
        hyps.append(hyp)
        keys = ["all", "with_context" if u.has_context else "without_context"]
        if u.ambiguous:
            keys.append("ambiguous")
            if u.has_context:
                keys.append("ambiguous_with_context")
        for k in keys:
            counts[k][0] += e
            counts[k][1] += len(ref)
            counts[k][2] += 1
    out = {"context": context, "hyps": hyps}
    for k, (e, n, m) in counts.items():
        out[f"wer_{k}"] = e / n if n else 0.0
        out[f"n_{k}"] = m
    out["wer_ambiguous_tokens"] = out["wer_ambiguous"]
    return out


# training ----------------------------------------------------------------------

class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def train(model: TransducerModel, corpus: Sequence[Utterance], cfg: TrainConfig, seed: int,
          checkpoint_dir=None, log: Optional[Callable[[dict], None]] = None) -> dict:
    """Minibatch RNN-T training under the regime's freeze mask.

    Keeps the last ``n_average`` interval checkpoints, loads their average
    into ``model`` at the end and returns ``{"history", "checkpoints"}``.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng([seed, 11])
    mask = FreezeMask(cfg.regime)
    params = model.params
    trainable = [n for n in params if mask(n)]
    for n, w in params.items():
        w.requires_grad = n in trainable
    opt = Adam(params, cfg, mask)
    targets = [model.vocab.ids(u.transcript) for u in corpus]
    order = rng.permutation(len(corpus))
    cursor = 0
    history, kept, paths = [], [], []
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    for step in range(1, cfg.total_steps + 1):
        for n in trainable:
            params[n].grad = None
        total, n_tok = 0.0, 0
        batch = []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(corpus)), 0
            batch.append(order[cursor])
            cursor += 1
        n_tok = sum(len(targets[i]) for i in batch)
        for i in batch:
            u = corpus[i]
            feats = u.features
            if cfg.spec_augment:
                feats = spec_augment(feats, cfg.time_masks, cfg.time_width,
                                     cfg.feat_masks, cfg.feat_width, rng)
            ctx = u.context_text if cfg.use_context else ""
            loss = model.loss(feats, targets[i], ctx)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at step {step} on {u.id}")
            (loss * (1.0 / n_tok)).backward()
            total += loss.item()
        lr = opt.step(params)
        rec = {"step": step, "loss": total / n_tok, "lr": lr}
        history.append(rec)
        if log is not None:
            log(rec)
        if step % cfg.checkpoint_interval == 0 or step == cfg.total_steps:
            snap = {n: w.data.copy() for n, w in params.items()}
            kept = (kept + [snap])[-cfg.n_average:]
            if ckdir is not None:
                path = ckdir / f"ckpt_{step:06d}.bin"
                save_checkpoint(snap, path)
                paths.append(path)
    for w in params.values():
        w.grad = None
    averaged = checkpoint_average(kept)
    for n in trainable:
        params[n].data = averaged[n]
    averaged = {n: w.data for n, w in params.items()}
    if ckdir is not None:
        save_checkpoint(averaged, ckdir / "averaged.bin")
    return {"history": history, "checkpoints": paths}


def write_metrics(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(json.dumps({"step": rec["step"], "loss": rec["loss"], "lr": rec["lr"]}) + "\n")
