"""Synthetic multi-turn corpus with context-resolvable homophones.

Every word piece has a fixed random feature signature. Homophone pairs share
one signature, so acoustics alone cannot tell the two spellings apart. Which
member is spoken in turn ``k`` is decided by a cue word spoken in turn
``k-1``; a model that reads the previous turn's text can resolve it.
"""
from __future__ import annotations

import base64
import itertools
import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .text import SPECIALS, Vocabulary

WORD_MARK = "▁"


class CorpusFormatError(ValueError):
    """A corpus line could not be parsed."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class SynthConfig:
    vocab_size: int = 64
    n_homophone_pairs: int = 8
    frames_per_token: int = 6
    d_feat: int = 16
    noise: float = 0.3
    context_coverage: float = 0.7
    turns_per_session: int = 3
    n_sessions: int = 500
    min_fillers: int = 2
    max_fillers: int = 4
    n_letters: int = 10
    counterbalance: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.context_coverage <= 1.0:
            raise ValueError("context_coverage must lie in [0, 1]")
        if self.turns_per_session < 1 or self.n_sessions < 0:
            raise ValueError("need at least one turn per session")
        if self.n_letters < 2 or self.n_letters > 26:
            raise ValueError("n_letters must lie in [2, 26]")
        if self.n_words() > self.n_letters ** 2:
            raise ValueError("not enough letter pairs to spell the requested vocabulary")
        if self.n_fillers() < self.max_fillers:
            raise ValueError(
                f"vocab_size={self.vocab_size} leaves {self.n_fillers()} filler words, "
                f"fewer than max_fillers={self.max_fillers} for "
                f"{self.n_homophone_pairs} homophone pairs")

    def n_words(self) -> int:
        return self.vocab_size - len(SPECIALS) - 1 - self.n_letters

    def n_fillers(self) -> int:
        return self.n_words() - 4 * self.n_homophone_pairs


@dataclass(eq=False)
class Utterance:
    id: str
    features: np.ndarray
    transcript: list
    context_text: str = ""
    session: int = 0
    turn: int = 0
    ambiguous: list = field(default_factory=list)

    @property
    def has_context(self) -> bool:
        return bool(self.context_text)

    def __eq__(self, other):
        return (isinstance(other, Utterance) and self.id == other.id
                and self.transcript == other.transcript
                and self.context_text == other.context_text
                and self.session == other.session and self.turn == other.turn
                and self.ambiguous == other.ambiguous
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Lexicon:
    """Roles of the word pieces plus their feature signatures."""

    vocab: Vocabulary
    homophones: list  # [(piece_a, piece_b)] per pair
    cues: list  # [(cue_for_a, cue_for_b)] per pair
    fillers: list
    signatures: dict  # piece -> signature vector

    @property
    def ambiguous_pieces(self) -> set:
        return {p for pair in self.homophones for p in pair}


def build_lexicon(cfg: SynthConfig) -> Lexicon:
    rng = np.random.default_rng([cfg.seed, 0x1E7])
    letters = string.ascii_lowercase[: cfg.n_letters]
    spellings = [WORD_MARK + a + b for a, b in itertools.product(letters, repeat=2)]
    order = rng.permutation(len(spellings))[: cfg.n_words()]
    words = [spellings[i] for i in order]
    vocab = Vocabulary(list(SPECIALS) + [WORD_MARK] + list(letters) + words)
    n = cfg.n_homophone_pairs
    homophones = [(words[2 * i], words[2 * i + 1]) for i in range(n)]
    cues = [(words[2 * n + 2 * i], words[2 * n + 2 * i + 1]) for i in range(n)]
    fillers = words[4 * n:]
    signatures = {}
    for w in words:
        signatures[w] = rng.normal(0.0, 1.0, cfg.d_feat)
    for a, b in homophones:
        signatures[b] = signatures[a]
    return Lexicon(vocab, homophones, cues, fillers, signatures)


def _session_plan(cfg: SynthConfig, lex: Lexicon, rng: np.random.Generator) -> dict:
    n_turns = cfg.turns_per_session
    links = [(int(rng.integers(cfg.n_homophone_pairs)), int(rng.integers(2)))
             for _ in range(n_turns - 1)]
    turns = []
    for k in range(n_turns):
        n_fill = int(rng.integers(cfg.min_fillers, cfg.max_fillers + 1))
        slots = [("filler", f) for f in rng.choice(len(lex.fillers), n_fill, replace=False)]
        if k > 0:
            slots.append(("homophone", k - 1))
        if k < n_turns - 1:
            slots.append(("cue", k))
        turns.append([slots[i] for i in rng.permutation(len(slots))])
    has_ctx = [False] + [bool(rng.random() < cfg.context_coverage) for _ in range(n_turns - 1)]
    noise = [rng.normal(0.0, 1.0, (len(t) * cfg.frames_per_token, cfg.d_feat)) for t in turns]
    return {"links": links, "turns": turns, "has_ctx": has_ctx, "noise": noise}


def _realise(cfg, lex, plan, flips, session, variant) -> list:
    members = [(p, m ^ f) for (p, m), f in zip(plan["links"], flips)]
    utts = []
    prev_text = ""
    for k, slots in enumerate(plan["turns"]):
        pieces, ambiguous = [], []
        for kind, ref in slots:
            if kind == "filler":
                pieces.append(lex.fillers[ref])
            elif kind == "cue":
                p, m = members[ref]
                pieces.append(lex.cues[p][m])
            else:
                p, m = members[ref]
                ambiguous.append(len(pieces))
                pieces.append(lex.homophones[p][m])
        sig = np.repeat(np.stack([lex.signatures[w] for w in pieces]), cfg.frames_per_token, axis=0)
        feats = (sig + cfg.noise * plan["noise"][k]).astype(np.float32).astype(np.float64)
        uid = f"s{session:05d}v{variant}t{k}" if cfg.counterbalance else f"s{session:05d}t{k}"
        utts.append(Utterance(uid, feats, pieces, prev_text if plan["has_ctx"][k] else "",
                              session, k, ambiguous))
        prev_text = "".join(pieces)
    return utts


def gen_corpus(cfg: SynthConfig, sessions: Optional[Iterable[int]] = None) -> list:
    """Deterministic corpus; each session draws from its own ``(seed, index)`` stream.

    With ``counterbalance`` every session is emitted once per assignment of
    homophone members (all other draws shared), so every ambiguous turn has a
    twin with identical features and the other label.
    """
    lex = build_lexicon(cfg)
    out = []
    n_links = cfg.turns_per_session - 1
    for s in (range(cfg.n_sessions) if sessions is None else sessions):
        plan = _session_plan(cfg, lex, np.random.default_rng([cfg.seed, 1, s]))
        variants = itertools.product((0, 1), repeat=n_links) if cfg.counterbalance else [(0,) * n_links]
        for v, flips in enumerate(variants):
            out.extend(_realise(cfg, lex, plan, flips, s, v))
    return out


def context_coverage(corpus: list) -> float:
    """Fraction of non-initial turns that carry previous-turn text."""
    eligible = [u for u in corpus if u.turn > 0]
    return sum(u.has_context for u in eligible) / len(eligible) if eligible else 0.0


def spec_augment(features: np.ndarray, n_time_masks: int, time_width: int,
                 n_feat_masks: int, feat_width: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``n_time_masks`` strips of exactly ``time_width`` frames and
    ``n_feat_masks`` bands of ``feat_width`` channels, on a copy."""
    x = np.array(features, dtype=np.float64, copy=True)
    T, d = x.shape
    if time_width > T or feat_width > d:
        raise ValueError(f"mask widths ({time_width}, {feat_width}) exceed features {x.shape}")
    for _ in range(n_time_masks):
        t0 = int(rng.integers(0, T - time_width + 1))
        x[t0:t0 + time_width] = 0.0
    for _ in range(n_feat_masks):
        f0 = int(rng.integers(0, d - feat_width + 1))
        x[:, f0:f0 + feat_width] = 0.0
    return x


def _encode_features(x: np.ndarray) -> str:
    return base64.b64encode(x.astype("<f4").tobytes()).decode("ascii")


def write_corpus(corpus: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in corpus:
            rec = {
                "id": u.id, "session": u.session, "turn": u.turn,
                "transcript": u.transcript, "context_text": u.context_text,
                "ambiguous": u.ambiguous, "shape": list(u.features.shape),
                "features": _encode_features(u.features),
            }
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_corpus(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                shape = tuple(int(n) for n in rec["shape"])
                raw = np.frombuffer(base64.b64decode(rec["features"], validate=True), dtype="<f4")
                feats = raw.astype(np.float64).reshape(shape)
                out.append(Utterance(str(rec["id"]), feats, [str(p) for p in rec["transcript"]],
                                     str(rec["context_text"]), int(rec["session"]),
                                     int(rec["turn"]), [int(i) for i in rec["ambiguous"]]))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(lineno, str(exc)) from None
    return out
