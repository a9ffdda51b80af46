from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxprompt.data import (
    CorpusFormatError, SynthConfig, Utterance, build_lexicon, context_coverage, gen_corpus,
    read_corpus, spec_augment, write_corpus,
)
from ctxprompt.text import UNK, tokenize


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SynthConfig(n_sessions=200))


@pytest.fixture(scope="module")
def big():
    return gen_corpus(SynthConfig(n_sessions=3334))


class TestConfig:
    def test_vocab_too_small(self):
        with pytest.raises(ValueError):
            SynthConfig(vocab_size=30, n_homophone_pairs=8)

    def test_coverage_range(self):
        with pytest.raises(ValueError):
            SynthConfig(context_coverage=1.5)


class TestLexicon:
    def test_homophones_share_signature(self):
        lex = build_lexicon(SynthConfig())
        for a, b in lex.homophones:
            assert a != b and lex.vocab.id(a) != lex.vocab.id(b)
            assert lex.signatures[a] is lex.signatures[b] or np.array_equal(lex.signatures[a], lex.signatures[b])

    def test_distinct_signatures_otherwise(self):
        lex = build_lexicon(SynthConfig())
        sigs = {lex.signatures[w].tobytes() for w in lex.signatures}
        assert len(sigs) == len(lex.signatures) - len(lex.homophones)

    def test_alphabet_in_vocab(self):
        lex = build_lexicon(SynthConfig())
        text = "".join(lex.signatures)
        assert set(text) <= set(lex.vocab.pieces)
        assert len(lex.vocab) == 64


class TestGenCorpus:
    def test_frames_per_token(self, corpus):
        for u in corpus:
            assert u.features.shape == (6 * len(u.transcript), 16)

    def test_initial_turns_have_no_context(self, corpus):
        assert all(u.context_text == "" for u in corpus if u.turn == 0)

    def test_context_is_previous_transcript(self, corpus):
        by_key = {(u.session, u.turn): u for u in corpus}
        for u in corpus:
            if u.has_context:
                assert u.context_text == "".join(by_key[(u.session, u.turn - 1)].transcript)

    def test_noise_free_features_depend_only_on_tokens(self):
        cfg = SynthConfig(noise=0.0, n_sessions=50)
        seen = {}
        for u in gen_corpus(cfg):
            for i, w in enumerate(u.transcript):
                block = u.features[6 * i: 6 * (i + 1)]
                if w in seen:
                    np.testing.assert_array_equal(block, seen[w])
                seen[w] = block

    def test_homophone_members_sound_identical(self):
        cfg = SynthConfig(noise=0.0, n_sessions=50)
        lex = build_lexicon(cfg)
        blocks = {}
        for u in gen_corpus(cfg):
            for i, w in enumerate(u.transcript):
                blocks[w] = u.features[6 * i: 6 * (i + 1)]
        for a, b in lex.homophones:
            if a in blocks and b in blocks:
                np.testing.assert_array_equal(blocks[a], blocks[b])

    def test_deterministic(self):
        cfg = SynthConfig(n_sessions=30)
        assert gen_corpus(cfg) == gen_corpus(cfg)

    def test_session_streams_are_independent(self):
        cfg = SynthConfig(n_sessions=30)
        full = gen_corpus(cfg)
        part = gen_corpus(cfg, sessions=range(10, 20))
        assert part == [u for u in full if 10 <= u.session < 20]

    def test_seed_changes_corpus(self):
        assert gen_corpus(SynthConfig(n_sessions=5)) != gen_corpus(SynthConfig(n_sessions=5, seed=1))

    def test_coverage_concentration(self, big):
        assert len(big) >= 10_000
        assert 0.68 <= context_coverage(big) <= 0.72

    def test_transcripts_tokenize_back(self, corpus):
        lex = build_lexicon(SynthConfig())
        for u in corpus[:100]:
            ids = tokenize("".join(u.transcript), lex.vocab)
            assert ids == lex.vocab.ids(u.transcript) and UNK not in ids

    def test_cue_decides_member(self, corpus):
        """With the previous transcript in hand the ambiguous token is always recoverable."""
        lex = build_lexicon(SynthConfig())
        cue_to_member = {}
        for (a, b), (ca, cb) in zip(lex.homophones, lex.cues):
            cue_to_member[ca], cue_to_member[cb] = a, b
        by_key = {(u.session, u.turn): u for u in corpus}
        errors = 0
        for u in corpus:
            for pos in u.ambiguous:
                prev = by_key[(u.session, u.turn - 1)].transcript
                guesses = {cue_to_member[w] for w in prev if w in cue_to_member}
                pair = next(p for p in lex.homophones if u.transcript[pos] in p)
                guess = (guesses & set(pair)).pop()
                errors += guess != u.transcript[pos]
        assert errors == 0

    def test_features_alone_cannot_resolve(self, big):
        lex = build_lexicon(SynthConfig())
        counts = Counter(u.transcript[i] for u in big for i in u.ambiguous)
        total = sum(counts.values())
        minority = sum(min(counts[a], counts[b]) for a, b in lex.homophones)
        assert minority / total >= 0.45

    def test_counterbalanced_twins(self):
        cfg = SynthConfig(counterbalance=True, n_sessions=10)
        lex = build_lexicon(cfg)
        corpus = gen_corpus(cfg)
        assert len(corpus) == 10 * 4 * 3
        groups = {}
        for u in corpus:
            if u.ambiguous:
                groups.setdefault((u.session, u.turn, u.features.tobytes()), []).append(u)
        for twins in groups.values():
            labels = {tuple(u.transcript[i] for i in u.ambiguous) for u in twins}
            assert len(labels) == 2
        counts = Counter(u.transcript[i] for u in corpus for i in u.ambiguous)
        for a, b in lex.homophones:
            assert counts[a] == counts[b]


class TestSpecAugment:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(10, 4))
        np.testing.assert_array_equal(spec_augment(x, 0, 2, 0, 2, np.random.default_rng(0)), x)

    def test_full_time_mask(self):
        x = np.random.default_rng(0).normal(size=(10, 4))
        assert not spec_augment(x, 1, 10, 0, 1, np.random.default_rng(0)).any()

    def test_copy_semantics(self):
        x = np.random.default_rng(0).normal(size=(10, 4))
        before = x.copy()
        spec_augment(x, 2, 3, 1, 2, np.random.default_rng(1))
        np.testing.assert_array_equal(x, before)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 3), st.integers(1, 4), st.integers(0, 3), st.integers(1, 3))
    def test_masked_cell_count(self, seed, nt, wt, nf, wf):
        x = np.random.default_rng(seed).normal(size=(12, 6)) + 10.0
        out = spec_augment(x, nt, wt, nf, wf, np.random.default_rng(seed))
        # replay the same draws to build the union of masked cells
        rng = np.random.default_rng(seed)
        rows, cols = set(), set()
        for _ in range(nt):
            t0 = int(rng.integers(0, 12 - wt + 1))
            rows.update(range(t0, t0 + wt))
        for _ in range(nf):
            f0 = int(rng.integers(0, 6 - wf + 1))
            cols.update(range(f0, f0 + wf))
        expected = len(rows) * 6 + len(cols) * 12 - len(rows) * len(cols)
        assert int((out == 0).sum()) == expected

    def test_width_too_large(self):
        with pytest.raises(ValueError):
            spec_augment(np.ones((3, 4)), 1, 4, 0, 1, np.random.default_rng(0))


class TestCorpusFiles:
    def test_empty(self, tmp_path):
        write_corpus([], tmp_path / "c.jsonl")
        assert (tmp_path / "c.jsonl").read_bytes() == b""
        assert read_corpus(tmp_path / "c.jsonl") == []

    def test_single(self, tmp_path):
        u = gen_corpus(SynthConfig(n_sessions=1))[1]
        write_corpus([u], tmp_path / "c.jsonl")
        (back,) = read_corpus(tmp_path / "c.jsonl")
        assert back == u and back.features.tobytes() == u.features.tobytes()

    def test_large_round_trip(self, tmp_path, corpus):
        big = corpus + gen_corpus(SynthConfig(n_sessions=134), sessions=range(200, 334))
        assert len(big) >= 1000
        write_corpus(big, tmp_path / "c.jsonl")
        assert read_corpus(tmp_path / "c.jsonl") == big

    def test_rewrite_is_byte_identical(self, tmp_path, corpus):
        write_corpus(corpus, tmp_path / "a.jsonl")
        write_corpus(read_corpus(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_malformed_line(self, tmp_path):
        u = gen_corpus(SynthConfig(n_sessions=1))[0]
        write_corpus([u, u], tmp_path / "c.jsonl")
        with open(tmp_path / "c.jsonl", "a") as fh:
            fh.write('{"id": "x", "shape": [1]}\n')
        with pytest.raises(CorpusFormatError, match="line 3"):
            read_corpus(tmp_path / "c.jsonl")

    def test_bad_shape(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"id": "x", "session": 0, "turn": 0, "transcript": [], "context_text": "",'
                        ' "ambiguous": [], "shape": [2, 2], "features": "AAAAAA=="}\n')
        with pytest.raises(CorpusFormatError, match="line 1"):
            read_corpus(path)


def test_utterance_equality_covers_features():
    a = Utterance("x", np.zeros((6, 2)), ["▁ab"])
    b = Utterance("x", np.ones((6, 2)), ["▁ab"])
    assert a != b and a == Utterance("x", np.zeros((6, 2)), ["▁ab"])
