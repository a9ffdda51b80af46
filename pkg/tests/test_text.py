import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxprompt.data import SynthConfig, build_lexicon
from ctxprompt.tensor import DimensionError, Tensor
from ctxprompt.text import (
    BLANK, UNK, ContextEncoderKind, FrozenTextEncoder, IncompatibleCopyError, PromptConfig,
    Vocabulary, detokenize, encode_context, init_copied, init_prompt_params, project_prompt,
    tokenize,
)


def small_vocab():
    return Vocabulary(["<blank>", "<unk>", "a", "b", "ab"])


class TestVocabulary:
    def test_reserved_ids(self):
        v = small_vocab()
        assert v.id("<blank>") == BLANK and v.id("<unk>") == UNK

    def test_rejects_duplicates_and_missing_specials(self):
        with pytest.raises(ValueError):
            Vocabulary(["<blank>", "<unk>", "a", "a"])
        with pytest.raises(ValueError):
            Vocabulary(["a", "b"])

    def test_file_round_trip(self, tmp_path):
        v = build_lexicon(SynthConfig()).vocab
        v.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt") == v
        lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
        assert lines[v.id(v.pieces[7])] == v.pieces[7]


class TestTokenize:
    def test_empty(self):
        assert tokenize("", small_vocab()) == []

    def test_longest_match(self):
        v = small_vocab()
        assert tokenize("abab", v) == [v.id("ab"), v.id("ab")]

    def test_unknown_character(self):
        v = small_vocab()
        assert tokenize("axb", v) == [v.id("a"), UNK, v.id("b")]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip_on_corpus_text(self, seed):
        lex = build_lexicon(SynthConfig())
        rng = np.random.default_rng(seed)
        words = [lex.vocab.pieces[i] for i in rng.integers(2, len(lex.vocab), rng.integers(0, 12))]
        text = "".join(words)
        ids = tokenize(text, lex.vocab)
        assert UNK not in ids
        assert detokenize(ids, lex.vocab) == text


class TestEncodeContext:
    frozen = FrozenTextEncoder(64, seed=3)

    def test_learned_empty(self):
        params = {"prompt.embed": Tensor(np.ones((64, 32)))}
        assert encode_context([], ContextEncoderKind.LEARNED_RANDOM, params).shape == (0, 32)

    def test_frozen_token_shape(self):
        out = encode_context([2, 3, 4, 5, 6], ContextEncoderKind.FROZEN_TOKEN, {}, self.frozen)
        assert out.shape == (5, 128)

    def test_frozen_sentence_shape(self):
        out = encode_context([2, 3, 4, 5, 6], ContextEncoderKind.FROZEN_SENTENCE, {}, self.frozen)
        assert out.shape == (1, 128)
        assert not out.requires_grad

    def test_frozen_needs_encoder(self):
        with pytest.raises(ValueError):
            encode_context([2], ContextEncoderKind.FROZEN_TOKEN, {})


class TestFrozenEncoder:
    def test_deterministic(self):
        a = FrozenTextEncoder(64, seed=5).forward([4, 9, 2])[0]
        b = FrozenTextEncoder(64, seed=5).forward([4, 9, 2])[0]
        assert a.tobytes() == b.tobytes()

    def test_cls_only(self):
        rows, truncated = FrozenTextEncoder(64).forward([])
        assert rows.shape == (1, 128) and not truncated

    def test_order_matters(self):
        enc = FrozenTextEncoder(64)
        a = enc.forward([4, 9, 2])[0]
        b = enc.forward([2, 9, 4])[0]
        assert np.abs(a[0] - b[0]).max() > 1e-3

    def test_overlong_flagged(self):
        rows, truncated = FrozenTextEncoder(16).forward([3] * 600)
        assert truncated and rows.shape == (512, 128)

    def test_architecture(self):
        enc = FrozenTextEncoder(64)
        assert (enc.width, enc.n_layers, enc.n_heads, enc.max_positions) == (128, 2, 2, 512)


def prompt_setup(d_enc=32, d_model=32, tw=30, seed=0):
    cfg = PromptConfig(d_enc=d_enc, d_model=d_model, token_window=tw)
    return cfg, init_prompt_params(cfg, np.random.default_rng(seed))


class TestProjectPrompt:
    def test_empty(self):
        cfg, params = prompt_setup()
        assert project_prompt(Tensor(np.zeros((0, 32))), params, cfg).shape == (0, 32)

    def test_truncation_keeps_first_rows(self):
        cfg, params = prompt_setup(tw=30)
        x = np.random.default_rng(1).normal(size=(40, 32))
        full = project_prompt(Tensor(x), params, PromptConfig(32, 32, token_window=100))
        out = project_prompt(Tensor(x), params, cfg)
        assert out.shape == (30, 32)
        assert out.data.tobytes() == full.data[:30].tobytes()

    def test_keep_last_option(self):
        cfg, params = prompt_setup()
        x = np.random.default_rng(1).normal(size=(40, 32))
        full = project_prompt(Tensor(x), params, PromptConfig(32, 32, token_window=100))
        out = project_prompt(Tensor(x), params, PromptConfig(32, 32, token_window=30, keep="last"))
        assert out.data.tobytes() == full.data[10:].tobytes()

    def test_layer_norm_statistics(self):
        cfg, params = prompt_setup()
        out = project_prompt(Tensor(np.random.default_rng(2).normal(size=(3, 32))), params, cfg).data
        assert np.abs(out.mean(-1)).max() < 1e-9
        assert np.abs(out.var(-1) - 1).max() < 1e-3

    def test_output_width_is_model_width(self):
        cfg, params = prompt_setup(d_enc=128, d_model=24)
        assert project_prompt(Tensor(np.ones((4, 128))), params, cfg).shape == (4, 24)

    def test_dim_mismatch(self):
        cfg, params = prompt_setup()
        with pytest.raises(DimensionError):
            project_prompt(Tensor(np.ones((3, 31))), params, cfg)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            PromptConfig(32, 32, token_window=0)

    def test_parameter_count(self):
        cfg, params = prompt_setup(d_enc=128, d_model=32)
        expected = (128 * 128 + 128) + (128 * 32 + 32) + 2 * 32
        assert sum(p.size for p in params.values()) == expected

    def test_gradients_reach_trainable_parts_only(self):
        cfg, params = prompt_setup()
        params = init_copied(Tensor(np.random.default_rng(0).normal(size=(64, 32))), params)
        enc = encode_context([3, 4, 5], ContextEncoderKind.LEARNED_COPIED, params)
        (project_prompt(enc, params, cfg) * Tensor(np.random.default_rng(1).normal(size=(3, 32)))).sum().backward()
        for name, p in params.items():
            assert p.grad is not None and np.abs(p.grad).max() > 0, name

    def test_frozen_rows_have_no_gradient_path(self):
        frozen = FrozenTextEncoder(64)
        enc = encode_context([3, 4], ContextEncoderKind.FROZEN_TOKEN, {}, frozen)
        cfg, params = prompt_setup(d_enc=128)
        before = frozen.layers[0]["wq"].copy()
        project_prompt(enc, params, cfg).sum().backward()
        assert enc.grad is None or not enc.requires_grad
        assert params["prompt.proj0.w"].grad is not None
        assert frozen.layers[0]["wq"].tobytes() == before.tobytes()


class TestInitCopied:
    def test_value_copy(self):
        cfg, params = prompt_setup()
        src = Tensor(np.random.default_rng(0).normal(size=(64, 32)))
        out = init_copied(src, params)
        snapshot = out["prompt.embed"].data.copy()
        src.data += 1.0
        assert out["prompt.embed"].data.tobytes() == snapshot.tobytes()

    def test_cp_copies_first_projection(self):
        cfg, params = prompt_setup()
        joint = Tensor(np.random.default_rng(1).normal(size=(32, 32)))
        out = init_copied(Tensor(np.ones((64, 32))), params, joint)
        assert out["prompt.proj0.w"].data.tobytes() == joint.data.tobytes()
        assert out["prompt.proj0.w"] is not joint

    def test_cp_shape_mismatch_leaves_params_untouched(self):
        cfg, params = prompt_setup()
        before = {k: v.data.copy() for k, v in params.items()}
        with pytest.raises(IncompatibleCopyError):
            init_copied(Tensor(np.ones((64, 32))), params, Tensor(np.ones((32, 16))))
        assert "prompt.embed" not in params
        for k, v in params.items():
            assert v.data.tobytes() == before[k].tobytes()

    def test_embedding_width_mismatch(self):
        cfg, params = prompt_setup()
        with pytest.raises(IncompatibleCopyError):
            init_copied(Tensor(np.ones((64, 16))), params)
