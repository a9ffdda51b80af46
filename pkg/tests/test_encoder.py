import numpy as np
import pytest

from ctxprompt.attention import ModeMismatchError
from ctxprompt.encoder import (
    ConsumptionMode, EncoderConfig, conformer_block, encode, init_encoder_params,
    positional_encoding, subsample,
)
from ctxprompt.tensor import Tensor, grad_check, no_grad

MODES = [m.value for m in ConsumptionMode]


def setup(mode="none", seed=0, **kw):
    cfg = EncoderConfig(mode=mode, **kw)
    return cfg, init_encoder_params(cfg, np.random.default_rng(seed))


def prompt_for(mode, rng, d=32, n=3):
    if mode == "none":
        return None
    if mode == "feature-concat":
        return Tensor(rng.normal(size=(1, d)))
    return Tensor(rng.normal(size=(n, d)))


def randomise_zero_inits(params, rng):
    """Zero-initialised context kernels make their branch inert; wake them up."""
    for name, p in params.items():
        if name.endswith("mhca.w_o") or name.endswith("input.w_ctx"):
            p.data[...] = rng.normal(0, 0.3, p.shape)


class TestSubsample:
    def test_one_group(self):
        x = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(subsample(x, 3).data, [[0, 1, 2, 3, 4, 5]])

    def test_padding(self):
        x = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(subsample(x, 3).data, [[0, 1, 2, 3, 4, 5], [6, 7, 0, 0, 0, 0]])

    def test_shape(self):
        assert subsample(np.ones((9, 16)), 3).shape == (3, 48)

    def test_empty(self):
        with pytest.raises(ValueError):
            subsample(np.ones((0, 4)), 3)


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[2], [np.sin(2), np.cos(2), np.sin(2 / 100), np.cos(2 / 100)])


class TestConfig:
    def test_prompt_blocks_default_all(self):
        assert EncoderConfig(n_blocks=3).prompt_blocks == {0, 1, 2}

    def test_prompt_blocks_range(self):
        with pytest.raises(ValueError):
            EncoderConfig(n_blocks=2, prompt_blocks={2})

    def test_subsample_factor(self):
        with pytest.raises(ValueError):
            EncoderConfig(subsample_factor=0)


class TestBlock:
    def test_empty_prompt_equals_none_mode(self):
        cfg_n, params = setup("none")
        cfg_p = EncoderConfig(mode="prompt")
        x = Tensor(np.random.default_rng(1).normal(size=(5, 32)))
        a = conformer_block(x, None, params, 0, cfg_n).data
        b = conformer_block(x, Tensor(np.zeros((0, 32))), params, 0, cfg_p).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("mode", ["none", "prompt", "cross-attention"])
    def test_shape(self, mode):
        cfg, params = setup(mode)
        rng = np.random.default_rng(2)
        P = None if mode == "none" else Tensor(rng.normal(size=(4, 32)))
        assert conformer_block(Tensor(rng.normal(size=(7, 32))), P, params, 1, cfg).shape == (7, 32)

    @pytest.mark.parametrize("mode", ["none", "prompt", "cross-attention"])
    def test_causality(self, mode):
        cfg, params = setup(mode)
        rng = np.random.default_rng(3)
        randomise_zero_inits(params, rng)
        T = 10
        x = rng.normal(size=(T, 32))
        P = None if mode == "none" else Tensor(rng.normal(size=(2, 32)))
        base = conformer_block(Tensor(x), P, params, 0, cfg).data
        for j in range(T):
            x2 = x.copy()
            x2[j] += 1.0
            out = conformer_block(Tensor(x2), P, params, 0, cfg).data
            np.testing.assert_array_equal(out[:j], base[:j])

    def test_prompt_rejected_in_none_mode(self):
        cfg, params = setup("none")
        with pytest.raises(ModeMismatchError):
            conformer_block(Tensor(np.ones((3, 32))), Tensor(np.ones((2, 32))), params, 0, cfg)

    def test_grad_check_full_prompted_block(self):
        """Every parameter and input of a prompted block, 20 seeds."""
        cfg = EncoderConfig(mode="prompt", d_model=8, heads=2, d_head=4, n_blocks=1, cw=2)
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            params = init_encoder_params(cfg, rng)
            for p in params.values():
                p.data += rng.normal(0, 0.1, p.shape)
            x = Tensor(rng.normal(size=(5, 8)))
            P = Tensor(rng.normal(size=(2, 8)))
            target = Tensor(rng.normal(size=(5, 8)))
            worst = max(worst, grad_check(lambda t: (conformer_block(x, t, params, 0, cfg) * target).sum(), P))
            worst = max(worst, grad_check(lambda t: (conformer_block(t, P, params, 0, cfg) * target).sum(), x))
            name = sorted(params)[seed % len(params)]
            original = params[name]

            def through_param(t, name=name):
                params[name] = t
                try:
                    return (conformer_block(x, P, params, 0, cfg) * target).sum()
                finally:
                    params[name] = original

            worst = max(worst, grad_check(through_param, Tensor(original.data.copy())))
        assert worst < 1e-4


class TestEncode:
    def test_frame_count(self):
        cfg, params = setup("none")
        assert encode(np.ones((9, 16)), None, cfg, params).shape == (3, 32)

    def test_feature_concat_needs_single_row(self):
        cfg, params = setup("feature-concat")
        with pytest.raises(ModeMismatchError):
            encode(np.ones((9, 16)), Tensor(np.ones((2, 32))), cfg, params)

    @pytest.mark.parametrize("seed", range(100))
    def test_empty_prompt_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        cfg_n, params = setup("none", seed=seed)
        cfg_p = EncoderConfig(mode="prompt")
        feats = rng.normal(size=(int(rng.integers(1, 25)), 16))
        with no_grad():
            a = encode(feats, None, cfg_n, params).data
            b = encode(feats, Tensor(np.zeros((0, 32))), cfg_p, params).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("mode", MODES)
    def test_streaming_prefix_consistency(self, mode):
        """Every raw prefix reproduces the full encoding on its complete frame groups.

        Matrix products over different row counts may round differently, hence 1e-12.
        """
        cfg, params = setup(mode, seed=4)
        rng = np.random.default_rng(5)
        randomise_zero_inits(params, rng)
        P = prompt_for(mode, rng)
        feats = rng.normal(size=(36, 16))
        with no_grad():
            full = encode(feats, P, cfg, params).data
            assert full.shape[0] == 12
            for n_raw in range(1, 37):
                part = encode(feats[:n_raw], P, cfg, params).data
                complete = n_raw // cfg.subsample_factor
                np.testing.assert_allclose(part[:complete], full[:complete], rtol=0, atol=1e-12)

    def test_prompt_blocks_subset(self):
        cfg, params = setup("prompt", prompt_blocks={1})
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(12, 16))
        P = Tensor(rng.normal(size=(3, 32)), requires_grad=True)
        encode(feats, P, cfg, params).sum().backward()
        assert P.grad is not None and np.abs(P.grad).max() > 0
        cfg0, _ = setup("prompt", prompt_blocks=set())
        P0 = Tensor(rng.normal(size=(3, 32)), requires_grad=True)
        out = encode(feats, P0, cfg0, params)
        base = encode(feats, None, EncoderConfig(mode="none"), params)
        assert out.data.tobytes() == base.data.tobytes()

    def test_cross_attention_starts_as_no_op(self):
        cfg, params = setup("cross-attention")
        cfg_n = EncoderConfig(mode="none")
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(12, 16))
        a = encode(feats, Tensor(rng.normal(size=(4, 32))), cfg, params).data
        b = encode(feats, None, cfg_n, params).data
        assert a.tobytes() == b.tobytes()

    def test_parameter_accounting(self):
        _, none = setup("none")
        _, prompt = setup("prompt")
        _, ca = setup("cross-attention")
        size = lambda ps: sum(p.size for p in ps.values())
        assert size(prompt) == size(none)
        assert size(ca) - size(none) == 2 * 4 * 32 * 16
