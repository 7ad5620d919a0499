import math

import numpy as np
import pytest

from patchlm import model as M
from patchlm import tensor as T
from patchlm.encoding import PAD, VOCAB


def tiny_cfg(**over):
    base = dict(
        embedding_dim=8, num_layers=2, num_heads=2, mlp_ratio=2,
        dropout_rate=0.0, attention_dropout=0.0, stochastic_depth_rate=0.0,
        patch_min=3, patch_max=3, final_patch=None, final_patch_layers=0,
        loops_per_layer=2, tcn_dilations=(1, 2), init_std=0.3,
    )
    base.update(over)
    return M.ModelConfig(**base)


class TestConfig:
    def test_paper_defaults(self):
        cfg = M.PRESETS["paper"]
        assert (cfg.embedding_dim, cfg.num_layers, cfg.num_heads, cfg.mlp_ratio) == (1024, 20, 4, 2)
        assert (cfg.dropout_rate, cfg.attention_dropout, cfg.stochastic_depth_rate) == (0.15, 0.1, 0.15)
        assert (cfg.patch_min, cfg.patch_max, cfg.final_patch) == (16, 32, 1024)

    def test_from_dict_with_preset(self):
        cfg = M.config_from_dict({"preset": "desk", "num_layers": 3})
        assert cfg.num_layers == 3 and cfg.embedding_dim == 64

    def test_validation(self):
        with pytest.raises(ValueError):
            M.ModelConfig(vocab=300)
        with pytest.raises(ValueError):
            M.ModelConfig(embedding_dim=10, num_heads=3)
        with pytest.raises(ValueError):
            M.ModelConfig(patch_min=8, patch_max=4)

    def test_patch_schedule(self):
        cfg = M.ModelConfig(num_layers=4, patch_min=16, patch_max=32, final_patch=1024, final_patch_layers=2)
        rng = np.random.default_rng(0)
        assert M.layer_patch_size(cfg, 3, "eval") == 1024
        assert M.layer_patch_size(cfg, 2, "train", rng) == 1024
        assert M.layer_patch_size(cfg, 0, "eval") == 24
        draws = {M.layer_patch_size(cfg, 0, "train", rng) for _ in range(200)}
        assert draws <= set(range(16, 33)) and len(draws) > 5


class TestForward:
    def test_single_token_shape(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=0)
        out = M.forward([65], cfg, params)
        assert out.shape == (1, VOCAB)

    def test_all_padding_input_finite(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=1)
        out = M.forward([PAD] * 7, cfg, params)
        assert np.isfinite(out.data).all()

    def test_suffix_perturbation_causality(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=2)
        rng = np.random.default_rng(3)
        for _ in range(10):
            n = int(rng.integers(4, 30))
            t = int(rng.integers(1, n))
            toks = rng.integers(0, 256, size=n)
            base = M.forward(toks, cfg, params).data
            toks2 = toks.copy()
            toks2[t:] = rng.integers(0, 256, size=n - t)
            out2 = M.forward(toks2, cfg, params).data
            np.testing.assert_array_equal(base[:t], out2[:t])

    def test_stochastic_depth_eval_identity(self):
        cfg = tiny_cfg(stochastic_depth_rate=0.5)
        cfg_off = tiny_cfg(stochastic_depth_rate=0.0)
        params = M.init_params(cfg, seed=4)
        toks = [1, 2, 3, 4, 5]
        a = M.forward(toks, cfg, params, mode="eval").data
        b = M.forward(toks, cfg_off, params, mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_train_mode_deterministic_given_seed(self):
        cfg = tiny_cfg(dropout_rate=0.1, stochastic_depth_rate=0.2, patch_max=5)
        params = M.init_params(cfg, seed=5)
        toks = list(range(20))
        a = M.forward(toks, cfg, params, mode="train", rng=np.random.default_rng(9)).data
        b = M.forward(toks, cfg, params, mode="train", rng=np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_end_to_end_grad_check(self):
        cfg = tiny_cfg(embedding_dim=6, num_layers=1, num_heads=2, tcn_dilations=(1,))
        params = M.init_params(cfg, seed=6)
        toks = [3, 1, 4, 1, 5, 9, 2, 6]
        targets = toks[1:] + [PAD]

        worst = 0.0
        rng = np.random.default_rng(0)
        for name, tensor in params.named_tensors().items():
            def f(t, _name=name, _orig=tensor):
                params.replace_tensor(_name, t)
                try:
                    logits = M.forward(toks, cfg, params)
                    return T.cross_entropy(logits, targets, ignore={PAD})
                finally:
                    params.replace_tensor(_name, _orig)

            probe = T.parameter(tensor.data.copy())
            err = T.grad_check(f, probe, eps=1e-5, sample=10, rng=rng)
            worst = max(worst, err)
        assert worst < 1e-6


class TestLoss:
    def test_uniform_ppl(self):
        logits = T.Tensor(np.zeros((5, VOCAB)))
        nll, ppl = M.loss_and_ppl(logits, [1, 2, 3, 4, 5])
        assert abs(ppl - VOCAB) < 1e-9

    def test_perfect_ppl(self):
        tgt = [10, 20, 30]
        z = np.zeros((3, VOCAB))
        for i, t in enumerate(tgt):
            z[i, t] = 40.0
        nll, ppl = M.loss_and_ppl(T.Tensor(z), tgt)
        assert abs(ppl - 1.0) < 1e-9

    def test_padding_ignored(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(4, VOCAB))
        nll_full, _ = M.loss_and_ppl(T.Tensor(z[:2]), [5, 6])
        nll_pad, _ = M.loss_and_ppl(T.Tensor(z), [5, 6, PAD, PAD])
        assert abs(nll_full - nll_pad) < 1e-12


class TestGenerate:
    def test_forced_eos_gives_empty_continuation(self):
        cfg = tiny_cfg(num_layers=1)
        params = M.init_params(cfg, seed=8)
        for _, tensor in params.named_tensors().items():
            tensor.data[:] = 0.0
        params.embedding.data[:] = 1.0
        params.lm_head.data[257, :] = 1.0
        out = M.generate(b"hi", cfg, params, policy="greedy", max_new=10)
        assert out == b""

    def test_greedy_deterministic(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=9)
        a = M.generate(b"abc", cfg, params, policy="greedy", max_new=8)
        b = M.generate(b"abc", cfg, params, policy="greedy", max_new=8)
        assert a == b

    def test_sampling_deterministic_given_seed(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=10)
        for policy in ("temp:0.7", "topk:5"):
            a = M.generate(b"xy", cfg, params, policy=policy, max_new=6, seed=42)
            b = M.generate(b"xy", cfg, params, policy=policy, max_new=6, seed=42)
            assert a == b

    def test_bad_policy(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, seed=11)
        with pytest.raises(ValueError):
            M.generate(b"x", cfg, params, policy="beam:3")


class TestParams:
    def test_param_count_formula(self):
        cfg = tiny_cfg(embedding_dim=8, num_layers=2, mlp_ratio=2, tcn_dilations=(1, 2))
        params = M.init_params(cfg, seed=12)
        d, hidden, k = 8, 16, 3
        per_layer = 5 * d * d + hidden * d + 2 * (hidden * hidden * k) + d * hidden
        want = d * VOCAB + 2 * per_layer + VOCAB * d
        assert params.param_count() == want

    def test_desk_preset_under_two_million(self):
        params = M.init_params(M.PRESETS["desk"], seed=0)
        assert params.param_count() < 2_000_000

    def test_tied_head_shares_embedding(self):
        cfg = tiny_cfg(tie_lm_head=True)
        params = M.init_params(cfg, seed=13)
        assert params.lm_head is None
        logits = M.forward([1, 2, 3], cfg, params)
        loss = T.cross_entropy(logits, [2, 3, PAD], ignore={PAD})
        loss.backward()
        assert params.embedding.grad is not None
