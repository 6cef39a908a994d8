"""Tests for model construction, forwards, reset-tuning and freezing."""

import numpy as np
import pytest
from scipy.special import erf

from crossbrain import numerics as nm
from crossbrain import precision
from crossbrain.errors import ConfigError, DimensionError, UnknownSubjectError
from crossbrain.losses import mse_loss
from crossbrain.model import (ModelConfig, embed, build, init_model, param_leaves,
                              reset_subject, set_translator_frozen, translate,
                              translator_hash)
from crossbrain.numerics import finite_diff_check
from crossbrain.training import create_optim_state, optimizer_step


def tiny_config(**overrides):
    base = dict(pooled_size=12, hidden_size=8, adapter_rank=3, n_translator_blocks=2,
                image_head_dims=(2, 3), text_head_dims=(3, 2))
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_state():
    return init_model(tiny_config(), ["a", "b", "c"], seed=11)


class TestInit:
    def test_deterministic(self):
        s1 = init_model(tiny_config(), ["a", "b"], seed=5)
        s2 = init_model(tiny_config(), ["a", "b"], seed=5)
        assert s1.params.keys() == s2.params.keys()
        for name in s1.params:
            np.testing.assert_array_equal(s1.params[name], s2.params[name])

    def test_seed_changes_something(self):
        s1 = init_model(tiny_config(), ["a"], seed=5)
        s2 = init_model(tiny_config(), ["a"], seed=6)
        assert any(not np.array_equal(s1.params[n], s2.params[n]) for n in s1.params)

    def test_structure(self, tiny_state):
        subject_prefixes = {n.split("/")[1] for n in tiny_state.params if n.startswith("subject/")}
        assert subject_prefixes == {"a", "b", "c"}
        translator_names = tiny_state.translator_param_names()
        assert len(translator_names) == 2 * 4 + 4  # blocks * 4 params + two heads * (w, b)
        modules = tiny_state.subject_modules("a")
        assert modules.embedder_linear_w.shape == (12, 8)
        assert modules.builder_linear_w.shape == (8, 12)

    def test_duplicate_subjects_rejected(self):
        with pytest.raises(ConfigError):
            init_model(tiny_config(), ["a", "a"], seed=0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            init_model(tiny_config(adapter_rank=99), ["a"], seed=0)


class TestEmbed:
    def test_zero_adapter_up_is_identity_adapter(self, tiny_state, rng):
        # adapter up is zero-initialized, so the adapter contributes nothing
        v = rng.standard_normal((4, 12)).astype(np.float32)
        full = embed(tiny_state, "a", v).value
        p = tiny_state.params
        s = "subject/a/embedder"
        x = v @ p[f"{s}/linear_w"] + p[f"{s}/linear_b"]
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + tiny_state.config.layer_norm_eps)
        manual = xhat * p[f"{s}/ln_gamma"] + p[f"{s}/ln_beta"]
        manual = manual * 0.5 * (1.0 + erf(manual * 2**-0.5))
        np.testing.assert_allclose(full, manual, atol=1e-5)

    def test_output_shape(self, tiny_state, rng):
        for n in (1, 3, 9):
            v = rng.standard_normal((n, 12)).astype(np.float32)
            assert embed(tiny_state, "b", v).value.shape == (n, 8)

    def test_unknown_subject(self, tiny_state, rng):
        with pytest.raises(UnknownSubjectError):
            embed(tiny_state, "zz", rng.standard_normal((2, 12)))

    def test_wrong_width(self, tiny_state, rng):
        with pytest.raises(DimensionError):
            embed(tiny_state, "a", rng.standard_normal((2, 13)))

    def test_gradient(self, rng):
        precision.set_precision("f64")
        state = init_model(tiny_config(), ["a"], seed=2)
        _nonzero_adapters(state, rng)
        v = rng.standard_normal((3, 12))
        leaves = param_leaves(state)
        names = state.subject_param_names("a")

        def f():
            e = embed(state, "a", v, leaves=leaves)
            return nm.mean_all(e * e)

        err = finite_diff_check(f, [leaves[n] for n in names], max_coords_per_param=8)
        assert err < 1e-4


def _nonzero_adapters(state, rng):
    """Fill the zero-initialized adapter-up matrices so their grads are exercised."""
    for name in state.params:
        if name.endswith("adapter_up"):
            state.params[name] = (0.1 * rng.standard_normal(state.params[name].shape)
                                  ).astype(state.params[name].dtype)


class TestBuild:
    def test_shape(self, tiny_state, rng):
        e = rng.standard_normal((5, 8)).astype(np.float32)
        assert build(tiny_state, "c", e).value.shape == (5, 12)

    def test_roundtrip_is_finite(self, tiny_state, rng):
        v = rng.standard_normal((4, 12)).astype(np.float32)
        out = build(tiny_state, "a", embed(tiny_state, "a", v)).value
        assert np.all(np.isfinite(out))

    def test_gradient_through_composite(self, rng):
        precision.set_precision("f64")
        state = init_model(tiny_config(), ["a"], seed=4)
        _nonzero_adapters(state, rng)
        v = rng.standard_normal((3, 12))
        leaves = param_leaves(state)
        names = state.subject_param_names("a")

        def f():
            e = embed(state, "a", v, leaves=leaves)
            v_hat = build(state, "a", e, leaves=leaves)
            return mse_loss(v_hat, v)

        err = finite_diff_check(f, [leaves[n] for n in names], max_coords_per_param=8)
        assert err < 1e-4


class TestTranslate:
    def test_zero_blocks_and_heads_passthrough(self, rng):
        # with head dims (1, h) and identity head weights, the head output
        # exposes the trunk: zeroed blocks must leave the input unchanged
        cfg = tiny_config(image_head_dims=(1, 8), text_head_dims=(1, 8))
        state = init_model(cfg, ["a"], seed=1)
        for name in state.translator_param_names():
            state.params[name] = np.zeros_like(state.params[name])
        e = rng.standard_normal((4, 8)).astype(np.float32)
        img, txt = translate(state, e)
        np.testing.assert_array_equal(img.value, np.zeros((4, 1, 8)))
        np.testing.assert_array_equal(txt.value, np.zeros((4, 1, 8)))
        state.params["translator/image_head_w"] = np.eye(8, dtype=np.float32)
        img, _ = translate(state, e)
        np.testing.assert_allclose(img.value[:, 0, :], e, atol=1e-6)

    def test_full_scale_head_shapes(self, rng):
        cfg = ModelConfig(pooled_size=16, hidden_size=8, adapter_rank=2,
                          n_translator_blocks=1)
        state = init_model(cfg, ["a"], seed=0)
        e = rng.standard_normal((2, 8)).astype(np.float32)
        img, txt = translate(state, e)
        assert img.value.shape == (2, 257, 768)
        assert txt.value.shape == (2, 77, 768)

    def test_non_residual_flag(self, rng):
        e = rng.standard_normal((3, 8)).astype(np.float32)
        res = translate(init_model(tiny_config(residual=True), ["a"], 3), e)[0].value
        seq = translate(init_model(tiny_config(residual=False), ["a"], 3), e)[0].value
        assert not np.allclose(res, seq)

    def test_gradient(self, rng):
        precision.set_precision("f64")
        state = init_model(tiny_config(), ["a"], seed=9)
        e = rng.standard_normal((3, 8))
        leaves = param_leaves(state)
        names = state.translator_param_names()

        def f():
            img, txt = translate(state, e, leaves=leaves)
            return nm.mean_all(img * img) + nm.mean_all(txt * txt)

        err = finite_diff_check(f, [leaves[n] for n in names], max_coords_per_param=8)
        assert err < 1e-4


class TestResetAndFreeze:
    def test_reset_preserves_translator_and_others(self, tiny_state):
        before_translator = translator_hash(tiny_state)
        before_b = {n: tiny_state.params[n].copy() for n in tiny_state.subject_param_names("b")}
        after = reset_subject(tiny_state, "a", seed=99)
        assert translator_hash(after) == before_translator
        for name, arr in before_b.items():
            np.testing.assert_array_equal(after.params[name], arr)
        assert any(not np.array_equal(after.params[n], tiny_state.params[n])
                   for n in tiny_state.subject_param_names("a"))

    def test_reset_same_seed_is_identical(self, tiny_state):
        r1 = reset_subject(tiny_state, "a", seed=42)
        r2 = reset_subject(tiny_state, "a", seed=42)
        for name in r1.subject_param_names("a"):
            np.testing.assert_array_equal(r1.params[name], r2.params[name])

    def test_reset_adds_unseen_subject(self, tiny_state):
        grown = reset_subject(tiny_state, "d", seed=1)
        assert grown.subjects == ["a", "b", "c", "d"]
        assert len(grown.subject_param_names("d")) == 12

    def test_frozen_translator_survives_updates(self, tiny_state, rng):
        state = set_translator_frozen(tiny_state, True)
        optim = create_optim_state(state.params)
        before = translator_hash(state)
        frozen = frozenset(state.translator_param_names())
        params = state.params
        for _ in range(100):
            grads = {n: rng.standard_normal(p.shape).astype(p.dtype) for n, p in params.items()}
            params, optim = optimizer_step(params, grads, optim, 1e-2, 0.01, frozen=frozen)
        state.params = params
        assert translator_hash(state) == before

    def test_unfrozen_translator_moves(self, tiny_state, rng):
        optim = create_optim_state(tiny_state.params)
        grads = {n: rng.standard_normal(p.shape).astype(p.dtype)
                 for n, p in tiny_state.params.items()}
        params, _ = optimizer_step(tiny_state.params, grads, optim, 1e-2, 0.0)
        name = tiny_state.translator_param_names()[0]
        assert not np.array_equal(params[name], tiny_state.params[name])

    def test_freezing_leaves_forward_unchanged(self, tiny_state, rng):
        v = rng.standard_normal((3, 12)).astype(np.float32)
        before = embed(tiny_state, "a", v).value
        frozen = set_translator_frozen(tiny_state, True)
        np.testing.assert_array_equal(embed(frozen, "a", v).value, before)


class TestReducedNetworkEquivalence:
    def test_zeroed_extras_match_hand_built_pipeline(self, rng):
        """With zero adapters and zero residual blocks, embed+translate collapses
        to linear -> norm -> gelu (-> heads), which we rebuild by hand."""
        cfg = tiny_config()
        state = init_model(cfg, ["a"], seed=7)
        for k in range(cfg.n_translator_blocks):
            for suffix in ("linear_w", "linear_b", "ln_beta"):
                name = f"translator/block{k}/{suffix}"
                state.params[name] = np.zeros_like(state.params[name])
        v = rng.standard_normal((4, 12)).astype(np.float32)
        e = embed(state, "a", v).value
        img, _ = translate(state, e)

        p = state.params
        x = v @ p["subject/a/embedder/linear_w"] + p["subject/a/embedder/linear_b"]
        mu = x.mean(axis=1, keepdims=True)
        xhat = (x - mu) / np.sqrt(x.var(axis=1, keepdims=True) + cfg.layer_norm_eps)
        x = xhat * p["subject/a/embedder/ln_gamma"] + p["subject/a/embedder/ln_beta"]
        x = x * 0.5 * (1.0 + erf(x * 2**-0.5))
        np.testing.assert_allclose(e, x, atol=1e-6)
        heads = x @ p["translator/image_head_w"] + p["translator/image_head_b"]
        np.testing.assert_allclose(img.value.reshape(4, -1), heads, atol=1e-6)


class TestSubjectIsolation:
    def test_updates_to_one_subject_do_not_touch_another(self, tiny_state, rng):
        optim = create_optim_state(tiny_state.params)
        b_before = {n: tiny_state.params[n].copy() for n in tiny_state.subject_param_names("b")}
        grads = {n: (rng.standard_normal(p.shape).astype(p.dtype)
                     if n.startswith("subject/a/") else None)
                 for n, p in tiny_state.params.items()}
        params, _ = optimizer_step(tiny_state.params, grads, optim, 1e-2, 0.01)
        for name, arr in b_before.items():
            np.testing.assert_array_equal(params[name], arr)
        assert any(not np.array_equal(params[n], tiny_state.params[n])
                   for n in tiny_state.subject_param_names("a"))
