"""Model invariants: size/permutation invariance, query independence, grads."""
import numpy as np
import pytest

from fraclab import autodiff as ad
from fraclab import model as mdl
from fraclab.autodiff import Tensor
from fraclab.core import SeededRng
from fraclab.deck import ContextEmbedding, FallbackProvider


def tiny_config(**overrides):
    base = dict(
        d_enc=8, d_dec=8, n_latents=4, n_self_layers=1,
        enc_cross_heads=2, enc_self_heads=2, dec_cross_heads=1,
        pos_bands=2, pos_max_freq=8.0, context_dim=16, ff_mult=2,
    )
    base.update(overrides)
    return mdl.ModelConfig(**base)


def random_batch(n, seed=0, features=1):
    gen = np.random.Generator(np.random.PCG64(seed))
    return mdl.TokenBatch(coords=gen.uniform(size=(n, 2)), features=gen.uniform(size=(n, features)))


def random_context(t, d, seed=1):
    gen = np.random.Generator(np.random.PCG64(seed))
    return ContextEmbedding(gen.standard_normal((t, d)).astype(np.float32), "test", "h")


class TestPositionalEncoding:
    def test_dimensions(self):
        out = mdl.positional_encoding(np.array([[0.5, 0.5]]), bands=32)
        assert out.shape == (1, 130)

    def test_origin_values(self):
        out = mdl.positional_encoding(np.array([[0.0, 0.0]]), bands=4)[0]
        # per axis: 4 sins then 4 cosines; raw coords at the end
        for axis in range(2):
            base = axis * 8
            assert np.allclose(out[base : base + 4], 0.0)
            assert np.allclose(out[base + 4 : base + 8], 1.0)
        assert np.allclose(out[16:], 0.0)

    def test_nearby_points_differ_in_high_bands_first(self):
        a = mdl.positional_encoding(np.array([[0.25, 0.5]]), bands=8, max_freq=64.0)[0]
        b = mdl.positional_encoding(np.array([[0.2501, 0.5]]), bands=8, max_freq=64.0)[0]
        sin_diffs = np.abs(a[:8] - b[:8])  # x-axis sines, low to high frequency
        assert sin_diffs[-1] > 10 * sin_diffs[0]

    def test_out_of_unit_square_rejected(self):
        with pytest.raises(ValueError):
            mdl.positional_encoding(np.array([[1.5, 0.0]]))


class TestEncoder:
    def test_size_invariance(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        for n in (1, 10, 1000):
            z = mdl.encode(random_batch(n), params, cfg)
            assert z.shape == (cfg.n_latents, cfg.d_enc)

    def test_permutation_invariance(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        batch = random_batch(64, seed=3)
        z1 = mdl.encode(batch, params, cfg).values
        perm = np.random.Generator(np.random.PCG64(5)).permutation(64)
        batch2 = mdl.TokenBatch(coords=batch.coords[perm], features=batch.features[perm])
        z2 = mdl.encode(batch2, params, cfg).values
        assert np.abs(z1 - z2).max() < 1e-10

    def test_all_equal_keys_values_give_common_value(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(2))
        gen = np.random.Generator(np.random.PCG64(9))
        kv_row = gen.standard_normal(cfg.d_enc)
        kv = Tensor(np.tile(kv_row, (7, 1)))
        q_a = Tensor(gen.standard_normal((4, cfg.d_enc)))
        q_b = Tensor(gen.standard_normal((4, cfg.d_enc)))
        out_a = mdl.attention_update(q_a, kv, params, "encoder.cross", cfg.enc_cross_heads)
        out_b = mdl.attention_update(q_b, kv, params, "encoder.cross", cfg.enc_cross_heads)
        # softmax over identical keys is uniform -> output is the projected
        # common value row regardless of the queries
        assert np.abs(out_a.values - out_b.values[:1]).max() < 1e-12
        assert np.abs(out_a.values - out_a.values[:1]).max() < 1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            mdl.TokenBatch(coords=np.empty((0, 2)), features=np.empty((0, 1)))

    def test_deterministic_forward(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(4))
        batch = random_batch(12, seed=8)
        a = mdl.encode(batch, params, cfg).values
        b = mdl.encode(batch, params, cfg).values
        assert a.tobytes() == b.tobytes()


class TestContextFusion:
    def test_zero_output_projection_is_identity(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(1))
        params["context.cross.wo.w"].values[:] = 0.0
        z = Tensor(np.random.Generator(np.random.PCG64(2)).standard_normal((4, cfg.d_enc)))
        fused = mdl.fuse_context(z, random_context(5, cfg.context_dim), params, cfg)
        assert np.array_equal(fused.values, z.values)

    def test_different_decks_fuse_differently(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(1))
        provider = FallbackProvider(dim=cfg.context_dim, n_tokens=8)
        z = Tensor(np.random.Generator(np.random.PCG64(3)).standard_normal((4, cfg.d_enc)))
        ka = ContextEmbedding(provider.embed("steel under axial loading"), "f", "a")
        kb = ContextEmbedding(provider.embed("shale under biaxial loading"), "f", "b")
        fa = mdl.fuse_context(z, ka, params, cfg).values
        fb = mdl.fuse_context(z, kb, params, cfg).values
        assert np.abs(fa - fb).max() > 1e-8

    def test_single_context_token_gets_full_attention(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(1))
        z = Tensor(np.random.Generator(np.random.PCG64(4)).standard_normal((4, cfg.d_enc)))
        ctx = random_context(1, cfg.context_dim, seed=5)
        fused = mdl.fuse_context(z, ctx, params, cfg)
        # with one kv token the attention output is exactly that token's
        # projected value, independent of the query content
        nkv = ad.layer_norm(Tensor(ctx.tokens.astype(np.float64)))
        v = ad.matmul(nkv, params["context.cross.wv.w"])
        expected = z.values + (v.values @ params["context.cross.wo.w"].values)
        assert np.abs(fused.values - expected).max() < 1e-12

    def test_dimension_mismatch_rejected(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(1))
        z = Tensor(np.zeros((4, cfg.d_enc)))
        with pytest.raises(ValueError, match="context dim"):
            mdl.fuse_context(z, random_context(3, cfg.context_dim + 1), params, cfg)


class TestDecoder:
    def test_query_independence(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(6))
        latent = Tensor(np.random.Generator(np.random.PCG64(7)).standard_normal((cfg.n_latents, cfg.d_enc)))
        gen = np.random.Generator(np.random.PCG64(8))
        queries = gen.uniform(size=(9, 2))
        full = mdl.decode_field(latent, queries, params, cfg).values
        solo = mdl.decode_field(latent, queries[3:4], params, cfg).values
        assert abs(full[3] - solo[0]) < 1e-12

    def test_field_shape_matches_queries(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(6))
        latent = mdl.encode(random_batch(20), params, cfg)
        out = mdl.decode_field(latent, random_batch(20).coords, params, cfg)
        assert out.shape == (20,)
        assert np.all((out.values > 0) & (out.values < 1))  # squashed

    def test_scalar_head(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(6))
        z1 = mdl.encode(random_batch(10, seed=1), params, cfg)
        z2 = mdl.encode(random_batch(10, seed=2), params, cfg)
        s1 = mdl.decode_scalar(z1, params, cfg)
        s2 = mdl.decode_scalar(z2, params, cfg)
        assert s1.shape == ()
        assert np.isfinite(s1.values)
        assert s1.values != s2.values

    def test_zero_queries_rejected(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(6))
        latent = Tensor(np.zeros((cfg.n_latents, cfg.d_enc)))
        with pytest.raises(ValueError):
            mdl.decode_field(latent, np.empty((0, 2)), params, cfg)


class TestParamGroups:
    def test_groups_cover_exactly_once(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        for name in params:
            assert name.split(".")[0] in mdl.GROUPS

    def test_decoder_only_selection(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        selected, fraction = mdl.param_groups(params, "decoder_only")
        assert all(n.split(".")[0] in ("decoder", "head") for n in selected)
        others = set(params) - set(selected)
        assert all(n.split(".")[0] in ("encoder", "latents", "context") for n in others)
        assert 0 < fraction < 1

    def test_all_mask(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        selected, fraction = mdl.param_groups(params, "all")
        assert set(selected) == set(params)
        assert fraction == 1.0

    def test_unknown_mask_rejected(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(0))
        with pytest.raises(ValueError):
            mdl.param_groups(params, "encoder_only")

    def test_reference_scale_decoder_fraction(self):
        # channels 512 / 3 self layers: decoder-only trains a loose third
        # of the parameters at this reference scale
        cfg = mdl.ModelConfig(d_enc=512, d_dec=512, n_latents=2048, n_self_layers=3,
                              context_dim=4096)
        params = mdl.init_params(cfg, SeededRng(0))
        _, fraction = mdl.param_groups(params, "decoder_only")
        assert 0.1 < fraction < 0.5
        total = mdl.param_count(params)
        assert 10_000_000 < total < 40_000_000  # the ~20M reference scale


class TestEndToEndGradients:
    def test_full_field_pipeline_gradcheck(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(10))
        assert mdl.param_count(params) <= 10_000
        batch = random_batch(6, seed=11)
        ctx = random_context(3, cfg.context_dim, seed=12)
        target = Tensor(np.random.Generator(np.random.PCG64(13)).uniform(size=6))

        def fn():
            return ad.mse(mdl.forward_field(batch, ctx, params, cfg), target)

        report = ad.grad_check(fn, params, h=1e-6, tol=1e-6, max_entries=8)
        assert report["passed"], report["failures"][:5]

    def test_scalar_pipeline_gradcheck(self):
        cfg = tiny_config()
        params = mdl.init_params(cfg, SeededRng(20))
        batch = random_batch(5, seed=21)
        ctx = random_context(2, cfg.context_dim, seed=22)

        def fn():
            pred = mdl.forward_scalar(batch, ctx, params, cfg)
            return ad.mse(pred, Tensor(np.asarray(0.5)))

        report = ad.grad_check(fn, params, h=1e-6, tol=1e-6, max_entries=8)
        assert report["passed"], report["failures"][:5]
