"""Dual-head 2D encoder: patching, attention, decoders, injection modes."""

import numpy as np
import pytest

from frustumssc.encoder2d import (
    DualHeadEncoder,
    ImageEncoder,
    PatchEmbed,
    TransformerBlock,
    UpBlock,
    reorganize,
)
from frustumssc.errors import ConfigError, ContractError, DimensionError
from frustumssc.numerics import Tensor, clear_graph, no_grad, ops


@pytest.fixture(autouse=True)
def fresh_graph():
    clear_graph()
    yield
    clear_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(21)


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[:] = 0.0


class TestPatchEmbed:
    def test_token_count(self, rng):
        pe = PatchEmbed(48, 64, 8, 16, rng)
        assert pe.num_tokens == 48
        out = pe(Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32)))
        assert out.shape == (48, 16)

    def test_non_divisible_rejected(self, rng):
        with pytest.raises(DimensionError):
            PatchEmbed(50, 64, 8, 16, rng)

    def test_zero_image_zero_embed(self, rng):
        pe = PatchEmbed(16, 16, 8, 8, rng)
        pe.pos_embed.data[:] = 0.0
        pe.proj.bias.data[:] = 0.0
        out = pe(Tensor(np.zeros((3, 16, 16), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_token_index_oracle(self, rng):
        pe = PatchEmbed(16, 24, 8, 6, rng)
        img = rng.normal(size=(3, 16, 24)).astype(np.float32)
        out = pe(Tensor(img))
        for idx in range(pe.num_tokens):
            r, c = divmod(idx, pe.grid_w)
            patch = img[:, r * 8 : (r + 1) * 8, c * 8 : (c + 1) * 8].reshape(-1)
            expect = patch @ pe.proj.weight.data + pe.proj.bias.data + pe.pos_embed.data[idx]
            np.testing.assert_allclose(out.data[idx], expect, rtol=1e-5, atol=1e-6)


class TestTransformer:
    def test_single_block_stack(self, rng):
        enc = ImageEncoder(16, 16, 8, 8, n_blocks=1, n_heads=2, rng=rng)
        outs = enc(Tensor(rng.normal(size=(3, 16, 16)).astype(np.float32)))
        assert len(outs) == 1 and outs[0].shape == (4, 8)

    def test_attention_rows_sum_to_one(self, rng):
        block = TransformerBlock(8, 2, rng)
        block(Tensor(rng.normal(size=(6, 8)).astype(np.float32)))
        attn = block.attn.last_attention
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance(self, rng):
        block = TransformerBlock(8, 2, rng)
        x = rng.normal(size=(10, 8)).astype(np.float32)
        perm = rng.permutation(10)
        with no_grad():
            out = block(Tensor(x)).data
            out_perm = block(Tensor(x[perm])).data
        np.testing.assert_allclose(out[perm], out_perm, atol=1e-5)


class TestReorganize:
    def test_single_token(self):
        t = Tensor(np.array([[1.0, 2.0, 3.0]]))
        out = reorganize(t, 1, 1)
        assert out.shape == (3, 1, 1)
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0, 3.0])

    def test_round_trip(self, rng):
        tokens = rng.normal(size=(48, 5)).astype(np.float32)
        spatial = reorganize(Tensor(tokens), 6, 8)
        flat = ops.reshape(ops.transpose(spatial, (1, 2, 0)), (48, 5))
        np.testing.assert_array_equal(flat.data, tokens)

    def test_index_oracle(self, rng):
        tokens = rng.normal(size=(48, 2)).astype(np.float32)
        out = reorganize(Tensor(tokens), 6, 8).data
        for idx in range(48):
            r, c = divmod(idx, 8)
            np.testing.assert_array_equal(out[:, r, c], tokens[idx])

    def test_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            reorganize(Tensor(rng.normal(size=(47, 2))), 6, 8)


class TestUpBlock:
    def test_coarsest_level_no_skip(self, rng):
        up = UpBlock(4, level=0, rng=rng)
        out = up(Tensor(rng.normal(size=(4, 6, 8)).astype(np.float32)), None)
        assert out.shape == (4, 6, 8)  # level 0: lift factor 2^0 = 1

    def test_missing_previous_rejected(self, rng):
        up = UpBlock(4, level=1, rng=rng)
        with pytest.raises(ContractError):
            up(Tensor(np.zeros((4, 6, 8))), None)

    def test_output_doubles_previous_extent(self, rng):
        up = UpBlock(4, level=1, rng=rng)
        lvl = Tensor(rng.normal(size=(4, 6, 8)).astype(np.float32))
        prev = Tensor(rng.normal(size=(4, 6, 8)).astype(np.float32))
        assert up(lvl, prev).shape == (4, 12, 16)

    def test_skip_shape_mismatch_rejected(self, rng):
        up = UpBlock(4, level=1, rng=rng)
        with pytest.raises(DimensionError):
            up(Tensor(np.zeros((4, 6, 8))), Tensor(np.zeros((4, 5, 8))))


class TestDualHeadEncoder:
    def make(self, rng, **kw):
        return DualHeadEncoder(
            image_h=48, image_w=64, patch=8, width=16, n_levels=3, n_heads=2, rng=rng, **kw
        )

    def test_shape_law(self, rng):
        enc = self.make(rng)
        out = enc(Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32)))
        shapes = [tuple(m.shape) for m in out["geo_maps"]]
        assert shapes == [(16, 6, 8), (16, 12, 16), (16, 24, 32)]
        assert [tuple(m.shape) for m in out["sem_maps"]] == shapes
        assert out["depth"].shape == (24, 32)

    def test_depth_strictly_positive(self, rng):
        enc = self.make(rng)
        out = enc(Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32)))
        assert out["depth"].data.min() > 0

    def test_zero_weights_constant_depth(self, rng):
        enc = self.make(rng)
        zero_params(enc)
        out = enc(Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32)))
        np.testing.assert_allclose(out["depth"].data, np.log(2.0), rtol=1e-5)

    def test_invalid_injection_mode(self, rng):
        with pytest.raises(ConfigError):
            self.make(rng, injection="geo=>sem")

    def test_injection_none_independent_of_geo(self, rng):
        enc = self.make(np.random.default_rng(3), injection="none")
        img = Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32))
        with no_grad():
            before = [m.data.copy() for m in enc(img)["sem_maps"]]
        for _, p in enc.dec_geo.named_parameters():
            p.data += 0.37
        with no_grad():
            after = [m.data.copy() for m in enc(img)["sem_maps"]]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_geo_to_sem_with_zero_geo_equals_none(self, rng):
        seed_img = rng.normal(size=(3, 48, 64)).astype(np.float32)
        enc_a = self.make(np.random.default_rng(5), injection="geo_to_sem")
        enc_b = self.make(np.random.default_rng(5), injection="none")
        for enc in (enc_a, enc_b):
            zero_params(enc.dec_geo)
            zero_params(enc.depth_head)
        with no_grad():
            sem_a = enc_a(Tensor(seed_img))["sem_maps"]
            sem_b = enc_b(Tensor(seed_img))["sem_maps"]
        for a, b in zip(sem_a, sem_b):
            np.testing.assert_array_equal(a.data, b.data)

    def test_injection_locality(self, rng):
        """geo->sem: geo weights reach sem maps; sem weights never reach geo."""
        img = Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32))
        enc = self.make(np.random.default_rng(6), injection="geo_to_sem")
        with no_grad():
            base = enc(img)
        base_geo = [m.data.copy() for m in base["geo_maps"]]
        base_sem = [m.data.copy() for m in base["sem_maps"]]

        for _, p in enc.dec_sem.named_parameters():
            p.data += 0.21
        with no_grad():
            bumped_sem_weights = enc(img)
        for a, b in zip(base_geo, bumped_sem_weights["geo_maps"]):
            np.testing.assert_array_equal(a, b.data)

        for _, p in enc.dec_geo.named_parameters():
            p.data += 0.21
        with no_grad():
            bumped_geo_weights = enc(img)
        changed = any(
            not np.array_equal(a, b.data)
            for a, b in zip(base_sem, bumped_geo_weights["sem_maps"])
        )
        assert changed

    def test_all_modes_run(self, rng):
        img = Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32))
        for mode in ("none", "sem_to_geo", "geo_to_sem", "both"):
            enc = self.make(np.random.default_rng(7), injection=mode)
            out = enc(img)
            assert len(out["geo_maps"]) == 3

    def test_single_decoder_mode(self, rng):
        enc = self.make(rng, dual=False)
        out = enc(Tensor(rng.normal(size=(3, 48, 64)).astype(np.float32)))
        assert out["sem_maps"] is None
        assert len(out["geo_maps"]) == 3
