import numpy as np
import pytest

import oracles as ref
from latentflow.config import desk_config
from latentflow.costencoder import (AGTLayer, CostEncoder, GlobalPooledAttention, IntraCostAttention,
                                    LatentSummarizer, LocalWindowAttention, Patchify, encode_cost_memory,
                                    patch_centers, pe_frequencies, pixel_grid, positional_encoding)
from latentflow.costvolume import build_cost_volume
from latentflow.errors import ConfigError, ContractError
from latentflow.ndtensor import Tensor, precision

ATOL32 = 1e-6


class TestPatchify:
    def test_shape(self, rng):
        p = Patchify(16, rng)
        assert p(rng.standard_normal((1, 16, 16))).shape == (1, 2, 2, 16)

    def test_zero_map_zero_bias_gives_zero(self, rng):
        p = Patchify(16, rng)
        for c in p.convs:
            c.bias.data[:] = 0
        assert np.all(p(np.zeros((2, 16, 16))).data == 0)

    def test_channel_ramp(self, rng):
        p = Patchify(16, rng)
        assert [c.weight.shape[0] for c in p.convs] == [4, 8, 16]
        assert all(c.weight.shape[2:] == (2, 2) and c.stride == 2 for c in p.convs)

    def test_bad_dim(self, rng):
        with pytest.raises(ConfigError):
            Patchify(18, rng)

    def test_unpadded_input_rejected(self, rng):
        with pytest.raises(ContractError):
            Patchify(16, rng)(np.zeros((1, 12, 16)))

    def test_loop_oracle(self, rng):
        p = Patchify(8, rng)
        m = rng.standard_normal((16, 16))
        x = m[None]
        for conv in p.convs:
            x = ref.conv2d(np.maximum(x, 0), conv.weight.data, conv.bias.data, stride=2)
        got = p(m[None]).data[0]
        assert np.max(np.abs(got - x.transpose(1, 2, 0))) < 1e-5

    def test_each_output_sees_only_its_8x8_patch(self, rng):
        p = Patchify(8, rng)
        m = rng.standard_normal((1, 16, 16))
        m2 = m.copy()
        m2[0, 8:, 8:] += 5.0
        a, b = p(m).data[0], p(m2).data[0]
        assert np.array_equal(a[0, 0], b[0, 0]) and np.array_equal(a[0, 1], b[0, 1])
        assert not np.array_equal(a[1, 1], b[1, 1])


class TestPositionalEncoding:
    def test_deterministic(self):
        p = np.array([[1.5, 2.25]])
        assert np.array_equal(positional_encoding(p, 16), positional_encoding(p, 16))

    def test_origin_alternates(self):
        assert positional_encoding(np.zeros(2), 16).tolist() == [0.0, 1.0] * 8

    def test_formula(self):
        x, y = 3.0, 5.0
        w = 1.0 / 10000 ** (4 * np.arange(4) / 16)
        expect = []
        for c in (x, y):
            for wk in w:
                expect += [np.sin(wk * c), np.cos(wk * c)]
        assert np.allclose(positional_encoding(np.array([x, y]), 16), expect, atol=1e-12)

    def test_injective_on_grid(self):
        pe = positional_encoding(pixel_grid(16, 16).reshape(-1, 2), 32)
        diff = np.max(np.abs(pe[:, None, :] - pe[None, :, :]), axis=-1)
        np.fill_diagonal(diff, np.inf)
        assert diff.min() > 1e-6

    def test_bounded(self):
        pe = positional_encoding(np.random.default_rng(0).uniform(-100, 100, (50, 2)), 32)
        assert np.allclose(np.linalg.norm(pe, axis=-1), np.sqrt(16))

    def test_tensor_path_matches_array_path(self):
        p = np.array([[2.5, 7.0], [0.3, 1.1]])
        with precision(np.float64):
            t = positional_encoding(Tensor(p), 16).data
        assert np.allclose(t, positional_encoding(p, 16), atol=1e-12)

    def test_bad_dim(self):
        with pytest.raises(ConfigError):
            pe_frequencies(10)

    def test_patch_centers(self):
        c = patch_centers(2, 3)
        assert c.shape == (2, 3, 2) and c[1, 2].tolist() == [19.5, 11.5]


class TestLatentSummarizer:
    def test_single_token_closed_form(self, rng):
        s = LatentSummarizer(8, 16, 4, 1, rng)
        feats = rng.standard_normal((1, 1, 8))
        pe = rng.standard_normal((1, 8))
        out = s(feats, pe).data[0]
        v = ref.linear(s.value, np.concatenate([feats[0, 0], pe[0]]))
        assert out.shape == (4, 16)
        assert np.max(np.abs(out - v[None])) < ATOL32

    @pytest.mark.parametrize("n", [1, 4, 9])
    def test_shape_any_grid(self, rng, n):
        s = LatentSummarizer(8, 16, 3, 1, rng)
        assert s(rng.standard_normal((2, n, 8)), np.zeros((n, 8))).shape == (2, 3, 16)

    @pytest.mark.parametrize("heads", [1, 2])
    def test_oracle_k2_three_tokens(self, rng, heads):
        s = LatentSummarizer(8, 16, 2, heads, rng)
        s.codewords.data = rng.standard_normal(s.codewords.shape).astype(np.float32)
        feats, pe = rng.standard_normal((1, 3, 8)), rng.standard_normal((3, 8))
        x = np.concatenate([feats[0], pe], -1)
        k, v = ref.linear(s.key, x), ref.linear(s.value, x)
        c = s.codewords.data
        dh = 16 // heads
        expect = np.concatenate([ref.naive_attention(c[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh],
                                                     v[:, i * dh:(i + 1) * dh]) for i in range(heads)], -1)
        assert np.max(np.abs(s(feats, pe).data[0] - expect)) < ATOL32

    def test_visibility_drops_tokens(self, rng):
        s = LatentSummarizer(8, 16, 2, 1, rng)
        feats, pe = rng.standard_normal((1, 4, 8)), rng.standard_normal((4, 8))
        vis = np.array([[True, False, True, False]])
        got = s(feats, pe, vis).data[0]
        sub = s(feats[:, [0, 2]], pe[[0, 2]]).data[0]
        assert np.max(np.abs(got - sub)) < ATOL32

    def test_empty_visible_set_gives_null_token(self, rng):
        s = LatentSummarizer(8, 16, 2, 1, rng)
        out = s(rng.standard_normal((2, 4, 8)), np.zeros((4, 8)), np.array([[False] * 4, [True] * 4])).data
        null = ref.linear(s.value, s.null_token.data)
        assert np.max(np.abs(out[0] - null[None])) < ATOL32
        assert np.all(np.isfinite(out))


class TestIntraAttention:
    def test_single_token_closed_form(self, rng):
        a = IntraCostAttention(8, 1, rng)
        x = rng.standard_normal((3, 1, 8))
        y = x + ref.linear(a.proj, ref.linear(a.v, ref.layer_norm(x, a.norm1)))
        expect = y + ref.mlp(a.ffn, ref.layer_norm(y, a.norm2))
        assert np.max(np.abs(a(Tensor(x)).data - expect)) < ATOL32

    def test_three_token_oracle(self, rng):
        a = IntraCostAttention(8, 1, rng)
        x = rng.standard_normal((2, 3, 8))
        got = a(Tensor(x)).data
        for p in range(2):
            yn = ref.layer_norm(x[p], a.norm1)
            att = ref.naive_attention(ref.linear(a.q, yn), ref.linear(a.k, yn), ref.linear(a.v, yn))
            y = x[p] + ref.linear(a.proj, att)
            expect = y + ref.mlp(a.ffn, ref.layer_norm(y, a.norm2))
            assert np.max(np.abs(got[p] - expect)) < ATOL32

    def test_pixel_permutation_equivariance(self, rng):
        a = IntraCostAttention(8, 2, rng)
        x = rng.standard_normal((5, 3, 8)).astype(np.float32)
        perm = rng.permutation(5)
        assert np.array_equal(a(Tensor(x[perm])).data, a(Tensor(x)).data[perm])


def _inter_inputs(rng, h, w, d=8, dc=4, g=1):
    return rng.standard_normal((g, h, w, d)), rng.standard_normal((h, w, dc))


class TestInterAttention:
    def test_single_tile_local_equals_full_attention(self, rng):
        blk = LocalWindowAttention(8, 4, 1, 2, rng)
        x, c = _inter_inputs(rng, 2, 2)
        got = blk(Tensor(x), Tensor(c)).data[0].reshape(4, 8)
        xf, cf = x[0].reshape(4, 8), c.reshape(4, 4)
        yn = ref.layer_norm(xf, blk.norm1)
        cat = np.concatenate([yn, cf], -1)
        att = ref.naive_attention(ref.linear(blk.q, cat), ref.linear(blk.k, cat), ref.linear(blk.v, yn))
        y = xf + ref.linear(blk.proj, att)
        expect = y + ref.mlp(blk.ffn, ref.layer_norm(y, blk.norm2))
        assert np.max(np.abs(got - expect)) < ATOL32

    @pytest.mark.parametrize("h,w", [(4, 4), (3, 5)])
    def test_windowed_oracle_with_padding(self, rng, h, w):
        blk = LocalWindowAttention(8, 4, 1, 2, rng)
        x, c = _inter_inputs(rng, h, w)
        got = blk(Tensor(x), Tensor(c)).data[0]
        yn = ref.layer_norm(x[0], blk.norm1)
        cat = np.concatenate([yn, c], -1)
        q, k, v = ref.linear(blk.q, cat), ref.linear(blk.k, cat), ref.linear(blk.v, yn)
        att = np.zeros((h, w, 8))
        for ty in range(0, h, 2):
            for tx in range(0, w, 2):
                cells = [(yy, xx) for yy in range(ty, min(ty + 2, h)) for xx in range(tx, min(tx + 2, w))]
                idx = tuple(np.array(cells).T)
                att[idx] = ref.naive_attention(q[idx], k[idx], v[idx])
        y = x[0] + ref.linear(blk.proj, att)
        expect = y + ref.mlp(blk.ffn, ref.layer_norm(y, blk.norm2))
        assert np.max(np.abs(got - expect)) < ATOL32

    @pytest.mark.parametrize("h,w", [(4, 4), (3, 5)])
    def test_pooled_global_oracle(self, rng, h, w):
        blk = GlobalPooledAttention(8, 4, 1, 2, rng)
        x, c = _inter_inputs(rng, h, w)
        got = blk(Tensor(x), Tensor(c)).data[0]
        yn = ref.layer_norm(x[0], blk.norm1)
        cat = np.concatenate([yn, c], -1)
        keys, vals = [], []
        for ty in range(0, h, 2):
            for tx in range(0, w, 2):
                keys.append(ref.linear(blk.k, cat[ty:ty + 2, tx:tx + 2].reshape(-1, 12).mean(0)))
                vals.append(ref.linear(blk.v, yn[ty:ty + 2, tx:tx + 2].reshape(-1, 8).mean(0)))
        att = ref.naive_attention(ref.linear(blk.q, cat).reshape(-1, 8), np.array(keys), np.array(vals))
        y = x[0] + ref.linear(blk.proj, att.reshape(h, w, 8))
        expect = y + ref.mlp(blk.ffn, ref.layer_norm(y, blk.norm2))
        assert np.max(np.abs(got - expect)) < ATOL32

    def test_constant_field_stays_constant(self, rng):
        layer = AGTLayer(8, 4, 1, 2, rng)
        tok = np.broadcast_to(rng.standard_normal(8), (4, 6, 3, 8)).copy()
        ctx = np.broadcast_to(rng.standard_normal(4), (4, 6, 4)).copy()
        out = layer(Tensor(tok), Tensor(ctx)).data
        assert out.shape == (4, 6, 3, 8)
        assert np.max(np.abs(out - out[:1, :1])) < 1e-5

    def test_tile_periodic_fields_give_periodic_local_output(self, rng):
        blk = LocalWindowAttention(8, 4, 1, 2, rng)
        tile_x, tile_c = rng.standard_normal((1, 2, 2, 8)), rng.standard_normal((2, 2, 4))
        x, c = np.tile(tile_x, (1, 3, 2, 1)), np.tile(tile_c, (3, 2, 1))
        out = blk(Tensor(x), Tensor(c)).data[0]
        for ty in range(0, 6, 2):
            for tx in range(0, 4, 2):
                assert np.array_equal(out[ty:ty + 2, tx:tx + 2], out[:2, :2])

    def test_groups_share_parameters_and_are_independent(self, rng):
        layer = AGTLayer(8, 4, 1, 2, rng)
        x, c = _inter_inputs(rng, 4, 4, g=3)
        full = layer.inter(Tensor(x), Tensor(c)).data
        one = layer.inter(Tensor(x[1:2]), Tensor(c)).data
        assert np.max(np.abs(full[1] - one[0])) < 1e-6


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(3)
    cfg = desk_config()
    fs, ft = rng.standard_normal((32, 12, 12)), rng.standard_normal((32, 12, 12))
    return cfg, build_cost_volume(fs, ft), rng.standard_normal((64, 12, 12))


class TestCostEncoder:
    def test_memory_shape_8x8_grid(self):
        rng = np.random.default_rng(3)
        cv = build_cost_volume(rng.standard_normal((32, 8, 8)), rng.standard_normal((32, 8, 8)))
        enc = CostEncoder(desk_config(), np.random.default_rng(0))
        assert enc(cv, rng.standard_normal((64, 8, 8))).shape == (8, 8, 4, 32)

    def test_memory_shape_desk(self, setup):
        cfg, cv, ctx = setup
        enc = CostEncoder(cfg, np.random.default_rng(0))
        assert encode_cost_memory(cv, ctx, enc).shape == (12, 12, 4, 32)

    def test_zero_layers_is_raw_summarization(self, setup):
        cfg, cv, ctx = setup
        enc = CostEncoder(cfg.replace(num_agt_layers=0), np.random.default_rng(0))
        assert np.array_equal(enc(cv, ctx).tokens.data, enc.tokenize(cv).data)

    def test_context_grid_mismatch(self, setup):
        cfg, cv, _ = setup
        enc = CostEncoder(cfg, np.random.default_rng(0))
        with pytest.raises(ContractError):
            enc(cv, np.zeros((64, 8, 8)))

    def test_constant_inputs_without_pe_give_constant_memory(self):
        cfg = desk_config(token_pe=False, agt_pe=False)
        enc = CostEncoder(cfg, np.random.default_rng(0))
        from latentflow.costvolume import CostVolume
        block = np.random.default_rng(1).standard_normal((8, 8))
        data = np.broadcast_to(block, (8, 8, 8, 8)).copy()
        ctx = np.broadcast_to(np.random.default_rng(2).standard_normal((64, 1, 1)), (64, 8, 8)).copy()
        mem = enc(CostVolume(Tensor(data), 1.0), ctx).tokens.data
        assert np.max(np.abs(mem - mem[:1, :1])) < 1e-5

    def test_pe_changes_memory(self, setup):
        cfg, cv, ctx = setup
        a = CostEncoder(cfg, np.random.default_rng(0))(cv, ctx).tokens.data
        b = CostEncoder(cfg.replace(agt_pe=False), np.random.default_rng(0))(cv, ctx).tokens.data
        assert not np.allclose(a, b)

    def test_tokenize_matches_per_pixel_loop(self, setup):
        cfg, cv, _ = setup
        enc = CostEncoder(cfg, np.random.default_rng(0))
        tokens = enc.tokenize(cv).data
        from latentflow.costvolume import pad_cost_map_to_mult8
        pe = positional_encoding(patch_centers(2, 2), 16).reshape(4, 16)
        for y, x in [(0, 0), (3, 5), (11, 11)]:
            m = pad_cost_map_to_mult8(cv.data.data[y, x]).data
            f = enc.patchify(m[None]).data.reshape(1, 4, 16)
            single = enc.summarizer(f, pe).data[0]
            assert np.max(np.abs(tokens[y, x] - single)) < ATOL32
