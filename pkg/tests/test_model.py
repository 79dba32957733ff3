"""Network-level contracts: probes, attention, fusion shapes, dual forward."""

import numpy as np
import pytest

from simprop import autodiff as ad
from simprop.autodiff import Tensor
from simprop.model import (
    FG_CHANNEL,
    EncoderLayer,
    ModelConfig,
    ModelParams,
    ProbePair,
    attention_maps,
    downsample_mask,
    encode,
    extract_probes,
    forward_dual,
    forward_query,
    kshot_probes,
    predict,
)
from oracles import weighted_mean_oracle

F32 = np.float32


def small_config(**kw):
    base = dict(input_size=16, feature_channels=8)
    base.update(kw)
    return ModelConfig(**base)


def rand_image(seed, size=16):
    return np.random.default_rng(seed).uniform(0, 1, (3, size, size)).astype(F32)


def rand_mask(seed, size=16):
    rng = np.random.default_rng(seed)
    m = np.zeros((size, size), dtype=np.uint8)
    cy, cx = rng.integers(4, size - 4, 2)
    m[cy - 3 : cy + 3, cx - 3 : cx + 3] = 1
    return m


class TestConfig:
    def test_fusion_width_derived(self):
        assert small_config().fusion_channels == 16

    def test_fusion_width_mismatch_raises(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=16, feature_channels=8, fusion_channels=12)

    def test_input_not_divisible_raises(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=20, feature_channels=8)

    def test_aspp_rates_must_increase(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=16, feature_channels=8, aspp_rates=(2, 1))

    def test_header_round_trip(self):
        cfg = small_config(use_fbaf=False, map_raw=True, norm_mean=0.4437)
        kv = dict(cfg.header_items())
        assert ModelConfig.from_header(kv) == cfg

    def test_encoder_layer_str_round_trip(self):
        layer = EncoderLayer(out_channels=24, kernel=3, dilation=2, pool=2)
        assert EncoderLayer.parse(layer.encode_str()) == layer


class TestParams:
    def test_canonical_order_stable(self):
        p = ModelParams(small_config(), seed=0)
        names = [n for n, _ in p.named_tensors()]
        assert names[0] == "encoder.0.weight"
        assert names == [n for n, _ in p.named_tensors()]
        assert len(names) == len(set(names))

    def test_copy_is_deep(self):
        p = ModelParams(small_config(), seed=0)
        q = p.copy()
        q.tensors()[0].data += 1.0
        assert not np.array_equal(p.tensors()[0].data, q.tensors()[0].data)

    def test_seeded_init_reproducible(self):
        a = ModelParams(small_config(), seed=3)
        b = ModelParams(small_config(), seed=3)
        for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert np.array_equal(ta.data, tb.data)

    def test_fbaf_widens_second_fusion_conv(self):
        with_attn = ModelParams(small_config(), seed=0)
        without = ModelParams(small_config(use_fbaf=False), seed=0)
        w2_a = dict(with_attn.named_tensors())["fusion.conv2.weight"]
        w2_b = dict(without.named_tensors())["fusion.conv2.weight"]
        assert w2_a.shape[1] == w2_b.shape[1] + 2


class TestMaskAndProbes:
    def test_downsample_block_mean(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[:2, :2] = 1
        mask[2, 2] = 1
        got = downsample_mask(mask, 2, 2)
        assert np.array_equal(got, np.array([[1.0, 0.0], [0.0, 0.25]], dtype=F32))

    def test_downsample_indivisible_raises(self):
        with pytest.raises(ValueError):
            downsample_mask(np.zeros((5, 4), dtype=np.uint8), 2, 2)

    def test_probes_match_weighted_mean_oracle(self):
        rng = np.random.default_rng(0)
        feats = Tensor(rng.uniform(-1, 1, (6, 5, 5)).astype(F32))
        soft = rng.uniform(0, 1, (5, 5)).astype(F32)
        probes = extract_probes(feats, soft)
        ref_fg = weighted_mean_oracle(feats.data, soft, eps=1e-6)
        ref_bg = weighted_mean_oracle(feats.data, 1.0 - soft, eps=1e-6)
        assert np.abs(probes.fg.data - ref_fg).max() <= 1e-5
        assert np.abs(probes.bg.data - ref_bg).max() <= 1e-5

    def test_full_and_empty_mask_degenerate(self):
        feats = Tensor(np.random.default_rng(1).uniform(-1, 1, (4, 3, 3)).astype(F32))
        full = extract_probes(feats, np.ones((3, 3), dtype=F32))
        assert np.array_equal(full.bg.data, np.zeros(4, dtype=F32))
        empty = extract_probes(feats, np.zeros((3, 3), dtype=F32))
        assert np.array_equal(empty.fg.data, np.zeros(4, dtype=F32))

    def test_inverted_mask_swaps_probes_bitwise(self):
        rng = np.random.default_rng(2)
        feats = Tensor(rng.uniform(-1, 1, (4, 4, 4)).astype(F32))
        soft = rng.uniform(0, 1, (4, 4)).astype(F32)
        p = extract_probes(feats, soft)
        q = extract_probes(feats, F32(1.0) - soft)
        assert np.array_equal(p.fg.data, q.bg.data)
        assert np.array_equal(p.bg.data, q.fg.data)

    def test_raw_probe_scales_by_mask_fraction(self):
        rng = np.random.default_rng(3)
        feats = Tensor(rng.uniform(-1, 1, (4, 4, 4)).astype(F32))
        soft = np.zeros((4, 4), dtype=F32)
        soft[:2] = 1.0  # half the area
        norm = extract_probes(feats, soft, raw=False)
        raw = extract_probes(feats, soft, raw=True)
        assert np.abs(raw.fg.data - norm.fg.data * 0.5).max() <= 1e-6


class TestKShot:
    def _probes(self, seed):
        rng = np.random.default_rng(seed)
        return ProbePair(
            fg=Tensor(rng.uniform(-1, 1, 6).astype(F32)),
            bg=Tensor(rng.uniform(-1, 1, 6).astype(F32)),
        )

    def test_k1_identity_exact(self):
        p = self._probes(0)
        out = kshot_probes([p])
        assert out.fg is p.fg and out.bg is p.bg

    def test_permutation_invariant(self):
        ps = [self._probes(i) for i in range(5)]
        base = kshot_probes(ps)
        for perm_seed in range(4):
            order = np.random.default_rng(perm_seed).permutation(5)
            mixed = kshot_probes([ps[i] for i in order])
            assert np.abs(mixed.fg.data - base.fg.data).max() <= 1e-6
            assert np.abs(mixed.bg.data - base.bg.data).max() <= 1e-6

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            kshot_probes([])


class TestAttention:
    def test_hand_computed_split(self):
        # column == fg probe (cos 1 -> C_f = 1), bg probe orthogonal
        # (cos 0 -> C_b = 1/2): A_f = 1/1.5, A_b = 0.5/1.5
        feats = Tensor(np.array([1.0, 0.0, 0.0], dtype=F32).reshape(3, 1, 1))
        probes = ProbePair(
            fg=Tensor(np.array([1.0, 0.0, 0.0], dtype=F32)),
            bg=Tensor(np.array([0.0, 1.0, 0.0], dtype=F32)),
        )
        attn = attention_maps(feats, probes)
        assert abs(attn.fg.data[0, 0] - 2.0 / 3.0) <= 1e-5
        assert abs(attn.bg.data[0, 0] - 1.0 / 3.0) <= 1e-5

    def test_sum_to_one_and_bounded(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            feats = Tensor(rng.standard_normal((6, 3, 3)).astype(F32))
            probes = ProbePair(
                fg=Tensor(rng.standard_normal(6).astype(F32)),
                bg=Tensor(rng.standard_normal(6).astype(F32)),
            )
            attn = attention_maps(feats, probes)
            total = attn.fg.data + attn.bg.data
            assert np.abs(total - 1.0).max() <= 1e-5
            for m in (attn.fg.data, attn.bg.data):
                assert np.all(m >= 0.0) and np.all(m <= 1.0)

    def test_probe_swap_swaps_maps_exactly(self):
        rng = np.random.default_rng(9)
        feats = Tensor(rng.standard_normal((5, 4, 4)).astype(F32))
        fg = Tensor(rng.standard_normal(5).astype(F32))
        bg = Tensor(rng.standard_normal(5).astype(F32))
        a = attention_maps(feats, ProbePair(fg=fg, bg=bg))
        b = attention_maps(feats, ProbePair(fg=bg, bg=fg))
        assert np.array_equal(a.fg.data, b.bg.data)
        assert np.array_equal(a.bg.data, b.fg.data)


class TestForward:
    def test_encode_shape_and_stride(self):
        cfg = small_config()
        params = ModelParams(cfg, seed=0)
        feats = encode(rand_image(0), params)
        assert feats.shape == (8, 2, 2)

    def test_encode_wrong_size_raises(self):
        params = ModelParams(small_config(), seed=0)
        with pytest.raises(ValueError):
            encode(np.zeros((3, 12, 12), dtype=F32), params)

    def test_dual_identical_input_bitwise(self):
        params = ModelParams(small_config(), seed=0)
        img, mask = rand_image(1), rand_mask(2)
        pred = forward_dual(img, [img], [mask], params)
        assert np.array_equal(pred.query_logits.data, pred.support_logits.data)

    def test_logits_shape_full_resolution(self):
        params = ModelParams(small_config(), seed=0)
        logits = forward_query(rand_image(3), [rand_image(4)], [rand_mask(5)], params)
        assert logits.shape == (2, 16, 16)

    def test_no_fbaf_path_runs(self):
        params = ModelParams(small_config(use_fbaf=False), seed=0)
        logits = forward_query(rand_image(6), [rand_image(7)], [rand_mask(8)], params)
        assert logits.shape == (2, 16, 16)
        assert np.isfinite(logits.data).all()

    def test_predict_binary_uint8(self):
        params = ModelParams(small_config(), seed=0)
        out = predict(rand_image(9), [(rand_image(10), rand_mask(11))], params)
        assert out.shape == (16, 16)
        assert out.dtype == np.uint8
        assert set(np.unique(out)) <= {0, 1}

    def test_predict_matches_argmax_of_forward(self):
        params = ModelParams(small_config(), seed=0)
        img, s_img, s_mask = rand_image(12), rand_image(13), rand_mask(14)
        out = predict(img, [(s_img, s_mask)], params)
        with ad.no_grad():
            logits = forward_query(img, [s_img], [s_mask], params)
        expect = (logits.data[FG_CHANNEL] > logits.data[1 - FG_CHANNEL]).astype(np.uint8)
        assert np.array_equal(out, expect)

    def test_no_supports_raises(self):
        params = ModelParams(small_config(), seed=0)
        with pytest.raises(ValueError):
            forward_query(rand_image(15), [], [], params)

    def test_kshot_forward_runs(self):
        params = ModelParams(small_config(), seed=0)
        imgs = [rand_image(20 + i) for i in range(3)]
        masks = [rand_mask(30 + i) for i in range(3)]
        logits = forward_query(rand_image(19), imgs, masks, params)
        assert np.isfinite(logits.data).all()
