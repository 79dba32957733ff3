"""Training loop: loss arithmetic, gradient batching, determinism, abort."""

import numpy as np
import pytest

from simprop import autodiff as ad
from simprop.autodiff import Tensor
from simprop.checkpoint import load
from simprop.data import EpisodeSampler
from simprop.model import DualPrediction, ModelConfig, ModelParams
from simprop.train import (
    METRICS_HEADER,
    NumericAbort,
    TrainConfig,
    episode_loss,
    loss_dual,
    train,
)
from oracles import cross_entropy_oracle

F32 = np.float32


def small_model():
    return ModelConfig(input_size=16, feature_channels=8)


def quick_cfg(**kw):
    base = dict(
        lr=0.01, batch_size=2, epochs=2, episodes_per_epoch=4,
        seed=0, val_episodes=2,
    )
    base.update(kw)
    return TrainConfig(**base)


def rand_mask(seed, size=4):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 2, (size, size)).astype(np.uint8)
    m.flat[0], m.flat[-1] = 0, 1  # keep both classes present
    return m


class TestLoss:
    def test_dual_is_even_average(self):
        rng = np.random.default_rng(0)
        ql = rng.standard_normal((2, 4, 4)).astype(F32)
        sl = rng.standard_normal((2, 4, 4)).astype(F32)
        gq, gs = rand_mask(1), rand_mask(2)
        pred = DualPrediction(query_logits=Tensor(ql), support_logits=Tensor(sl))
        got = loss_dual(pred, gq, gs, use_dpr=True).data.item()
        expect = 0.5 * cross_entropy_oracle(ql, gq) + 0.5 * cross_entropy_oracle(sl, gs)
        assert abs(got - expect) <= 1e-6

    def test_no_dpr_is_query_only(self):
        rng = np.random.default_rng(3)
        ql = rng.standard_normal((2, 4, 4)).astype(F32)
        sl = rng.standard_normal((2, 4, 4)).astype(F32)
        gq = rand_mask(4)
        pred = DualPrediction(query_logits=Tensor(ql), support_logits=Tensor(sl))
        got = loss_dual(pred, gq, rand_mask(5), use_dpr=False).data.item()
        assert abs(got - cross_entropy_oracle(ql, gq)) <= 1e-6

    def test_episode_loss_finite_and_grads_flow(self, tiny_dataset):
        params = ModelParams(small_model(), seed=0)
        sampler = EpisodeSampler(tiny_dataset, (0, 1))
        episode = sampler.sample(1, np.random.default_rng(0))
        loss = episode_loss(episode, params, use_dpr=True)
        assert np.isfinite(loss.data.item())
        loss.backward()
        total = sum(float(np.abs(g).sum()) for g in params.grads())
        assert total > 0.0

    def test_grad_accumulation_is_additive(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, (0, 1))
        rng = np.random.default_rng(7)
        ep1, ep2 = sampler.sample(1, rng), sampler.sample(1, rng)

        def grads_of(episodes):
            params = ModelParams(small_model(), seed=0)
            for ep in episodes:
                episode_loss(ep, params, use_dpr=True).backward()
            return [g.copy() for g in params.grads()]

        g1, g2, g12 = grads_of([ep1]), grads_of([ep2]), grads_of([ep1, ep2])
        for a, b, ab in zip(g1, g2, g12):
            scale = max(np.abs(ab).max(), 1e-3)
            assert np.abs((a + b) - ab).max() <= 1e-5 * scale


class TestTrainLoop:
    def test_zero_lr_leaves_params_bitwise(self, tiny_dataset):
        cfg = quick_cfg(lr=0.0, epochs=1)
        init = ModelParams(small_model(), seed=cfg.seed)
        state = train(cfg, small_model(), tiny_dataset)
        for (na, ta), (nb, tb) in zip(init.named_tensors(), state.params.named_tensors()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data), na

    def test_deterministic_end_to_end(self, tiny_dataset):
        a = train(quick_cfg(), small_model(), tiny_dataset)
        b = train(quick_cfg(), small_model(), tiny_dataset)
        assert a.metrics == b.metrics
        for (_, ta), (_, tb) in zip(a.params.named_tensors(), b.params.named_tensors()):
            assert np.array_equal(ta.data, tb.data)

    def test_fbaf_switch_overrides_model_config(self, tiny_dataset):
        state = train(quick_cfg(use_fbaf=False, epochs=1), small_model(), tiny_dataset)
        assert state.params.config.use_fbaf is False

    def test_outputs_written(self, tiny_dataset, tmp_path):
        cfg = quick_cfg()
        state = train(cfg, small_model(), tiny_dataset, out_dir=tmp_path)
        best = load(tmp_path / "best.ckpt")
        final = load(tmp_path / "final.ckpt")
        for (_, ta), (_, tb) in zip(best.named_tensors(), state.best_params.named_tensors()):
            assert np.array_equal(ta.data, tb.data)
        for (_, ta), (_, tb) in zip(final.named_tensors(), state.params.named_tensors()):
            assert np.array_equal(ta.data, tb.data)

        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 1 + cfg.epochs
        for row in lines[1:]:
            epoch, loss, miou, switch, lr = row.split(",")
            assert 0 <= int(epoch) < cfg.epochs
            assert np.isfinite(float(loss))
            assert 0.0 <= float(miou) <= 1.0
            assert float(lr) == cfg.lr

    def test_best_tracks_max_val_miou(self, tiny_dataset):
        state = train(quick_cfg(epochs=3), small_model(), tiny_dataset)
        best_from_metrics = max(m[2] for m in state.metrics)
        assert state.best_val_miou == best_from_metrics

    def test_ica_disabled_zeroes_switch_column(self, tiny_dataset):
        state = train(quick_cfg(use_ica=False, epochs=1), small_model(), tiny_dataset)
        assert state.metrics[0][3] == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_unstable_lr_aborts(self, tiny_dataset):
        # overflow to non-finite values inside the forward pass is the
        # expected failure mode here, warnings included
        cfg = quick_cfg(lr=1e12, epochs=2, batch_size=1)
        with pytest.raises(NumericAbort):
            train(cfg, small_model(), tiny_dataset)

    def test_size_mismatch_raises(self, tiny_dataset):
        big = ModelConfig(input_size=32, feature_channels=8)
        with pytest.raises(ValueError):
            train(quick_cfg(), big, tiny_dataset)


class TestConfigValidation:
    def test_negative_lr(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)

    def test_bad_ica_p0(self):
        with pytest.raises(ValueError):
            TrainConfig(ica_p0=2.0)

    def test_zero_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
