"""Episodic training with the dual cross-entropy loss.

Each optimization step averages the gradients of a batch of k=1 episodes
sampled from the training classes. After every epoch the model is scored
on a fixed set of validation episodes (also from training classes; test
classes stay unseen) and the best-scoring parameters are retained.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .data import DatasetManifest, Episode, EpisodeSampler, ica_augment, switch_prob_schedule
from .evalsuite import evaluate_episodes, model_predictor
from .model import DualPrediction, ModelConfig, ModelParams, forward_dual, forward_query

METRICS_HEADER = "epoch,train_loss,val_miou,switch_prob,lr"


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; higher learning rates are unstable."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2.5e-3
    batch_size: int = 8
    epochs: int = 180
    episodes_per_epoch: int = 200
    seed: int = 0
    use_dpr: bool = True
    use_fbaf: bool = True
    use_ica: bool = True
    ica_p0: float = 0.25
    ica_half_life: int = 45
    val_episodes: int = 40

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("batch_size, epochs, episodes_per_epoch must be positive")
        if self.val_episodes < 1:
            raise ValueError("val_episodes must be positive")
        if not 0.0 <= self.ica_p0 <= 1.0:
            raise ValueError("ica_p0 must be in [0,1]")
        if self.ica_half_life < 1:
            raise ValueError("ica_half_life must be positive")


@dataclass
class TrainState:
    params: ModelParams
    epoch: int = 0
    best_val_miou: float = -1.0
    best_params: ModelParams | None = None
    metrics: list[tuple[int, float, float, float, float]] = field(default_factory=list)


def loss_dual(
    pred: DualPrediction, gt_query: np.ndarray, gt_support: np.ndarray, use_dpr: bool
) -> Tensor:
    """Cross-entropy over both branches (averaged), or the query branch alone."""
    ce_q = ad.softmax_cross_entropy(pred.query_logits, gt_query)
    if not use_dpr:
        return ce_q
    ce_s = ad.softmax_cross_entropy(pred.support_logits, gt_support)
    return ad.add(ad.mul_scalar(ce_q, 0.5), ad.mul_scalar(ce_s, 0.5))


def episode_loss(episode: Episode, params: ModelParams, use_dpr: bool, query_image=None) -> Tensor:
    """Forward one episode and return its scalar loss.

    query_image overrides the episode's query image (augmentation hook).
    Without dual prediction only the query branch is built, which keeps
    the support-branch gradient exactly zero at lower cost.
    """
    qimg = episode.query.image if query_image is None else query_image
    simgs = [s.image for s in episode.supports]
    smasks = [s.mask for s in episode.supports]
    if use_dpr:
        pred = forward_dual(qimg, simgs, smasks, params)
        return loss_dual(pred, episode.query.mask, episode.supports[0].mask, True)
    logits = forward_query(qimg, simgs, smasks, params)
    return ad.softmax_cross_entropy(logits, episode.query.mask)


def write_metrics(rows, path: str | Path) -> None:
    lines = [METRICS_HEADER + "\n"]
    for epoch, loss, miou, switch, lr in rows:
        lines.append(f"{epoch},{loss:.6f},{miou:.6f},{switch:.6f},{lr:.6f}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainState:
    """Run the full training loop; returns the final state.

    The attentive-fusion switch lives in TrainConfig for the ablation
    grid and overrides the model configuration here. With out_dir set,
    writes best.ckpt, final.ckpt, and metrics.csv.
    """
    model_cfg = replace(model_cfg, use_fbaf=train_cfg.use_fbaf, fusion_channels=None)
    if manifest.config.image_size != model_cfg.input_size:
        raise ValueError(
            f"dataset image size {manifest.config.image_size} != model input size "
            f"{model_cfg.input_size}"
        )
    train_classes = manifest.config.train_classes
    sampler = EpisodeSampler(manifest, train_classes)

    episode_rng = np.random.default_rng([train_cfg.seed, 1])
    ica_rng = np.random.default_rng([train_cfg.seed, 2])
    val_rng = np.random.default_rng([train_cfg.seed, 3])
    val_set = [sampler.sample(1, val_rng) for _ in range(train_cfg.val_episodes)]

    params = ModelParams(model_cfg, seed=train_cfg.seed)
    state = TrainState(params=params)
    n_steps = math.ceil(train_cfg.episodes_per_epoch / train_cfg.batch_size)
    started = time.monotonic()

    for epoch in range(train_cfg.epochs):
        switch = switch_prob_schedule(epoch, train_cfg.ica_p0, train_cfg.ica_half_life)
        if not train_cfg.use_ica:
            switch = 0.0
        loss_sum = 0.0
        n_episodes = 0
        for step in range(n_steps):
            batch = min(train_cfg.batch_size, train_cfg.episodes_per_epoch - n_episodes)
            params.zero_grads()
            for _ in range(batch):
                episode = sampler.sample(1, episode_rng)
                qimg = episode.query.image
                if switch > 0.0:
                    qimg = ica_augment(qimg, switch, ica_rng)
                loss = episode_loss(episode, params, train_cfg.use_dpr, query_image=qimg)
                value = loss.data.item()
                if not math.isfinite(value):
                    raise NumericAbort(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"the configured learning rate {train_cfg.lr} is unstable"
                    )
                loss.backward()
                loss_sum += value
                n_episodes += 1
            grads = [g / batch for g in params.grads()]
            ad.sgd_step(params.tensors(), grads, train_cfg.lr)

        train_loss = loss_sum / n_episodes
        val = evaluate_episodes(model_predictor(params), val_set)
        state.metrics.append((epoch, train_loss, val.mean_iou, switch, train_cfg.lr))
        state.epoch = epoch + 1
        if val.mean_iou > state.best_val_miou:
            state.best_val_miou = val.mean_iou
            state.best_params = params.copy()
        if log is not None:
            elapsed = time.monotonic() - started
            log(
                f"epoch {epoch:3d}  loss {train_loss:.4f}  val_miou {val.mean_iou:.4f}  "
                f"switch {switch:.4f}  [{elapsed:.0f}s]"
            )

    if state.best_params is None:
        state.best_params = params.copy()
        state.best_val_miou = state.metrics[-1][2] if state.metrics else 0.0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "best.ckpt", state.best_params)
        ckpt.save(out / "final.ckpt", state.params)
        write_metrics(state.metrics, out / "metrics.csv")
    return state
