"""Evaluation protocols and the premise-validation battery.

mIoU follows the accumulated-counts convention: per-class intersection and
union sums over all episodes of a class, then the ratio, then an unweighted
mean over classes. The FG-BG score is the class-agnostic mean over episodes
of (foreground IoU + background IoU)/2.

The error-overlap formulas reconstruct a prose description (IoU of the two
methods' false-negative sets, of their false-positive sets, and the signed
gap in accumulated IoU); reports carry a "reconstructed metric" marker.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetManifest, Episode, EpisodeSampler, write_pgm
from .model import ModelParams, downsample_mask, encode, extract_probes, predict

PredictFn = Callable[[Episode], np.ndarray]

COSINE_EPS = 1e-6
RATIO_DENOM_EPS = 1e-8


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    mean_iou: float
    fg_bg_iou: float
    n_episodes: int
    k: int
    seed: int

    def csv(self) -> str:
        classes = sorted(self.per_class_iou)
        header = ["k", "seed", "n_episodes", "mean_iou", "fg_bg_iou"]
        header += [f"iou_class_{c}" for c in classes]
        row = [str(self.k), str(self.seed), str(self.n_episodes)]
        row += [f"{self.mean_iou:.6f}", f"{self.fg_bg_iou:.6f}"]
        row += [f"{self.per_class_iou[c]:.6f}" for c in classes]
        return ",".join(header) + "\n" + ",".join(row) + "\n"


@dataclass
class OverlapStats:
    fn_overlap_pct: float
    fp_overlap_pct: float
    tp_gap_pct: float
    n: int = 1


@dataclass
class RatioStats:
    mean: float
    std: float
    n_used: int
    n_skipped: int


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground intersection-over-union; 1.0 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum()) / union


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


def model_predictor(params: ModelParams) -> PredictFn:
    def fn(episode: Episode) -> np.ndarray:
        supports = [(s.image, s.mask) for s in episode.supports]
        return predict(episode.query.image, supports, params)

    return fn


def oracle_predictor() -> PredictFn:
    """Debug stub that returns the ground-truth query mask."""
    return lambda episode: episode.query.mask.copy()


def all_background_predictor() -> PredictFn:
    return lambda episode: np.zeros_like(episode.query.mask)


# ---------------------------------------------------------------------------
# mIoU / FG-BG evaluation
# ---------------------------------------------------------------------------


def evaluate_episodes(
    predict_fn: PredictFn,
    episodes: Sequence[Episode],
    seed: int = -1,
    dump_dir: str | Path | None = None,
) -> EvalReport:
    if not episodes:
        raise ValueError("evaluate_episodes: empty episode list")
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    fgbg_sum = 0.0
    dump_lines = []
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        pred = predict_fn(ep)
        gt = ep.query.mask
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != mask shape {gt.shape}")
        p = pred.astype(bool)
        g = gt.astype(bool)
        c = ep.class_id
        inter[c] = inter.get(c, 0) + int(np.logical_and(p, g).sum())
        union[c] = union.get(c, 0) + int(np.logical_or(p, g).sum())
        fgbg_sum += 0.5 * (iou(pred, gt) + iou(1 - pred, 1 - gt))
        if dump_dir is not None:
            name = f"pred_{i:05d}.pgm"
            write_pgm(dump_dir / name, pred.astype(np.uint8))
            dump_lines.append(f"{i}\t{ep.class_id}\t{name}\n")
    per_class = {
        c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in sorted(inter)
    }
    if dump_dir is not None:
        (dump_dir / "predictions.manifest").write_text("".join(dump_lines), encoding="utf-8")
    return EvalReport(
        per_class_iou=per_class,
        mean_iou=float(np.mean(list(per_class.values()))),
        fg_bg_iou=fgbg_sum / len(episodes),
        n_episodes=len(episodes),
        k=len(episodes[0].supports),
        seed=seed,
    )


def evaluate(
    predict_fn: PredictFn,
    manifest: DatasetManifest,
    classes: Iterable[int],
    k: int,
    n_episodes: int,
    seed: int,
    dump_dir: str | Path | None = None,
) -> EvalReport:
    sampler = EpisodeSampler(manifest, classes)
    rng = np.random.default_rng(seed)
    episodes = [sampler.sample(k, rng) for _ in range(n_episodes)]
    return evaluate_episodes(predict_fn, episodes, seed=seed, dump_dir=dump_dir)


def identical_input_test(
    predict_fn: PredictFn,
    manifest: DatasetManifest,
    classes: Iterable[int],
    n: int,
    seed: int,
) -> float:
    """Mean IoU with the support deliberately set equal to the query."""
    sampler = EpisodeSampler(manifest, classes)
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(n):
        class_id = sampler.classes[int(rng.integers(len(sampler.classes)))]
        recs = sampler.records_for(class_id)
        sample = sampler.load(recs[int(rng.integers(len(recs)))])
        ep = Episode(query=sample, supports=[sample], class_id=class_id)
        episodes.append(ep.validate(allow_identical=True))
    return evaluate_episodes(predict_fn, episodes, seed=seed).mean_iou


# ---------------------------------------------------------------------------
# error overlap
# ---------------------------------------------------------------------------


def _set_overlap_pct(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return 100.0 * int(np.logical_and(a, b).sum()) / union


def error_overlap(pred_a: np.ndarray, pred_b: np.ndarray, gt: np.ndarray) -> OverlapStats:
    """Overlap of the two methods' error sets; pred_b is the reference method."""
    if pred_a.shape != gt.shape or pred_b.shape != gt.shape:
        raise ValueError("error_overlap: shape mismatch")
    a, b, g = pred_a.astype(bool), pred_b.astype(bool), gt.astype(bool)
    fn_a, fn_b = g & ~a, g & ~b
    fp_a, fp_b = a & ~g, b & ~g
    return OverlapStats(
        fn_overlap_pct=_set_overlap_pct(fn_a, fn_b),
        fp_overlap_pct=_set_overlap_pct(fp_a, fp_b),
        tp_gap_pct=100.0 * (iou(pred_b, gt) - iou(pred_a, gt)),
    )


class OverlapAccumulator:
    """Dataset-level error overlap: error sets and IoU counts are accumulated
    over all triples before the ratios are formed."""

    def __init__(self):
        self.fn_inter = self.fn_union = 0
        self.fp_inter = self.fp_union = 0
        self.ia = self.ua = 0
        self.ib = self.ub = 0
        self.n = 0

    def add(self, pred_a: np.ndarray, pred_b: np.ndarray, gt: np.ndarray) -> None:
        if pred_a.shape != gt.shape or pred_b.shape != gt.shape:
            raise ValueError("error_overlap: shape mismatch")
        a, b, g = pred_a.astype(bool), pred_b.astype(bool), gt.astype(bool)
        fn_a, fn_b = g & ~a, g & ~b
        fp_a, fp_b = a & ~g, b & ~g
        self.fn_inter += int((fn_a & fn_b).sum())
        self.fn_union += int((fn_a | fn_b).sum())
        self.fp_inter += int((fp_a & fp_b).sum())
        self.fp_union += int((fp_a | fp_b).sum())
        self.ia += int((a & g).sum())
        self.ua += int((a | g).sum())
        self.ib += int((b & g).sum())
        self.ub += int((b | g).sum())
        self.n += 1

    def stats(self) -> OverlapStats:
        if self.n == 0:
            raise ValueError("no overlap samples accumulated")
        iou_a = 1.0 if self.ua == 0 else self.ia / self.ua
        iou_b = 1.0 if self.ub == 0 else self.ib / self.ub
        return OverlapStats(
            fn_overlap_pct=0.0 if not self.fn_union else 100.0 * self.fn_inter / self.fn_union,
            fp_overlap_pct=0.0 if not self.fp_union else 100.0 * self.fp_inter / self.fp_union,
            tp_gap_pct=100.0 * (iou_b - iou_a),
            n=self.n,
        )


# ---------------------------------------------------------------------------
# similarity probes
# ---------------------------------------------------------------------------


def _sample_pair(
    sampler: EpisodeSampler, rng: np.random.Generator, class_id: int | None = None
):
    if class_id is None:
        class_id = sampler.classes[int(rng.integers(len(sampler.classes)))]
    recs = sampler.records_for(class_id)
    if len(recs) < 2:
        raise ValueError(f"class {class_id} needs at least 2 samples for pair statistics")
    i, j = rng.choice(len(recs), size=2, replace=False)
    return sampler.load(recs[i]), sampler.load(recs[j]), class_id


def _map_vector(features, soft_mask: np.ndarray) -> np.ndarray:
    return ad.masked_avg_pool(features, soft_mask).data


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a)) + COSINE_EPS
    nb = float(np.linalg.norm(b)) + COSINE_EPS
    return float(np.dot(a, b)) / (na * nb)


def map_similarity_ratio(
    params: ModelParams,
    manifest: DatasetManifest,
    classes: Iterable[int],
    n_pairs: int,
    seed: int,
) -> RatioStats:
    """Ratio of error-region to ground-truth-region probe inner products.

    For each same-class pair (A,B), each image is predicted with the other
    as support; Z^e pools the encoder features over the mispredicted region,
    Z^g over the ground-truth mask. r = (Z^e_A . Z^e_B) / (Z^g_A . Z^g_B).
    Pairs with an empty error region or a near-zero denominator are skipped
    and counted.
    """
    sampler = EpisodeSampler(manifest, classes)
    rng = np.random.default_rng(seed)
    ratios = []
    skipped = 0
    with ad.no_grad():
        for _ in range(n_pairs):
            sa, sb, class_id = _sample_pair(sampler, rng)
            pa = predict(sa.image, [(sb.image, sb.mask)], params)
            pb = predict(sb.image, [(sa.image, sa.mask)], params)
            err_a = (pa != sa.mask).astype(np.float32)
            err_b = (pb != sb.mask).astype(np.float32)
            if err_a.sum() == 0 or err_b.sum() == 0:
                skipped += 1
                continue
            fa = encode(sa.image, params)
            fb = encode(sb.image, params)
            h, w = fa.shape[1], fa.shape[2]
            ze_a = _map_vector(fa, downsample_mask(err_a, h, w))
            ze_b = _map_vector(fb, downsample_mask(err_b, h, w))
            zg_a = _map_vector(fa, downsample_mask(sa.mask, h, w))
            zg_b = _map_vector(fb, downsample_mask(sb.mask, h, w))
            denom = float(np.dot(zg_a, zg_b))
            if abs(denom) < RATIO_DENOM_EPS:
                skipped += 1
                continue
            ratios.append(float(np.dot(ze_a, ze_b)) / denom)
    if not ratios:
        raise ValueError(f"all {n_pairs} pairs were skipped; no ratios to report")
    arr = np.asarray(ratios)
    return RatioStats(
        mean=float(arr.mean()), std=float(arr.std()), n_used=len(ratios), n_skipped=skipped
    )


def fgbg_similarity_stats(
    params: ModelParams,
    manifest: DatasetManifest,
    classes: Iterable[int],
    n_pairs: int,
    seed: int,
) -> dict[int, tuple[float, float]]:
    """Per-class mean cosine similarity of FG probes and of BG probes
    across same-class image pairs."""
    sampler = EpisodeSampler(manifest, classes)
    rng = np.random.default_rng(seed)
    out: dict[int, tuple[float, float]] = {}
    with ad.no_grad():
        for class_id in sampler.classes:
            fg_sims, bg_sims = [], []
            for _ in range(n_pairs):
                sa, sb, _ = _sample_pair(sampler, rng, class_id)
                pairs = []
                for s in (sa, sb):
                    f = encode(s.image, params)
                    m = downsample_mask(s.mask, f.shape[1], f.shape[2])
                    pairs.append(extract_probes(f, m, raw=params.config.map_raw))
                fg_sims.append(_cos(pairs[0].fg.data, pairs[1].fg.data))
                bg_sims.append(_cos(pairs[0].bg.data, pairs[1].bg.data))
            out[class_id] = (float(np.mean(fg_sims)), float(np.mean(bg_sims)))
    return out


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("baseline", False, False, False),
    ("dpr", True, False, False),
    ("fbaf", False, True, False),
    ("dpr_fbaf", True, True, False),
    ("full", True, True, True),
)

ABLATION_HEADER = "variant,use_dpr,use_fbaf,use_ica,miou"


def ablate(
    model_cfg,
    train_cfg,
    manifest: DatasetManifest,
    eval_k: int = 1,
    eval_episodes: int = 100,
    eval_seed: int = 1234,
    out_path: str | Path | None = None,
    log=None,
) -> list[tuple[str, bool, bool, bool, float]]:
    """Train one model per ablation variant with a shared seed and score all
    of them on the same test episodes."""
    from .train import train  # local import, train depends on this module

    rows = []
    for name, use_dpr, use_fbaf, use_ica in ABLATION_VARIANTS:
        cfg = replace(train_cfg, use_dpr=use_dpr, use_fbaf=use_fbaf, use_ica=use_ica)
        state = train(cfg, model_cfg, manifest, out_dir=None, log=None)
        report = evaluate(
            model_predictor(state.best_params),
            manifest,
            manifest.config.test_classes,
            k=eval_k,
            n_episodes=eval_episodes,
            seed=eval_seed,
        )
        rows.append((name, use_dpr, use_fbaf, use_ica, report.mean_iou))
        if log is not None:
            log(f"ablate {name:10s} miou {report.mean_iou:.4f}")
    if out_path is not None:
        lines = [ABLATION_HEADER + "\n"]
        for name, d, f, i, miou in rows:
            lines.append(
                f"{name},{str(d).lower()},{str(f).lower()},{str(i).lower()},{miou:.6f}\n"
            )
        Path(out_path).write_text("".join(lines), encoding="utf-8")
    return rows
