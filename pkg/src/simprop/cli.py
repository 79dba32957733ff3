"""Command line interface.

Subcommands: gen-data, train, predict, eval, ablate, premise, grad-check.
Logs (resolved configuration, progress) go to stderr; primary outputs
(CSV reports, file paths) go to stdout. Exit codes: 0 on success, 1 on
validation errors, 2 on numeric aborts during training.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evalsuite, gradcheck
from .data import (
    DatasetManifest,
    MANIFEST_NAME,
    SyntheticConfig,
    generate_dataset,
    read_manifest,
    read_pgm,
    read_ppm,
    write_pgm,
)
from .kernels import BACKEND
from .model import ModelConfig, predict as model_predict
from .train import NumericAbort, TrainConfig, train


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _log_config(command: str, pairs: dict) -> None:
    joined = " ".join(f"{k}={v}" for k, v in pairs.items())
    _log(f"[{command}] backend={BACKEND} {joined}")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the documented contract
    # reserves 2 for numeric aborts, so remap usage errors to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",")) if s else ()


def _resolve_threads(value: int | None) -> int:
    env = os.environ.get("SIMPROP_THREADS")
    if env is not None:
        return max(1, int(env))
    if value is not None:
        return max(1, value)
    return os.cpu_count() or 1


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / MANIFEST_NAME if p.is_dir() else p


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (default 0)")
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker cap; SIMPROP_THREADS overrides; results are identical at any setting",
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--feature-channels", type=int, default=64, help="encoder width (default 64)")
    g.add_argument(
        "--aspp-rates", type=_int_tuple, default=(1, 2, 4, 8), help="decoder dilation rates"
    )
    g.add_argument(
        "--map-raw",
        action="store_true",
        help="probe pooling divides by map area instead of mask area",
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=2.5e-3, help="SGD learning rate (default 2.5e-3)")
    g.add_argument("--batch", type=int, default=8, help="episodes per step (default 8)")
    g.add_argument("--epochs", type=int, default=180, help="training epochs (default 180)")
    g.add_argument("--episodes-per-epoch", type=int, default=200)
    g.add_argument("--val-episodes", type=int, default=40)
    g.add_argument("--no-dpr", action="store_true", help="disable the support-branch loss")
    g.add_argument("--no-fbaf", action="store_true", help="disable attentive fusion")
    g.add_argument("--no-ica", action="store_true", help="disable channel averaging")
    g.add_argument("--ica-p0", type=float, default=0.25, help="initial switch probability")
    g.add_argument("--ica-half-life", type=int, default=45, help="decay half-life in epochs")


def _model_config(args, input_size: int) -> ModelConfig:
    return ModelConfig(
        input_size=input_size,
        feature_channels=args.feature_channels,
        aspp_rates=args.aspp_rates,
        use_fbaf=not args.no_fbaf,
        map_raw=args.map_raw,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        episodes_per_epoch=args.episodes_per_epoch,
        seed=args.seed,
        use_dpr=not args.no_dpr,
        use_fbaf=not args.no_fbaf,
        use_ica=not args.no_ica,
        ica_p0=args.ica_p0,
        ica_half_life=args.ica_half_life,
        val_episodes=args.val_episodes,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5, dest="n_classes")
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--train-classes", type=_int_tuple, default=(0, 1, 2))
    p.add_argument("--test-classes", type=_int_tuple, default=(3, 4))
    p.add_argument("--correlated-bg", action="store_true", help="hue-tinted instead of gray backgrounds")
    p.add_argument("--noise-amp", type=float, default=0.15)
    p.add_argument("--noise-smooth", type=int, default=8)
    p.add_argument("--fg-noise-amp", type=float, default=0.05)
    p.add_argument("--scale-min", type=float, default=0.22)
    p.add_argument("--scale-max", type=float, default=0.42)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("predict", help="predict one query mask")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="query image (PPM)")
    p.add_argument(
        "--support",
        nargs=2,
        action="append",
        metavar=("IMAGE", "MASK"),
        required=True,
        help="support image and mask; repeat for k-shot",
    )
    p.add_argument("--out", default="pred.pgm", help="output mask path (PGM)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="required unless --oracle")
    p.add_argument("--k", type=int, default=1, help="supports per episode (e.g. 1 or 5)")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--oracle", action="store_true", help="score the ground-truth stub instead")
    p.add_argument("--dump", help="directory for predicted masks + predictions.manifest")
    p.add_argument("--out", help="also write the report CSV here")

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="ablation CSV path")
    p.add_argument("--eval-episodes", type=int, default=100)
    p.add_argument("--eval-seed", type=int, default=1234)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("premise", help="premise-validation reports")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="model under study")
    p.add_argument(
        "--ref-checkpoint",
        help="supervised reference trained on all classes; trained here when omitted",
    )
    p.add_argument("--ref-epochs", type=int, default=30, help="epochs for the in-repo reference")
    p.add_argument("--identical-n", type=int, default=50)
    p.add_argument("--overlap-episodes", type=int, default=100)
    p.add_argument("--ratio-pairs", type=int, default=50)
    p.add_argument("--fgbg-pairs", type=int, default=20, help="pairs per class")
    p.add_argument("--out", help="directory for the report and reference checkpoint")

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--h", type=float, default=1e-3, help="per-op step size")
    p.add_argument("--tol", type=float, default=1e-2, help="per-op relative tolerance")
    p.add_argument("--e2e-h", type=float, default=2.5e-3, help="end-to-end step size")
    p.add_argument("--e2e-tol", type=float, default=3e-2, help="end-to-end tolerance")
    p.add_argument("--size", type=int, default=32, help="end-to-end image size")
    p.add_argument("--feature-channels", type=int, default=16)
    p.add_argument("--max-elements", type=int, default=400)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    config = SyntheticConfig(
        image_size=args.image_size,
        n_classes=args.n_classes,
        samples_per_class=args.samples_per_class,
        train_classes=args.train_classes,
        test_classes=args.test_classes,
        correlated_bg=args.correlated_bg,
        noise_amp=args.noise_amp,
        noise_smooth=args.noise_smooth,
        fg_noise_amp=args.fg_noise_amp,
        scale_min=args.scale_min,
        scale_max=args.scale_max,
    )
    threads = _resolve_threads(args.threads)
    _log_config("gen-data", {"seed": args.seed, "threads": threads, "out": args.out,
                             **dict(config.header_items())})
    manifest = generate_dataset(config, args.seed, args.out, threads=threads)
    _log(f"[gen-data] wrote {len(manifest.records)} samples")
    print(str(Path(args.out) / MANIFEST_NAME))
    return 0


def _cmd_train(args) -> int:
    manifest = read_manifest(_manifest_path(args.data))
    model_cfg = _model_config(args, manifest.config.image_size)
    train_cfg = _train_config(args)
    _log_config("train", {"seed": args.seed, "data": args.data, "out": args.out,
                          **dict(model_cfg.header_items()),
                          "lr": train_cfg.lr, "batch": train_cfg.batch_size,
                          "epochs": train_cfg.epochs,
                          "episodes_per_epoch": train_cfg.episodes_per_epoch,
                          "val_episodes": train_cfg.val_episodes,
                          "use_dpr": train_cfg.use_dpr, "use_fbaf": train_cfg.use_fbaf,
                          "use_ica": train_cfg.use_ica, "ica_p0": train_cfg.ica_p0,
                          "ica_half_life": train_cfg.ica_half_life})
    state = train(train_cfg, model_cfg, manifest, out_dir=args.out, log=_log)
    _log(f"[train] best val miou {state.best_val_miou:.6f}")
    print(str(Path(args.out) / "best.ckpt"))
    return 0


def _cmd_predict(args) -> int:
    params = ckpt.load(args.checkpoint)
    query = read_ppm(args.query)
    supports = []
    for img_path, mask_path in args.support:
        img = read_ppm(img_path)
        mask = read_pgm(mask_path)
        if mask.shape != img.shape[1:]:
            raise ValueError(f"support size mismatch: {img_path} vs {mask_path}")
        supports.append((img, mask))
    _log_config("predict", {"checkpoint": args.checkpoint, "query": args.query,
                            "k": len(supports), "out": args.out})
    mask = model_predict(query, supports, params)
    write_pgm(args.out, mask)
    print(str(args.out))
    return 0


def _split_classes(manifest: DatasetManifest, split: str) -> tuple[int, ...]:
    return manifest.config.test_classes if split == "test" else manifest.config.train_classes


def _cmd_eval(args) -> int:
    manifest = read_manifest(_manifest_path(args.data))
    if args.oracle:
        predict_fn = evalsuite.oracle_predictor()
        source = "oracle"
    else:
        if not args.checkpoint:
            raise ValueError("eval requires --checkpoint (or --oracle)")
        params = ckpt.load(args.checkpoint)
        if params.config.input_size != manifest.config.image_size:
            raise ValueError(
                f"checkpoint input size {params.config.input_size} != dataset "
                f"image size {manifest.config.image_size}"
            )
        predict_fn = evalsuite.model_predictor(params)
        source = args.checkpoint
    classes = _split_classes(manifest, args.split)
    _log_config("eval", {"seed": args.seed, "data": args.data, "model": source,
                         "k": args.k, "episodes": args.episodes, "split": args.split,
                         "classes": ",".join(map(str, classes))})
    report = evalsuite.evaluate(
        predict_fn, manifest, classes, k=args.k, n_episodes=args.episodes,
        seed=args.seed, dump_dir=args.dump,
    )
    csv = report.csv()
    sys.stdout.write(csv)
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    manifest = read_manifest(_manifest_path(args.data))
    model_cfg = _model_config(args, manifest.config.image_size)
    train_cfg = _train_config(args)
    _log_config("ablate", {"seed": args.seed, "data": args.data, "out": args.out,
                           "epochs": train_cfg.epochs,
                           "episodes_per_epoch": train_cfg.episodes_per_epoch,
                           "eval_episodes": args.eval_episodes, "eval_seed": args.eval_seed})
    rows = evalsuite.ablate(
        model_cfg, train_cfg, manifest,
        eval_k=1, eval_episodes=args.eval_episodes, eval_seed=args.eval_seed,
        out_path=args.out, log=_log,
    )
    sys.stdout.write(evalsuite.ABLATION_HEADER + "\n")
    for name, d, f, i, miou in rows:
        sys.stdout.write(f"{name},{str(d).lower()},{str(f).lower()},{str(i).lower()},{miou:.6f}\n")
    return 0


def _cmd_premise(args) -> int:
    manifest = read_manifest(_manifest_path(args.data))
    params = ckpt.load(args.checkpoint)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    _log_config("premise", {"seed": args.seed, "data": args.data,
                            "checkpoint": args.checkpoint,
                            "identical_n": args.identical_n,
                            "overlap_episodes": args.overlap_episodes,
                            "ratio_pairs": args.ratio_pairs, "fgbg_pairs": args.fgbg_pairs})

    test_classes = manifest.config.test_classes
    all_classes = tuple(range(manifest.config.n_classes))
    model_fn = evalsuite.model_predictor(params)

    # supervised reference: same architecture, trained with every class visible
    if args.ref_checkpoint:
        ref_params = ckpt.load(args.ref_checkpoint)
    else:
        _log(f"[premise] training the all-classes reference ({args.ref_epochs} epochs)")
        ref_manifest = DatasetManifest(
            config=replace(manifest.config, train_classes=all_classes, test_classes=()),
            seed=manifest.seed, records=manifest.records, root=manifest.root,
        )
        ref_cfg = TrainConfig(seed=args.seed, epochs=args.ref_epochs)
        ref_state = train(ref_cfg, params.config, ref_manifest, out_dir=None, log=_log)
        ref_params = ref_state.best_params
        if out_dir is not None:
            ckpt.save(out_dir / "reference.ckpt", ref_params)
    ref_fn = evalsuite.model_predictor(ref_params)

    ident = evalsuite.identical_input_test(
        model_fn, manifest, test_classes, n=args.identical_n, seed=args.seed
    )

    from .data import EpisodeSampler

    sampler = EpisodeSampler(manifest, test_classes)
    rng = np.random.default_rng([args.seed, 7])
    acc = evalsuite.OverlapAccumulator()
    for _ in range(args.overlap_episodes):
        ep = sampler.sample(1, rng)
        acc.add(model_fn(ep), ref_fn(ep), ep.query.mask)
    overlap = acc.stats()

    ratio = evalsuite.map_similarity_ratio(
        params, manifest, test_classes, n_pairs=args.ratio_pairs, seed=args.seed
    )
    fgbg = evalsuite.fgbg_similarity_stats(
        params, manifest, all_classes, n_pairs=args.fgbg_pairs, seed=args.seed
    )

    lines = [
        "premise validation report",
        f"identical_input_miou={ident:.6f} (n={args.identical_n})",
        "error_overlap (reconstructed metric, dataset-level, reference=all-classes model):",
        f"  fn_overlap_pct={overlap.fn_overlap_pct:.2f}",
        f"  fp_overlap_pct={overlap.fp_overlap_pct:.2f}",
        f"  tp_gap_pct={overlap.tp_gap_pct:.2f} (n={overlap.n})",
        f"map_similarity_ratio: mean={ratio.mean:.4f} std={ratio.std:.4f} "
        f"used={ratio.n_used} skipped={ratio.n_skipped}",
        "fg/bg probe cosine similarity per class (same-class pairs):",
    ]
    for c in sorted(fgbg):
        fg_m, bg_m = fgbg[c]
        marker = "bg>fg" if bg_m > fg_m else "fg>=bg"
        lines.append(f"  class {c}: fg={fg_m:.4f} bg={bg_m:.4f} [{marker}]")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        (out_dir / "premise_report.txt").write_text(text, encoding="utf-8")
    return 0


def _cmd_grad_check(args) -> int:
    _log_config("grad-check", {"seed": args.seed, "h": args.h, "tol": args.tol,
                               "e2e_h": args.e2e_h, "e2e_tol": args.e2e_tol,
                               "size": args.size,
                               "feature_channels": args.feature_channels,
                               "max_elements": args.max_elements})
    started = time.monotonic()
    ok = True
    for name, report in gradcheck.op_battery(seed=args.seed, h=args.h, tol=args.tol):
        status = "ok" if report.passed else "FAIL"
        print(f"{status:4s} op {name:24s} max_rel={report.max_rel_err:.3e} tol={report.tol:.0e}")
        ok = ok and report.passed
    e2e = gradcheck.dual_loss_check(
        input_size=args.size,
        feature_channels=args.feature_channels,
        h=args.e2e_h,
        tol=args.e2e_tol,
        max_elements=args.max_elements,
        seed=args.seed,
    )
    status = "ok" if e2e.passed else "FAIL"
    kink = f" kink={e2e.n_kink}/{e2e.n_checked}" if e2e.n_kink else ""
    print(f"{status:4s} end-to-end dual loss        max_rel={e2e.max_rel_err:.3e}"
          f" tol={e2e.tol:.0e}{kink}")
    if not e2e.passed:
        for line in e2e.lines():
            print(line)
    ok = ok and e2e.passed
    elapsed = time.monotonic() - started
    print(f"{'PASS' if ok else 'FAIL'} gradient checks in {elapsed:.1f}s")
    return 0 if ok else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "premise": _cmd_premise,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 1
        return code
    except NumericAbort as e:
        _log(f"numeric abort: {e}")
        return 2
    except (ValueError, OSError, KeyError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
