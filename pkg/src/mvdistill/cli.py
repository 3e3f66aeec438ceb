"""Command-line entry point.

Subcommands: synth (dataset generation), train, eval, gradcheck, ablate.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import MultiViewDataset, SyntheticSpec, generate_synthetic
from .encoder import Encoder, load_checkpoint
from .gradchecks import TOLERANCE, run_suite
from .trainkit import (
    metrics_csv_lines,
    evaluate,
    run_ablation,
    train,
    write_metrics_csv,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvdistill",
        description="Multi-view classification with all-subsets fusion, "
                    "uncertainty-weighted score fusion, and mutual distillation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="path to a key = value config file")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out-dir", default="runs", help="directory for outputs")

    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--classes", type=int, default=8)
    synth.add_argument("--per-class", type=int, default=6)
    synth.add_argument("--size", type=int, default=16)
    synth.add_argument("--noise", type=float, default=0.02)
    synth.add_argument("--out", required=True, help="output dataset path")

    sub.add_parser("train", parents=[common], help="train a model from a config file")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--views", type=int, required=True)

    gc = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference check of every operation")
    gc.add_argument("--seeds", type=int, default=20, help="number of random seeds")

    sub.add_parser("ablate", parents=[common], help="run the switch and topology studies")
    return parser


def _ensure_out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset_from_config(cfg):
    path = cfg["data.path"]
    if not path:
        raise ConfigError("data.path is not set; point it at an MVDS dataset file")
    try:
        return MultiViewDataset.load(path)
    except OSError as exc:
        raise ConfigError(f"data.path: {exc}") from exc


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        images_per_class=args.per_class,
        size=args.size,
        noise_std=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    ds = generate_synthetic(spec, args.out)
    print(f"wrote {ds.num_images} images, {ds.num_classes} classes, "
          f"shape {ds.image_shape} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    for line in cfg.echo_lines():
        print(line)
    dataset = _load_dataset_from_config(cfg)
    train_cfg = cfg.train_config(seed_override=args.seed)
    enc_cfg = cfg.encoder_config(dataset)
    out = _ensure_out_dir(args)

    encoder = Encoder(enc_cfg, seed=train_cfg.seed)
    rows = train(encoder, dataset, train_cfg)
    metrics_path = out / "metrics.csv"
    write_metrics_csv(rows, train_cfg.views, metrics_path)
    ckpt_path = out / "model.mvwm"
    encoder.save(ckpt_path)
    last = rows[-1]
    print(f"final epoch {last.epoch}: loss {last.loss_total:.4f}, "
          f"top1 {last.top1_full:.4f}, top5 {last.top5_full:.4f}")
    print(f"metrics -> {metrics_path}")
    print(f"checkpoint -> {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    encoder = load_checkpoint(args.checkpoint)
    try:
        dataset = MultiViewDataset.load(args.dataset)
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    row = evaluate(encoder, dataset, args.views, cap=cfg["train.eval_cap"],
                   max_views=max(cfg["train.max_views"], args.views))
    out = _ensure_out_dir(args)
    path = out / "eval.csv"
    lines = metrics_csv_lines([row], args.views)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(lines[0])
    print(lines[1])
    print(f"eval row -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = args.seeds
    results = run_suite(seeds=seeds, base_seed=args.seed if args.seed is not None else 0)
    failures = 0
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        failures += status == "FAIL"
        print(f"{name:40s} max rel err {err:.3e} [{status}]")
    print(f"{len(results)} checks over {seeds} seeds, {failures} failures")
    return 1 if failures else 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    for line in cfg.echo_lines():
        print(line)
    dataset = _load_dataset_from_config(cfg)
    train_cfg = cfg.train_config(seed_override=args.seed)
    enc_cfg = cfg.encoder_config(dataset)
    out = _ensure_out_dir(args)
    path = out / "ablation.csv"
    results = run_ablation(dataset, enc_cfg, train_cfg, out_path=path)
    for res in results:
        row = res["row"]
        print(f"pmv={int(res['pmv'])} adaptive={int(res['adaptive'])} "
              f"uw={int(res['uw'])} topology={res['topology']}: "
              f"top1 {row.top1_full:.4f}")
    print(f"ablation table -> {path}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, IndexError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
