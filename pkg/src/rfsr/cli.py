"""Command-line entry point: train / eval / analyze / degrade / export-ema.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    dataset_from_config,
    degradation_from_config,
    extractor_from_config,
    model_spec_from_config,
    rewards_from_config,
    schedule_from_config,
    train_config_from_config,
)
from .data import degrade, list_image_files
from .diffusion import build_model, load_checkpoint
from .errors import ConfigurationError
from .evaluation import (
    DiffusionSuperResolver,
    analyze_trajectory,
    build_metrics,
    evaluate,
    load_eval_items,
)
from .imaging import read_image, write_image
from .schedule import TimestepSchedule
from .trainer import export_ema, load_eval_model, train


class _UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems map to exit code 1
        raise _UsageError(message, self)


def build_parser() -> _Parser:
    parser = _Parser(prog="rfsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="run the fine-tuning loop")
    p_train.add_argument("--config", required=True, help="config file path or shipped preset name")
    p_train.add_argument("--resume", type=Path, default=None, help="checkpoint directory to resume from")
    p_train.add_argument("--output", type=Path, default=None, help="override run.output_dir")

    p_eval = sub.add_parser("eval", help="score a checkpoint over an eval set")
    p_eval.add_argument("--model", required=True, type=Path, help="checkpoint directory")
    p_eval.add_argument("--data", required=True, type=Path, help="eval data directory")
    p_eval.add_argument("--metrics", default="ssim,psnr", help="comma-separated metric ids")
    p_eval.add_argument("--out", required=True, type=Path, help="report CSV path")
    p_eval.add_argument("--config", default=None, help="optional config for seed/captions")

    p_an = sub.add_parser("analyze", help="per-step frequency-band analysis of one image")
    p_an.add_argument("--model", required=True, type=Path, help="checkpoint directory")
    p_an.add_argument("--lr", required=True, type=Path, help="low-resolution input image")
    p_an.add_argument("--gt", required=True, type=Path, help="ground-truth image")
    p_an.add_argument("--out", required=True, type=Path, help="trajectory CSV path")
    p_an.add_argument("--plot", type=Path, default=None, help="optional plot PNG path")
    p_an.add_argument("--seed", type=int, default=0)

    p_deg = sub.add_parser("degrade", help="synthesize LR/GT training pairs")
    p_deg.add_argument("--in", dest="in_dir", required=True, type=Path, help="source image directory")
    p_deg.add_argument("--out", required=True, type=Path, help="output directory")
    p_deg.add_argument("--config", default=None, help="config carrying data.degradation")
    p_deg.add_argument("--seed", type=int, default=0)

    p_exp = sub.add_parser("export-ema", help="write EMA shadow weights as a standalone archive")
    p_exp.add_argument("--checkpoint", required=True, type=Path)
    p_exp.add_argument("--out", required=True, type=Path)
    return parser


def _schedule_from_meta(meta: dict) -> TimestepSchedule:
    sched = meta.get("schedule")
    if not sched:
        return TimestepSchedule()
    return TimestepSchedule(
        T=int(sched["T"]), st_latest=int(sched["st_latest"]),
        st1=int(sched["st1"]), st2=int(sched["st2"]),
    )


def _cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.output is not None:
        cfg.override("run.output_dir", str(args.output))
    train_cfg = train_config_from_config(cfg)
    cfg.write_resolved(train_cfg.output_dir)
    model = build_model(model_spec_from_config(cfg))
    dataset = dataset_from_config(cfg)
    rewards = rewards_from_config(cfg)
    extractor = extractor_from_config(cfg)
    final = train(train_cfg, dataset, model, rewards, extractor, resume=args.resume)
    print(f"training complete: {train_cfg.iterations} iterations")
    print(f"metrics: {train_cfg.output_dir / 'metrics.csv'}")
    print(f"checkpoint: {final}")
    return 0


def _cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig({})
    metrics = build_metrics([m.strip() for m in args.metrics.split(",") if m.strip()])
    model = load_eval_model(args.model, use_ema=True)
    ck = load_checkpoint(args.model)
    items = load_eval_items(args.data)
    resolver = DiffusionSuperResolver(
        model,
        _schedule_from_meta(ck.meta),
        seed=int(cfg.get("run.seed")),
        scale=int(cfg.get("data.scale")),
    )
    report = evaluate(
        resolver,
        items,
        metrics,
        out_csv=args.out,
        dataset_id=str(args.data),
        model_id=str(args.model),
        config_hash=cfg.hash(),
    )
    cfg.write_resolved(Path(args.out).parent)
    for name, value in report.aggregates.items():
        print(f"{name}: {value:.6f}")
    print(f"report: {args.out}")
    return 0


def _cmd_analyze(args) -> int:
    model = load_eval_model(args.model, use_ema=True)
    ck = load_checkpoint(args.model)
    records = analyze_trajectory(
        model,
        read_image(args.lr),
        read_image(args.gt),
        _schedule_from_meta(ck.meta),
        seed=args.seed,
        out_csv=args.out,
        plot_path=args.plot,
    )
    RunConfig({}).write_resolved(Path(args.out).parent)
    print(f"analyzed {len(records)} steps; trajectory: {args.out}")
    if args.plot:
        print(f"plot: {args.plot}")
    return 0


def _cmd_degrade(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig({})
    scale = int(cfg.get("data.scale"))
    dcfg = degradation_from_config(cfg.get("data.degradation"), scale=scale)
    files = list_image_files([args.in_dir])
    if not files:
        raise ConfigurationError(f"no images found under {args.in_dir}")
    out = Path(args.out)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    rows = []
    for index, path in enumerate(files):
        gt = read_image(path)
        pair_seed = int(np.random.SeedSequence([args.seed & 0xFFFFFFFF, index]).generate_state(1)[0])
        lr = degrade(gt, dcfg, pair_seed)
        lr_rel, gt_rel = f"lr/{path.stem}.png", f"gt/{path.stem}.png"
        write_image(lr, out / lr_rel)
        write_image(gt, out / gt_rel)
        rows.append((path.stem, pair_seed, lr_rel, gt_rel))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "seed", "lr_path", "gt_path"])
        writer.writerows(rows)
    cfg.write_resolved(out)
    print(f"degraded {len(rows)} images into {out}")
    return 0


def _cmd_export_ema(args) -> int:
    out = export_ema(args.checkpoint, args.out)
    print(f"EMA weights: {out}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "degrade": _cmd_degrade,
    "export-ema": _cmd_export_ema,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
