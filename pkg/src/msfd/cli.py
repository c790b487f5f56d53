"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, analyze-params, plot.
Exit codes: 0 success, 2 usage/input error, 3 runtime numerical failure.
Set MSFD_VERBOSE=debug|info|warning to control log output.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .backbone import count_params_standard
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, generate_dataset, load_dataset
from .metrics import EvalConfig, evaluate_dataset, multiscale_eval
from .model import build_detector, count_model_params, model_size_bytes
from .neck import ALLOWED_CHANNELS, BASE_RANGES, bottleneck_params
from .plots import plot_ablation, plot_cdr_curve, plot_loss_curve, read_loss_log
from .train import CheckpointMismatch, TrainingDiverged, load_checkpoint, resume, train

log = logging.getLogger("msfd")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

LAMBDA_SWEEP = (0.0, 0.1, 0.3, 0.5, 0.8, 1.0)


def _add_config_args(p):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value, e.g. train.total_iters=200",
    )
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _load(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_gen_data(args):
    cfg = _load(args)
    out_dir = Path(args.out)
    manifest = generate_dataset(cfg.data, args.count, out_dir)
    cfg.echo(out_dir)
    log.info("wrote %d images to %s (hash %s)", args.count, out_dir,
             manifest["content_hash"][:12])
    print(f"generated {args.count} images in {out_dir}")
    return EXIT_OK


def _load_data(path):
    if not Path(path).exists():
        raise DatasetError(f"data directory {path} does not exist")
    return load_dataset(path)


def cmd_train(args):
    cfg = _load(args)
    dataset = _load_data(args.data)
    out_dir = Path(args.out)
    cfg.echo(out_dir)
    if args.resume:
        ckpt, _ = resume(args.resume, dataset, cfg.train, out_dir)
    else:
        model = build_detector(cfg.backbone, cfg.mfp, cfg.head)
        log.info("model has %d parameters", count_model_params(model))
        ckpt, _ = train(model, dataset, cfg.train, out_dir)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _write_report(report, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())
    lines = ["metric\tvalue"]
    for key, value in report.to_dict().items():
        if not isinstance(value, dict):
            lines.append(f"{key}\t{value}")
    for size, cdr in sorted(report.cdr_by_size.items()):
        lines.append(f"CDR@{size}\t{cdr}")
    (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")
    if report.cdr_by_size:
        plot_cdr_curve(report.cdr_by_size, out_dir / "cdr_by_size.png")


def cmd_eval(args):
    cfg = _load(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    ec = cfg.eval
    if args.sizes:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        ec = dataclasses.replace(ec, sizes=sizes)
        report = multiscale_eval(model, dataset, ec.sizes, ec)
    else:
        report = evaluate_dataset(model, dataset, ec)
    report.param_count = count_model_params(model)
    report.model_size_bytes = model_size_bytes(model)
    print(report.format_table())
    if args.out:
        out_dir = Path(args.out)
        cfg.echo(out_dir)
        _write_report(report, out_dir)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load(args)
    dataset = _load_data(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir)

    if args.which == "layers":
        points = [("base_range", br) for br in BASE_RANGES]
    elif args.which == "channels":
        points = [("channels", c) for c in ALLOWED_CHANNELS]
    else:
        points = [("lambda", v) for v in LAMBDA_SWEEP]

    rows = []
    for key, value in points:
        log.info("ablation point %s=%s", key, value)
        run_cfg = cfg
        if key == "base_range":
            run_cfg = dataclasses.replace(
                cfg, mfp=dataclasses.replace(cfg.mfp, base_range=value)
            )
        elif key == "channels":
            run_cfg = dataclasses.replace(
                cfg, mfp=dataclasses.replace(cfg.mfp, channels=value,
                                             bottleneck_mid_channels=value // 2)
            )
        else:
            run_cfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, lam=value)
            )
        point_dir = out_dir / f"{args.which}_{value}".replace("/", "-")
        model = build_detector(run_cfg.backbone, run_cfg.mfp, run_cfg.head)
        try:
            train(model, dataset, run_cfg.train, point_dir)
        except TrainingDiverged as exc:
            log.warning("point %s=%s diverged: %s", key, value, exc)
            rows.append({key: value, "CDR": None, "FDR": None, "MDR": None,
                         "model_size_bytes": model_size_bytes(model), "diverged": True})
            continue
        report = evaluate_dataset(model, dataset, run_cfg.eval)
        rows.append({key: value, "CDR": report.cdr, "FDR": report.fdr,
                     "MDR": report.mdr, "model_size_bytes": model_size_bytes(model),
                     "diverged": False})

    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    lines += ["\t".join(str(r[k]) for k in header) for r in rows]
    (out_dir / "ablation.tsv").write_text("\n".join(lines) + "\n")
    labels = [r[header[0]] for r in rows]
    cdrs = [r["CDR"] if r["CDR"] is not None else 0.0 for r in rows]
    plot_ablation(labels, cdrs, out_dir / "ablation.png", xlabel=header[0])
    print("\n".join(lines))
    return EXIT_OK


def cmd_analyze_params(args):
    cfg = _load(args)
    channels = args.channels or list(ALLOWED_CHANNELS)
    print(f"{'C':>5} {'standard 3x3':>14} {'bottleneck':>12} {'reduction':>10}")
    for c in channels:
        std = count_params_standard(c, 3, c)
        bn = bottleneck_params(c)
        print(f"{c:>5} {std:>14} {bn:>12} {100 * (1 - bn / std):>9.2f}%")
    model = build_detector(cfg.backbone, cfg.mfp, cfg.head)
    total = count_model_params(model)
    print(f"\nmodel total params : {total}")
    print(f"conv weight params : {model.weight_param_count()}")
    print(f"model size         : {model_size_bytes(model) / 2**20:.2f} MB")
    return EXIT_OK


def cmd_plot(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    for inp in args.inputs:
        path = Path(inp)
        if not path.exists():
            raise DatasetError(f"input {path} does not exist")
        if path.suffix == ".jsonl":
            records = read_loss_log(path)
            if not records:
                raise DatasetError(f"loss log {path} is empty")
            produced.append(plot_loss_curve(records, out_dir / f"{path.stem}_loss.png"))
        else:
            doc = json.loads(path.read_text())
            curve = doc.get("cdr_by_size")
            if not curve:
                raise DatasetError(f"{path} holds no per-size CDR curve")
            curve = {int(k): v for k, v in curve.items()}
            produced.append(plot_cdr_curve(curve, out_dir / f"{path.stem}_cdr.png"))
            tsv = out_dir / f"{path.stem}_cdr.tsv"
            tsv.write_text(
                "size\tCDR\n" + "\n".join(f"{k}\t{v}" for k, v in sorted(curve.items())) + "\n"
            )
    for p in produced:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="msfd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--sizes", help="comma-separated input sizes, e.g. 384,512,640")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_config_args(p)
    p.add_argument("--which", choices=("layers", "channels", "lambda"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-params", help="print parameter accounting")
    _add_config_args(p)
    p.add_argument("--channels", type=int, nargs="*")
    p.set_defaults(func=cmd_analyze_params)

    p = sub.add_parser("plot", help="render figures from logs and reports")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    level = os.environ.get("MSFD_VERBOSE", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, CheckpointMismatch, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
