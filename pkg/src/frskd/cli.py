"""Command-line entry point.

Failures print a single JSON object on stderr, e.g.
``{"error": "config", "exit": 2, "message": "..."}``, and exit with

* 2: bad flags or configuration
* 3: missing or malformed data, checkpoint or image files
* 4: numerical abort (non-finite training step, failed gradient check)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    overrides = list(args.set)
    if args.out:
        overrides.append(f"output.dir={args.out}")
    cfg = load_config(args.config, overrides)
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    cols = ["epoch", "lr", "total", "student_train_acc", "student_test_acc",
            "teacher_train_acc", "teacher_test_acc", "seconds"]
    if not args.quiet:
        print("\t".join(cols), flush=True)

    def show(m):
        if args.quiet:
            return
        vals = [getattr(m, c) for c in cols]
        print("\t".join("" if v is None else f"{v:.6g}" for v in vals), flush=True)

    last = train(cfg, resume=args.resume, on_epoch=show)
    print(json.dumps({"out_dir": cfg.out_dir, **last.row()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    s, t = evaluate(args.checkpoint, args.data)
    print(f"student_acc\t{s:.6f}")
    print(f"teacher_acc\t{'' if t is None else f'{t:.6f}'}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .data import load_dataset
    from .export import export_attention, write_ppm

    image = args.image
    if image is None:
        if args.data is None:
            raise UsageError("export-attention: give --image or --data with --index")
        ds = load_dataset(args.data)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"export-attention: --index must lie in [0, {len(ds)})")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        image = write_ppm(Path(args.out) / "input.ppm", ds.images[args.index])
    for p in export_attention(args.checkpoint, image, args.out):
        print(p)
    return EXIT_OK


def cmd_count(args) -> int:
    from .backbone import build_backbone, preset
    from .complexity import ratio_report
    from .teacher import SelfTeacherConfig, build_teacher

    try:
        bcfg = preset(args.preset)
        tcfg = SelfTeacherConfig.for_backbone(bcfg, width=args.w, channel_mode=args.channel_mode,
                                              uniform_channels=args.uniform_channels,
                                              node_convs=args.node_convs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rep = ratio_report(build_backbone(bcfg, 0), build_teacher(tcfg, 0), bcfg.image_size)
    print("quantity\tclassifier\tteacher\tratio")
    print(f"params\t{rep['classifier_params']}\t{rep['teacher_params']}\t{rep['param_ratio']:.4f}")
    print(f"flops\t{rep['classifier_flops']}\t{rep['teacher_flops']}\t{rep['flops_ratio']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, main as run

    results, seconds = run(args.instances, args.seed)
    print(format_results(results, seconds))
    bad = [r.name for r in results if not r.ok]
    if bad:
        return _fail("numerical", EXIT_NUMERIC, f"gradient check failed for {', '.join(bad)}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic, save_dataset

    try:
        train_ds = gen_synthetic(args.classes, args.train_count, args.extent, args.seed, "train")
        test_ds = gen_synthetic(args.classes, args.test_count, args.extent, args.seed + 1, "test")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    print(save_dataset(train_ds, out / "train.json"))
    print(save_dataset(test_ds, out / "test.json", stats_from=train_ds))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    for p in build_report(args.run, args.out, args.maps):
        print(p)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frskd", description="Self-distillation with a feature-refining teacher network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the classifier and self-teacher")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, applied after --config)")
    t.add_argument("--out", help="shorthand for --set output.dir=OUT")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    t.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    t.add_argument("--quiet", action="store_true", help="only print the final summary line")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of both heads")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset manifest")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-attention", help="write per-block attention maps as P5 files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", help="binary P6 image matching the model's input extent")
    x.add_argument("--data", help="dataset manifest to take the image from instead")
    x.add_argument("--index", type=int, default=0, help="image index within --data")
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("count-params", help="classifier and teacher size and FLOPs")
    c.add_argument("--preset", default="wrn16-2")
    c.add_argument("--w", type=int, default=2, help="teacher channel width multiplier")
    c.add_argument("--channel-mode", choices=("scaled", "uniform"), default="scaled")
    c.add_argument("--uniform-channels", type=int, default=256)
    c.add_argument("--node-convs", type=int, default=2)
    c.set_defaults(func=cmd_count)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--instances", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic train/test dataset pair")
    d.add_argument("--out", required=True)
    d.add_argument("--classes", type=int, default=4)
    d.add_argument("--train-count", type=int, default=5000)
    d.add_argument("--test-count", type=int, default=1000)
    d.add_argument("--extent", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("report", help="render metrics CSV and PNG figures for a run")
    r.add_argument("--run", required=True, help="run directory containing metrics.jsonl")
    r.add_argument("--maps", help="directory of exported attention maps")
    r.add_argument("--out", help="output directory (default RUN/report)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .autodiff import DomainError, ShapeError
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    from .train import NumericalAbort

    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except (DataError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except (NumericalAbort, FloatingPointError, DomainError) as exc:
        return _fail("numerical", EXIT_NUMERIC, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
