"""``octnet`` command line: synth, train, eval, predict, reproduce-metrics.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 reproduction check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .constants import ARCHITECTURES, CLASS_NAMES
from .errors import OctNetError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_REPRO = 0, 1, 2, 3

TRAIN_DEFAULTS = {
    "epochs": 15,
    "batch_size": 32,
    "lr": 1e-3,
    "optimizer": "adam",
    "width": 1.0,
    "augment": True,
    "prefetch": 2,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octnet", description="OCT retinal-disease CNN toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic 4-class fixture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=32)
    s.add_argument("--val-per-class", type=int)
    s.add_argument("--test-per-class", type=int)
    s.add_argument("--size", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train an architecture on a dataset directory")
    t.add_argument("--config", help="JSON file of defaults; flags override it")
    t.add_argument("--arch", choices=ARCHITECTURES)
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd_momentum"))
    t.add_argument("--seed", type=int)
    t.add_argument("--width", type=float, help="channel width multiplier (1.0 = published widths)")
    t.add_argument("--out", help="output directory for curves.csv and model.octm")
    t.add_argument("--checkpoint", help="checkpoint path (default <out>/model.octm)")
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--resplit", action="store_true",
                   help="pool all files and re-split at 98.816:0.038:1.146")
    t.add_argument("--prefetch", type=int)
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--json", action="store_true", help="print JSON instead of a text table")
    e.add_argument("--out", help="also write the JSON report here")

    pr = sub.add_parser("predict", help="classify a single image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--json", action="store_true")

    r = sub.add_parser("reproduce-metrics", help="recompute published metrics from the confusion matrices")
    r.add_argument("--tolerance", type=float, default=0.005)
    r.add_argument("--json", action="store_true")
    return p


def _train_settings(args) -> dict:
    settings = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            settings.update({k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()})
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
    for key in ("arch", "data", "epochs", "batch_size", "lr", "optimizer", "seed", "width", "out",
                "checkpoint", "augment", "prefetch"):
        val = getattr(args, key)
        if val is not None:
            settings[key] = val
    for key in ("arch", "data", "seed", "out"):
        if settings.get(key) is None:
            raise UsageError(f"train: --{key} is required (flag or config file)")
    if settings["arch"] not in ARCHITECTURES:
        raise UsageError(f"train: unknown architecture {settings['arch']!r}")
    settings["force"] = args.force
    settings["resplit"] = args.resplit or settings.get("resplit", False)
    return settings


def cmd_synth(args) -> int:
    from .data import generate_synthetic_fixture
    out = generate_synthetic_fixture(args.out, args.per_class, args.size, args.seed,
                                     args.val_per_class, args.test_per_class)
    print(f"wrote synthetic fixture to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    s = _train_settings(args)
    out = Path(s["out"])
    ckpt = Path(s.get("checkpoint") or out / "model.octm")
    if ckpt.exists() and not s["force"]:
        raise UsageError(f"train: checkpoint {ckpt} exists; pass --force to overwrite")

    from .data import NO_AUGMENT, AugmentConfig, scan_dataset, split_dataset, stream_batches
    from .models import build
    from .training import TrainConfig, fit

    cfg = TrainConfig(epochs=int(s["epochs"]), batch_size=int(s["batch_size"]), lr=float(s["lr"]),
                      optimizer=s["optimizer"], seed=int(s["seed"]),
                      curve_path=str(out / "curves.csv"), checkpoint_path=str(ckpt))
    manifest = scan_dataset(s["data"])
    if s["resplit"]:
        manifest = split_dataset(manifest, seed=cfg.seed)
    aug = AugmentConfig() if s["augment"] else NO_AUGMENT
    net = build(s["arch"], width=float(s["width"]), seed=cfg.seed)
    prefetch = int(s["prefetch"])

    def train_batches(epoch):
        return stream_batches(manifest, "train", cfg.batch_size, cfg.seed, aug, epoch, prefetch)

    def val_batches(epoch):
        return stream_batches(manifest, "val", cfg.batch_size, None, None, epoch, prefetch)

    out.mkdir(parents=True, exist_ok=True)
    _, curves = fit(net, train_batches, val_batches, cfg,
                    on_epoch=lambda p: print(f"epoch {p.epoch:>3}  train_acc={p.train_acc:.4f}  "
                                             f"train_loss={p.train_loss:.4f}  val_acc={p.val_acc:.4f}  "
                                             f"val_loss={p.val_loss:.4f}", flush=True))
    print(f"curves: {cfg.curve_path}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import scan_dataset, stream_batches
    from .evaluation import confusion_matrix, report
    from .models import predict
    from .training import load_checkpoint

    net = load_checkpoint(args.checkpoint).net
    manifest = scan_dataset(args.data)
    truths, preds = [], []
    for b in stream_batches(manifest, args.split, args.batch_size, None, None):
        _, labels = predict(net, b.images)
        truths.extend(b.labels.argmax(1).tolist())
        preds.extend(labels.tolist())
    cm = confusion_matrix(truths, preds, len(manifest.classes), manifest.classes)
    rendered = report(cm, title=f"{net.name} on {args.split} split ({len(truths)} images)")
    print(rendered.to_json() if args.json else rendered.text)
    if args.out:
        Path(args.out).write_text(rendered.to_json() + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_image
    from .models import predict
    from .training import load_checkpoint

    net = load_checkpoint(args.checkpoint).net
    img = load_image(args.image, net.input_shape[:2])
    probs, labels = predict(net, img[None])
    row = probs[0].astype(np.float64)
    label = CLASS_NAMES[int(labels[0])]
    if args.json:
        print(json.dumps({"probabilities": dict(zip(CLASS_NAMES, row.tolist())), "label": label}))
    else:
        for name, p in zip(CLASS_NAMES, row):
            print(f"{name:<8} {p:.6f}")
        print(f"label: {label}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .evaluation import reproduce_table3
    lines = reproduce_table3(args.tolerance)
    if args.json:
        print(json.dumps([{"model": l.model, "phase": l.phase, "status": l.status, "computed": l.computed,
                           "reference": l.reference, "report": l.report.to_dict()} for l in lines], indent=2))
    else:
        for l in lines:
            print(l.render())
    failed = [l for l in lines if l.status == "FAIL"]
    if not args.json:
        print(f"{len(lines) - len(failed)}/{len(lines)} rows consistent or noted; {len(failed)} failed")
    return EXIT_REPRO if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "reproduce-metrics": cmd_reproduce}


def _limit_threads():
    n = os.environ.get("OCTNET_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(int(n))


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _limit_threads()
        return COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return EXIT_USAGE
    except (OctNetError, OSError) as e:
        sys.stderr.write(f"octnet: {e}\n")
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
