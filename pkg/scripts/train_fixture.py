"""Desk-scale learnability run: one architecture on the synthetic fixture.

Writes the fixture (if missing), trains, and prints the curve plus the test
split confusion matrix.

    python3 scripts/train_fixture.py --arch vanilla_cnn --width 0.25 --epochs 15
"""
import argparse
import time
from pathlib import Path

from octnet.constants import ARCHITECTURES
from octnet.data import NO_AUGMENT, AugmentConfig, generate_synthetic_fixture, scan_dataset, stream_batches
from octnet.evaluation import confusion_matrix, report
from octnet.models import build, predict
from octnet.training import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="vanilla_cnn", choices=ARCHITECTURES)
    ap.add_argument("--width", type=float, default=0.25)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--per-class", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--workdir", default="runs/fixture")
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / f"data_{args.per_class}"
    if not data.exists():
        generate_synthetic_fixture(data, args.per_class, seed=args.seed)
    manifest = scan_dataset(data)
    aug = NO_AUGMENT if args.no_augment else AugmentConfig()
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      curve_path=str(work / f"{args.arch}_curves.csv"))
    net = build(args.arch, width=args.width, seed=args.seed)
    t0 = time.perf_counter()
    fit(net, lambda e: stream_batches(manifest, "train", cfg.batch_size, cfg.seed, aug, e),
        lambda e: stream_batches(manifest, "val", cfg.batch_size, None, None, e), cfg,
        on_epoch=lambda p: print(f"epoch {p.epoch:>2}  train_acc={p.train_acc:.4f}  train_loss={p.train_loss:.4f}  "
                                 f"val_acc={p.val_acc:.4f}", flush=True))
    print(f"trained in {time.perf_counter() - t0:.1f} s; curves in {cfg.curve_path}")

    truths, preds = [], []
    for b in stream_batches(manifest, "test", 32, None, None):
        truths += b.labels.argmax(1).tolist()
        preds += predict(net, b.images)[1].tolist()
    print(report(confusion_matrix(truths, preds), title=f"{args.arch} on the fixture test split").text)


if __name__ == "__main__":
    main()
