"""Directory-streaming data pipeline: scan, decode, resize, augment, batch."""
from __future__ import annotations

import json
import logging
import math
import os
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .constants import CLASS_NAMES, INPUT_SHAPE, SPLITS
from .errors import DataError, ParameterError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpeg", ".jpg", ".png"}
SPLIT_ALIASES = {"train": ("train",), "val": ("val", "validation"), "test": ("test",)}


@dataclass
class DatasetManifest:
    root: str
    classes: list[str]
    splits: dict[str, dict[str, list[str]]]
    warnings: list[str] = field(default_factory=list)

    def counts(self, split: str) -> list[int]:
        return [len(self.splits[split][c]) for c in self.classes]

    def samples(self, split: str) -> list[tuple[str, int]]:
        """``(path, class_index)`` in class order, files in manifest order."""
        return [(p, k) for k, c in enumerate(self.classes) for p in self.splits[split][c]]

    def to_json(self) -> str:
        d = asdict(self)
        d["counts"] = {s: dict(zip(self.classes, self.counts(s))) for s in self.splits}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d.pop("counts", None)
        return cls(**d)


def _find_split_dir(root: Path, split: str) -> Path | None:
    for name in SPLIT_ALIASES[split]:
        if (root / name).is_dir():
            return root / name
    return None


def _resolve_classes(found: list[str], where: Path) -> list[str]:
    if set(found) == set(CLASS_NAMES):
        return list(CLASS_NAMES)
    upper = {f.upper(): f for f in found}
    if set(upper) == set(CLASS_NAMES):
        return [upper[c] for c in CLASS_NAMES]
    if len(found) == len(CLASS_NAMES):
        return sorted(found)
    raise DataError(f"{where}: expected class folders {', '.join(CLASS_NAMES)}, found {sorted(found)}")


def scan_dataset(root: str | os.PathLike) -> DatasetManifest:
    """Discover ``<root>/{train,val,test}/<class>/*`` and list files sorted by name."""
    root = Path(root)
    split_dirs = {}
    for split in SPLITS:
        d = _find_split_dir(root, split)
        if d is None:
            raise DataError(f"missing split directory {split!r} under {root}")
        split_dirs[split] = d
    classes = None
    splits = {}
    warnings = []
    for split, d in split_dirs.items():
        found = sorted(p.name for p in d.iterdir() if p.is_dir())
        these = _resolve_classes(found, d)
        if classes is None:
            classes = these
        elif these != classes:
            raise DataError(f"{d}: class folders {these} differ from {classes}")
        splits[split] = {}
        for c in classes:
            files = sorted(str(p) for p in (d / c).iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                warnings.append(f"{split}/{c}: no images")
            splits[split][c] = files
    for w in warnings:
        log.warning(w)
    return DatasetManifest(str(root), classes, splits, warnings)


def split_dataset(manifest: DatasetManifest, ratios: Sequence[float] = (98.816, 0.038, 1.146),
                  seed: int = 0) -> DatasetManifest:
    """Pool every file and reassign train/val/test by per-class seeded shuffles.

    Split totals are the largest-remainder rounding of ``total * ratio``; each
    class then receives its proportional share to within one file.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 100.0) > 1e-3:
        raise ParameterError(f"split ratios must be 3 non-negative numbers summing to 100, got {ratios}")
    frac = np.array(ratios) / sum(ratios)
    pools = {c: sorted(f for s in manifest.splits.values() for f in s.get(c, [])) for c in manifest.classes}
    sizes = np.array([len(pools[c]) for c in manifest.classes])

    def largest_remainder(total, weights):
        exact = total * weights
        base = np.floor(exact).astype(int)
        order = np.argsort(-(exact - base), kind="stable")
        base[order[: total - base.sum()]] += 1
        return base

    col_total = largest_remainder(int(sizes.sum()), frac)
    exact = np.outer(sizes, frac)
    alloc = np.floor(exact).astype(int)
    row_need = sizes - alloc.sum(axis=1)
    col_need = col_total - alloc.sum(axis=0)
    remainder = exact - alloc
    # greedy fill: classes with the most outstanding files first, each into the
    # splits still short the most, one extra file per (class, split) cell
    for k in np.argsort(-row_need, kind="stable"):
        for _ in range(row_need[k]):
            free = [s for s in range(3) if alloc[k, s] == np.floor(exact[k, s]) and col_need[s] > 0]
            if not free:
                free = [s for s in range(3) if col_need[s] > 0]
            s = max(free, key=lambda s: (col_need[s], remainder[k, s]))
            alloc[k, s] += 1
            col_need[s] -= 1
    rng = np.random.default_rng(seed)
    splits = {s: {} for s in SPLITS}
    for k, c in enumerate(manifest.classes):
        files = [pools[c][i] for i in rng.permutation(len(pools[c]))]
        a, b = alloc[k, 0], alloc[k, 0] + alloc[k, 1]
        for s, chunk in zip(SPLITS, (files[:a], files[a:b], files[b:])):
            splits[s][c] = sorted(chunk)
    return DatasetManifest(manifest.root, list(manifest.classes), splits, list(manifest.warnings))


# -- image decode / geometry -------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``(H, W, C)`` array; edges are clamped."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None, None].astype(img.dtype)
    fx = fx[None, :, None].astype(img.dtype)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def load_image(path: str | os.PathLike, size: tuple[int, int] = INPUT_SHAPE[:2]) -> np.ndarray:
    """Decode to RGB float32 in [0, 1] and resize to ``size``."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise DataError(f"{path}: zero-sized image")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    arr = arr / np.float32(255.0)
    return np.clip(bilinear_resize(arr, *size), 0.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 15.0      # degrees, +/-
    shift: float = 0.10         # fraction of width/height, +/-
    shear: float = 10.0         # degrees, +/-
    flip_prob: float = 0.5      # horizontal flip
    enabled: bool = True

    def __post_init__(self):
        if min(self.rotation, self.shift, self.shear) < 0:
            raise ParameterError("augmentation ranges must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip probability must be in [0, 1]")


NO_AUGMENT = AugmentConfig(enabled=False)


def affine_matrix(h: int, w: int, rotation: float = 0.0, shift: tuple[float, float] = (0.0, 0.0),
                  shear: float = 0.0, flip: bool = False) -> np.ndarray:
    """Forward 3x3 map from source ``(x, y)`` pixel coordinates to output coordinates.

    Rotation and shear (degrees) act about the image centre, then the result is
    shifted by ``shift = (dx, dy)`` pixels. A flip mirrors horizontally first.
    """
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx + shift[0]], [0, 1, cy + shift[1]], [0, 0, 1]], dtype=np.float64)
    t = math.radians(rotation)
    rot = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    sh = np.array([[1, math.tan(math.radians(shear)), 0], [0, 1, 0], [0, 0, 1]])
    mirror = np.diag([-1.0 if flip else 1.0, 1.0, 1.0])
    return back @ rot @ sh @ mirror @ to_origin


def warp_affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``img`` under the forward map ``matrix``; bilinear, zero outside."""
    h, w = img.shape[:2]
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    sx, sy, _ = inv @ pts
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    out = np.zeros((h * w, img.shape[2]), dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = wy * wx * ok[:, None]
            out += wgt * img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return np.clip(out, 0.0, 1.0).reshape(img.shape).astype(img.dtype)


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    rot = rng.uniform(-cfg.rotation, cfg.rotation)
    dx = rng.uniform(-cfg.shift, cfg.shift) * w
    dy = rng.uniform(-cfg.shift, cfg.shift) * h
    shear = rng.uniform(-cfg.shear, cfg.shear)
    flip = bool(rng.random() < cfg.flip_prob)
    return affine_matrix(h, w, rot, (dx, dy), shear, flip)


def augment(image: np.ndarray, cfg: AugmentConfig, seed: int, sample_index: int, epoch: int = 0) -> np.ndarray:
    """Random affine augmentation, fully determined by ``(seed, epoch, sample_index)``."""
    if not cfg.enabled:
        return image
    rng = np.random.default_rng([seed, epoch, sample_index])
    m = sample_transform(cfg, rng, image.shape[0], image.shape[1])
    return warp_affine(image, m)


# -- streaming -------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray      # (B, H, W, 3) float32 in [0, 1]
    labels: np.ndarray      # (B, K) one-hot float32
    indices: np.ndarray     # positions in manifest.samples(split)


def one_hot(labels: Sequence[int], k: int) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


def epoch_order(n: int, seed: int | None, epoch: int) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _make_batch(samples, idx, size, augment_cfg, seed, epoch, k):
    imgs = np.empty((len(idx), *size, 3), dtype=np.float32)
    for j, i in enumerate(idx):
        path, _ = samples[i]
        img = load_image(path, size)
        if augment_cfg is not None and augment_cfg.enabled:
            img = augment(img, augment_cfg, seed or 0, int(i), epoch)
        imgs[j] = img
    labels = one_hot([samples[i][1] for i in idx], k)
    return Batch(imgs, labels, np.asarray(idx))


def stream_batches(manifest: DatasetManifest, split: str, batch_size: int = 32,
                   shuffle_seed: int | None = 0, augment_cfg: AugmentConfig | None = None,
                   epoch: int = 0, prefetch: int = 2,
                   size: tuple[int, int] = INPUT_SHAPE[:2]) -> Iterator[Batch]:
    """One epoch of batches over ``split``; the last batch may be short.

    ``shuffle_seed=None`` keeps manifest order. With ``prefetch > 0`` batches are
    decoded on a background thread; the output does not depend on ``prefetch``.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if split not in manifest.splits:
        raise ParameterError(f"unknown split {split!r}")
    samples = manifest.samples(split)
    order = epoch_order(len(samples), shuffle_seed, epoch)
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    k = len(manifest.classes)

    def build(idx):
        return _make_batch(samples, idx, size, augment_cfg, shuffle_seed, epoch, k)

    if prefetch <= 0:
        for idx in chunks:
            yield build(idx)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()
    done = object()

    def producer():
        try:
            for idx in chunks:
                if stop.is_set():
                    return
                q.put(build(idx))
            q.put(done)
        except BaseException as e:  # handed to the consumer
            q.put(e)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)


# -- synthetic fixture ------------------------------------------------------------

def _synthetic_image(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Four procedurally distinct grayscale patterns, one per class index."""
    bg = rng.uniform(0.05, 0.15)
    canvas = Image.new("L", (size, size), int(bg * 255))
    draw = ImageDraw.Draw(canvas)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    if kind == 0:       # filled disc
        r = rng.uniform(0.22, 0.30) * size
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=int(rng.uniform(0.75, 0.95) * 255))
    elif kind == 1:     # hollow ring
        r = rng.uniform(0.28, 0.36) * size
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=int(rng.uniform(0.75, 0.95) * 255),
                     width=max(2, size // 20))
    elif kind == 2:     # horizontal bars
        period = max(4, int(size * rng.uniform(0.14, 0.18)))
        off = int(rng.integers(0, period))
        val = int(rng.uniform(0.75, 0.95) * 255)
        for y in range(-period + off, size, period):
            draw.rectangle([0, y, size - 1, y + period // 2 - 1], fill=val)
    arr = np.asarray(canvas, dtype=np.float64) / 255.0
    if kind == 3:       # uniform noise
        arr = rng.uniform(0.0, 1.0, (size, size))
    else:
        arr = arr + rng.normal(0.0, 0.03, arr.shape)
    return np.clip(arr, 0.0, 1.0)


def generate_synthetic_fixture(out: str | os.PathLike, images_per_class: int = 8, size: int = 150,
                               seed: int = 0, val_per_class: int | None = None,
                               test_per_class: int | None = None) -> Path:
    """Write a 4-class PNG dataset under ``out/{train,val,test}/<class>/``."""
    out = Path(out)
    counts = {
        "train": images_per_class,
        "val": max(1, images_per_class // 4) if val_per_class is None else val_per_class,
        "test": max(1, images_per_class // 4) if test_per_class is None else test_per_class,
    }
    try:
        for s_i, split in enumerate(SPLITS):
            for k, cls in enumerate(CLASS_NAMES):
                d = out / split / cls
                d.mkdir(parents=True, exist_ok=True)
                for i in range(counts[split]):
                    rng = np.random.default_rng([seed, s_i, k, i])
                    arr = _synthetic_image(k, size, rng)
                    Image.fromarray((arr * 255).round().astype(np.uint8), "L").save(d / f"{cls.lower()}_{i:05d}.png")
    except OSError as e:
        raise DataError(f"cannot write fixture under {out}: {e}") from e
    return out
