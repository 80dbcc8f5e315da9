"""Datasets, image I/O, splitting, the synthetic cue benchmark, and OA evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

try:
    from PIL import Image

    HAVE_PNG = True
except ImportError:  # pragma: no cover - Pillow is optional
    HAVE_PNG = False

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


class ImageFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    class_names: list[str]
    images: np.ndarray  # [N, 3, H, W] floats in [0, 1]
    labels: np.ndarray  # [N] int64
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.source_ids:
            self.source_ids = [str(i) for i in range(len(self.labels))]
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.source_ids):
            raise ValueError("images, labels and source_ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index: Sequence[int]) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            list(self.class_names), self.images[index], self.labels[index], [self.source_ids[i] for i in index]
        )


# ------------------------------------------------------------------ image io


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pnm(path) -> np.ndarray:
    """Decode P2/P3/P5/P6 into an [H, W, C] float array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a PGM/PPM file")
    (w, h, maxval), pos = _pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    body = buf[2 + pos:]
    if magic in (b"P5", b"P6"):
        body = body[1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < count * dtype.itemsize:
            raise ImageFormatError(f"{path}: pixel data truncated")
        arr = np.frombuffer(body, dtype=dtype, count=count).astype(np.float64)
    else:
        values = body.split()
        if len(values) < count:
            raise ImageFormatError(f"{path}: pixel data truncated")
        arr = np.array([int(v) for v in values[:count]], dtype=np.float64)
    return arr.reshape(h, w, channels) / maxval


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as binary P6."""
    hwc = np.clip(np.round(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = hwc.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(hwc.tobytes())


def read_image(path) -> np.ndarray:
    """Return a [3, H, W] float image in [0, 1]; grayscale is replicated."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            if not HAVE_PNG:
                raise ImageFormatError(f"{path}: PNG support needs Pillow")
            with Image.open(path) as im:
                hwc = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        else:
            hwc = read_pnm(path)
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    if hwc.shape[2] == 1:
        hwc = np.repeat(hwc, 3, axis=2)
    return np.ascontiguousarray(np.transpose(hwc, (2, 0, 1)))


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * img.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    a, b = np.take(img, i0, axis=axis), np.take(img, i1, axis=axis)
    return a + frac * (b - a)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a [C, H, W] image to size x size."""
    return _resize_axis(_resize_axis(image, size, 1), size, 2)


def load_image_dir(root, target_size: int) -> LabeledDataset:
    """One subdirectory per class; classes are sorted by name into label indices."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class subdirectories")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {cdir} has no images")
        for f in files:
            images.append(resize_bilinear(read_image(f), target_size))
            labels.append(label)
            ids.append(f"{cdir.name}/{f.name}")
    return LabeledDataset([d.name for d in class_dirs], np.stack(images), np.array(labels), ids)


def save_image_dir(ds: LabeledDataset, root) -> int:
    root = Path(root)
    for c in ds.class_names:
        (root / c).mkdir(parents=True, exist_ok=True)
    for img, label, sid in zip(ds.images, ds.labels, ds.source_ids):
        write_ppm(root / ds.class_names[label] / f"{Path(sid).stem}.ppm", img)
    return len(ds)


# ------------------------------------------------------------------ splitting


def stratified_split(ds: LabeledDataset, train_ratio: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Per class, shuffle with ``seed`` and send floor(ratio * n) items to train."""
    if not 0 < train_ratio < 1:
        raise ValueError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < 2:
            raise ValueError(f"class {ds.class_names[c]!r} has {len(members)} item(s); need at least 2 to split")
        members = rng.permutation(members)
        n_train = math.floor(train_ratio * len(members))
        train_idx.extend(members[:n_train].tolist())
        test_idx.extend(members[n_train:].tolist())
    return ds.subset(train_idx), ds.subset(test_idx)


# ------------------------------------------------------------- synthetic data


def _glyph_masks(s: int) -> dict[str, np.ndarray]:
    t = max(1, s // 6)  # stroke width
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2
    m = {}
    sq = np.zeros((s, s), bool)
    sq[:t], sq[-t:], sq[:, :t], sq[:, -t:] = True, True, True, True
    m["square"] = sq
    m["cross"] = (np.abs(yy - c) < t / 2 + 0.5) | (np.abs(xx - c) < t / 2 + 0.5)
    m["diagonal"] = np.abs(yy - xx) < t * 0.75 + 0.5
    r = np.hypot(yy - c, xx - c)
    m["ring"] = (r <= c) & (r >= c - t)
    tee = np.zeros((s, s), bool)
    tee[:t] = True
    tee[:, int(round(c - t / 2)):int(round(c - t / 2)) + t] = True
    m["T"] = tee
    ell = np.zeros((s, s), bool)
    ell[:, :t], ell[-t:] = True, True
    m["L"] = ell
    cell = max(1, s // 4)
    m["checker"] = ((yy // cell + xx // cell) % 2) == 0
    m["stripes"] = (xx // max(1, s // 6)) % 2 == 0
    return m


GLYPHS = tuple(_glyph_masks(8))


def synth_generate(
    n_classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    clutter: int = 3,
    noise: float = 0.08,
) -> LabeledDataset:
    """Noise background, class-agnostic clutter blobs, and one class glyph.

    The glyph has side image_size/4 and is placed uniformly at random inside
    the image; its shape alone identifies the class.
    """
    if image_size <= 0 or image_size % 32:
        raise ValueError(f"image_size must be a positive multiple of 32, got {image_size}")
    if not 2 <= n_classes <= len(GLYPHS):
        raise ValueError(f"n_classes must lie in [2, {len(GLYPHS)}] (number of glyphs), got {n_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    side = image_size // 4
    masks = _glyph_masks(side)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    names = list(GLYPHS[:n_classes])
    images, labels, ids = [], [], []
    for label, name in enumerate(names):
        for k in range(per_class):
            base = rng.uniform(0.25, 0.55, size=3)
            img = base[:, None, None] + noise * rng.standard_normal((3, image_size, image_size))
            for _ in range(clutter):
                cy, cx = rng.uniform(0, image_size, size=2)
                rad = rng.uniform(image_size / 24, image_size / 10)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad))
                img += rng.uniform(-0.35, 0.35, size=3)[:, None, None] * blob
            y0 = int(rng.integers(0, image_size - side + 1))
            x0 = int(rng.integers(0, image_size - side + 1))
            colour = rng.uniform(0.85, 1.0)
            patch = img[:, y0:y0 + side, x0:x0 + side]
            patch[:, masks[name]] = colour
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
            ids.append(f"{name}_{k:04d}@{y0},{x0}")
    return LabeledDataset(names, np.stack(images), np.array(labels), ids)


def glyph_box(source_id: str, image_size: int) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) of the glyph recorded in a synthetic source id or file name."""
    tail = source_id.rsplit("@", 1)[1].split(".", 1)[0]
    y0, x0 = (int(v) for v in tail.split(","))
    side = image_size // 4
    return y0, x0, y0 + side, x0 + side


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_rep_oa: list[float]
    mean_oa: float
    std_oa: float
    confusion: list[list[int]]

    @classmethod
    def from_runs(cls, oas: Sequence[float], confusion: np.ndarray) -> "EvalReport":
        oas = [float(v) for v in oas]
        std = float(np.std(oas, ddof=1)) if len(oas) > 1 else 0.0
        return cls(oas, float(np.mean(oas)), std, np.asarray(confusion, dtype=int).tolist())

    def to_json(self) -> str:
        return json.dumps(
            {"per_rep_oa": self.per_rep_oa, "mean_oa": self.mean_oa, "std_oa": self.std_oa, "confusion": self.confusion},
            indent=2,
        ) + "\n"


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def overall_accuracy(labels: np.ndarray, preds: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.asarray(labels) == np.asarray(preds)))


def evaluate_oa(net, test: LabeledDataset, batch_size: int = 32) -> tuple[float, np.ndarray]:
    """Eval-mode OA in percent and the [true, predicted] confusion matrix."""
    from .training import predict_proba

    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if test.num_classes != net.num_classes:
        raise ValueError(f"test set has {test.num_classes} classes, model has {net.num_classes}")
    preds = np.argmax(predict_proba(net, test.images, batch_size), axis=1)
    return overall_accuracy(test.labels, preds), confusion_matrix(test.labels, preds, test.num_classes)


def protocol(
    dataset: LabeledDataset,
    train_ratio: float,
    repetitions: int,
    run: Callable[[LabeledDataset, LabeledDataset, int], tuple[float, np.ndarray]],
    split_seed: int = 0,
) -> EvalReport:
    """Repeat split/train/evaluate; repetition r splits with ``split_seed + r``.

    ``run(train, test, r)`` re-initializes, trains, and returns (oa, confusion).
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    oas, confusion = [], None
    for r in range(repetitions):
        train_ds, test_ds = stratified_split(dataset, train_ratio, split_seed + r)
        oa, confusion = run(train_ds, test_ds, r)
        logger.info("repetition %d: OA %.2f", r, oa)
        oas.append(oa)
    return EvalReport.from_runs(oas, confusion)
