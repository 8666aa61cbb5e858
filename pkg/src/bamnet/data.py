"""CIFAR binary ingestion, normalization, augmentation, and batching.

File layout is the stock binary distribution: a CIFAR-10 record is one label
byte plus 3072 pixel bytes (R plane, G plane, B plane, each 32x32 row-major);
CIFAR-100 prepends a coarse label byte.  Byte lengths are checked exactly and
decoding is lossless, so re-encoding reproduces the input bit for bit.

Normalization statistics are computed from the training split on [0,1]
floats, cached as six decimal numbers beside the data, and reused verbatim.
Augmentation (4-pixel zero pad, random 32x32 crop, coin-flip mirror) runs on
already-normalized images, so the padding value 0 is zero in normalized
space.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import DataFormatError
from .tensor import Tensor

_IMG_BYTES = 3 * 32 * 32

_META = {
    "cifar10": dict(num_classes=10, label_bytes=1, subdir="cifar-10-batches-bin",
                    files={"train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
                           "test": ("test_batch.bin",)},
                    records_per_file=10000),
    "cifar100": dict(num_classes=100, label_bytes=2, subdir="cifar-100-binary",
                     files={"train": ("train.bin",), "test": ("test.bin",)},
                     records_per_file={"train": 50000, "test": 10000}),
}

NORM_CACHE_NAME = "norm_stats.txt"


@dataclass
class DatasetMeta:
    name: str
    num_classes: int
    label_bytes: int
    record_bytes: int


def meta(dataset: str) -> DatasetMeta:
    if dataset not in _META:
        raise ValueError(f"unknown dataset {dataset!r}; have {sorted(_META)}")
    m = _META[dataset]
    return DatasetMeta(dataset, m["num_classes"], m["label_bytes"],
                       m["label_bytes"] + _IMG_BYTES)


@dataclass
class Records:
    """A decoded split held in memory."""
    dataset: str
    labels: np.ndarray  # [N] uint8, fine labels
    coarse: Optional[np.ndarray]  # [N] uint8 for cifar100, else None
    images: np.ndarray  # [N,3,32,32] uint8

    def __len__(self):
        return len(self.labels)


@dataclass
class ImageBatch:
    images: Tensor  # float32 [N,3,32,32], normalized
    labels: np.ndarray  # int64 [N]


# ---------------------------------------------------------------------------
# record codec

def decode_record(buf: bytes, dataset: str) -> Tuple[Tuple[int, ...], np.ndarray]:
    """One record -> (label bytes in file order, uint8 image [3,32,32])."""
    m = meta(dataset)
    if len(buf) != m.record_bytes:
        raise DataFormatError(f"{dataset} record must be {m.record_bytes} bytes, "
                              f"got {len(buf)}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    labels = tuple(int(b) for b in raw[:m.label_bytes])
    _check_labels(dataset, np.array([labels[-1]]),
                  None if m.label_bytes == 1 else np.array([labels[0]]))
    return labels, raw[m.label_bytes:].reshape(3, 32, 32).copy()


def encode_record(labels: Tuple[int, ...], image: np.ndarray, dataset: str) -> bytes:
    m = meta(dataset)
    if len(labels) != m.label_bytes:
        raise DataFormatError(f"{dataset} record carries {m.label_bytes} label bytes, "
                              f"got {len(labels)}")
    if image.shape != (3, 32, 32) or image.dtype != np.uint8:
        raise DataFormatError(f"image must be uint8 [3,32,32], got {image.dtype} "
                              f"{image.shape}")
    return bytes(bytearray(labels)) + image.tobytes()


def _check_labels(dataset, fine, coarse):
    limit = meta(dataset).num_classes
    bad = np.nonzero(fine >= limit)[0]
    if bad.size:
        raise DataFormatError(f"corrupt record {int(bad[0])}: {dataset} label "
                              f"{int(fine[bad[0]])} outside [0, {limit})")
    if coarse is not None:
        bad = np.nonzero(coarse >= 20)[0]
        if bad.size:
            raise DataFormatError(f"corrupt record {int(bad[0])}: coarse label "
                                  f"{int(coarse[bad[0]])} outside [0, 20)")


# ---------------------------------------------------------------------------
# split loading

def resolve_dir(data_dir, dataset: str) -> str:
    """Accept either the directory holding the .bin files or its parent."""
    m = _META[dataset]
    probe = m["files"]["test"][0]
    if os.path.isfile(os.path.join(data_dir, probe)):
        return str(data_dir)
    nested = os.path.join(data_dir, m["subdir"])
    if os.path.isfile(os.path.join(nested, probe)):
        return nested
    first_train = m["files"]["train"][0]
    if os.path.isfile(os.path.join(data_dir, first_train)):
        return str(data_dir)
    if os.path.isfile(os.path.join(nested, first_train)):
        return nested
    raise DataFormatError(f"no {dataset} files under {data_dir} "
                          f"(expected e.g. {probe} or {m['subdir']}/{probe})")


def _expected_records(dataset, split):
    per = _META[dataset]["records_per_file"]
    return per[split] if isinstance(per, dict) else per


def load_split(data_dir, dataset: str, split: str) -> Records:
    """Load and validate a split; any present prefix of the canonical file
    list is accepted so reduced-size datasets in the same format work too."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    m = meta(dataset)
    d = resolve_dir(data_dir, dataset)
    names = [n for n in _META[dataset]["files"][split]
             if os.path.isfile(os.path.join(d, n))]
    if not names:
        raise DataFormatError(f"no {dataset} {split} files in {d}")
    want = _expected_records(dataset, split) * m.record_bytes
    parts = []
    for name in names:
        path = os.path.join(d, name)
        size = os.path.getsize(path)
        if size != want:
            raise DataFormatError(f"{path}: expected {want} bytes, got {size}")
        with open(path, "rb") as f:
            parts.append(np.frombuffer(f.read(), dtype=np.uint8))
    raw = np.concatenate(parts).reshape(-1, m.record_bytes)
    if m.label_bytes == 1:
        coarse = None
        fine = raw[:, 0].copy()
    else:
        coarse = raw[:, 0].copy()
        fine = raw[:, 1].copy()
    _check_labels(dataset, fine, coarse)
    images = raw[:, m.label_bytes:].reshape(-1, 3, 32, 32).copy()
    return Records(dataset, fine, coarse, images)


def take(recs: Records, n: int) -> Records:
    """First n records of a split."""
    return Records(recs.dataset, recs.labels[:n],
                   None if recs.coarse is None else recs.coarse[:n],
                   recs.images[:n])


def write_split(recs: Records, data_dir, split: str):
    """Write records in the canonical binary layout of their dataset.

    Counts must fill files exactly (CIFAR-10: multiples of 10,000) because
    loaders check byte lengths strictly.
    """
    m = _META[recs.dataset]
    per = _expected_records(recs.dataset, split)
    names = m["files"][split]
    n = len(recs)
    if n % per != 0 or n // per > len(names) or n == 0:
        raise ValueError(f"{recs.dataset} {split} needs a multiple of {per} records "
                         f"(at most {per * len(names)}), got {n}")
    os.makedirs(data_dir, exist_ok=True)
    lb = meta(recs.dataset).label_bytes
    rec = np.empty((n, lb + _IMG_BYTES), np.uint8)
    if lb == 2:
        rec[:, 0] = recs.coarse
        rec[:, 1] = recs.labels
    else:
        rec[:, 0] = recs.labels
    rec[:, lb:] = recs.images.reshape(n, _IMG_BYTES)
    for i in range(n // per):
        with open(os.path.join(data_dir, names[i]), "wb") as f:
            f.write(rec[i * per:(i + 1) * per].tobytes())


# ---------------------------------------------------------------------------
# normalization

def compute_norm_stats(recs: Records) -> Tuple[np.ndarray, np.ndarray]:
    x = recs.images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def norm_stats(data_dir, dataset: str) -> Tuple[np.ndarray, np.ndarray]:
    """Training-split per-channel mean/std, cached beside the data files."""
    d = resolve_dir(data_dir, dataset)
    cache = os.path.join(d, NORM_CACHE_NAME)
    if os.path.isfile(cache):
        with open(cache) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if len(lines) != 6:
            raise DataFormatError(f"{cache}: expected 6 numbers, got {len(lines)} lines")
        try:
            vals = [float(ln) for ln in lines]
        except ValueError as e:
            raise DataFormatError(f"{cache}: {e}") from None
        return np.array(vals[:3]), np.array(vals[3:])
    mean, std = compute_norm_stats(load_split(d, dataset, "train"))
    with open(cache, "w") as f:
        for v in list(mean) + list(std):
            f.write(f"{float(v)!r}\n")
    return mean, std


def normalize_images(images: np.ndarray, mean, std) -> np.ndarray:
    """uint8 [N,3,32,32] -> float32, (x/255 - mean)/std per channel."""
    x = images.astype(np.float64) / 255.0
    x -= np.asarray(mean)[None, :, None, None]
    x /= np.asarray(std)[None, :, None, None]
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation and batching

def augment_image(img: np.ndarray, rng) -> np.ndarray:
    """Random 32x32 crop out of a 4-pixel zero-padded copy, then maybe mirror.

    The first two draws place the original content inside the crop: (4, 4)
    reproduces the input exactly, while (0, 0) shifts content up-left so the
    last four rows and columns are padding zeros.  The third draw flips
    left-right when odd.
    """
    padded = np.zeros((3, 40, 40), img.dtype)
    padded[:, 4:36, 4:36] = img
    dy = int(rng.integers(0, 9))
    dx = int(rng.integers(0, 9))
    out = padded[:, 8 - dy:40 - dy, 8 - dx:40 - dx]
    if rng.integers(0, 2):
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def batches(recs: Records, batch_size: int, shuffle_seed=None, *,
            mean, std, augment: bool = False) -> Iterator[ImageBatch]:
    """Normalized batches in a seed-deterministic order; the last short batch
    is kept.  shuffle_seed None keeps file order (and forbids augmentation,
    which needs the derived stream)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if augment and shuffle_seed is None:
        raise ValueError("augmentation needs a shuffle_seed to derive draws from")
    n = len(recs)
    idx = np.arange(n)
    rng = None
    if shuffle_seed is not None:
        rng = T.make_rng(shuffle_seed)
        rng.shuffle(idx)
    for start in range(0, n, batch_size):
        sel = idx[start:start + batch_size]
        imgs = normalize_images(recs.images[sel], mean, std)
        if augment:
            for i in range(len(sel)):
                imgs[i] = augment_image(imgs[i], rng)
        yield ImageBatch(Tensor.wrap(imgs), recs.labels[sel].astype(np.int64))


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_records(n: int, seed) -> Records:
    """Two-class blobs in CIFAR-10 layout: class 0 draws a reddish disc,
    class 1 a bluish one, over dark noise, at a random position and size."""
    rng = T.make_rng(seed)
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    ys = rng.integers(8, 25, size=n)
    xs = rng.integers(8, 25, size=n)
    rad = rng.integers(4, 9, size=n)
    base = rng.integers(0, 40, size=(n, 3, 32, 32))
    jitter = rng.integers(-30, 31, size=(n, 3))
    yy, xx = np.mgrid[0:32, 0:32]
    mask = ((yy[None] - ys[:, None, None]) ** 2 + (xx[None] - xs[:, None, None]) ** 2
            <= (rad ** 2)[:, None, None])
    color = np.where(labels[:, None] == 0, np.array([200, 60, 40]), np.array([40, 60, 200]))
    color = np.clip(color + jitter, 0, 255)
    images = np.where(mask[:, None], color[:, :, None, None], base).astype(np.uint8)
    return Records("cifar10", labels, None, images)
