"""Desk-scale datasets, augmentation and mixed labeled/unlabeled batches."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, SamplingError

__all__ = [
    "Dataset",
    "SSLSplits",
    "MixedBatch",
    "AugmentParams",
    "gen_two_moons",
    "gen_gaussian_mixture",
    "read_idx",
    "write_idx",
    "load_idx_dataset",
    "augment",
    "make_splits",
    "sample_batch",
    "dump_csv",
]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None
    num_classes: int
    kind: str = "vector"

    def __post_init__(self):
        if self.kind not in ("vector", "image"):
            raise ParameterError(f"unknown dataset kind {self.kind!r}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.intp)
            if self.y.shape != (len(self.X),):
                raise ParameterError("one label per example required")
            if np.any(self.y < 0) or np.any(self.y >= self.num_classes):
                raise ParameterError("label outside the class range")

    def __len__(self):
        return len(self.X)


def gen_two_moons(n: int, noise: float = 0.1, seed=0) -> Dataset:
    """Two interleaved unit half-circles, ``n/2`` points each, shuffled."""
    if n <= 0 or n % 2:
        raise ParameterError("n must be a positive even number")
    if noise < 0:
        raise ParameterError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    X = np.vstack([upper, lower])
    y = np.repeat([0, 1], half)
    if noise > 0:
        X = X + rng.normal(0.0, noise, size=X.shape)
    order = rng.permutation(n)
    return Dataset(X[order], y[order], 2)


def gen_gaussian_mixture(n_per_class: int, num_classes: int, dim: int = 2,
                         spread: float = 3.0, std: float = 1.0, seed=0) -> Dataset:
    """Isotropic Gaussian blobs with means drawn from ``N(0, spread^2)``."""
    if n_per_class <= 0 or num_classes < 2 or dim <= 0:
        raise ParameterError("need n_per_class > 0, num_classes >= 2, dim > 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, spread, size=(num_classes, dim))
    y = np.repeat(np.arange(num_classes), n_per_class)
    X = means[y] + rng.normal(0.0, std, size=(y.size, dim))
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], num_classes)


# IDX element type codes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path, normalize: bool = True) -> np.ndarray:
    """Parse an IDX file (MNIST layout).

    Header: two zero bytes, a type code, the number of dimensions, then one
    big-endian uint32 per dimension. Unsigned-byte payloads are scaled to
    ``[0, 1]`` when ``normalize`` is true; other types are returned as-is.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"{path}: bad IDX magic number")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if normalize and raw[2] == 0x08:
        return data.astype(np.float64) / 255.0
    return data.astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    for code, dtype in _IDX_TYPES.items():
        if array.dtype.kind == dtype.kind and array.dtype.itemsize == dtype.itemsize:
            break
    else:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(dtype).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Image/label IDX pair as a single-channel image dataset ``(n, 1, H, W)``."""
    images = read_idx(images_path)
    labels = read_idx(labels_path, normalize=False)
    if images.ndim != 3:
        raise FormatError("image file must be (n, rows, cols)")
    if labels.shape != (images.shape[0],):
        raise FormatError("label count does not match image count")
    return Dataset(images[:, None, :, :], labels.astype(np.intp), num_classes, kind="image")


@dataclass(frozen=True)
class AugmentParams:
    noise: float = 0.05
    strong_noise_factor: float = 3.0
    mask_fraction: float = 0.2
    max_shift: int = 2
    cutout_fraction: float = 0.25
    brightness: float = 0.3
    pixel_jitter: float = 0.05


def _shift_flip(img, rng, max_shift):
    if rng.random() < 0.5:
        img = img[..., ::-1]
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def augment(x, strength: str, seed=None, kind: str = "vector",
            params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Weak or strong view of a batch ``x`` (leading axis indexes examples).

    Vectors: weak adds ``N(0, noise^2)``; strong adds noise scaled by
    ``strong_noise_factor`` and zeroes each coordinate with probability
    ``mask_fraction``. Images: weak is a random flip plus shift; strong adds
    a square cutout covering ``cutout_fraction`` of the area, a brightness
    scale and per-pixel jitter, clamped to ``[0, 1]``.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if strength not in ("weak", "strong"):
        raise ParameterError(f"strength must be 'weak' or 'strong', not {strength!r}")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if kind == "vector":
        sigma = params.noise * (params.strong_noise_factor if strength == "strong" else 1.0)
        out = x + rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else x.copy()
        if strength == "strong" and params.mask_fraction > 0:
            out[rng.random(x.shape) < params.mask_fraction] = 0.0
        return out
    if kind != "image":
        raise ParameterError(f"unknown kind {kind!r}")
    out = np.empty_like(x)
    h, w = x.shape[-2:]
    side_h = int(round(h * np.sqrt(params.cutout_fraction)))
    side_w = int(round(w * np.sqrt(params.cutout_fraction)))
    for i in range(x.shape[0]):
        img = _shift_flip(x[i], rng, params.max_shift)
        if strength == "strong":
            if side_h > 0 and side_w > 0:
                cy = rng.integers(0, h - side_h + 1)
                cx = rng.integers(0, w - side_w + 1)
                img[..., cy:cy + side_h, cx:cx + side_w] = 0.0
            img = img * rng.uniform(1.0 - params.brightness, 1.0 + params.brightness)
            img = img + rng.normal(0.0, params.pixel_jitter, size=img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


@dataclass
class SSLSplits:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    labeled_index: np.ndarray


def make_splits(train: Dataset, test: Dataset, n_labels: int, seed=0) -> SSLSplits:
    """Pick ``n_labels / K`` labeled examples per class; every training point is unlabeled data."""
    K = train.num_classes
    if n_labels <= 0 or n_labels % K:
        raise SamplingError(f"n_labels={n_labels} is not a positive multiple of K={K}")
    rng = np.random.default_rng(seed)
    per = n_labels // K
    picked = []
    for c in range(K):
        idx = np.flatnonzero(train.y == c)
        if idx.size < per:
            raise SamplingError(f"class {c} has only {idx.size} examples")
        picked.append(rng.choice(idx, size=per, replace=False))
    picked = np.sort(np.concatenate(picked))
    labeled = Dataset(train.X[picked], train.y[picked], K, train.kind)
    unlabeled = Dataset(train.X, None, K, train.kind)
    return SSLSplits(labeled, unlabeled, test, picked)


@dataclass
class MixedBatch:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_weak: np.ndarray
    x_strong: np.ndarray
    labeled_index: np.ndarray
    unlabeled_index: np.ndarray

    @property
    def num_unlabeled(self) -> int:
        return len(self.x_weak)


def sample_batch(splits: SSLSplits, B: int, mu: int, rng,
                 aug: AugmentParams = AugmentParams()) -> MixedBatch:
    """Class-balanced labeled part (``B/K`` per class, weak view) plus ``mu*B`` weak/strong unlabeled pairs."""
    lab = splits.labeled
    K = lab.num_classes
    if B <= 0 or B % K:
        raise SamplingError(f"B={B} must be a positive multiple of K={K}")
    if mu <= 0:
        raise SamplingError("mu must be positive")
    per = B // K
    li = []
    for c in range(K):
        idx = np.flatnonzero(lab.y == c)
        if idx.size < per:
            raise SamplingError(f"class {c} has {idx.size} labeled examples, need {per}")
        li.append(rng.choice(idx, size=per, replace=False))
    li = np.concatenate(li)
    n_u = mu * B
    if len(splits.unlabeled) < n_u:
        raise SamplingError(f"unlabeled pool has {len(splits.unlabeled)} examples, need {n_u}")
    ui = rng.choice(len(splits.unlabeled), size=n_u, replace=False)
    xu = splits.unlabeled.X[ui]
    kind = lab.kind
    return MixedBatch(
        x_labeled=augment(lab.X[li], "weak", rng, kind, aug),
        y_labeled=lab.y[li],
        x_weak=augment(xu, "weak", rng, kind, aug),
        x_strong=augment(xu, "strong", rng, kind, aug),
        labeled_index=splits.labeled_index[li],
        unlabeled_index=ui,
    )


def dump_csv(dataset: Dataset, path):
    """Write ``x0, x1, ..., y`` rows (features flattened)."""
    X = dataset.X.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + ["y"])
        for i, row in enumerate(X):
            label = "" if dataset.y is None else int(dataset.y[i])
            w.writerow([repr(float(v)) for v in row] + [label])
