"""Datasets, erased/held-out splits, IDX loading and verification-target selection."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParams, predict_batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIN_TARGETS = 30


class DataFormatError(ValueError):
    pass


class InsufficientTargets(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError("X must be a matrix")
        if y.shape != (X.shape[0],):
            raise ValueError("need one label per row")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label out of range")
        lo, hi = self.value_range
        if X.size and (X.min() < lo or X.max() > hi):
            raise ValueError(f"features outside value range [{lo}, {hi}]")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, self.value_range)

    def clamp(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, *self.value_range)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{j}" for j in range(self.dim)] + ["label"])
            for row, label in zip(self.X, self.y):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, n_classes: int,
                 value_range: tuple[float, float] = (0.0, 1.0)) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][-1] != "label":
            raise DataFormatError(f"{path}: missing header")
        body = rows[1:]
        X = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(rows[0]) - 1)
        y = np.array([int(r[-1]) for r in body], dtype=np.int64)
        return cls(X, y, n_classes, value_range)


@dataclass(frozen=True)
class ErasedSplit:
    train: Dataset
    erased_idx: np.ndarray
    heldout: Dataset

    @property
    def erased(self) -> Dataset:
        return self.train.subset(self.erased_idx)

    @property
    def remaining(self) -> Dataset:
        keep = np.setdiff1d(np.arange(len(self.train)), self.erased_idx)
        return self.train.subset(keep)

    @property
    def esr(self) -> float:
        return len(self.erased_idx) / len(self.train)


@dataclass(frozen=True)
class TargetSet:
    X: np.ndarray
    y_true: np.ndarray
    y_wrong: np.ndarray
    heldout_idx: np.ndarray
    confidence: np.ndarray

    @property
    def m(self) -> int:
        return self.X.shape[0]

    def save(self, path: str | Path) -> None:
        np.savez(path, X=self.X, y_true=self.y_true, y_wrong=self.y_wrong,
                 heldout_idx=self.heldout_idx, confidence=self.confidence)

    @classmethod
    def load(cls, path: str | Path) -> "TargetSet":
        with np.load(path) as z:
            return cls(z["X"], z["y_true"], z["y_wrong"], z["heldout_idx"], z["confidence"])


def _blob_centers(n_classes: int, dim: int) -> np.ndarray:
    if n_classes <= 2 * dim:
        # cross-polytope around the cube center: +-0.35 along each axis
        centers = np.full((n_classes, dim), 0.5)
        for k in range(n_classes):
            centers[k, k % dim] += 0.35 if k < dim else -0.35
        return centers
    if n_classes <= 2 ** dim:
        bits = (np.arange(n_classes)[:, None] >> np.arange(dim)[None, :]) & 1
        return 0.2 + 0.6 * bits
    raise ValueError("too many classes for the blob layout")


def gen_blobs(n_per_class: int, n_classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters with fixed centers, clamped to [0, 1]."""
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise ValueError("need n_classes >= 2, dim >= 2, n_per_class >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(n_classes, dim)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[y] + spread * rng.standard_normal((y.size, dim))
    return Dataset(np.clip(X, 0.0, 1.0), y, n_classes)


def _read_idx(path: Path, magic: int) -> tuple[list[int], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataFormatError(f"{path}: file too short")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = list(struct.unpack(f">{ndim}I", data[4:header]))
    payload = data[header:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} < {expected} bytes)")
    return dims, payload[:expected]


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (e.g. MNIST) into a Dataset scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    lab_dims, lab_bytes = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise DataFormatError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    n = img_dims[0]
    X = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    y = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(X, y, n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path,
              labels_path: str | Path) -> None:
    """Write uint8 images [n x rows x cols] and labels [n] as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.shape[0]) + labels.tobytes())


def split(dataset: Dataset, esr: float, heldout_fraction: float, seed: int) -> ErasedSplit:
    """Carve the held-out set first, then mark round(esr * |train|) train rows as erased."""
    if not 0 < esr < 1:
        raise ValueError("esr must lie in (0, 1)")
    if not 0 < heldout_fraction < 1:
        raise ValueError("heldout_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_held = int(round(heldout_fraction * len(dataset)))
    held_idx, train_idx = np.sort(order[:n_held]), np.sort(order[n_held:])
    if len(held_idx) == 0 or len(train_idx) == 0:
        raise ValueError("split leaves an empty partition")
    n_erased = int(round(esr * len(train_idx)))
    if n_erased == 0:
        raise ValueError("esr too small: no erased samples")
    erased_idx = np.sort(rng.choice(len(train_idx), size=n_erased, replace=False))
    return ErasedSplit(dataset.subset(train_idx), erased_idx, dataset.subset(held_idx))


def select_targets(
    params: ModelParams,
    heldout: Dataset,
    m: int = 50,
    conf_threshold: float = 0.9,
    wrong_label_mode: str | int = "second_best",
) -> TargetSet:
    """Pick the m most confident, correctly classified held-out samples.

    ``wrong_label_mode`` is "second_best" (runner-up class under the model) or
    an integer class c; in the latter case samples whose true label is c are
    skipped.
    """
    if m < MIN_TARGETS:
        raise ValueError(f"need m >= {MIN_TARGETS} targets for the t-test approximation")
    pred, probs = predict_batch(params, heldout.X)
    conf = probs[np.arange(len(heldout)), heldout.y]
    ok = (pred == heldout.y) & (conf >= conf_threshold)
    if wrong_label_mode == "second_best":
        masked = probs.copy()
        masked[np.arange(len(heldout)), heldout.y] = -np.inf
        wrong = np.argmax(masked, axis=1)
    else:
        c = int(wrong_label_mode)
        if not 0 <= c < heldout.n_classes:
            raise ValueError(f"fixed wrong label {c} out of range")
        ok &= heldout.y != c
        wrong = np.full(len(heldout), c)
    candidates = np.flatnonzero(ok)
    if len(candidates) < m:
        raise InsufficientTargets(f"only {len(candidates)} held-out samples qualify, need {m}")
    # stable sort keeps index order among equal confidences
    chosen = candidates[np.argsort(-conf[candidates], kind="stable")[:m]]
    return TargetSet(heldout.X[chosen], heldout.y[chosen], wrong[chosen], chosen, conf[chosen])
