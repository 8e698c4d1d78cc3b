"""Datasets: MNIST/CIFAR-10 readers, 10x10 downsampling, splits and label mutilations.

Image features are scaled to [0, 1]. CIFAR-10 images are converted to
grayscale luminance (0.299 R + 0.587 G + 0.114 B) before anything else, so
both datasets end up with 100 features after downsampling.
"""

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .loss import predict
from .model import NetParams, forward, init
from .numerics import Rng, as_matrix
from .optim import OptState, StoppingRule, train

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 3073
DATA_DIR_ENV = "IMPLICITREG_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    X: np.ndarray
    labels: np.ndarray
    k: int
    name: str = "data"
    split_tag: str = "train"
    image_shape: tuple = None

    def __post_init__(self):
        X = as_matrix(self.X, name=f"{self.name}.X")
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError(f"{self.name}: {len(y)} labels for {X.shape[0]} examples")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise ValueError(f"{self.name}: labels must lie in [0, {self.k})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, split_tag=None) -> "LabeledDataset":
        return replace(self, X=self.X[idx], labels=self.labels[idx],
                       split_tag=split_tag or self.split_tag)

    def with_labels(self, labels) -> "LabeledDataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


def concat(parts, name=None, split_tag="train") -> LabeledDataset:
    first = parts[0]
    return LabeledDataset(np.vstack([p.X for p in parts]),
                          np.concatenate([p.labels for p in parts]),
                          first.k, name or first.name, split_tag, first.image_shape)


def resolve_data_dir(flag=None) -> Path:
    """Dataset directory: explicit flag, then $IMPLICITREG_DATA_DIR, then ./data."""
    if flag:
        return Path(flag)
    return Path(os.environ.get(DATA_DIR_ENV) or "data")


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find(directory, names):
    for name in names:
        for cand in (Path(directory) / name, Path(directory) / (name + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(
        f"none of {names} found in {directory}; download the dataset there "
        f"or point --data-dir / ${DATA_DIR_ENV} at it")


def read_idx(path, expected_magic):
    """Parse one big-endian IDX file into a uint8 array."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 8:
        raise DataFormatError(f"{path}: truncated header at offset {len(buf)}")
    magic, count = struct.unpack(">ii", buf[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic {magic} at offset 0 (expected {expected_magic})")
    if magic == IDX_IMAGE_MAGIC:
        if len(buf) < 16:
            raise DataFormatError(f"{path}: truncated header at offset {len(buf)}")
        rows, cols = struct.unpack(">ii", buf[8:16])
        shape, offset = (count, rows, cols), 16
    else:
        shape, offset = (count,), 8
    need = int(np.prod(shape))
    if len(buf) - offset < need:
        raise DataFormatError(
            f"{path}: truncated payload, expected {need} bytes from offset {offset}, "
            f"found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset).reshape(shape)


def write_idx(path, array):
    a = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        if a.ndim == 3:
            f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *a.shape))
        elif a.ndim == 1:
            f.write(struct.pack(">ii", IDX_LABEL_MAGIC, a.shape[0]))
        else:
            raise ValueError("IDX writer handles image stacks (3-D) and label vectors (1-D)")
        f.write(a.tobytes())


def load_mnist(directory, kind="train") -> LabeledDataset:
    prefix = "train" if kind == "train" else "t10k"
    img_path = _find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lab_path = _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = read_idx(img_path, IDX_IMAGE_MAGIC)
    labels = read_idx(lab_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{img_path} has {images.shape[0]} images but {lab_path} has {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{lab_path}: label {labels.max()} out of range")
    n, r, c = images.shape
    X = images.reshape(n, r * c).astype(np.float64) / 255.0
    return LabeledDataset(X, labels.astype(np.int64), 10, f"mnist-{kind}", kind, (r, c))


def read_cifar_batch(path):
    """Labels and grayscale images (n, 32, 32) in [0, 1] from one binary batch file."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: length {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}")
    rgb = rec[:, 1:].reshape(-1, 3, 1024).astype(np.float64) / 255.0
    gray = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
    return labels, gray.reshape(-1, 32, 32)


def write_cifar_batch(path, labels, rgb):
    """Write records from labels (n,) and uint8 pixels (n, 3, 32, 32)."""
    labels = np.asarray(labels, dtype=np.uint8)
    rgb = np.asarray(rgb, dtype=np.uint8).reshape(len(labels), 3072)
    with open(path, "wb") as f:
        f.write(np.hstack([labels[:, None], rgb]).tobytes())


def load_cifar10(directory, kind="train") -> LabeledDataset:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if kind == "train" else ["test_batch.bin"]
    labels, images = zip(*(read_cifar_batch(_find(d, [name])) for name in names))
    labels = np.concatenate(labels)
    images = np.concatenate(images)
    X = np.clip(images.reshape(len(labels), 1024), 0.0, 1.0)
    return LabeledDataset(X, labels, 10, f"cifar10-{kind}", kind, (32, 32))


def box_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of fractional overlaps between output and input cells.

    Output cell i covers ``[i*s, (i+1)*s)`` with ``s = n_in / n_out`` in input
    pixel units; each row sums to 1.
    """
    s = n_in / n_out
    edges_out = np.arange(n_out + 1) * s
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.maximum(hi - lo, 0.0) / s


def downsample(ds: LabeledDataset, side: int) -> LabeledDataset:
    """Area-average square images down to ``side x side`` pixels."""
    if ds.image_shape is None or ds.image_shape[0] != ds.image_shape[1]:
        raise ValueError(f"{ds.name}: downsampling needs square images, got {ds.image_shape}")
    r = ds.image_shape[0]
    A = box_weights(r, side)
    imgs = ds.X.reshape(ds.n, r, r)
    out = np.einsum("ij,njk,lk->nil", A, imgs, A)
    return replace(ds, X=out.reshape(ds.n, side * side), image_shape=(side, side))


def downsample_100(ds: LabeledDataset) -> LabeledDataset:
    return downsample(ds, 10)


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_validation: int
    n_test: int = None  # None: everything left over
    seed: int = 0


def split(ds: LabeledDataset, spec: SplitSpec):
    """Seeded disjoint (train, validation, test) partition."""
    rest = ds.n - spec.n_train - spec.n_validation
    n_test = rest if spec.n_test is None else spec.n_test
    if min(spec.n_train, spec.n_validation, n_test) < 0 or n_test > rest:
        raise ValueError(
            f"split ({spec.n_train}, {spec.n_validation}, {spec.n_test}) "
            f"does not fit {ds.n} examples")
    order = Rng(spec.seed).permutation(ds.n)
    a, b = spec.n_train, spec.n_train + spec.n_validation
    return (ds.subset(order[:a], "train"), ds.subset(order[a:b], "validation"),
            ds.subset(order[b:b + n_test], "test"))


def censor(full: LabeledDataset, H0: int, rng: Rng, sigma: float = 0.1,
           stop: StoppingRule = StoppingRule(), opt: OptState = None):
    """Relabel ``full`` with the predictions of an H0-unit network trained on it.

    Returns ``(relabeled, teacher)``; the teacher classifies the relabeled
    data with zero error by construction.
    """
    if H0 < 1:
        raise ValueError("H0 must be >= 1")
    p0 = init(full.d, H0, full.k, sigma, rng.child(1))
    if opt is None:
        opt = OptState.fresh(p0, batch_size=min(100, full.n))
    teacher = train(p0, full, stop=stop, rng=rng.child(2), opt=opt).params
    return full.with_labels(predict(teacher, full.X)), teacher


def add_label_noise(ds: LabeledDataset, fraction: float, rng: Rng) -> LabeledDataset:
    """Give exactly ``round(fraction * n)`` randomly chosen examples a different label."""
    if not 0 <= fraction <= 1:
        raise ValueError("noise fraction must lie in [0, 1]")
    m = int(np.floor(fraction * ds.n + 0.5))
    if m == 0:
        return ds
    if ds.k < 2:
        raise ValueError("cannot change labels with a single class")
    idx = rng.permutation(ds.n)[:m]
    labels = ds.labels.copy()
    labels[idx] = (labels[idx] + 1 + rng.integers(m, ds.k - 1)) % ds.k
    return ds.with_labels(labels)


def planted_synthetic(d: int, H0: int, k: int, n: int, rng: Rng, margin_scale: float = 0.0,
                      input_mean: float = 0.0, min_class_frac: float = 0.0,
                      unit_margin: float = None, input_std: float = 1.0,
                      max_attempts: int = 100):
    """Gaussian inputs N(input_mean, input_std**2) labeled by the argmax of a random H0-unit teacher.

    The teacher's hidden weights are standard Gaussian. Its output weight
    columns are nonnegative unit vectors (normalized absolute Gaussians), so
    every class wins on the cone of activation patterns around its own column
    and no class is starved, even with fewer hidden units than classes.

    With ``margin_scale > 0`` an input is rejected when its teacher score gap
    (top score minus runner-up, in units of the teacher's score standard
    deviation) is below ``margin_scale``, or when its distance to any teacher
    unit's hyperplane ``<u_h, x> = 0`` is below ``unit_margin`` (defaults to
    ``margin_scale``). A teacher is redrawn when some class gets fewer than
    ``min_class_frac * n / k`` examples (at least one), or when margin
    rejection keeps under 1% of the inputs.
    """
    if min(d, H0, k, n) < 1:
        raise ValueError("all sizes must be >= 1")
    need = max(1, int(np.ceil(min_class_frac * n / k)))
    for attempt in range(max_attempts):
        r = rng.child(attempt)
        teacher = planted_teacher(d, H0, k, r.child(0))
        X = _sample_inputs(teacher, n, d, margin_scale,
                           margin_scale if unit_margin is None else unit_margin,
                           input_mean, input_std, r.child(1))
        if X is None:
            continue
        labels = predict(teacher, X)
        if np.bincount(labels, minlength=k).min() >= need:
            return LabeledDataset(X, labels, k, "planted"), teacher
    raise RuntimeError(f"no usable teacher for {k} classes after {max_attempts} attempts")


def planted_teacher(d: int, H0: int, k: int, rng: Rng) -> NetParams:
    U = rng.gaussian_matrix(H0, d)
    V = np.abs(rng.gaussian_matrix(H0, k))
    return NetParams(U, V / np.linalg.norm(V, axis=0, keepdims=True))


def _sample_inputs(teacher: NetParams, n, d, margin_scale, unit_margin, input_mean, input_std,
                   rng: Rng):
    if margin_scale <= 0 and unit_margin <= 0:
        return input_std * rng.gaussian_matrix(n, d) + input_mean
    probe = forward(teacher, input_std * rng.child(0).gaussian_matrix(4096, d) + input_mean)
    scale = probe.std() or 1.0
    unit_dirs = teacher.U / np.linalg.norm(teacher.U, axis=1, keepdims=True)
    kept, have = [], 0
    for i in range(1, 101):
        X = input_std * rng.child(i).gaussian_matrix(n, d) + input_mean
        s = np.sort(forward(teacher, X), axis=1)
        dist = np.abs(X @ unit_dirs.T).min(axis=1)
        X = X[(s[:, -1] - s[:, -2] >= margin_scale * scale) & (dist >= unit_margin * input_std)]
        kept.append(X)
        have += X.shape[0]
        if have >= n:
            return np.vstack(kept)[:n]
    return None
