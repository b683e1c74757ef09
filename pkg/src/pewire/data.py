"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic quadrants.

All loaders return uint8 pixels internally and apply the same
``(x / 255 - mean) / std`` per-channel normalisation, so a synthetic set
written to IDX files and read back is bit-identical to the generated one.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pewire.errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_UBYTE = 0x08
CIFAR_RECORD = 1 + 3072

KINDS = ("mnist-idx", "cifar10-binary", "synthetic-quadrant")
NOISE_LEVELS = 16  # synthetic background pixels are uniform on 0..15

# conventional per-channel statistics of the public datasets, on the [0, 1] scale
DATASET_STATS = {
    "mnist-idx": ((0.1307,), (0.3081,)),
    "cifar10-binary": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


def synthetic_stats(image_size: int = 32, patch_size: int = 4) -> tuple[float, float]:
    """Exact pixel mean and std (``[0, 1]`` scale) of the synthetic-quadrant generator."""
    frac = patch_size**2 / image_size**2
    levels = np.arange(NOISE_LEVELS, dtype=np.float64)
    mean = (1 - frac) * levels.mean() + frac * 255.0
    second = (1 - frac) * (levels**2).mean() + frac * 255.0**2
    return mean / 255.0, float(np.sqrt(second - mean**2)) / 255.0


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-quadrant"
    path: str | None = None
    seed: int = 0
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    train_size: int | None = 2048
    eval_size: int | None = 1024
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.mean is None or self.std is None:
            if self.kind == "synthetic-quadrant":
                m, sd = synthetic_stats(self.image_size, self.patch_size)
                default = ((m,), (sd,))
            else:
                default = DATASET_STATS[self.kind]
            if self.mean is None:
                object.__setattr__(self, "mean", default[0])
            if self.std is None:
                object.__setattr__(self, "std", default[1])
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if any(s <= 0 for s in self.std):
            raise ConfigError("normalisation std must be positive")
        if len(self.mean) not in (1, self.channels) or len(self.std) not in (1, self.channels):
            raise ConfigError("normalisation constants need one value or one per channel")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32, normalised
    labels: np.ndarray  # [n] int64
    name: str = ""
    raw: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index):
        return self.images[index], int(self.labels[index])

    def take(self, n: int) -> "Dataset":
        raw = None if self.raw is None else self.raw[:n]
        return Dataset(self.images[:n], self.labels[:n], self.name, raw)


def normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    c = raw.shape[1]
    m = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    if m.shape[0] == 1:
        m = np.repeat(m, c, axis=0)
    if s.shape[0] == 1:
        s = np.repeat(s, c, axis=0)
    x = raw.astype(np.float32) / np.float32(255.0)
    return ((x - m) / s).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic quadrants


def quadrant_of(row: int, col: int, size: int) -> int:
    """Quadrant index of pixel (row, col): 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    half = size // 2
    return 2 * int(row >= half) + int(col >= half)


def synthetic_quadrant(n: int, seed, image_size: int = 32, channels: int = 3, patch_size: int = 4):
    """Dim noise images with one bright, patch-aligned block; label = block quadrant.

    Labels are balanced (each class appears ``n // 4`` or ``n // 4 + 1``
    times) in a seeded random order. ``seed`` is anything
    ``np.random.default_rng`` accepts. Returns ``(raw uint8 images, labels)``.
    """
    if image_size % (2 * patch_size):
        raise ConfigError("synthetic-quadrant needs image_size divisible by 2 * patch_size")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 4).astype(np.int64)
    raw = rng.integers(0, NOISE_LEVELS, size=(n, channels, image_size, image_size), dtype=np.uint8)
    cells = image_size // (2 * patch_size)  # patch cells per quadrant side
    offsets = rng.integers(0, cells, size=(n, 2))
    for i in range(n):
        q = labels[i]
        r0 = ((q // 2) * cells + offsets[i, 0]) * patch_size
        c0 = ((q % 2) * cells + offsets[i, 1]) * patch_size
        raw[i, :, r0:r0 + patch_size, c0:c0 + patch_size] = 255
    return raw, labels


# ---------------------------------------------------------------------------
# IDX (MNIST) files


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | os.PathLike, expect_magic: int | None = None) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(blob))
    zero, dtype_code, ndim = struct.unpack(">HBB", blob[:4])
    magic = struct.unpack(">I", blob[:4])[0]
    if zero != 0 or dtype_code != IDX_UBYTE or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    if expect_magic is not None and magic != expect_magic:
        # image files may be 3-D (one channel) or 4-D (channel axis)
        if not (expect_magic == IDX_IMAGES_MAGIC and ndim == 4):
            raise FormatError(f"{path}: expected magic 0x{expect_magic:08x}, found 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header != count:
        raise FormatError(f"{path}: payload holds {len(blob) - header} bytes, dims {dims} need {count}",
                          offset=min(len(blob), header + count))
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, IDX_UBYTE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _find(root: Path, prefixes: tuple[str, ...]) -> Path:
    for prefix in prefixes:
        hits = sorted(root.glob(prefix + "*"))
        if hits:
            return hits[0]
    raise ConfigError(f"no file matching {prefixes} in {root}")


def _load_idx_split(root: Path, images_prefix: tuple[str, ...], labels_prefix: tuple[str, ...]):
    images = read_idx(_find(root, images_prefix), IDX_IMAGES_MAGIC)
    labels = read_idx(_find(root, labels_prefix), IDX_LABELS_MAGIC).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) != len(labels):
        raise FormatError(f"{root}: {len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) % CIFAR_RECORD:
        whole = len(blob) - len(blob) % CIFAR_RECORD
        raise FormatError(f"{path}: trailing partial record of {len(blob) - whole} bytes", offset=whole)
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def _data_root(spec: DatasetSpec) -> Path:
    env = os.environ.get("PEWIRE_DATA_DIR")
    if spec.path:
        p = Path(spec.path)
        if not p.is_absolute() and not p.exists() and env:
            p = Path(env) / p
        return p
    if env:
        return Path(env)
    raise ConfigError(f"{spec.kind} needs a data path or PEWIRE_DATA_DIR")


def _load_cifar(root: Path):
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_files = sorted(root.glob("test_batch.bin"))
    if not train_files or not test_files:
        raise ConfigError(f"CIFAR-10 binary batches not found under {root}")
    parts = [read_cifar_batch(f) for f in train_files]
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return train, read_cifar_batch(test_files[0])


def load_raw(spec: DatasetSpec):
    """``((train_raw, train_labels), (eval_raw, eval_labels))`` as uint8 / int64."""
    if spec.kind == "synthetic-quadrant":
        n_train = spec.train_size or 0
        n_eval = spec.eval_size or 0
        # each split has its own stream so both stay class-balanced
        geometry = (spec.image_size, spec.channels, spec.patch_size)
        return (
            synthetic_quadrant(n_train, [spec.seed, 0], *geometry),
            synthetic_quadrant(n_eval, [spec.seed, 1], *geometry),
        )
    root = _data_root(spec)
    if spec.kind == "mnist-idx":
        train = _load_idx_split(root, ("train-images",), ("train-labels",))
        test = _load_idx_split(root, ("t10k-images", "eval-images", "test-images"),
                               ("t10k-labels", "eval-labels", "test-labels"))
    else:
        train, test = _load_cifar(root)
    if spec.train_size is not None:
        train = (train[0][:spec.train_size], train[1][:spec.train_size])
    if spec.eval_size is not None:
        test = (test[0][:spec.eval_size], test[1][:spec.eval_size])
    return train, test


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministically ordered, normalised ``(train, eval)`` splits."""
    splits = []
    for name, (raw, labels) in zip(("train", "eval"), load_raw(spec)):
        if raw.shape[1:] != (spec.channels, spec.image_size, spec.image_size):
            raise ConfigError(
                f"{spec.kind} {name} images are {raw.shape[1:]}, config expects "
                f"{(spec.channels, spec.image_size, spec.image_size)}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
            raise ConfigError(f"{spec.kind} {name} labels fall outside [0, {spec.num_classes})")
        splits.append(Dataset(normalize(raw, spec.mean, spec.std), labels, name, raw))
    return splits[0], splits[1]


def write_synthetic(spec: DatasetSpec, out_dir: str | os.PathLike) -> list[Path]:
    """Write a synthetic-quadrant set as IDX files readable by the mnist-idx loader."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (train_raw, train_labels), (eval_raw, eval_labels) = load_raw(
        DatasetSpec(**{**spec.to_dict(), "kind": "synthetic-quadrant", "path": None})
    )
    rank = 3 if spec.channels == 1 else 4
    written = []
    for prefix, raw, labels in (("train", train_raw, train_labels), ("t10k", eval_raw, eval_labels)):
        images = raw[:, 0] if rank == 3 else raw
        ip = out / f"{prefix}-images-idx{rank}-ubyte"
        lp = out / f"{prefix}-labels-idx1-ubyte"
        write_idx(ip, images)
        write_idx(lp, labels.astype(np.uint8))
        written += [ip, lp]
    return written
