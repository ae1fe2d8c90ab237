"""Dataset ingestion, rotation subsets and batch iteration.

Images are (N, 1, 28, 28) float32 in [0, 1] with integer class labels.
The on-disk format is the big-endian IDX layout used by the MNIST family
(magic 0x803 for images, 0x801 for labels).  A deterministic synthetic
digit-glyph dataset is provided for environments without the real files;
it renders ten fixed glyphs with random shift, rotation jitter and noise,
and is a drop-in stand-in for desk-scale training checks.

All sampling here is seed-driven, so a full run is reproducible from the
(config, data files) pair alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .prng import SeededGenerator

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if len(self.images) == 0:
            raise ValueError("empty dataset")

    def __len__(self) -> int:
        return len(self.images)


def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Parse an IDX image/label file pair; pixels scaled to [0, 1]."""
    img_bytes = Path(images_path).read_bytes()
    if len(img_bytes) < 16:
        raise ValueError(f"{images_path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", img_bytes[:16])
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    if len(img_bytes) != 16 + n * rows * cols:
        raise ValueError(f"{images_path}: truncated image data")
    images = np.frombuffer(img_bytes, dtype=np.uint8, offset=16)
    images = images.reshape(n, 1, rows, cols).astype(np.float32) / 255.0

    lbl_bytes = Path(labels_path).read_bytes()
    if len(lbl_bytes) < 8:
        raise ValueError(f"{labels_path}: truncated IDX header")
    magic, n_lbl = struct.unpack(">II", lbl_bytes[:8])
    if magic != LABEL_MAGIC:
        raise ValueError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if n_lbl != n:
        raise ValueError(f"label count {n_lbl} does not match image count {n}")
    if len(lbl_bytes) != 8 + n_lbl:
        raise ValueError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, split=split)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write the IDX pair (inverse of load_idx, pixels rounded to uint8)."""
    n, _, rows, cols = ds.images.shape
    pixels = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def subset(ds: Dataset, n: int, seed: int, split: str | None = None) -> Dataset:
    """Seeded uniform sample of n items without replacement."""
    if n > len(ds):
        raise ValueError(f"cannot take {n} samples from a dataset of {len(ds)}")
    gen = SeededGenerator(seed)
    words = gen.next_words(len(ds))
    idx = np.argsort(words, kind="stable")[:n]
    return Dataset(ds.images[idx], ds.labels[idx],
                   split=split if split is not None else ds.split)


def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the center, bilinear with zero padding."""
    out = ndimage.rotate(images, angle_deg, axes=(3, 2), reshape=False,
                         order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_rotated_subset(ds: Dataset, n: int = 1024, angle_deg: float = 45.0,
                        seed: int = 0) -> Dataset:
    """Seeded n-sample subset with every image rotated by angle_deg."""
    sub = subset(ds, n, seed)
    return Dataset(rotate_images(sub.images, angle_deg), sub.labels.copy(),
                   split=f"{ds.split}-rot{angle_deg:g}")


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None,
            drop_last: bool = False):
    """Yield (images, labels) minibatches; seeded shuffle when requested."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        gen = SeededGenerator(shuffle_seed)
        order = np.argsort(gen.next_words(n), kind="stable")
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# Synthetic digit glyphs (stand-in when the real IDX files are unavailable)

# 7x7 binary glyph templates, one per class; deliberately confusable
# pairs (0/8, 3/9, 5/6) keep the task from being trivial.
_TEMPLATES = [
    ["0111110",
     "1000001",
     "1000001",
     "1000001",
     "1000001",
     "1000001",
     "0111110"],  # 0: ring
    ["0001000",
     "0011000",
     "0101000",
     "0001000",
     "0001000",
     "0001000",
     "0111110"],  # 1
    ["0111110",
     "1000001",
     "0000001",
     "0011110",
     "0100000",
     "1000000",
     "1111111"],  # 2
    ["0111110",
     "0000001",
     "0000001",
     "0011110",
     "0000001",
     "0000001",
     "0111110"],  # 3
    ["0000110",
     "0001010",
     "0010010",
     "0100010",
     "1111111",
     "0000010",
     "0000010"],  # 4
    ["1111111",
     "1000000",
     "1111110",
     "0000001",
     "0000001",
     "1000001",
     "0111110"],  # 5
    ["0011110",
     "0100000",
     "1000000",
     "1111110",
     "1000001",
     "1000001",
     "0111110"],  # 6
    ["1111111",
     "0000001",
     "0000010",
     "0000100",
     "0001000",
     "0010000",
     "0100000"],  # 7
    ["0111110",
     "1000001",
     "1000001",
     "0111110",
     "1000001",
     "1000001",
     "0111110"],  # 8
    ["0111110",
     "1000001",
     "1000001",
     "0111111",
     "0000001",
     "0000010",
     "0111100"],  # 9
]


def _glyph_images() -> np.ndarray:
    g = np.zeros((10, 7, 7), dtype=np.float32)
    for k, rows in enumerate(_TEMPLATES):
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                g[k, r, c] = 1.0 if ch == "1" else 0.0
    return g


def synthetic_digits(n: int, seed: int, split: str = "train",
                     noise: float = 0.25, max_shift: int = 3,
                     max_rot: float = 15.0) -> Dataset:
    """Deterministic digit-glyph dataset on the MNIST raster.

    Each sample upsamples a 7x7 class glyph to 21x21, rotates it by a
    uniform jitter in [-max_rot, max_rot] degrees, places it at a random
    offset within +-max_shift pixels of center, scales the intensity and
    adds clipped Gaussian noise.
    """
    gen = SeededGenerator(seed)
    glyphs = _glyph_images()
    up = np.kron(glyphs, np.ones((3, 3), dtype=np.float32))  # (10, 21, 21)

    words = gen.next_words(5 * n)
    labels = (words[:n] % np.uint64(10)).astype(np.int64)
    shifts_r = (words[n:2 * n] % np.uint64(2 * max_shift + 1)).astype(np.int64) - max_shift
    shifts_c = (words[2 * n:3 * n] % np.uint64(2 * max_shift + 1)).astype(np.int64) - max_shift
    angles = ((words[3 * n:4 * n] >> np.uint64(11)).astype(np.float64) * 2.0**-53
              * 2 - 1) * max_rot
    intensity = 0.7 + 0.3 * ((words[4 * n:5 * n] >> np.uint64(11)).astype(np.float64)
                             * 2.0**-53)

    from .prng import gaussian_vector

    noise_field = gaussian_vector(gen, n * 28 * 28).reshape(n, 28, 28) * noise

    images = np.zeros((n, 28, 28), dtype=np.float32)
    base = (28 - 21) // 2
    for i in range(n):
        img = up[labels[i]]
        if max_rot > 0:
            img = ndimage.rotate(img, float(angles[i]), reshape=False,
                                 order=1, mode="constant", cval=0.0)
        r0 = base + int(shifts_r[i])
        c0 = base + int(shifts_c[i])
        canvas = np.zeros((28, 28), dtype=np.float32)
        canvas[r0:r0 + 21, c0:c0 + 21] = img * intensity[i]
        images[i] = canvas
    images = np.clip(images + noise_field.astype(np.float32), 0.0, 1.0)
    return Dataset(images[:, None, :, :], labels, split=split)


def load_or_synthesize(data_dir, split: str, n_synthetic: int,
                       seed: int) -> tuple[Dataset, bool]:
    """Real IDX pair from data_dir if present, else the synthetic set.

    Looks for ``{split}-images-idx3-ubyte`` / ``{split}-labels-idx1-ubyte``
    (MNIST naming).  Returns (dataset, is_real).
    """
    if data_dir is not None:
        d = Path(data_dir)
        for img_name, lbl_name in (
            (f"{split}-images-idx3-ubyte", f"{split}-labels-idx1-ubyte"),
            (f"{split}-images.idx3-ubyte", f"{split}-labels.idx1-ubyte"),
        ):
            img, lbl = d / img_name, d / lbl_name
            if img.exists() and lbl.exists():
                return load_idx(img, lbl, split=split), True
    offset = 0 if split in ("train", "train-images") else 1
    return synthetic_digits(n_synthetic, seed + offset, split=split), False
