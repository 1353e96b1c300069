"""Dataset loaders.  Every image comes out as float64 (C, 32, 32) in [0, 1]."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, make_rng

SIDE = 32

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 2 + 3 * 32 * 32


class ParseError(ValueError):
    """Malformed input file.  ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray  # (N, C, 32, 32)
    labels: np.ndarray  # (N,) int64
    num_classes: int
    channels: int

    def __post_init__(self):
        n = len(self.images)
        if n == 0:
            raise EmptyDatasetError(f"dataset {self.name!r} has no images")
        if self.images.shape[1:] != (self.channels, SIDE, SIDE):
            raise ValueError(f"images have shape {self.images.shape[1:]}, expected ({self.channels}, {SIDE}, {SIDE})")
        if self.labels.shape != (n,):
            raise ValueError(f"{n} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])


def resize_bilinear(img: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centers, edges clamped).

    Interpolation is written as ``a + w * (b - a)`` so constant regions stay
    exactly constant.  Leading axes (channels, batch) are carried along.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError(f"cannot resize an image of extent {h}x{w}")
    if h == out_side and w == out_side:
        return img.copy()
    i0, i1, wy = _interp_axis(h, out_side)
    j0, j1, wx = _interp_axis(w, out_side)
    top = img[..., i0, :]
    rows = top + wy[:, None] * (img[..., i1, :] - top)
    left = rows[..., j0]
    return left + wx * (rows[..., j1] - left)


def _interp_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _idx_header(path, raw: bytes, magic: int, dims: int) -> tuple[int, ...]:
    need = 4 * (1 + dims)
    if len(raw) < need:
        raise ParseError(path, len(raw), f"truncated header, need {need} bytes")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise ParseError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{dims}I", raw, 4)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images (N, rows, cols) from an IDX3 file."""
    raw = _read(path)
    count, rows, cols = _idx_header(path, raw, IDX_IMAGE_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise ParseError(path, min(len(raw), expected),
                         f"file is {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    (count,) = _idx_header(path, raw, IDX_LABEL_MAGIC, 1)
    expected = 8 + count
    if len(raw) != expected:
        raise ParseError(path, min(len(raw), expected),
                         f"file is {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path, limit: int | None = None) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ParseError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(labels_path, 8 + bad, f"label {labels[bad]} is not a digit")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    pixels = resize_bilinear(images / 255.0, SIDE)[:, None]
    return Dataset("mnist", pixels, labels.copy(), num_classes=10, channels=1)


def load_cifar100(bin_path, limit: int | None = None) -> Dataset:
    raw = _read(bin_path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise ParseError(bin_path, offset, f"length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 1].astype(np.int64)
    if labels.max() > 99:
        bad = int(np.argmax(labels > 99))
        raise ParseError(bin_path, bad * CIFAR_RECORD + 1, f"fine label {labels[bad]} exceeds 99")
    images = records[:, 2:].reshape(-1, 3, SIDE, SIDE) / 255.0
    return Dataset("cifar100", images, labels, num_classes=100, channels=3)


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) with maxval 255, as uint8 (C, H, W)."""
    raw = _read(path)
    fields = []
    pos = 0
    # magic, width, height, maxval; '#' comments run to end of line
    while len(fields) < 4:
        while pos < len(raw) and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, pos, "truncated header")
        fields.append((start, raw[start:pos]))
    (_, magic), (w_at, w), (h_at, h), (m_at, maxval) = fields
    if magic not in (b"P5", b"P6"):
        raise ParseError(path, 0, f"unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, depth = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError(path, w_at, "non-numeric header field") from None
    if width < 1 or height < 1:
        raise ParseError(path, w_at, f"bad extent {width}x{height}")
    if depth != 255:
        raise ParseError(path, m_at, f"maxval {depth} unsupported, expected 255")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    if len(raw) - pos < size:
        raise ParseError(path, len(raw), f"raster truncated, need {size} bytes after offset {pos}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=size, offset=pos)
    return pixels.reshape(height, width, channels).transpose(2, 0, 1)


def write_pnm(pixels: np.ndarray, path) -> None:
    """Write uint8 (C, H, W) as P5 (C=1) or P6 (C=3)."""
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PNM")
    magic = b"P5" if c == 1 else b"P6"
    body = np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h) + body)


def load_image_dir(root_path, limit: int | None = None) -> Dataset:
    """Class-per-subdirectory tree of P6 files; classes ranked by name."""
    root = Path(root_path)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not classes:
        raise EmptyDatasetError(f"{root} has no class subdirectories")
    images, labels = [], []
    for idx, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if not f.is_file():
                continue
            px = read_pnm(f)
            if px.shape[0] != 3:
                raise ParseError(f, 0, "expected a P6 (colour) image")
            images.append(resize_bilinear(px / 255.0, SIDE))
            labels.append(idx)
            if limit is not None and len(images) >= limit:
                break
        if limit is not None and len(images) >= limit:
            break
    if not images:
        raise EmptyDatasetError(f"{root} contains no images")
    return Dataset(root.name or "images", np.stack(images), np.array(labels, dtype=np.int64),
                   num_classes=len(classes), channels=3)


def synthetic_dataset(rng: Rng, count: int, channels: int, num_classes: int) -> Dataset:
    if count < 1:
        raise ValueError("count must be at least 1")
    images = rng.uniform(0.0, 1.0, (count, channels, SIDE, SIDE))
    labels = rng.integers(0, num_classes, count)
    return Dataset("synthetic", images, labels, num_classes=num_classes, channels=channels)


DATA_DIR_ENV = "IDLG_DATA_DIR"


def _resolve(path: str) -> str:
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and base:
        return str(Path(base) / p)
    return path


DATASET_KINDS = {"mnist": 2, "cifar100": 1, "dir": 1, "synthetic": 3}


def parse_dataset_spec(spec: str) -> tuple[str, list[str]]:
    """Split ``kind:arg,arg`` and check the kind and argument count."""
    kind, sep, rest = spec.partition(":")
    args = rest.split(",")
    if not sep or kind not in DATASET_KINDS or len(args) != DATASET_KINDS[kind] or not all(args):
        raise ValueError(
            f"bad dataset spec {spec!r}; expected mnist:<images>,<labels> | cifar100:<bin> "
            "| dir:<root> | synthetic:<count>,<channels>,<classes>"
        )
    if kind == "synthetic":
        count, channels, classes = (int(a) for a in args)
        if count < 1 or channels not in (1, 3) or classes < 2:
            raise ValueError(f"bad synthetic dataset parameters in {spec!r}")
    return kind, args


def load_dataset(spec: str, seed: int = 0) -> Dataset:
    """Load from a spec string (see ``parse_dataset_spec``).

    Relative paths that do not exist are looked up under ``$IDLG_DATA_DIR``.
    Synthetic datasets are drawn from ``seed``.
    """
    kind, args = parse_dataset_spec(spec)
    if kind == "mnist":
        return load_mnist(_resolve(args[0]), _resolve(args[1]))
    if kind == "cifar100":
        return load_cifar100(_resolve(args[0]))
    if kind == "dir":
        return load_image_dir(_resolve(args[0]))
    count, channels, classes = (int(a) for a in args)
    return synthetic_dataset(make_rng(seed), count, channels, classes)
