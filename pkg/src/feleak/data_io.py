"""Dataset ingestion and image/report emission.

Reads the two classic binary formats (IDX image/label files, CIFAR-10
3073-byte records), converts to unit-scale float pixels, grayscales,
and writes P5 PGM images plus RFC 4180 CSV reports. Gzipped dataset
files are handled transparently.
"""

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma


class BadMagic(ValueError):
    """File does not start with a recognized IDX magic number."""


class TruncatedFile(ValueError):
    """Buffer ends before the header-promised payload does."""


class BadRecordLength(ValueError):
    """Buffer is not a whole number of CIFAR-10 records."""


@dataclass
class ImageSample:
    """Flat unit-scale pixel vector plus its spatial shape and optional label."""

    pixels: np.ndarray          # 1-D float array, values in [0, 1]
    shape: tuple                # (h, w) or (h, w, 3)
    label: int = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).ravel()
        if self.pixels.size != int(np.prod(self.shape)):
            raise ValueError("pixel count %d does not match shape %s"
                             % (self.pixels.size, (self.shape,)))

    def image(self):
        return self.pixels.reshape(self.shape)


@dataclass
class DatasetConfig:
    paths: dict = field(default_factory=dict)   # role name -> file path
    subset: int = None                          # cap on sample count
    grayscale: bool = False
    scale: float = 255.0                        # raw byte divisor
    shuffle_seed: int = None


def _parse_idx_header(data: bytes):
    if len(data) < 4:
        raise TruncatedFile("not even a magic number")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS):
        raise BadMagic("unknown IDX magic 0x%08x" % magic)
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise TruncatedFile("header cut short")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return magic, dims, 4 + 4 * ndim


def parse_idx(data: bytes, labels: bytes = None, scale: float = 255.0):
    """Parse an IDX image buffer into ImageSamples, optionally labeled.

    `labels`, when given, is a companion IDX label buffer with one entry per
    image. A plain label buffer can also be passed as `data`, in which case
    the raw label list is returned instead.
    """
    magic, dims, offset = _parse_idx_header(data)
    if magic == IDX_MAGIC_LABELS:
        (count,) = dims
        if len(data) < offset + count:
            raise TruncatedFile("label payload cut short")
        return list(data[offset:offset + count])
    count, h, w = dims
    need = count * h * w
    if len(data) < offset + need:
        raise TruncatedFile("expected %d pixel bytes, found %d"
                            % (need, len(data) - offset))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    images = raw.reshape(count, h * w).astype(np.float64) / scale
    label_list = [None] * count
    if labels is not None:
        label_list = parse_idx(labels)
        if len(label_list) != count:
            raise ValueError("%d labels for %d images" % (len(label_list), count))
    return [ImageSample(pixels=img, shape=(h, w), label=lab)
            for img, lab in zip(images, label_list)]


def parse_cifar(data: bytes, scale: float = 255.0):
    """Parse CIFAR-10 binary records into RGB ImageSamples (HWC layout)."""
    if len(data) % CIFAR_RECORD != 0:
        raise BadRecordLength("buffer length %d is not a multiple of %d"
                              % (len(data), CIFAR_RECORD))
    samples = []
    for start in range(0, len(data), CIFAR_RECORD):
        rec = data[start:start + CIFAR_RECORD]
        label = rec[0]
        planes = np.frombuffer(rec, dtype=np.uint8, count=3072, offset=1)
        chw = planes.reshape(3, 32, 32).astype(np.float64) / scale
        hwc = np.transpose(chw, (1, 2, 0))
        samples.append(ImageSample(pixels=hwc, shape=(32, 32, 3), label=label))
    return samples


def to_grayscale(sample: ImageSample) -> ImageSample:
    """Collapse an RGB sample to single-channel luma."""
    if len(sample.shape) != 3 or sample.shape[2] != 3:
        raise ValueError("to_grayscale needs an (h, w, 3) sample, got %s"
                         % (sample.shape,))
    rgb = sample.image()
    luma = rgb @ np.asarray(GRAY_WEIGHTS)
    return ImageSample(pixels=luma, shape=sample.shape[:2], label=sample.label)


def write_pgm(sample: ImageSample, path):
    """Write a grayscale sample as binary P5 PGM, maxval 255."""
    if len(sample.shape) != 2:
        raise ValueError("PGM output needs a grayscale (h, w) sample")
    img = sample.image()
    if img.min() < 0 or img.max() > 1:
        warnings.warn("pixel values outside [0, 1] clamped for PGM output")
        img = np.clip(img, 0.0, 1.0)
    h, w = sample.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pgm(path) -> ImageSample:
    """Read a binary P5 PGM back into a unit-scale sample."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise BadMagic("not a P5 PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return ImageSample(pixels=raw.astype(np.float64) / maxval, shape=(h, w))


def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find_file(directory, names):
    for name in names:
        for cand in (Path(directory) / name, Path(directory) / (name + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError("none of %s found under %s" % (names, directory))


def load_mnist(directory):
    """Load the canonical four-file MNIST layout into flat float arrays.

    Returns (X_train, y_train, X_test, y_test); X rows are length-784 unit
    scale, y entries are class indices.
    """
    files = {
        "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
        "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
        "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
        "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
    }
    found = {key: _read_maybe_gz(_find_file(directory, names))
             for key, names in files.items()}
    train = parse_idx(found["train_images"], labels=found["train_labels"])
    test = parse_idx(found["test_images"], labels=found["test_labels"])
    x_tr = np.stack([s.pixels for s in train])
    y_tr = np.asarray([s.label for s in train], dtype=np.int64)
    x_te = np.stack([s.pixels for s in test])
    y_te = np.asarray([s.label for s in test], dtype=np.int64)
    return x_tr, y_tr, x_te, y_te


def load_cifar_batch(path):
    """Load one CIFAR-10 binary batch file."""
    return parse_cifar(_read_maybe_gz(path))


def select_subset(samples, count, seed=None):
    """Deterministic subset: shuffle under the seed, take the first count."""
    if count is None or count >= len(samples):
        picked = list(samples)
    else:
        order = np.random.default_rng(seed).permutation(len(samples))
        picked = [samples[i] for i in order[:count]]
    return picked


def write_csv(path, header, rows):
    """RFC 4180 CSV with a header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]
