"""Simulation of an encrypted first layer and the server's view of it.

The training flow being modeled: the data owner quantizes unit-scale inputs,
encrypts each sample under an inner-product FE key pair, and the compute
server holds one functional key per first-layer weight row. Decrypting a
sample yields Z1 = W x in plaintext while X stays encrypted. Everything the
server legitimately observes, the plaintext weights and the decrypted Z1,
is packaged into an AttackInstance; the recovery code consumes nothing else.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .group_crypto import (
    PLAINTEXT_BOUND,
    BsgsTable,
    feip_decrypt,
    feip_encrypt,
    feip_keyderive,
)

PIXEL_SCALE = 255
WEIGHT_SCALE = 2 ** 10
INSTANCE_MAGIC = b"FEAI"
INSTANCE_VERSION = 1


@dataclass(frozen=True)
class QuantizationSpec:
    """Symmetric fixed-point encoding: integer = round(value * scale)."""

    scale: int
    input_range: tuple = (0.0, 1.0)

    def max_int(self):
        lo, hi = self.input_range
        return int(round(max(abs(lo), abs(hi)) * self.scale))


PIXEL_SPEC = QuantizationSpec(scale=PIXEL_SCALE, input_range=(0.0, 1.0))


def weight_spec(limit: float, scale: int = WEIGHT_SCALE) -> QuantizationSpec:
    """Spec for weights living in [-limit, limit]."""
    return QuantizationSpec(scale=scale, input_range=(-limit, limit))


def z1_spec(x_spec: QuantizationSpec, w_spec: QuantizationSpec) -> QuantizationSpec:
    """Spec describing decrypted inner products: scales multiply."""
    return QuantizationSpec(scale=x_spec.scale * w_spec.scale,
                            input_range=(-np.inf, np.inf))


def quantize(x, spec: QuantizationSpec):
    """Round real values onto the integer grid; rejects out-of-range input."""
    arr = np.asarray(x, dtype=np.float64)
    lo, hi = spec.input_range
    if arr.size and (arr.min() < lo - 1e-12 or arr.max() > hi + 1e-12):
        raise ValueError("values outside [%g, %g]" % (lo, hi))
    return np.rint(arr * spec.scale).astype(np.int64)


def dequantize(v, spec: QuantizationSpec):
    return np.asarray(v, dtype=np.float64) / spec.scale


@dataclass(frozen=True)
class FirstLayerSpec:
    """Geometry of the layer whose products leak.

    Dense: m rows over n inputs. Convolutional: `channels` square kernels
    (side `kernel`) slid over an height x width x in_channels input; the
    leaked row count is channels * output-map size. Kernel defaults follow
    the classic 5x5, stride 1, no padding layout.
    """

    kind: str                      # "dense" | "conv"
    n: int
    m: int
    height: int = None
    width: int = None
    in_channels: int = 1
    channels: int = None
    kernel: int = 5
    stride: int = 1
    padding: int = 0

    def out_hw(self):
        oh = (self.height + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (self.width + 2 * self.padding - self.kernel) // self.stride + 1
        return oh, ow

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError("kind must be dense or conv")
        if self.kind == "conv":
            if None in (self.height, self.width, self.channels):
                raise ValueError("conv spec needs height, width, channels")
            oh, ow = self.out_hw()
            if self.m != self.channels * oh * ow:
                raise ValueError("m = %d but channels * map size = %d"
                                 % (self.m, self.channels * oh * ow))
            if self.n != self.height * self.width * self.in_channels:
                raise ValueError("n does not match the input volume")


def dense_spec(m, n, height=None, width=None) -> FirstLayerSpec:
    return FirstLayerSpec(kind="dense", n=n, m=m, height=height, width=width)


def conv_spec(height, width, in_channels, channels, kernel=5, stride=1,
              padding=0) -> FirstLayerSpec:
    oh = (height + 2 * padding - kernel) // stride + 1
    ow = (width + 2 * padding - kernel) // stride + 1
    return FirstLayerSpec(kind="conv", n=height * width * in_channels,
                          m=channels * oh * ow, height=height, width=width,
                          in_channels=in_channels, channels=channels,
                          kernel=kernel, stride=stride, padding=padding)


def conv_as_matrix(kernels, spec: FirstLayerSpec, channels_used=None):
    """Materialize a convolution as an explicit linear operator.

    kernels has shape (channels, in_channels, k, k); the flattened input is
    HWC ordered, index (i * width + j) * in_channels + c. Zero padding.
    Restricting channels_used keeps only those channels' rows.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    chans = range(spec.channels) if channels_used is None else list(channels_used)
    oh, ow = spec.out_hw()
    h, w, cin, k, s, pad = (spec.height, spec.width, spec.in_channels,
                            spec.kernel, spec.stride, spec.padding)
    mat = np.zeros((len(chans) * oh * ow, spec.n))
    row = 0
    for co in chans:
        for oi in range(oh):
            for oj in range(ow):
                for ki in range(k):
                    ii = oi * s + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    for kj in range(k):
                        jj = oj * s + kj - pad
                        if jj < 0 or jj >= w:
                            continue
                        base = (ii * w + jj) * cin
                        for c in range(cin):
                            mat[row, base + c] += kernels[co, c, ki, kj]
                row += 1
    return mat


@dataclass
class AttackInstance:
    """Exactly what the semi-honest server sees: W, Z1, geometry, box bounds.

    The true input never enters this container; tests that want MSE keep
    their own copy on the side.
    """

    W: np.ndarray                # m x n plaintext weights
    Z1: np.ndarray               # decrypted products, one per row
    input_shape: tuple           # (h, w) spatial or (n,) flat
    bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.Z1 = np.asarray(self.Z1, dtype=np.float64).ravel()
        if self.W.ndim != 2:
            raise ValueError("W must be a matrix")
        if self.Z1.shape[0] != self.W.shape[0]:
            raise ValueError("Z1 length %d does not match %d rows"
                             % (self.Z1.shape[0], self.W.shape[0]))
        if int(np.prod(self.input_shape)) != self.W.shape[1]:
            raise ValueError("input_shape %s does not cover %d columns"
                             % ((self.input_shape,), self.W.shape[1]))

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def n(self):
        return self.W.shape[1]


def adversary_view(W, Z1, spec: FirstLayerSpec, channels_used=None) -> AttackInstance:
    """Package the server's observables. For conv layers, W is the kernel
    tensor and gets materialized into the equivalent matrix first."""
    if spec.kind == "conv":
        mat = conv_as_matrix(W, spec, channels_used)
        if spec.in_channels == 1:
            shape = (spec.height, spec.width)
        else:
            shape = (spec.height, spec.width, spec.in_channels)
    else:
        mat = np.asarray(W, dtype=np.float64)
        if mat.shape != (spec.m, spec.n):
            raise ValueError("dense W is %s, spec says %s"
                             % (mat.shape, (spec.m, spec.n)))
        if spec.height and spec.width:
            shape = (spec.height, spec.width)
        else:
            shape = (spec.n,)
    return AttackInstance(W=mat, Z1=Z1, input_shape=shape)


def _pad(vec, eta):
    vec = [int(v) for v in vec]
    if len(vec) > eta:
        raise ValueError("vector length %d exceeds key dimension %d" % (len(vec), eta))
    return vec + [0] * (eta - len(vec))


def encrypt_dataset(params, mpk, samples, bound=PLAINTEXT_BOUND, seed=None):
    """One ciphertext per integer sample, order preserved. Samples shorter
    than the key dimension are zero padded."""
    out = []
    for i, sample in enumerate(samples):
        sub_seed = None if seed is None else seed + i
        out.append(feip_encrypt(params, mpk, _pad(sample, len(mpk)),
                                bound=bound, seed=sub_seed))
    return out


def derive_layer_keys(params, msk, W_int, bound=PLAINTEXT_BOUND):
    """One functional key per quantized weight row."""
    W_int = np.asarray(W_int)
    return [feip_keyderive(params, msk, _pad(row, len(msk)), bound=bound)
            for row in W_int]


def safe_dlog_bound(W_int, x_max_int) -> int:
    """Worst-case |<w_row, x>| over nonnegative x bounded by x_max_int."""
    W_int = np.asarray(W_int, dtype=np.int64)
    return int(np.abs(W_int).sum(axis=1).max() * x_max_int)


def first_layer_decrypt(params, ct, keys, spec: QuantizationSpec, bound,
                        table: BsgsTable = None):
    """Decrypt one sample against every row key and rescale to real Z1.

    spec describes the Z1 integer domain (pixel scale times weight scale);
    bound must cover the largest integer inner product, or the discrete-log
    search fails and the error propagates.
    """
    if table is None:
        table = BsgsTable(params, bound)
    ints = [feip_decrypt(params, ct, fk, bound, table) for fk in keys]
    return dequantize(np.asarray(ints, dtype=np.float64), spec)


# --- instance container ------------------------------------------------------

def save_instance(instance: AttackInstance, path):
    """Binary container: magic, version, dims, W row-major f64, then Z1."""
    if len(instance.input_shape) == 2:
        h, w = instance.input_shape
    else:
        h, w = 0, 0  # flat input, no spatial shape
    with open(path, "wb") as fh:
        fh.write(INSTANCE_MAGIC)
        fh.write(bytes([INSTANCE_VERSION]))
        fh.write(struct.pack("<IIII", instance.m, instance.n, h, w))
        fh.write(instance.W.astype("<f8").tobytes())
        fh.write(instance.Z1.astype("<f8").tobytes())


def load_instance(path) -> AttackInstance:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != INSTANCE_MAGIC:
        raise ValueError("not an attack-instance file")
    if data[4] != INSTANCE_VERSION:
        raise ValueError("unsupported container version %d" % data[4])
    m, n, h, w = struct.unpack_from("<IIII", data, 5)
    need = 21 + 8 * (m * n + m)
    if len(data) != need:
        raise ValueError("container is %d bytes, expected %d" % (len(data), need))
    W = np.frombuffer(data, dtype="<f8", count=m * n, offset=21).reshape(m, n)
    Z1 = np.frombuffer(data, dtype="<f8", count=m, offset=21 + 8 * m * n)
    shape = (h, w) if h and w else (n,)
    return AttackInstance(W=W.copy(), Z1=Z1.copy(), input_shape=shape)


def simulate_dense_instance(width, image, seed=None):
    """Plaintext shortcut used by the demo CLI: random weights, exact Z1.

    Returns (instance, x_true); x_true exists only because the caller asked
    to simulate and wants an MSE afterwards.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        shape = image.shape
    else:
        shape = (image.size,)
    x = image.ravel()
    rng = np.random.default_rng(seed)
    W = rng.uniform(-1.0, 1.0, (int(width), x.size))
    inst = AttackInstance(W=W, Z1=W @ x, input_shape=shape)
    return inst, x
