"""Convolution, pooling, and feature-pyramid blocks over focal volumes.

Data layout is H x W x N x C: two spatial axes, the slice axis, channels.
conv2d treats slices as a batch; conv3d also mixes along the slice axis.
Both are same-padded cross-correlations.  Every forward op has an explicit
backward companion validated against central finite differences, and the
fast window/einsum paths are checked against naive loop references.

The pyramid alternates slice-preserving residual blocks (srd_block) with
downsampling fusion blocks (efd_block):

    level L holds H/2^L x W/2^L x N x C*2^L

for L in {0, 1, 2}.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .validation import DataError

__all__ = [
    "FocalVolumeTensor",
    "KernelWeights",
    "conv2d",
    "conv2d_naive",
    "conv2d_backward",
    "conv3d",
    "conv3d_naive",
    "conv3d_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "relu",
    "srd_block",
    "srd_block_backward",
    "efd_block",
    "efd_block_backward",
    "feature_pyramid",
    "init_srd_weights",
    "init_efd_weights",
    "init_pyramid_weights",
    "save_weights",
    "load_weights",
    "gradient_check_suite",
]

_MAGIC = b"FLW1"
_ROW_BLOCK = 64


@dataclass
class FocalVolumeTensor:
    """A feature volume plus its pyramid level (0, 1, or 2)."""

    data: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise DataError(f"volume tensor must be HxWxNxC, got {self.data.shape}")
        if self.level not in (0, 1, 2):
            raise DataError(f"level must be 0, 1, or 2, got {self.level}")
        if self.data.shape[3] % (1 << self.level) != 0:
            raise DataError(
                "channel count must be divisible by 2^level "
                f"(shape {self.data.shape}, level {self.level})"
            )

    @property
    def base_shape(self):
        """The level-0 shape this tensor corresponds to."""
        h, w, n, c = self.data.shape
        f = 1 << self.level
        return (h * f, w * f, n, c // f)


@dataclass
class KernelWeights:
    """Weights for one block: 2D kernels, 3D kernels, biases in kernel order."""

    conv2d_kernels: list = field(default_factory=list)
    conv3d_kernels: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        for k in self.conv2d_kernels:
            if k.ndim != 4 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise DataError(
                    f"conv2d kernel must be kxkxCinxCout with odd k, got {k.shape}"
                )
        for k in self.conv3d_kernels:
            if k.ndim != 5 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise DataError(
                    f"conv3d kernel must be kxkxknxCinxCout with odd k, got {k.shape}"
                )
            if k.shape[2] % 2 == 0:
                raise DataError("conv3d slice extent must be odd for same padding")
        if len(self.biases) != len(self.conv2d_kernels) + len(self.conv3d_kernels):
            raise DataError("one bias vector per kernel is required")

    def arrays(self):
        return list(self.conv2d_kernels) + list(self.conv3d_kernels) + list(self.biases)


def _check_input(x, kernel_cin, name):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DataError(f"{name} input must be HxWxNxC, got shape {x.shape}")
    if x.shape[3] != kernel_cin:
        raise DataError(
            f"{name}: input has {x.shape[3]} channels, kernel expects {kernel_cin}"
        )
    return x


def _out_len(size, stride):
    return (size - 1) // stride + 1


def conv2d(x, kernel, stride=1):
    """Same-padded 2D cross-correlation over the spatial axes, slices batched.

    Processed in row blocks so the expanded window view stays cache sized.
    """
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[2], "conv2d")
    k = kernel.shape[0]
    if stride < 1:
        raise DataError("stride must be >= 1")
    pad = k // 2
    h, w, n, c = x.shape
    oh, ow = _out_len(h, stride), _out_len(w, stride)
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    out = np.empty((oh, ow, n, kernel.shape[3]), dtype=x.dtype)
    kflat = kernel.reshape(k * k * c, -1)
    for start in range(0, oh, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, oh)
        block = padded[start * stride :, :, :, :]
        s0, s1, s2, s3 = block.strides
        windows = as_strided(
            block,
            shape=(stop - start, ow, n, k, k, c),
            strides=(stride * s0, stride * s1, s2, s0, s1, s3),
            writeable=False,
        )
        rows = windows.reshape((stop - start) * ow * n, k * k * c)
        out[start:stop] = (rows @ kflat).reshape(stop - start, ow, n, -1)
    return out


def conv2d_naive(x, kernel, stride=1):
    """Loop reference for conv2d; small inputs only."""
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[2], "conv2d")
    k = kernel.shape[0]
    pad = k // 2
    h, w, n, c = x.shape
    oh, ow = _out_len(h, stride), _out_len(w, stride)
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    out = np.zeros((oh, ow, n, kernel.shape[3]), dtype=x.dtype)
    for oy in range(oh):
        for ox in range(ow):
            for i in range(k):
                for j in range(k):
                    patch = padded[oy * stride + i, ox * stride + j]
                    out[oy, ox] += patch @ kernel[i, j]
    return out


def conv2d_backward(x, kernel, grad_out, stride=1):
    """Gradients of conv2d w.r.t. input and kernel."""
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[2], "conv2d")
    grad_out = np.asarray(grad_out)
    k = kernel.shape[0]
    pad = k // 2
    h, w, n, c = x.shape
    oh, ow = _out_len(h, stride), _out_len(w, stride)
    if grad_out.shape != (oh, ow, n, kernel.shape[3]):
        raise DataError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"{(oh, ow, n, kernel.shape[3])}"
        )
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    s0, s1, s2, s3 = padded.strides
    windows = as_strided(
        padded,
        shape=(oh, ow, n, k, k, c),
        strides=(stride * s0, stride * s1, s2, s0, s1, s3),
        writeable=False,
    )
    grad_kernel = np.einsum("hwnijc,hwno->ijco", windows, grad_out)
    grad_padded = np.zeros_like(padded)
    for i in range(k):
        for j in range(k):
            grad_padded[
                i : i + stride * oh : stride, j : j + stride * ow : stride
            ] += grad_out @ kernel[i, j].T
    grad_x = grad_padded[pad : pad + h, pad : pad + w]
    return grad_x, grad_kernel


def conv3d(x, kernel):
    """Same-padded 3D cross-correlation over the two spatial axes and slices."""
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[3], "conv3d")
    k, kn = kernel.shape[0], kernel.shape[2]
    pad, padn = k // 2, kn // 2
    h, w, n, c = x.shape
    padded = np.pad(x, ((pad, pad), (pad, pad), (padn, padn), (0, 0)))
    s0, s1, s2, s3 = padded.strides
    out = np.empty((h, w, n, kernel.shape[4]), dtype=x.dtype)
    kflat = kernel.reshape(k * k * kn * c, -1)
    for start in range(0, h, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, h)
        block = padded[start:]
        windows = as_strided(
            block,
            shape=(stop - start, w, n, k, k, kn, c),
            strides=(s0, s1, s2, s0, s1, s2, s3),
            writeable=False,
        )
        rows = windows.reshape((stop - start) * w * n, k * k * kn * c)
        out[start:stop] = (rows @ kflat).reshape(stop - start, w, n, -1)
    return out


def conv3d_naive(x, kernel):
    """Loop reference for conv3d; small inputs only."""
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[3], "conv3d")
    k, kn = kernel.shape[0], kernel.shape[2]
    pad, padn = k // 2, kn // 2
    h, w, n, c = x.shape
    padded = np.pad(x, ((pad, pad), (pad, pad), (padn, padn), (0, 0)))
    out = np.zeros((h, w, n, kernel.shape[4]), dtype=x.dtype)
    for oy in range(h):
        for ox in range(w):
            for on in range(n):
                for i in range(k):
                    for j in range(k):
                        for m in range(kn):
                            patch = padded[oy + i, ox + j, on + m]
                            out[oy, ox, on] += patch @ kernel[i, j, m]
    return out


def conv3d_backward(x, kernel, grad_out):
    """Gradients of conv3d w.r.t. input and kernel."""
    kernel = np.asarray(kernel)
    x = _check_input(x, kernel.shape[3], "conv3d")
    grad_out = np.asarray(grad_out)
    k, kn = kernel.shape[0], kernel.shape[2]
    pad, padn = k // 2, kn // 2
    h, w, n, c = x.shape
    if grad_out.shape != (h, w, n, kernel.shape[4]):
        raise DataError("grad_out shape does not match the conv3d output")
    padded = np.pad(x, ((pad, pad), (pad, pad), (padn, padn), (0, 0)))
    s0, s1, s2, s3 = padded.strides
    windows = as_strided(
        padded,
        shape=(h, w, n, k, k, kn, c),
        strides=(s0, s1, s2, s0, s1, s2, s3),
        writeable=False,
    )
    grad_kernel = np.einsum("hwnijmc,hwno->ijmco", windows, grad_out)
    grad_padded = np.zeros_like(padded)
    for i in range(k):
        for j in range(k):
            for m in range(kn):
                grad_padded[i : i + h, j : j + w, m : m + n] += (
                    grad_out @ kernel[i, j, m].T
                )
    grad_x = grad_padded[pad : pad + h, pad : pad + w, padn : padn + n]
    return grad_x, grad_kernel


def maxpool2d(x, window=2):
    """Spatial max pooling; slices and channels untouched.

    Requires the spatial dims to divide evenly by the window (no padding).
    Returns (pooled, argmax) where argmax holds the flat within-window index
    of each maximum for exact gradient routing.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise DataError(f"maxpool2d input must be HxWxNxC, got {x.shape}")
    if window < 1:
        raise DataError("window must be >= 1")
    h, w, n, c = x.shape
    if h % window or w % window:
        raise DataError(
            f"spatial dims {(h, w)} not divisible by window {window}; pad rejected"
        )
    oh, ow = h // window, w // window
    tiles = (
        x.reshape(oh, window, ow, window, n, c)
        .transpose(0, 2, 4, 5, 1, 3)
        .reshape(oh, ow, n, c, window * window)
    )
    argmax = np.argmax(tiles, axis=-1)
    pooled = np.take_along_axis(tiles, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool2d_backward(argmax, grad_out, input_shape, window=2):
    """Route pooled gradients back to the argmax positions."""
    h, w, n, c = input_shape
    oh, ow = h // window, w // window
    grad_tiles = np.zeros((oh, ow, n, c, window * window), dtype=grad_out.dtype)
    np.put_along_axis(grad_tiles, argmax[..., None], grad_out[..., None], axis=-1)
    return (
        grad_tiles.reshape(oh, ow, n, c, window, window)
        .transpose(0, 4, 1, 5, 2, 3)
        .reshape(h, w, n, c)
    )


def relu(x):
    return np.maximum(x, 0)


def _srd_parts(weights):
    if len(weights.conv2d_kernels) != 2 or len(weights.conv3d_kernels) != 1:
        raise DataError("srd_block needs two conv2d kernels and one conv3d kernel")
    k1, k2 = weights.conv2d_kernels
    k3 = weights.conv3d_kernels[0]
    b1, b2, b3 = weights.biases
    if k1.shape[3] != k1.shape[2] or k2.shape[3] != k2.shape[2]:
        raise DataError("srd_block conv2d kernels must preserve channels")
    if k3.shape[4] != k3.shape[3]:
        raise DataError("srd_block conv3d kernel must preserve channels")
    return k1, k2, k3, b1, b2, b3


def srd_block(x, weights):
    """Slice-preserving residual block with an attention-style 3D term.

    y = x + conv2(relu(conv1(x))) runs per slice; the output adds a
    rectified 3D convolution of y, so the cross-slice term is elementwise
    non-negative and zero weights reduce the block to the identity.
    """
    k1, k2, k3, b1, b2, b3 = _srd_parts(weights)
    h1 = relu(conv2d(x, k1) + b1)
    y = x + conv2d(h1, k2) + b2
    return y + relu(conv3d(y, k3) + b3)


def srd_block_backward(x, weights, grad_out):
    """Gradients of srd_block w.r.t. input and all weights."""
    k1, k2, k3, b1, b2, b3 = _srd_parts(weights)
    z1 = conv2d(x, k1) + b1
    h1 = relu(z1)
    y = x + conv2d(h1, k2) + b2
    z3 = conv3d(y, k3) + b3

    d_z3 = grad_out * (z3 > 0)
    d_b3 = d_z3.sum(axis=(0, 1, 2))
    d_y_att, d_k3 = conv3d_backward(y, k3, d_z3)
    d_y = grad_out + d_y_att

    d_b2 = d_y.sum(axis=(0, 1, 2))
    d_h1, d_k2 = conv2d_backward(h1, k2, d_y)
    d_z1 = d_h1 * (z1 > 0)
    d_b1 = d_z1.sum(axis=(0, 1, 2))
    d_x_conv, d_k1 = conv2d_backward(x, k1, d_z1)
    grad_x = d_y + d_x_conv
    grads = KernelWeights(
        conv2d_kernels=[d_k1, d_k2],
        conv3d_kernels=[d_k3],
        biases=[d_b1, d_b2, d_b3],
    )
    return grad_x, grads


def _efd_parts(weights):
    if len(weights.conv2d_kernels) != 0 or len(weights.conv3d_kernels) != 1:
        raise DataError("efd_block needs exactly one conv3d kernel")
    k3 = weights.conv3d_kernels[0]
    b3 = weights.biases[0]
    if k3.shape[4] != 2 * k3.shape[3]:
        raise DataError("efd_block kernel must double the channel count")
    return k3, b3


def efd_block(x, weights):
    """Downsampling fusion block: 2x max pooling, then channel-doubling conv3d."""
    k3, b3 = _efd_parts(weights)
    pooled, _ = maxpool2d(x, 2)
    return conv3d(pooled, k3) + b3


def efd_block_backward(x, weights, grad_out):
    """Gradients of efd_block w.r.t. input and weights."""
    k3, b3 = _efd_parts(weights)
    pooled, argmax = maxpool2d(x, 2)
    d_b3 = grad_out.sum(axis=(0, 1, 2))
    d_pooled, d_k3 = conv3d_backward(pooled, k3, grad_out)
    grad_x = maxpool2d_backward(argmax, d_pooled, x.shape, 2)
    grads = KernelWeights(conv2d_kernels=[], conv3d_kernels=[d_k3], biases=[d_b3])
    return grad_x, grads


def feature_pyramid(x, weights):
    """Three-level feature pyramid: SRD, EFD, SRD, EFD, SRD.

    weights is the five block weight sets in that order.  Returns the three
    FocalVolumeTensor levels; level L has shape H/2^L x W/2^L x N x C*2^L.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise DataError(f"pyramid input must be HxWxNxC, got {x.shape}")
    if len(weights) != 5:
        raise DataError("feature_pyramid needs five block weight sets")
    if x.shape[0] % 4 or x.shape[1] % 4:
        raise DataError("spatial dims must be divisible by 4 for three levels")
    level0 = srd_block(x, weights[0])
    level1 = srd_block(efd_block(level0, weights[1]), weights[2])
    level2 = srd_block(efd_block(level1, weights[3]), weights[4])
    return (
        FocalVolumeTensor(level0, 0),
        FocalVolumeTensor(level1, 1),
        FocalVolumeTensor(level2, 2),
    )


def _uniform(rng, shape):
    return rng.uniform(-0.5, 0.5, size=shape)


def init_srd_weights(channels, kn=3, seed=0):
    """Fixed-seed uniform [-0.5, 0.5] weights for an SRD block."""
    rng = np.random.default_rng(seed)
    return KernelWeights(
        conv2d_kernels=[
            _uniform(rng, (3, 3, channels, channels)),
            _uniform(rng, (3, 3, channels, channels)),
        ],
        conv3d_kernels=[_uniform(rng, (3, 3, kn, channels, channels))],
        biases=[
            _uniform(rng, (channels,)),
            _uniform(rng, (channels,)),
            _uniform(rng, (channels,)),
        ],
    )


def init_efd_weights(channels, kn=3, seed=0):
    """Fixed-seed uniform [-0.5, 0.5] weights for an EFD block."""
    rng = np.random.default_rng(seed)
    return KernelWeights(
        conv2d_kernels=[],
        conv3d_kernels=[_uniform(rng, (3, 3, kn, channels, 2 * channels))],
        biases=[_uniform(rng, (2 * channels,))],
    )


def init_pyramid_weights(channels, kn=3, seed=0):
    """Weight sets for the five pyramid blocks, split deterministically."""
    return [
        init_srd_weights(channels, kn, seed=np.random.default_rng([seed, 0]).integers(2**31)),
        init_efd_weights(channels, kn, seed=np.random.default_rng([seed, 1]).integers(2**31)),
        init_srd_weights(2 * channels, kn, seed=np.random.default_rng([seed, 2]).integers(2**31)),
        init_efd_weights(2 * channels, kn, seed=np.random.default_rng([seed, 3]).integers(2**31)),
        init_srd_weights(4 * channels, kn, seed=np.random.default_rng([seed, 4]).integers(2**31)),
    ]


def save_weights(path, weights):
    """Flat binary weight file: magic, section counts, dims, float32 payloads."""
    arrays = weights.arrays()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<III",
                len(weights.conv2d_kernels),
                len(weights.conv3d_kernels),
                len(weights.biases),
            )
        )
        for arr in arrays:
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated weight file")
    return buf


def load_weights(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a weight file")
        n2d, n3d, nb = struct.unpack("<III", _read_exact(fh, 12, path))
        arrays = []
        for _ in range(n2d + n3d + nb):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * count, path), dtype="<f4")
            arrays.append(data.reshape(shape).astype(np.float32).copy())
    return KernelWeights(
        conv2d_kernels=arrays[:n2d],
        conv3d_kernels=arrays[n2d : n2d + n3d],
        biases=arrays[n2d + n3d :],
    )


def _numeric_grad(fun, arr, h=1e-4):
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fun()
        flat[i] = orig - h
        lo = fun()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def _rel_err(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradient_check_suite(seed=0):
    """Central-difference checks for every backward op.

    Returns a list of (name, max relative error) pairs computed on float64
    inputs with step 1e-4; each entry should come in well below 1e-4.
    """
    rng = np.random.default_rng(seed)
    results = []

    def record(name, fun, analytic_grads, arrays):
        for (label, grad), arr in zip(analytic_grads, arrays):
            numeric = _numeric_grad(fun, arr)
            results.append((f"{name}/{label}", _rel_err(grad, numeric)))

    # conv2d, stride 1 and 2
    for stride in (1, 2):
        x = rng.standard_normal((5, 6, 3, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        r = rng.standard_normal(conv2d(x, k, stride).shape)
        gx, gk = conv2d_backward(x, k, r, stride)
        record(
            f"conv2d_stride{stride}",
            lambda x=x, k=k, r=r, stride=stride: float(np.sum(conv2d(x, k, stride) * r)),
            [("input", gx), ("kernel", gk)],
            [x, k],
        )

    # conv3d
    x = rng.standard_normal((4, 4, 3, 2))
    k = rng.standard_normal((3, 3, 3, 2, 3))
    r = rng.standard_normal(conv3d(x, k).shape)
    gx, gk = conv3d_backward(x, k, r)
    record(
        "conv3d",
        lambda x=x, k=k, r=r: float(np.sum(conv3d(x, k) * r)),
        [("input", gx), ("kernel", gk)],
        [x, k],
    )

    # maxpool2d
    x = rng.standard_normal((4, 6, 2, 3))
    pooled, argmax = maxpool2d(x, 2)
    r = rng.standard_normal(pooled.shape)
    gx = maxpool2d_backward(argmax, r, x.shape, 2)
    record(
        "maxpool2d",
        lambda x=x, r=r: float(np.sum(maxpool2d(x, 2)[0] * r)),
        [("input", gx)],
        [x],
    )

    # srd_block end to end
    x = rng.standard_normal((4, 4, 3, 2))
    w = init_srd_weights(2, seed=seed + 1)
    r = rng.standard_normal(srd_block(x, w).shape)
    gx, gw = srd_block_backward(x, w, r)
    labels = [("input", gx)] + [
        (f"w{i}", g) for i, g in enumerate(gw.arrays())
    ]
    record(
        "srd_block",
        lambda x=x, w=w, r=r: float(np.sum(srd_block(x, w) * r)),
        labels,
        [x] + w.arrays(),
    )

    # efd_block end to end
    x = rng.standard_normal((4, 4, 3, 2))
    w = init_efd_weights(2, seed=seed + 2)
    r = rng.standard_normal(efd_block(x, w).shape)
    gx, gw = efd_block_backward(x, w, r)
    labels = [("input", gx)] + [
        (f"w{i}", g) for i, g in enumerate(gw.arrays())
    ]
    record(
        "efd_block",
        lambda x=x, w=w, r=r: float(np.sum(efd_block(x, w) * r)),
        labels,
        [x] + w.arrays(),
    )
    return results
