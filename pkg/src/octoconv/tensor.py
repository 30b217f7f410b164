"""Dense float32 kernels: 3D convolution, pooling, activations and losses.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 laid out as
``(batch, channels, depth, height, width)``. Every function here is pure and
leaves its inputs untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float32

__all__ = [
    "Conv3dSpec",
    "as_tensor",
    "same_padding",
    "pad_volume",
    "conv3d_forward",
    "conv3d_backward",
    "im2col3d",
    "relu",
    "relu_backward",
    "max_pool3d_forward",
    "max_pool3d_backward",
    "softmax",
    "softmax_cross_entropy",
    "read_volume",
    "write_volume",
]


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array, checking rank and size."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if arr.size == 0 or 0 in arr.shape:
        raise ValueError(f"{name} has a zero-sized dimension: {arr.shape}")
    return arr


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class Conv3dSpec:
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "stride", _triple(self.stride))
        pad = str(self.padding).lower()
        if pad not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        object.__setattr__(self, "padding", pad)
        if min(self.stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.stride}")


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) giving ``ceil(size / stride)`` outputs.

    The odd remainder goes on the trailing side.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pads(spatial, kshape, stride, padding):
    if padding == "valid":
        return [(0, 0)] * 3
    return [same_padding(s, k, st) for s, k, st in zip(spatial, kshape, stride)]


def pad_volume(x: np.ndarray, pads, value: float = 0.0) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, [(0, 0), (0, 0), *pads], mode="constant", constant_values=value)


def _out_shape(padded, kshape, stride):
    out = []
    for s, k, st in zip(padded, kshape, stride):
        if s < k:
            raise ValueError(f"kernel {tuple(kshape)} does not fit input {tuple(padded)}")
        out.append((s - k) // st + 1)
    return tuple(out)


def im2col3d(x: np.ndarray, kshape, spec: Conv3dSpec) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Gather patches into an ``(n * D' * H' * W', kz * ky * kx * c)`` matrix.

    Rows are output voxels (batch folded in), columns are kernel offsets
    with the channel fastest, matching :func:`_filter_matrix`. Each kernel
    offset is one strided copy of channel-last runs.
    """
    n, c = x.shape[:2]
    kz, ky, kx = kshape
    pads = _pads(x.shape[2:], kshape, spec.stride, spec.padding)
    xp = np.ascontiguousarray(pad_volume(x, pads).transpose(0, 2, 3, 4, 1))
    oz, oy, ox = oshape = _out_shape(xp.shape[1:4], kshape, spec.stride)
    sz, sy, sx = spec.stride
    cols = np.empty((n, oz, oy, ox, kz, ky, kx, c), dtype=DTYPE)
    for a in range(kz):
        for b in range(ky):
            for d in range(kx):
                cols[:, :, :, :, a, b, d] = xp[
                    :, a : a + sz * (oz - 1) + 1 : sz, b : b + sy * (oy - 1) + 1 : sy, d : d + sx * (ox - 1) + 1 : sx
                ]
    return cols.reshape(n * oz * oy * ox, kz * ky * kx * c), oshape


def _filter_matrix(w):
    """``(c_out, c_in, kz, ky, kx)`` -> ``(c_out, kz * ky * kx * c_in)`` in im2col column order."""
    return w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)


def _check_conv_shapes(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"expected 5D input and filters, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but filters expect {w.shape[1]}")
    if x.size == 0 or w.size == 0:
        raise ValueError("zero-sized tensor")


# Patch matrices are built a few samples at a time; about this many rows
# keeps the matrix product efficient and the buffers cache friendly.
CHUNK_ROWS = 3000


def _chunks(n, rows_per_sample):
    step = max(1, CHUNK_ROWS // max(rows_per_sample, 1))
    for i in range(0, n, step):
        yield slice(i, min(i + step, n))


def _conv_geometry(x, w, spec):
    kshape = w.shape[2:]
    pads = _pads(x.shape[2:], kshape, spec.stride, spec.padding)
    padded = tuple(s + a + b for s, (a, b) in zip(x.shape[2:], pads))
    return kshape, pads, padded, _out_shape(padded, kshape, spec.stride)


def conv3d_forward(x: np.ndarray, w: np.ndarray, spec: Conv3dSpec = Conv3dSpec()) -> np.ndarray:
    """Cross-correlate ``x`` (n, c_in, D, H, W) with ``w`` (c_out, c_in, kz, ky, kx)."""
    x = as_tensor(x, 5, "input")
    w = as_tensor(w, 5, "filters")
    _check_conv_shapes(x, w)
    kshape, _, _, oshape = _conv_geometry(x, w, spec)
    n, c_out = x.shape[0], w.shape[0]
    p = math.prod(oshape)
    wt = np.ascontiguousarray(_filter_matrix(w).T)
    out = np.empty((n, c_out, p), dtype=DTYPE)
    for sl in _chunks(n, p):
        cols, _ = im2col3d(x[sl], kshape, spec)
        out[sl] = (cols @ wt).reshape(-1, p, c_out).transpose(0, 2, 1)
    return out.reshape(n, c_out, *oshape)


def conv3d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    spec: Conv3dSpec = Conv3dSpec(),
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv3d_forward` with respect to input and filters.

    Patch matrices are rebuilt chunk by chunk rather than kept from the
    forward pass.
    """
    x = as_tensor(x, 5, "input")
    w = as_tensor(w, 5, "filters")
    _check_conv_shapes(x, w)
    kshape, pads, padded, oshape = _conv_geometry(x, w, spec)
    n, c_in = x.shape[:2]
    c_out = w.shape[0]
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != (n, c_out, *oshape):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, c_out, *oshape)}")

    p = math.prod(oshape)
    g = grad_out.reshape(n, c_out, p)
    w2 = _filter_matrix(w)
    grad_w = np.zeros((c_out, w2.shape[1]), dtype=DTYPE)
    grad_x = np.empty(x.shape, dtype=DTYPE)
    (z0, _), (y0, _), (x0, _) = pads
    D, H, W = x.shape[2:]
    sz, sy, sx = spec.stride
    dz, dy, dx = oshape
    for sl in _chunks(n, p):
        cols, _ = im2col3d(x[sl], kshape, spec)
        m = cols.shape[0] // p
        gs = np.ascontiguousarray(g[sl].transpose(0, 2, 1)).reshape(m * p, c_out)
        grad_w += gs.T @ cols
        dcols = np.matmul(gs, w2, out=cols).reshape(m, *oshape, *kshape, c_in)
        dxp = np.zeros((m, *padded, c_in), dtype=DTYPE)
        for a in range(kshape[0]):
            for b in range(kshape[1]):
                for c in range(kshape[2]):
                    dxp[
                        :,
                        a : a + sz * (dz - 1) + 1 : sz,
                        b : b + sy * (dy - 1) + 1 : sy,
                        c : c + sx * (dx - 1) + 1 : sx,
                    ] += dcols[:, :, :, :, a, b, c]
        grad_x[sl] = dxp[:, z0 : z0 + D, y0 : y0 + H, x0 : x0 + W].transpose(0, 4, 1, 2, 3)
    grad_w = grad_w.reshape(c_out, *kshape, c_in).transpose(0, 4, 1, 2, 3)
    return grad_x, np.ascontiguousarray(grad_w)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.multiply(grad_out, x > 0, dtype=DTYPE)


def _pool_offsets(kernel, stride, oshape):
    """Yield one strided slice tuple per window offset, in flattened window order."""
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                yield (
                    slice(None),
                    slice(None),
                    slice(a, a + stride[0] * (oshape[0] - 1) + 1, stride[0]),
                    slice(b, b + stride[1] * (oshape[1] - 1) + 1, stride[1]),
                    slice(c, c + stride[2] * (oshape[2] - 1) + 1, stride[2]),
                )


def max_pool3d_forward(x: np.ndarray, kernel=2, stride=None, padding: str = "same"):
    """Max pooling; SAME padding uses a -inf sentinel.

    Returns ``(out, argmax)`` where ``argmax`` indexes the flattened window
    and is what :func:`max_pool3d_backward` needs. Ties go to the first
    offset.
    """
    x = as_tensor(x, 5, "input")
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    xp = pad_volume(x, _pads(x.shape[2:], kernel, stride, padding), value=-np.inf)
    oshape = _out_shape(xp.shape[2:], kernel, stride)
    offsets = list(_pool_offsets(kernel, stride, oshape))
    out = xp[offsets[0]].copy()
    for sl in offsets[1:]:
        np.maximum(out, xp[sl], out=out)
    # walk offsets backwards so the first maximal one wins ties
    idx = np.zeros(out.shape, dtype=np.int8 if len(offsets) < 128 else np.intp)
    hit = np.empty(out.shape, dtype=bool)
    for k in range(len(offsets) - 1, 0, -1):
        np.equal(xp[offsets[k]], out, out=hit)
        np.copyto(idx, k, where=hit, casting="unsafe")
    np.equal(xp[offsets[0]], out, out=hit)
    np.copyto(idx, 0, where=hit, casting="unsafe")
    return out, idx


def max_pool3d_backward(grad_out, argmax, input_shape, kernel=2, stride=None, padding: str = "same"):
    """Route each output gradient to the voxel that won the max (first on ties)."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    spatial = input_shape[2:]
    pads = _pads(spatial, kernel, stride, padding)
    padded = tuple(s + a + b for s, (a, b) in zip(spatial, pads))
    dxp = np.zeros((*input_shape[:2], *padded), dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    for k, sl in enumerate(_pool_offsets(kernel, stride, grad_out.shape[2:])):
        dxp[sl] += np.where(argmax == k, grad_out, 0)
    (z0, _), (y0, _), (x0, _) = pads
    D, H, W = spatial
    return np.ascontiguousarray(dxp[:, :, z0 : z0 + D, y0 : y0 + H, x0 : x0 + W])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` and its gradient w.r.t. logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError(f"logits must be a non-empty (n, classes) array, got {logits.shape}")
    if labels.shape != (len(logits),):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n = len(labels)
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)


# -- volume files ---------------------------------------------------------


def write_volume(path, volume: np.ndarray, spacing_mm=(1.25, 0.5, 0.5)) -> Path:
    """Write ``<path>.raw`` (little-endian float32) and ``<path>.meta``.

    ``volume`` is padded to five dimensions ``(n, c, d, h, w)`` in the sidecar.
    """
    base = Path(path)
    if base.suffix in (".raw", ".meta"):
        base = base.with_suffix("")
    vol = np.asarray(volume, dtype="<f4")
    shape = (1,) * (5 - vol.ndim) + vol.shape
    if len(shape) != 5:
        raise ValueError(f"volume rank must be <= 5, got shape {vol.shape}")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".raw").write_bytes(np.ascontiguousarray(vol).tobytes())
    meta = f"shape: {' '.join(map(str, shape))}\nspacing_mm: {' '.join(repr(float(s)) for s in spacing_mm)}\n"
    base.with_suffix(".meta").write_text(meta)
    return base.with_suffix(".raw")


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a volume written by :func:`write_volume`; returns (array, spacing)."""
    base = Path(path)
    if base.suffix in (".raw", ".meta"):
        base = base.with_suffix("")
    fields = {}
    for line in base.with_suffix(".meta").read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            fields[key.strip()] = val.split()
    try:
        shape = tuple(int(v) for v in fields["shape"])
        spacing = tuple(float(v) for v in fields["spacing_mm"])
    except KeyError as e:
        raise ValueError(f"{base}.meta is missing key {e.args[0]!r}") from None
    data = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    if data.size != math.prod(shape):
        raise ValueError(f"{base}.raw holds {data.size} values, meta shape {shape} needs {math.prod(shape)}")
    return data.reshape(shape).astype(DTYPE), spacing
