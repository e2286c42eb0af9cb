"""Dense-array numeric core: seeded randomness, convolution and pooling.

Conventions used throughout the package:

* arrays are NCHW float32; reductions inside conv/matmul run in float64
  and are rounded back to the storage dtype at the end,
* conv2d is a cross-correlation (no kernel flip), stride 1,
* everything is bit-deterministic: same inputs, same bits, on every call.
"""

import math

import numpy as np

from . import _kernels

DTYPE = np.float32

GWT_MAGIC = b"GWT1"

_MASK64 = (1 << 64) - 1


def _splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded random source backed by the Philox4x64 counter generator.

    The stream is a pure function of ``(seed, path)``: ``derive(*idx)``
    opens an independent substream keyed by splitmix64-mixing the indices
    into the seed, regardless of how much the parent has already drawn.
    Philox is counter-based and fully specified, so identical seeds give
    identical draws on every platform.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(int(i) for i in _path)
        key = _splitmix64(self.seed & _MASK64)
        for idx in self._path:
            key = _splitmix64(key ^ _splitmix64(idx & _MASK64))
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *indices):
        """Independent substream keyed by integer indices."""
        return Rng(self.seed, self._path + tuple(indices))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, lo, hi, size=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def _check_4d(x, name):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-d (n, c, h, w), got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise ValueError(f"{name} has an empty dimension: {x.shape}")
    return x


def require_finite(x, name="array"):
    """Reject NaN/Inf; tensors never persist non-finite values."""
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def conv2d(x, weights, bias=None, padding="same"):
    """Cross-correlate a batch with a filter bank at stride 1.

    ``x`` is [n, c, h, w], ``weights`` is [f, c, k, k] with k odd, ``bias``
    is a length-f vector (or None for zeros).  "same" zero-pads by
    (k-1)/2 and keeps the spatial size; "valid" returns
    [n, f, h-k+1, w-k+1].  No kernel flip: the orientation matches what
    the backward pass in ``nn`` assumes.
    """
    x = _check_4d(x, "input")
    w = _check_4d(weights, "weights")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if wc != c:
        raise ValueError(f"weight channels ({wc}) != input channels ({c})")
    if padding == "same":
        p = (k - 1) // 2
    elif padding == "valid":
        if k > h or k > wd:
            raise ValueError(f"valid mode needs k <= spatial dims, got k={k} on {h}x{wd}")
        p = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if bias is None:
        bias = np.zeros(f, DTYPE)
    bias = np.asarray(bias)
    if bias.shape != (f,):
        raise ValueError(f"bias must have shape ({f},), got {bias.shape}")

    oh = h + 2 * p - k + 1
    ow = wd + 2 * p - k + 1
    # float32 is the production carrier; float64 inputs keep full precision
    # end to end (used by the finite-difference gradient checks)
    out_dtype = np.result_type(x.dtype, w.dtype, DTYPE)
    stream_dtype = np.float64 if out_dtype == np.float64 else np.float32
    xp = np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))), dtype=stream_dtype
    )
    w64 = np.ascontiguousarray(w, dtype=np.float64)
    out = np.zeros((n, f, oh, ow), np.float64)
    _kernels.corr2d(xp, w64, out)
    out += bias.astype(np.float64)[None, :, None, None]
    return out.astype(out_dtype)


def conv2d_input_grad(weights, dy, padding="same"):
    """Adjoint of conv2d w.r.t. its input.

    Equals a cross-correlation of ``dy`` with the 180-degree-rotated,
    channel/filter-swapped weights ("same" grads reuse the same padding;
    "valid" grads need full padding k-1).
    """
    w = _check_4d(weights, "weights")
    dy = _check_4d(dy, "dy")
    k = w.shape[2]
    p = (k - 1) // 2 if padding == "same" else 0
    q = k - 1 - p
    w_adj = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dyq = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q)))
    return conv2d(dyq, w_adj, None, padding="valid")


def conv2d_weight_grad(x, dy, k, padding="same"):
    """Adjoint of conv2d w.r.t. the weights; returns ([f,c,k,k], [f])."""
    x = _check_4d(x, "input")
    dy = _check_4d(dy, "dy")
    n, c, h, wd = x.shape
    f, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
    p = (k - 1) // 2 if padding == "same" else 0
    w2 = wd + 2 * p
    out_dtype = np.result_type(x.dtype, dy.dtype, DTYPE)
    stream_dtype = np.float64 if out_dtype == np.float64 else np.float32
    # one sacrificial zero row absorbs the fused-index overrun in the kernel
    xp = np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (p, p + 1), (p, p))), dtype=stream_dtype
    )
    dyp = np.zeros((n, f, oh, w2), stream_dtype)
    dyp[:, :, :, :ow] = dy
    dw = np.zeros((f, c, k, k), np.float64)
    _kernels.corr2d_wgrad(xp, dyp, dw, w2, oh)
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    return dw.astype(out_dtype), db.astype(out_dtype)


def maxpool2(x):
    """2x2 max pooling at stride 2 with floor semantics.

    Returns (output, argmax) where argmax holds the flat index (0..3, row
    major) of the winning element inside each window; ties go to the
    smallest index.  An odd trailing row/column is dropped.
    """
    x = _check_4d(x, "input")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2 needs spatial dims >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = (
        x[:, :, : 2 * oh, : 2 * ow]
        .reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    arg = win.argmax(axis=-1).astype(np.uint8)  # first max = smallest flat index
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def matmul(a, b):
    """Matrix product with float64 accumulation, rounded to the input dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.result_type(a.dtype, b.dtype))


def random_fill(rng, shape, scheme):
    """Draw a float32 tensor from ``rng``.

    ``scheme`` is ("uniform", lo, hi) or ("scaled-normal", fan_in); the
    latter is a zero-mean normal with std sqrt(2/fan_in).
    """
    kind = scheme[0]
    if kind == "uniform":
        _, lo, hi = scheme
        vals = rng.uniform(lo, hi, size=shape)
    elif kind == "scaled-normal":
        _, fan_in = scheme
        if fan_in < 1:
            raise ValueError(f"fan_in must be >= 1, got {fan_in}")
        vals = rng.normal(size=shape) * math.sqrt(2.0 / fan_in)
    else:
        raise ValueError(f"unknown scheme {kind!r}")
    return np.asarray(vals, dtype=DTYPE)


def write_tensor(dest, arr):
    """Write a 4-d float32 array in the raw exchange format.

    Layout: magic "GWT1", then n, c, h, w as little-endian uint32, then the
    values as little-endian float32, row major.  ``dest`` is a path or a
    binary file object.
    """
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    if arr.ndim != 4:
        raise ValueError(f"exchange format stores 4-d tensors, got shape {arr.shape}")
    require_finite(arr, "tensor")
    header = GWT_MAGIC + np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype("<f4").tobytes()
    if hasattr(dest, "write"):
        dest.write(header)
        dest.write(payload)
    else:
        with open(dest, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def read_tensor(src):
    """Read one tensor written by :func:`write_tensor`."""
    if hasattr(src, "read"):
        return _read_tensor_fh(src)
    with open(src, "rb") as fh:
        return _read_tensor_fh(fh)


def _read_tensor_fh(fh):
    header = fh.read(20)
    if len(header) < 20:
        raise ValueError("truncated tensor header")
    if header[:4] != GWT_MAGIC:
        raise ValueError(f"bad magic {header[:4]!r}, expected {GWT_MAGIC!r}")
    shape = tuple(int(v) for v in np.frombuffer(header[4:], dtype="<u4"))
    count = int(np.prod(shape))
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise ValueError(f"truncated tensor payload for shape {shape}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(DTYPE)
    return require_finite(arr, "tensor")
