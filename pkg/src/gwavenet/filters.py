"""Kernel generators and standalone image filtering.

The checkerboard kernel is the package's matched filter for banded ripple
patterns; Gabor, Sobel and Laplacian-of-Gaussian are the classic baselines
it is compared against, and FFT amplitude thresholding is the denoising
baseline.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import DTYPE

GABOR_ORIENTATIONS_DEG = (0.0, 30.0, 60.0, 120.0, 150.0)

# defaults where the method only fixes orientations: classic psi=0 even
# Gabor with a half-octave envelope and 2:1 aspect
GABOR_DEFAULT_SIGMA_FACTOR = 0.56
GABOR_DEFAULT_GAMMA = 0.5
GABOR_DEFAULT_LAMBDA = 4.0

LAPLACIAN_DEFAULT_SIGMA = 1.0


@dataclass
class KernelSpec:
    """Declarative description of a filter kernel.

    kind is one of checkerboard | gabor | sobel | laplacian.  For gabor,
    ``lam`` (wavelength, px) is required and theta/psi are radians; sigma
    defaults to 0.56*lam and gamma to 0.5.  Sobel is fixed at 3x3; ``axis``
    picks the horizontal ("x") or vertical ("y") derivative.
    """

    kind: str
    w: int = 3
    lam: float | None = None
    theta: float = 0.0
    psi: float = 0.0
    sigma: float | None = None
    gamma: float = GABOR_DEFAULT_GAMMA
    axis: str = "x"

    def __post_init__(self):
        if self.kind not in ("checkerboard", "gabor", "sobel", "laplacian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.w < 1:
            raise ValueError(f"kernel side must be >= 1, got {self.w}")
        if self.kind == "sobel" and self.w != 3:
            raise ValueError("sobel kernels are 3x3")
        if self.kind == "laplacian" and self.w % 2 == 0:
            raise ValueError("laplacian kernel side must be odd")
        if self.kind == "gabor":
            if self.lam is None:
                raise ValueError("gabor needs a wavelength (lam)")
            if self.lam <= 0:
                raise ValueError("gabor wavelength must be > 0")
            if self.sigma is None:
                self.sigma = GABOR_DEFAULT_SIGMA_FACTOR * self.lam
            if self.sigma <= 0:
                raise ValueError("gabor sigma must be > 0")
        if self.axis not in ("x", "y"):
            raise ValueError(f"sobel axis must be 'x' or 'y', got {self.axis!r}")


def checkerboard(w):
    """Binary w-by-w kernel with 1 wherever (x + y) is even.

    Entry (x, y) is (x + y + 1) % 2, giving ceil(w^2 / 2) ones with a one
    in the top-left corner.
    """
    if w < 1:
        raise ValueError(f"kernel side must be >= 1, got {w}")
    idx = np.indices((w, w)).sum(axis=0)
    return ((idx + 1) % 2).astype(DTYPE)


def gabor(spec):
    """Real (even) Gabor kernel on a w-by-w grid centred at the midpoint.

    g(x', y') = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x'/lam + psi)
    with (x', y') the coordinates rotated by theta.
    """
    if spec.kind != "gabor":
        raise ValueError(f"expected a gabor spec, got {spec.kind!r}")
    half = (spec.w - 1) / 2.0
    y, x = np.mgrid[0:spec.w, 0:spec.w]
    xc = x - half
    yc = y - half
    xr = xc * math.cos(spec.theta) + yc * math.sin(spec.theta)
    yr = -xc * math.sin(spec.theta) + yc * math.cos(spec.theta)
    env = np.exp(-(xr**2 + (spec.gamma**2) * yr**2) / (2.0 * spec.sigma**2))
    carrier = np.cos(2.0 * math.pi * xr / spec.lam + spec.psi)
    return (env * carrier).astype(DTYPE)


def sobel():
    """The 3x3 Sobel derivative pair (gx, gy) with gy = gx transposed."""
    gx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], DTYPE)
    return gx, gx.T.copy()


def laplacian_log(w, sigma=LAPLACIAN_DEFAULT_SIGMA):
    """Discretised Laplacian-of-Gaussian, mean-subtracted to zero sum.

    LoG(x, y) = -(1 / (pi sigma^4)) (1 - r^2 / (2 sigma^2)) exp(-r^2 / (2 sigma^2))
    """
    if w % 2 == 0:
        raise ValueError(f"LoG kernel side must be odd, got {w}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    half = (w - 1) / 2.0
    y, x = np.mgrid[0:w, 0:w]
    r2 = (x - half) ** 2 + (y - half) ** 2
    s2 = 2.0 * sigma * sigma
    k = -(1.0 / (math.pi * sigma**4)) * (1.0 - r2 / s2) * np.exp(-r2 / s2)
    k = k - k.mean()
    return k.astype(DTYPE)


def make_kernel(spec):
    """Materialise a KernelSpec into a 2-d float32 matrix."""
    if spec.kind == "checkerboard":
        return checkerboard(spec.w)
    if spec.kind == "gabor":
        return gabor(spec)
    if spec.kind == "sobel":
        gx, gy = sobel()
        return gx if spec.axis == "x" else gy
    if spec.kind == "laplacian":
        return laplacian_log(spec.w, spec.sigma if spec.sigma else LAPLACIAN_DEFAULT_SIGMA)
    raise ValueError(f"unknown kernel kind {spec.kind!r}")


def parse_kernel_spec(text):
    """Parse a CLI kernel spec like "checkerboard:7" or "gabor:7:lam=4,theta=30".

    Grammar: kind[:w][:key=value,...].  Gabor theta/psi are given in
    degrees on the command line and converted to radians here.  Sobel
    accepts "sobel", "sobel:x" or "sobel:y".
    """
    parts = text.strip().split(":")
    kind = parts[0].strip().lower()
    kwargs = {}
    rest = parts[1:]
    if kind == "sobel" and rest and rest[0] in ("x", "y"):
        kwargs["axis"] = rest.pop(0)
    if rest:
        try:
            kwargs["w"] = int(rest.pop(0))
        except ValueError as exc:
            raise ValueError(f"bad kernel size in spec {text!r}") from exc
    if rest:
        for item in rest.pop(0).split(","):
            if "=" not in item:
                raise ValueError(f"bad parameter {item!r} in spec {text!r}")
            key, val = item.split("=", 1)
            key = key.strip()
            if key not in ("lam", "lambda", "theta", "psi", "sigma", "gamma"):
                raise ValueError(f"unknown gabor parameter {key!r}")
            fval = float(val)
            if key in ("theta", "psi"):
                fval = math.radians(fval)
            kwargs["lam" if key == "lambda" else key] = fval
    if rest:
        raise ValueError(f"trailing fields in kernel spec {text!r}")
    if kind == "sobel":
        kwargs.setdefault("w", 3)
    if kind == "gabor":
        kwargs.setdefault("lam", GABOR_DEFAULT_LAMBDA)
    return KernelSpec(kind=kind, **kwargs)


def format_kernel(kernel, digits=4):
    """Render a kernel as an aligned decimal grid for terminal output."""
    kernel = np.asarray(kernel)
    cells = [[f"{v:.{digits}f}".rstrip("0").rstrip(".") or "0" for v in row] for row in kernel]
    width = max(len(c) for row in cells for c in row)
    return "\n".join(" ".join(c.rjust(width) for c in row) for row in cells)


def fft_denoise(img, keep_fraction):
    """Suppress low-amplitude spectral content of a [0,1] grayscale image.

    Zeroes every 2-d DFT coefficient whose magnitude falls below the
    (1 - keep_fraction) quantile of all magnitudes; the DC component is
    always kept.  keep_fraction=1 keeps everything (identity up to the
    transform round trip).  Output is clamped back to [0, 1].
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"need a 2-d image with dims >= 2, got shape {img.shape}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    spec = np.fft.fft2(img.astype(np.float64))
    mag = np.abs(spec)
    threshold = np.quantile(mag, 1.0 - keep_fraction)
    keep = mag >= threshold
    keep[0, 0] = True
    cleaned = np.fft.ifft2(spec * keep).real
    return np.clip(cleaned, 0.0, 1.0).astype(DTYPE)


def filter_response(img, kernel):
    """Raw same-padded correlation of one image with one kernel.

    This is exactly a frozen single-filter first conv layer's forward pass
    (zero bias), before any rescaling.
    """
    img = np.asarray(img)
    kernel = np.asarray(kernel)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"expected a square 2-d kernel, got shape {kernel.shape}")
    if kernel.shape[0] > min(img.shape):
        raise ValueError(
            f"kernel side {kernel.shape[0]} exceeds image side {min(img.shape)}"
        )
    x = img.astype(DTYPE).reshape(1, 1, *img.shape)
    w = kernel.astype(DTYPE).reshape(1, 1, *kernel.shape)
    return tensor.conv2d(x, w, None, padding="same")[0, 0]


def apply_filter(img, kernel):
    """Correlate and min-max rescale back into [0, 1].

    A constant response map (max == min) rescales to all zeros.
    """
    resp = filter_response(img, kernel)
    lo = resp.min()
    hi = resp.max()
    if hi == lo:
        return np.zeros_like(resp)
    return ((resp - lo) / (hi - lo)).astype(DTYPE)
