"""Grid fields, forward-difference operators and the brightness/chromaticity split.

Array conventions used throughout the package:

* scalar field      ``(H, W)``
* color / 3-vector  ``(H, W, 3)``
* gradient          ``(..., 2)`` appended to the field shape; component 0 is
  the difference along columns (x1), component 1 along rows (x2).

The grid spacing is ``h = 1 / max(H, W)`` so that ``h**2 * sum(...)``
approximates an integral over a domain of unit scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, PreconditionError, ZeroBrightness

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
DEFAULT_BETA = 2.0
FALLBACK_CHROMA = np.full(3, 1.0 / np.sqrt(3.0))


def _frozen(a, dtype=np.float64):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ColorImage:
    """Nonnegative ``(H, W, 3)`` intensity field, normalized to [0, 1] on load."""

    data: np.ndarray

    def __post_init__(self):
        d = _frozen(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise DimensionError(f"color image must be (H, W, 3), got {d.shape}")
        if d.shape[0] < 2 or d.shape[1] < 2:
            raise DimensionError(f"image must be at least 2x2, got {d.shape[:2]}")
        if not np.all(np.isfinite(d)):
            raise PreconditionError("image contains non-finite values")
        if np.any(d < 0):
            raise PreconditionError("image contains negative intensities")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class BrightnessField:
    values: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise DimensionError(f"brightness must be (H, W), got {v.shape}")
        if not 0 < self.alpha <= self.beta:
            raise PreconditionError(f"need 0 < alpha <= beta, got {self.alpha}, {self.beta}")
        if np.any(v < self.alpha) or np.any(v > self.beta):
            raise PreconditionError("brightness outside [alpha, beta]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ChromaticityField:
    """Unit-vector field ``(H, W, 3)``; norms equal 1 within ``UNIT_TOL``."""

    values: np.ndarray
    UNIT_TOL = 1e-12

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3 or v.shape[2] != 3:
            raise DimensionError(f"chromaticity must be (H, W, 3), got {v.shape}")
        err = np.abs(np.linalg.norm(v, axis=-1) - 1.0).max()
        if err > self.UNIT_TOL:
            raise PreconditionError(f"chromaticity off the sphere by {err:.3g}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape[:2]


def grid_spacing(shape) -> float:
    return 1.0 / max(shape[0], shape[1])


def cell_area(shape) -> float:
    """|Omega| for the grid: H * W * h**2."""
    h = grid_spacing(shape)
    return shape[0] * shape[1] * h * h


def integrate(f, h=None):
    """h**2 * sum over pixels (per trailing channel), fixed summation order."""
    f = np.asarray(f, dtype=float)
    if h is None:
        h = grid_spacing(f.shape)
    return h * h * f.reshape(f.shape[0] * f.shape[1], -1).sum(axis=0).squeeze()


def grad(f, h=None):
    """Forward differences with replicate boundary; trailing axis of size 2 appended."""
    f = np.asarray(f, dtype=float)
    if h is None:
        h = grid_spacing(f.shape)
    d = np.zeros(f.shape + (2,))
    d[:, :-1, ..., 0] = (f[:, 1:] - f[:, :-1]) / h
    d[:-1, :, ..., 1] = (f[1:] - f[:-1]) / h
    return d


def div(xi, h=None):
    """Negative adjoint of :func:`grad`.

    Flux components pointing out through the last column (x1) or last row (x2)
    are ignored, i.e. treated as the zero boundary flux ``xi . n = 0``.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 2:
        raise DimensionError(f"flux must end in an axis of size 2, got {xi.shape}")
    if h is None:
        h = grid_spacing(xi.shape)
    p1, p2 = xi[..., 0], xi[..., 1]
    out = np.zeros(p1.shape)
    out[:, :-1] += p1[:, :-1]
    out[:, 1:] -= p1[:, :-1]
    out[:-1] += p2[:-1]
    out[1:] -= p2[:-1]
    return out / h


def grad_scalar(f, h=None):
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise DimensionError(f"scalar field must be (H, W), got {f.shape}")
    return grad(f, h)


def grad_vec(v, h=None):
    """Gradient of an ``(H, W, 3)`` field as ``(H, W, 3, 2)`` matrices."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 3:
        raise DimensionError(f"vector field must be (H, W, C), got {v.shape}")
    return grad(v, h)


def div_vec(xi, h=None):
    return div(xi, h)


def pixel_norm(a, trailing=1):
    """Euclidean / Frobenius norm over the last ``trailing`` axes."""
    a = np.asarray(a, dtype=float)
    axes = tuple(range(a.ndim - trailing, a.ndim))
    return np.sqrt(np.sum(a * a, axis=axes))


# --- brightness / chromaticity -------------------------------------------------


def decompose(img: ColorImage, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, *, strict=False,
              zero_tol=1e-10, fallback=FALLBACK_CHROMA):
    """Split ``u0`` into ``(clamp(|u0|, alpha, beta), u0 / |u0|)``.

    Pixels with ``|u0| < zero_tol`` get the ``fallback`` chromaticity, or raise
    :class:`ZeroBrightness` when ``strict``.
    """
    if not 0 < alpha <= beta:
        raise PreconditionError(f"need 0 < alpha <= beta, got {alpha}, {beta}")
    u = img.data
    norm = np.linalg.norm(u, axis=-1)
    dark = norm < zero_tol
    if dark.any():
        if strict:
            idx = tuple(int(i) for i in np.argwhere(dark)[0])
            raise ZeroBrightness(f"|u0| < {zero_tol:g} at pixel {idx} ({int(dark.sum())} pixels)")
        log.debug("decompose: %d dark pixels use the fallback chromaticity", int(dark.sum()))
    fb = np.asarray(fallback, dtype=float)
    fb = fb / np.linalg.norm(fb)
    safe = np.where(dark, 1.0, norm)
    chroma = u / safe[..., None]
    chroma[dark] = fb
    # u / |u| is unit only up to rounding; renormalize once so the invariant is tight
    chroma /= np.linalg.norm(chroma, axis=-1, keepdims=True)
    bright = np.clip(norm, alpha, beta)
    return BrightnessField(bright, alpha, beta), ChromaticityField(chroma)


def recompose(b: BrightnessField, c: ChromaticityField) -> ColorImage:
    if b.shape != c.shape:
        raise DimensionError(f"brightness {b.shape} and chromaticity {c.shape} differ")
    u = b.values[..., None] * c.values
    neg = u < 0
    if neg.any():
        # chromaticity outside the positive octant has no intensity meaning
        if u[neg].min() < -1e-12:
            log.warning("recompose: %d negative channel values clamped to 0", int(neg.sum()))
        u = np.where(neg, 0.0, u)
    return ColorImage(u)


# --- test data -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """``gaussian_rgb`` (sigma), ``chroma_rotation`` (sigma in radians) or ``texture``."""

    kind: str = "gaussian_rgb"
    sigma: float = 0.0
    k: int = 4
    amp: float = 0.0
    direction: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if self.kind not in ("gaussian_rgb", "chroma_rotation", "texture"):
            raise PreconditionError(f"unknown noise model {self.kind!r}")
        if self.sigma < 0:
            raise PreconditionError("sigma must be >= 0")


def texture_pattern(shape, k, amp):
    """Product of sines, exactly mean-free over the grid when ``k`` is not a multiple of H or W."""
    H, W = shape
    x = np.sin(2 * np.pi * k * (np.arange(W) + 0.5) / W)
    y = np.sin(2 * np.pi * k * (np.arange(H) + 0.5) / H)
    return amp * y[:, None] * x[None, :]


def _rotate(v, axis, angle):
    # Rodrigues, vectorized over pixels
    c, s = np.cos(angle)[..., None], np.sin(angle)[..., None]
    kxv = np.cross(axis, v)
    kdv = np.sum(axis * v, axis=-1, keepdims=True)
    return v * c + kxv * s + axis * kdv * (1 - c)


def add_noise(img: ColorImage, model: NoiseModel, seed=0) -> ColorImage:
    rng = np.random.default_rng(seed)
    u = img.data.copy()
    if model.kind == "gaussian_rgb":
        if model.sigma > 0:
            u = u + rng.normal(0.0, model.sigma, size=u.shape)
    elif model.kind == "chroma_rotation":
        if model.sigma > 0:
            axis = rng.normal(size=u.shape)
            axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
            angle = rng.normal(0.0, model.sigma, size=u.shape[:2])
            u = _rotate(u, axis, angle)
    else:
        d = np.asarray(model.direction, dtype=float)
        u = u + texture_pattern(u.shape[:2], model.k, model.amp)[..., None] * d
    return ColorImage(np.clip(u, 0.0, None))


def synthetic_image(n=32, kind="disk") -> ColorImage:
    """Piecewise-constant test images with brightness inside the default box."""
    u = np.empty((n, n, 3))
    yy, xx = np.mgrid[0:n, 0:n]
    if kind == "disk":
        u[:] = (0.6, 0.3, 0.2)
        inside = (xx - 0.55 * n) ** 2 + (yy - 0.45 * n) ** 2 < (0.3 * n) ** 2
        u[inside] = (0.2, 0.4, 0.7)
    elif kind == "split":
        u[:] = (0.7, 0.2, 0.2)
        u[:, n // 2:] = (0.2, 0.3, 0.7)
    elif kind == "quadrants":
        u[:] = (0.6, 0.3, 0.2)
        u[: n // 2, n // 2:] = (0.2, 0.6, 0.3)
        u[n // 2:, : n // 2] = (0.3, 0.3, 0.8)
        u[n // 2:, n // 2:] = (0.5, 0.5, 0.5)
    else:
        raise PreconditionError(f"unknown synthetic image {kind!r}")
    return ColorImage(u)


def psnr(img, ref, peak=1.0) -> float:
    a = img.data if isinstance(img, ColorImage) else np.asarray(img)
    b = ref.data if isinstance(ref, ColorImage) else np.asarray(ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10 * np.log10(peak * peak / mse)
