"""Pointwise densities and discrete evaluation of the regularization and fidelity energies.

The bulk density is

    f(r, s, xi, eta) = |xi| + g(|xi|) |eta| + |r eta + s (x) xi|

with ``r`` the brightness, ``s`` the chromaticity, ``xi`` the brightness
gradient (2-vector) and ``eta`` the chromaticity gradient (3x2 matrix).
Matrix norms are Frobenius.  All functions broadcast over leading axes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DimensionError, NonZeroMean, PreconditionError
from .fields import (DEFAULT_ALPHA, DEFAULT_BETA, BrightnessField, ChromaticityField,
                     ColorImage, cell_area, decompose, grad, grid_spacing, pixel_norm)
from .gnorm import GNormConfig, gnorm


@dataclass(frozen=True)
class EdgeStop:
    """``rational``: 1/(1+(t/a)^2); ``gaussian``: exp(-(t/a)^2)."""

    kind: str = "rational"
    a: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rational", "gaussian"):
            raise PreconditionError(f"unknown edge-stop kind {self.kind!r}")
        if not self.a > 0:
            raise PreconditionError("edge-stop scale must be positive")

    def of_square(self, q):
        """g as a function of ``q = t**2`` (smooth in the gradient)."""
        q = np.asarray(q, dtype=float) / (self.a * self.a)
        if self.kind == "rational":
            return 1.0 / (1.0 + q)
        return np.exp(-q)

    def dsquare(self, q):
        """d g / d q."""
        a2 = self.a * self.a
        q = np.asarray(q, dtype=float) / a2
        if self.kind == "rational":
            return -1.0 / (a2 * (1.0 + q) ** 2)
        return -np.exp(-q) / a2

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.of_square(t * t)

    @property
    def lipschitz(self) -> float:
        if self.kind == "rational":
            return 3.0 * np.sqrt(3.0) / (8.0 * self.a)
        return np.sqrt(2.0) * np.exp(-0.5) / self.a


def edge_stop_eval(g: EdgeStop, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise PreconditionError("edge-stop argument must be >= 0")
    out = g(t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DensityQuery:
    r: float
    s: tuple
    xi: tuple
    eta: tuple  # 3x2, row-major nested
    tangent_required: bool = False

    def __post_init__(self):
        s, xi, eta = self.arrays()
        if s.shape != (3,) or xi.shape != (2,) or eta.shape != (3, 2):
            raise DimensionError("query needs s in R^3, xi in R^2, eta in R^{3x2}")
        if abs(np.linalg.norm(s) - 1.0) > 1e-12:
            raise PreconditionError("s must be a unit vector")
        if self.tangent_required and np.abs(s @ eta).max() > 1e-10:
            raise PreconditionError("eta is not tangent to the sphere at s")

    def arrays(self):
        return (np.asarray(self.s, dtype=float), np.asarray(self.xi, dtype=float),
                np.asarray(self.eta, dtype=float))

    @classmethod
    def make(cls, r, s, xi, eta, tangent_required=False):
        return cls(float(r), tuple(np.asarray(s, float).tolist()), tuple(np.asarray(xi, float).tolist()),
                   tuple(map(tuple, np.asarray(eta, float).reshape(3, 2).tolist())), tangent_required)


def _outer(s, xi):
    return np.asarray(s)[..., :, None] * np.asarray(xi)[..., None, :]


def f_density(r, s, xi, eta, g: EdgeStop):
    """Vectorized ``f``; ``r (...), s (...,3), xi (...,2), eta (...,3,2)``."""
    r = np.asarray(r, dtype=float)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    nx2 = np.sum(xi * xi, axis=-1)
    coupled = r[..., None, None] * eta + _outer(s, xi)
    return np.sqrt(nx2) + g.of_square(nx2) * pixel_norm(eta, 2) + pixel_norm(coupled, 2)


def f_recession(r, s, xi, eta):
    """``f_inf``: the edge-stop weight collapses to the indicator of ``xi == 0``."""
    r = np.asarray(r, dtype=float)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    nx = pixel_norm(xi, 1)
    coupled = r[..., None, None] * eta + _outer(s, xi)
    return nx + np.where(nx == 0, 1.0, 0.0) * pixel_norm(eta, 2) + pixel_norm(coupled, 2)


def tangential_project(s, eta):
    """``(I - s s^T) eta`` for eta of shape (..., 3) or (..., 3, 2)."""
    s = np.asarray(s, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1] == 3 and eta.ndim == s.ndim:
        return eta - s * np.sum(s * eta, axis=-1, keepdims=True)
    proj = np.einsum("...i,...ij->...j", s, eta)
    return eta - s[..., :, None] * proj[..., None, :]


def cutoff(t):
    """C^1 smoothstep: 0 for t <= 3/4, 1 for t >= 1."""
    u = np.clip((np.asarray(t, dtype=float) - 0.75) * 4.0, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def f_tilde(r, s, xi, eta, g: EdgeStop, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """Extension of ``f`` to all of R x R^3: clamp r, normalize s, project eta, cut off near 0."""
    s = np.asarray(s, dtype=float)
    ns = pixel_norm(s, 1)
    safe = np.where(ns > 0, ns, 1.0)
    st = s / safe[..., None]
    rt = np.clip(r, alpha, beta)
    val = f_density(rt, st, xi, tangential_project(st, eta), g) * cutoff(ns)
    return np.where(ns > 0, val, 0.0)


def density_f(q: DensityQuery, g: EdgeStop) -> float:
    s, xi, eta = q.arrays()
    return float(f_density(q.r, s, xi, eta, g))


def density_f_inf(q: DensityQuery) -> float:
    s, xi, eta = q.arrays()
    return float(f_recession(q.r, s, xi, eta))


def density_f_tilde(r, s, xi, eta, g: EdgeStop, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> float:
    return float(f_tilde(r, s, xi, eta, g, alpha, beta))


# --- discrete energies ---------------------------------------------------------

_COLUMNS = ("tv_brightness", "weighted_tv_chroma", "tv_product", "gnorm_color", "gnorm_brightness",
            "penalty_color_mean", "penalty_brightness_mean", "l2_chroma", "lambda_v", "lambda_b",
            "lambda_c", "epsilon", "total")


@dataclass
class EnergyBreakdown:
    """Raw (unweighted) energy terms.

    ``total = tv_brightness + weighted_tv_chroma + tv_product
    + lambda_v * gnorm_color + lambda_b * gnorm_brightness
    + penalty_color_mean + penalty_brightness_mean + lambda_c * l2_chroma``.
    The penalty terms already carry the ``1/epsilon`` factor.
    """

    tv_brightness: float = 0.0
    weighted_tv_chroma: float = 0.0
    tv_product: float = 0.0
    gnorm_color: float = 0.0
    gnorm_brightness: float = 0.0
    penalty_color_mean: float = 0.0
    penalty_brightness_mean: float = 0.0
    l2_chroma: float = 0.0
    lambda_v: float = 1.0
    lambda_b: float = 1.0
    lambda_c: float = 1.0
    epsilon: float = float("inf")
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def reg(self) -> float:
        return self.tv_brightness + self.weighted_tv_chroma + self.tv_product

    @property
    def fid_free(self) -> float:
        """Fidelity without the mean penalties."""
        return (self.lambda_v * self.gnorm_color + self.lambda_b * self.gnorm_brightness
                + self.lambda_c * self.l2_chroma)

    @property
    def fid(self) -> float:
        return self.fid_free + self.penalty_color_mean + self.penalty_brightness_mean

    @property
    def total(self) -> float:
        return self.reg + self.fid

    def combine(self, other: "EnergyBreakdown") -> "EnergyBreakdown":
        """Regularization terms from ``self``, fidelity terms from ``other``."""
        out = EnergyBreakdown(**{f.name: getattr(other, f.name) for f in fields(self) if f.name != "extras"})
        out.tv_brightness = self.tv_brightness
        out.weighted_tv_chroma = self.weighted_tv_chroma
        out.tv_product = self.tv_product
        out.extras = {**self.extras, **other.extras}
        return out

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _COLUMNS}
        return {k: float(v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    @staticmethod
    def csv_header() -> list:
        return list(_COLUMNS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        w.writerow([repr(v) for v in self.as_dict().values()])
        return buf.getvalue()


def _arrays(b, c):
    bv = b.values if isinstance(b, BrightnessField) else np.asarray(b, dtype=float)
    cv = c.values if isinstance(c, ChromaticityField) else np.asarray(c, dtype=float)
    if bv.shape != cv.shape[:2]:
        raise DimensionError(f"brightness {bv.shape} and chromaticity {cv.shape[:2]} differ")
    return bv, cv


def reg_terms(b, c, g: EdgeStop, h=None):
    """(tv_brightness, weighted_tv_chroma, tv_product) as h^2-weighted sums."""
    h = grid_spacing(b.shape) if h is None else h
    gb = grad(b, h)
    gc = grad(c, h)
    gp = grad(b[..., None] * c, h)
    nb2 = np.sum(gb * gb, axis=-1)
    w = h * h
    return (w * float(np.sqrt(nb2).sum()),
            w * float((g.of_square(nb2) * pixel_norm(gc, 2)).sum()),
            w * float(pixel_norm(gp, 2).sum()))


def energy_reg(b, c, g: EdgeStop = EdgeStop()) -> EnergyBreakdown:
    """Regularization energy; the product term differences the recomposed field ``b * c``."""
    bv, cv = _arrays(b, c)
    t1, t2, t3 = reg_terms(bv, cv, g)
    return EnergyBreakdown(tv_brightness=t1, weighted_tv_chroma=t2, tv_product=t3)


@dataclass
class Datum:
    """Cached split of the observed image."""

    u0: np.ndarray
    b0: np.ndarray
    c0: np.ndarray
    alpha: float
    beta: float

    @classmethod
    def from_image(cls, img: ColorImage, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
        bf, cf = decompose(img, alpha, beta)
        return cls(img.data, bf.values, cf.values, alpha, beta)


def fidelity_terms(bv, cv, datum: Datum, lambdas=(1.0, 1.0, 1.0), eps=1.0, gnorm_cfg=None,
                   warm=(None, None)):
    """Penalized fidelity terms; also returns the two G-norm results (for their duals)."""
    if not eps > 0:
        raise PreconditionError("epsilon must be positive")
    if min(lambdas) < 0:
        raise PreconditionError("fidelity weights must be >= 0")
    cfg = gnorm_cfg or GNormConfig()
    h = grid_spacing(bv.shape)
    rc = bv[..., None] * cv - datum.u0
    rb = bv - datum.b0
    mc = rc.mean(axis=(0, 1))
    mb = rb.mean()
    area = cell_area(bv.shape)
    gc = gnorm(rc - mc, cfg, h=h, warm_start=warm[0])
    gb = gnorm(rb - mb, cfg, h=h, warm_start=warm[1])
    l2 = h * h * float(np.sum((cv - datum.c0) ** 2))
    e = EnergyBreakdown(gnorm_color=gc.value, gnorm_brightness=gb.value,
                        penalty_color_mean=float(np.linalg.norm(mc)) * area / eps,
                        penalty_brightness_mean=abs(float(mb)) * area / eps,
                        l2_chroma=l2, lambda_v=float(lambdas[0]), lambda_b=float(lambdas[1]),
                        lambda_c=float(lambdas[2]), epsilon=float(eps))
    return e, gc, gb


def energy_fid_eps(b, c, img0: ColorImage, lambdas=(1.0, 1.0, 1.0), eps=1.0,
                   gnorm_cfg: GNormConfig | None = None) -> EnergyBreakdown:
    """Penalized fidelity: G-norms of mean-centred residuals plus |integral| / eps."""
    bv, cv = _arrays(b, c)
    if bv.shape != img0.shape:
        raise DimensionError("fields and datum differ in size")
    alpha = b.alpha if isinstance(b, BrightnessField) else DEFAULT_ALPHA
    beta = b.beta if isinstance(b, BrightnessField) else DEFAULT_BETA
    e, gc, gb = fidelity_terms(bv, cv, Datum.from_image(img0, alpha, beta), lambdas, eps, gnorm_cfg)
    e.extras.update(gnorm_color_converged=gc.converged, gnorm_brightness_converged=gb.converged)
    return e


def energy_fid(b, c, img0: ColorImage, lambdas=(1.0, 1.0, 1.0), gnorm_cfg=None, mean_tol=None) -> float:
    """Unpenalized fidelity; both residuals must have (numerically) zero integral."""
    bv, cv = _arrays(b, c)
    alpha = b.alpha if isinstance(b, BrightnessField) else DEFAULT_ALPHA
    beta = b.beta if isinstance(b, BrightnessField) else DEFAULT_BETA
    datum = Datum.from_image(img0, alpha, beta)
    h = grid_spacing(bv.shape)
    tol = 1e-8 * cell_area(bv.shape) if mean_tol is None else mean_tol
    rc = bv[..., None] * cv - datum.u0
    rb = bv - datum.b0
    ic = h * h * rc.reshape(-1, 3).sum(axis=0)
    ib = h * h * float(rb.sum())
    if np.linalg.norm(ic) > tol:
        raise NonZeroMean(ic.tolist(), tol)
    if abs(ib) > tol:
        raise NonZeroMean(ib, tol)
    cfg = gnorm_cfg or GNormConfig()
    if cfg.tol_mean is None:
        cfg = GNormConfig(**{**asdict(cfg), "tol_mean": tol})
    e, _, _ = fidelity_terms(bv, cv, datum, lambdas, 1.0, cfg)
    return e.fid_free


# --- piecewise-constant relaxed energy -----------------------------------------


@dataclass(frozen=True)
class PiecewiseConstantField:
    labels: np.ndarray  # (H, W) int
    brightness: dict  # label -> r
    chroma: dict  # label -> unit 3-vector
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        labels = np.asarray(self.labels)
        for lab in np.unique(labels):
            lab = int(lab)
            if lab not in self.brightness or lab not in self.chroma:
                raise PreconditionError(f"label {lab} has no value")
            r = self.brightness[lab]
            if not self.alpha <= r <= self.beta:
                raise PreconditionError(f"label {lab}: brightness {r} outside [alpha, beta]")
            if abs(np.linalg.norm(self.chroma[lab]) - 1.0) > 1e-12:
                raise PreconditionError(f"label {lab}: chromaticity not unit")

    def state(self, lab):
        return float(self.brightness[lab]), tuple(np.asarray(self.chroma[lab], float).tolist())


def energy_relaxed_pc(pcf: PiecewiseConstantField, jump_k_solver) -> float:
    """Jump part of the relaxed energy: sum of ``h * K(left/up, right/down, normal)`` over label edges.

    ``jump_k_solver(a, b, nu)`` returns a float or an object with ``.value``.
    """
    labels = np.asarray(pcf.labels)
    h = grid_spacing(labels.shape)
    cache = {}

    def k(la, lb, nu):
        key = (la, lb, nu)
        if key not in cache:
            out = jump_k_solver(pcf.state(la), pcf.state(lb), np.array(nu, dtype=float))
            cache[key] = float(getattr(out, "value", out))
        return cache[key]

    total = 0.0
    for axis, nu in ((1, (1.0, 0.0)), (0, (0.0, 1.0))):
        a = labels[:, :-1] if axis == 1 else labels[:-1, :]
        b = labels[:, 1:] if axis == 1 else labels[1:, :]
        diff = a != b
        for la, lb in zip(a[diff].tolist(), b[diff].tolist()):
            total += h * k(int(la), int(lb), nu)
    return total
