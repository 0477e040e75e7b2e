"""Discrete Meyer G-norm.

For a zero-mean field ``v`` the G-norm is the smallest sup-norm of a flux
``xi`` with ``div xi = v`` and zero outward flux on the grid boundary.  The
problem

    min ||xi||_inf   subject to   div xi = v

is solved by Douglas-Rachford splitting between the affine constraint (an
exact projection through a DCT Neumann-Poisson solve) and the sup-norm
(per-pixel clipping).  Every iterate of the constraint block is feasible, so
the reported value is always a certified upper bound.  The Lagrange
multiplier ``w`` of the divergence constraint gives the lower bound
``<v, w> / TV(w)``; the relative gap between the two decides convergence.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .errors import NonConvergence, NonZeroMean, PreconditionError
from .fields import cell_area, div, grad, grid_spacing

FROBENIUS = "frobenius_all_channels"
MAX_OVER_CHANNELS = "max_over_channels"


@dataclass
class GNormConfig:
    max_iter: int = 5000
    tol_feasibility: float = 1e-6
    tol_mean: float | None = None  # None -> 1e-8 * |Omega|
    tol_gap: float = 1e-4
    step_scale: float = 2.0  # DR prox parameter relative to the initial flux sup-norm
    relaxation: float = 1.5
    check_every: int = 10
    pixel_aggregation: str = FROBENIUS

    def __post_init__(self):
        if self.pixel_aggregation not in (FROBENIUS, MAX_OVER_CHANNELS):
            raise PreconditionError(f"unknown pixel aggregation {self.pixel_aggregation!r}")
        if self.max_iter < 1 or self.tol_feasibility <= 0 or self.tol_gap <= 0:
            raise PreconditionError("G-norm tolerances and budget must be positive")
        if not 0 < self.relaxation < 2:
            raise PreconditionError("relaxation must lie in (0, 2)")

    def mean_tol(self, shape) -> float:
        return 1e-8 * cell_area(shape) if self.tol_mean is None else self.tol_mean


@dataclass
class GNormResult:
    value: float
    flux: np.ndarray
    feasibility_residual: float
    iterations: int
    converged: bool
    lower_bound: float = 0.0
    dual: np.ndarray | None = None  # subgradient of v -> ||v||_G (Euclidean pairing)
    aggregation: str = FROBENIUS
    trace: list = field(default_factory=list)  # (iteration, best upper, lower)
    state: np.ndarray | None = field(default=None, repr=False)

    @property
    def gap(self) -> float:
        if self.value == 0:
            return 0.0
        return (self.value - self.lower_bound) / self.value


def check_zero_mean(v, tol=None, h=None) -> bool:
    """True iff ``|h^2 sum v| <= tol`` for every channel."""
    v = np.asarray(v, dtype=float)
    if h is None:
        h = grid_spacing(v.shape)
    if tol is None:
        tol = 1e-8 * cell_area(v.shape)
    total = h * h * v.reshape(v.shape[0] * v.shape[1], -1).sum(axis=0)
    return bool(np.all(np.abs(total) <= tol))


@functools.lru_cache(maxsize=32)
def _laplacian_symbol(H, W, h):
    lk = 2.0 - 2.0 * np.cos(np.pi * np.arange(H) / H)
    ll = 2.0 - 2.0 * np.cos(np.pi * np.arange(W) / W)
    lam = -(lk[:, None] + ll[None, :]) / (h * h)
    lam[0, 0] = 1.0  # constant mode: solution fixed to zero mean below
    return lam


def solve_neumann_poisson(r, h):
    """Zero-mean ``w`` with ``div(grad w) = r`` (``r`` zero-mean per channel)."""
    H, W = r.shape[:2]
    lam = _laplacian_symbol(H, W, float(h)).reshape((H, W) + (1,) * (r.ndim - 2))
    rh = dctn(r, type=2, norm="ortho", axes=(0, 1))
    wh = rh / lam
    wh[0, 0] = 0.0
    return idctn(wh, type=2, norm="ortho", axes=(0, 1))


def _pixel_norms(x):
    return np.sqrt(np.sum(x.reshape(x.shape[0], x.shape[1], -1) ** 2, axis=-1))


def _clip_sup(z, tau):
    """prox of ``tau * max_x |z_x|``: clip every pixel norm at a common level."""
    n = _pixel_norms(z)
    flat = n.ravel()
    if flat.sum() <= tau:
        return np.zeros_like(z)
    s = np.sort(flat)[::-1]
    mu = (np.cumsum(s) - tau) / np.arange(1, s.size + 1)
    level = mu[np.nonzero(s > mu)[0][-1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(n > level, level / n, 1.0)
    return z * fac.reshape(fac.shape + (1,) * (z.ndim - 2))


def _total_variation(w, h):
    return float(_pixel_norms(grad(w, h)).sum())


def _dr_solve(v, h, cfg: GNormConfig, warm=None):
    """v is (H, W, C) with zero channel means."""
    x0 = grad(solve_neumann_poisson(v, h), h)
    p0 = float(_pixel_norms(x0).max())
    if p0 == 0.0:
        return x0, 0.0, 0.0, np.zeros_like(v), 0, True, [], x0
    gamma = cfg.step_scale * p0
    z = x0 if warm is None or warm.shape != x0.shape else warm.copy()
    best_val, best_x, lower, dual = np.inf, x0, -np.inf, np.zeros_like(v)
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        w = solve_neumann_poisson(div(z, h) - v, h)
        x = z - grad(w, h)
        u = _clip_sup(2.0 * x - z, gamma)
        z = z + cfg.relaxation * (u - x)
        if it % cfg.check_every == 0 or it == cfg.max_iter or it == 1:
            val = float(_pixel_norms(x).max())
            if val < best_val:
                best_val, best_x = val, x
            tv = _total_variation(w, h)
            if tv > 0:
                lb = float(np.sum(v * w)) / tv
                if lb > lower:
                    lower, dual = lb, w / tv
            trace.append((it, best_val, lower))
            if best_val - lower <= cfg.tol_gap * best_val:
                converged = True
                break
    return best_x, best_val, lower, dual, it, converged, trace, z


def gnorm(v, cfg: GNormConfig | None = None, *, h=None, strict=False, warm_start=None) -> GNormResult:
    """G-norm of a zero-mean scalar ``(H, W)`` or vector ``(H, W, C)`` field.

    Raises :class:`NonZeroMean` if the integral of any channel exceeds the mean
    tolerance.  With ``strict`` a run that exhausts ``max_iter`` without
    closing the gap raises :class:`NonConvergence` carrying the result.
    """
    cfg = cfg or GNormConfig()
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 2
    if h is None:
        h = grid_spacing(v.shape)
    tol = cfg.mean_tol(v.shape)
    if not check_zero_mean(v, tol, h):
        total = h * h * v.reshape(v.shape[0] * v.shape[1], -1).sum(axis=0)
        raise NonZeroMean(total.squeeze().tolist(), tol)
    vc = v[..., None] if scalar else v
    vc = vc - vc.mean(axis=(0, 1), keepdims=True)

    if cfg.pixel_aggregation == FROBENIUS or vc.shape[2] == 1:
        flux, val, lower, dual, its, conv, trace, state = _dr_solve(vc, h, cfg, warm_start)
    else:
        parts = [_dr_solve(vc[..., i:i + 1], h, cfg,
                           None if warm_start is None else warm_start[..., i:i + 1, :])
                 for i in range(vc.shape[2])]
        k = int(np.argmax([p[1] for p in parts]))
        flux = np.concatenate([p[0] for p in parts], axis=2)
        state = np.concatenate([p[7] for p in parts], axis=2)
        val, lower = parts[k][1], parts[k][2]
        dual = np.zeros_like(vc)
        dual[..., k:k + 1] = parts[k][3]
        its = max(p[4] for p in parts)
        conv = all(p[5] for p in parts)
        trace = parts[k][6]

    vnorm = float(np.linalg.norm(v))
    resid = div(flux, h) - vc
    feas = float(np.linalg.norm(resid) / vnorm) if vnorm > 0 else float(np.linalg.norm(resid))
    if scalar:
        flux, dual, state = flux[:, :, 0], dual[..., 0], state[:, :, 0]
    res = GNormResult(value=val, flux=flux, feasibility_residual=feas, iterations=its,
                      converged=bool(conv and feas <= cfg.tol_feasibility), lower_bound=max(lower, 0.0),
                      dual=dual, aggregation=cfg.pixel_aggregation, trace=trace, state=state)
    if strict and not res.converged:
        raise NonConvergence(f"G-norm gap {res.gap:.2e} after {its} iterations", result=res,
                             residual=feas)
    return res


def oscillation_decay_probe(frequencies, n=64, amplitude=1.0, cfg=None):
    """G-norm of mean-corrected ``sin(2 pi N x) sin(2 pi N y)`` patterns, sorted by N."""
    cfg = cfg or GNormConfig()
    x = (np.arange(n) + 0.5) / n
    rows = []
    for N in sorted(set(frequencies)):
        s = np.sin(2 * np.pi * N * x)
        v = amplitude * s[:, None] * s[None, :]
        v = v - v.mean()
        rows.append((N, gnorm(v, cfg).value))
    return rows
