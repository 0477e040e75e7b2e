"""Jump density between two states of ``[alpha, beta] x S^2``.

Competitors are one-dimensional transition profiles ``t -> (phi(t), psi(t))``
on ``t = y . nu in [-1/2, 1/2]``.  For such profiles the recession integrand
reduces to

    |phi'| + chi(phi' = 0) |psi'| + |(phi psi)'|

and, since ``psi . psi' = 0``, ``|(phi psi)'| = sqrt(phi'^2 + phi^2 |psi'|^2)``.
Moving ``psi`` off the great circle through the two chromaticities only
lengthens the path, so ``psi`` is parameterized by an angle ``theta(t)`` along
that circle.  On each segment ``phi`` and ``theta`` are affine and the segment
integral is the length of a planar spiral arc, evaluated in closed form.

The indicator term is treated two ways:

* scheme A replaces it by the edge-stop surrogate ``g(tau |phi'|) |psi'|``
  and raises ``tau`` through a continuation schedule;
* scheme B drops it, minimizes the remaining convex-like energy, then adds a
  tiny brightness tilt so that no rotating segment is flat, and counts the
  indicator exactly on segments with ``|phi'| <= theta``.

Both numbers are energies of explicit admissible profiles, hence upper bounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..energy import EdgeStop
from ..errors import PreconditionError
from ..fields import DEFAULT_ALPHA, DEFAULT_BETA
from .cell import DensityEstimate

log = logging.getLogger(__name__)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(2)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _state(a, alpha, beta):
    r, s = a
    r = float(r)
    s = np.asarray(s, dtype=float).reshape(3)
    if not alpha <= r <= beta:
        raise PreconditionError(f"brightness {r} outside [{alpha}, {beta}]")
    if abs(np.linalg.norm(s) - 1.0) > 1e-12:
        raise PreconditionError("chromaticity must be a unit vector")
    return r, s


@dataclass(frozen=True)
class JumpSpec:
    """Two states ``(brightness, unit 3-vector)`` and a unit interface normal."""

    a: tuple
    b: tuple
    nu: tuple = (1.0, 0.0)
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        ra, sa = _state(self.a, self.alpha, self.beta)
        rb, sb = _state(self.b, self.alpha, self.beta)
        nu = np.asarray(self.nu, dtype=float).reshape(2)
        if abs(np.linalg.norm(nu) - 1.0) > 1e-12:
            raise PreconditionError("nu must be a unit 2-vector")
        object.__setattr__(self, "a", (ra, tuple(sa)))
        object.__setattr__(self, "b", (rb, tuple(sb)))
        object.__setattr__(self, "nu", tuple(nu))

    def reflected(self) -> "JumpSpec":
        """The same interface seen from the other side: ``(b, a, -nu)``."""
        return JumpSpec(self.b, self.a, tuple(-np.asarray(self.nu)), self.alpha, self.beta)


@dataclass
class JumpConfig:
    grid_n: int = 64  # profile segments
    tau_schedule: tuple = (1e1, 1e2, 1e3, 1e4)
    theta: float = 1e-10  # activation threshold on |phi'| for exact counting
    tilt: float = 1e-7
    smoothing: tuple = (1e-2, 1e-4, 1e-6)
    max_inner_iter: int = 500
    seed: int = 0
    disagreement: float = 0.15

    def __post_init__(self):
        if self.grid_n < 2:
            raise PreconditionError("grid_n must be >= 2")
        if self.theta < 0 or self.tilt <= 0:
            raise PreconditionError("theta must be >= 0 and tilt > 0")
        if not self.tau_schedule or any(t <= 0 for t in self.tau_schedule):
            raise PreconditionError("tau schedule must be positive")


def geodesic_dist(a, b) -> float:
    """Product-metric distance on ``R x S^2`` between ``(r1, s1)`` and ``(r2, s2)``."""
    r1, s1 = a
    r2, s2 = b
    c = float(np.clip(np.dot(s1, s2), -1.0, 1.0))
    return float(np.hypot(float(r1) - float(r2), np.arccos(c)))


def _great_circle(sa, sb):
    """Unit ``e2`` orthogonal to ``sa`` spanning the circle through ``sa`` and ``sb``; total angle."""
    c = float(np.clip(sa @ sb, -1.0, 1.0))
    ang = float(np.arccos(c))
    w = sb - c * sa
    nw = np.linalg.norm(w)
    if nw < 1e-14:
        if ang < 1.0:
            return None, 0.0
        # antipodal: every great circle works, take one deterministically
        k = int(np.argmin(np.abs(sa)))
        e = np.zeros(3)
        e[k] = 1.0
        w = e - (sa @ e) * sa
        nw = np.linalg.norm(w)
    return w / nw, ang


# --- profile energies ----------------------------------------------------------


def _spiral_length(p0, p1, dth):
    """Length of ``(phi e^{i theta})`` with phi, theta affine between two nodes."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    dth = np.abs(np.asarray(dth, dtype=float))
    dp = p1 - p0
    out = np.abs(dp).astype(float)
    # rotation negligible against the radius change: dropping it costs a relative (ratio^2)/2
    rot = dth * np.maximum(np.abs(p0), np.abs(p1)) > 1e-8 * np.abs(dp)
    rel = np.abs(dp) / np.maximum(np.abs(p0) + np.abs(p1), 1e-300)
    # nearly constant radius: Simpson on the smooth integrand is exact to rounding
    flat = rot & (rel < 1e-4)
    if flat.any():
        pm = 0.5 * (p0 + p1)
        f = lambda p: np.sqrt(dp ** 2 + (dth * p) ** 2)  # noqa: E731
        out = np.where(flat, (f(p0) + 4 * f(pm) + f(p1)) / 6.0, out)
    gen = rot & ~flat
    if gen.any():
        A = np.abs(dp) / np.where(gen, dth, 1.0)
        A = np.where(gen, A, 1.0)
        lo, hi = np.minimum(p0, p1), np.maximum(p0, p1)
        G = lambda u: u * np.sqrt(A * A + u * u) + A * A * np.arcsinh(u / A)  # noqa: E731
        val = 0.5 * (dth / np.where(gen, np.abs(dp), 1.0)) * (G(hi) - G(lo))
        out = np.where(gen, val, out)
    return out


def profile_energy(phi, th, *, theta=1e-10, g: EdgeStop | None = None, tau=None):
    """Exact energy of a nodal profile on uniform segments of ``[-1/2, 1/2]``.

    With ``g`` and ``tau`` the indicator is replaced by ``g(tau |phi'|)``;
    otherwise it is counted on segments where ``|phi'| <= theta``.
    """
    phi = np.asarray(phi, dtype=float)
    th = np.asarray(th, dtype=float)
    n = phi.size - 1
    dp, dt = np.diff(phi), np.diff(th)
    slope = np.abs(dp) * n
    base = float(np.abs(dp).sum() + _spiral_length(phi[:-1], phi[1:], dt).sum())
    if g is not None and tau is not None:
        chi = g.of_square((tau * slope) ** 2)
    else:
        chi = (slope <= theta).astype(float)
    return base + float(np.sum(chi * np.abs(dt)))


class _Profile:
    """Smoothed profile energy in the interior node values ``(phi, theta)``."""

    def __init__(self, ra, rb, ang, n, g: EdgeStop | None, alpha, beta):
        self.ra, self.rb, self.ang, self.n = ra, rb, ang, n
        self.g, self.alpha, self.beta = g, alpha, beta

    def full(self, x):
        n = self.n
        phi = np.concatenate([[self.ra], x[: n - 1], [self.rb]])
        th = np.concatenate([[0.0], x[n - 1:], [self.ang]])
        return phi, th

    def bounds(self):
        n = self.n
        return [(self.alpha, self.beta)] * (n - 1) + [(None, None)] * (n - 1)

    def smoothed(self, x, d, tau=None):
        n = self.n
        phi, th = self.full(x)
        dp, dt = np.diff(phi), np.diff(th)
        # |dphi|
        s1 = np.sqrt(dp * dp + d * d)
        val = float(np.sum(s1 - d))
        g_dp = dp / s1
        g_dt = np.zeros_like(dt)
        g_p0 = np.zeros_like(dp)
        g_p1 = np.zeros_like(dp)
        # spiral length by 2-point Gauss-Legendre
        for xq, wq in zip(_GL_X, _GL_W):
            pq = (1 - xq) * phi[:-1] + xq * phi[1:]
            sq = np.sqrt(dp * dp + (dt * pq) ** 2 + d * d)
            val += wq * float(np.sum(sq))
            g_dp += wq * dp / sq
            g_dt += wq * dt * pq * pq / sq
            gp = wq * dt * dt * pq / sq
            g_p0 += (1 - xq) * gp
            g_p1 += xq * gp
        if tau is not None:
            q = (tau * n * dp) ** 2
            gq = self.g.of_square(q)
            dg = self.g.dsquare(q) * 2 * (tau * n) ** 2 * dp
            sa = np.sqrt(dt * dt + d * d)
            val += float(np.sum(gq * sa))
            g_dp += dg * sa
            g_dt += gq * dt / sa
        gphi = np.zeros(n + 1)
        gphi[:-1] += g_p0 - g_dp
        gphi[1:] += g_p1 + g_dp
        gth = np.zeros(n + 1)
        gth[:-1] -= g_dt
        gth[1:] += g_dt
        return val, np.concatenate([gphi[1:-1], gth[1:-1]])

    def minimize(self, x0, deltas, maxiter, tau=None):
        x = x0
        for d in deltas:
            res = minimize(self.smoothed, x, args=(d, tau), jac=True, method="L-BFGS-B",
                           bounds=self.bounds(), options={"maxiter": maxiter, "gtol": 1e-12, "ftol": 1e-14})
            x = res.x
        return x


def _initial_profiles(ra, rb, ang, n, alpha, beta):
    """Deterministic starts; the set is closed under reversing the profile."""
    t = np.linspace(0.0, 1.0, n + 1)
    out = {"linear": (ra + (rb - ra) * t, ang * t)}
    rise = np.clip(2 * t, 0, 1)
    fall = np.clip(2 * t - 1, 0, 1)
    # rotate first at ra, then change brightness; and the mirror ordering
    out["rotate_then_radial"] = (ra + (rb - ra) * fall, ang * rise)
    out["radial_then_rotate"] = (ra + (rb - ra) * rise, ang * fall)
    # straight chord between the two colors, radius clamped to the box
    za, zb = ra, rb * np.exp(1j * ang)
    z = za + (zb - za) * t
    rad = np.clip(np.abs(z), alpha, beta)
    arg = np.unwrap(np.angle(z)) if ang < np.pi else ang * t
    rad[0], rad[-1] = ra, rb
    out["chord"] = (rad, arg)
    return out


def _tilt(phi, dth, cfg: JumpConfig, alpha, beta, rng):
    """Smallest-effort nudge making every rotating segment non-flat."""
    n = phi.size - 1
    thr = cfg.theta / n
    mag = max(cfg.tilt, 10 * thr)
    for _ in range(20):
        room_up = beta - phi[1:-1]
        sign = np.where(room_up >= phi[1:-1] - alpha, 1.0, -1.0)
        pert = mag * rng.uniform(0.5, 1.0, n - 1) * sign
        cand = phi.copy()
        cand[1:-1] = np.clip(phi[1:-1] + pert, alpha, beta)
        dp = np.diff(cand)
        bad = (np.abs(dp) <= thr) & (np.abs(dth) > 0)
        if not bad.any():
            return cand, True
        mag *= 2.0
    return cand, False


def _is_same_state(ra, sa, rb, sb):
    return ra == rb and np.array_equal(sa, sb)


def jump_k(spec: JumpSpec, cfg: JumpConfig | None = None, g: EdgeStop | None = None) -> DensityEstimate:
    """Upper bound on the jump density ``K(a, b, nu)`` from 1D transition profiles."""
    cfg = cfg or JumpConfig()
    g = g or EdgeStop()
    ra, sa = spec.a[0], np.asarray(spec.a[1])
    rb, sb = spec.b[0], np.asarray(spec.b[1])
    diag = {"grid_n": cfg.grid_n, "nu": list(spec.nu), "scheme_a": 0.0, "scheme_b": 0.0,
            "flagged": False, "tilt_ok": True, "restarts_used": 0, "final_delta": cfg.smoothing[-1],
            "trace": []}
    if _is_same_state(ra, sa, rb, sb):
        return DensityEstimate(0.0, True, diag)
    _, ang = _great_circle(sa, sb)
    n = cfg.grid_n
    prob = _Profile(ra, rb, ang, n, g, spec.alpha, spec.beta)
    scale = max(abs(rb - ra), max(ra, rb) * ang, 1e-12) / n
    deltas = [d * scale for d in cfg.smoothing]
    rng = np.random.default_rng(cfg.seed)

    # scheme B: indicator-free minimization, then tilt and count exactly
    best_b = (np.inf, None)
    for name, (p0, t0) in _initial_profiles(ra, rb, ang, n, spec.alpha, spec.beta).items():
        x = prob.minimize(np.concatenate([p0[1:-1], t0[1:-1]]), deltas, cfg.max_inner_iter)
        phi, th = prob.full(x)
        e0 = profile_energy(phi, th, theta=-1.0)  # theta < 0 never charges the indicator
        diag["trace"].append(("B", name, e0))
        diag["restarts_used"] += 1
        if e0 < best_b[0]:
            best_b = (e0, (phi, th))
    phi, th = best_b[1]
    phi_t, ok = _tilt(phi, np.diff(th), cfg, spec.alpha, spec.beta, rng)
    diag["tilt_ok"] = ok
    value_b = profile_energy(phi_t, th, theta=cfg.theta)

    # scheme A: surrogate continuation, seeded by scheme B and by tilted copies
    x = np.concatenate([phi_t[1:-1], th[1:-1]])
    value_a = np.inf
    for tau in cfg.tau_schedule:
        cands = [("carry", x)]
        # tent with slope 10 a / tau: switches the surrogate off at small brightness cost
        tent = (10.0 * g.a / tau) * (0.5 - np.abs(np.linspace(-0.5, 0.5, n + 1)))
        for sgn in (1.0, -1.0):
            p = np.clip(phi + sgn * tent, spec.alpha, spec.beta)
            cands.append((f"tent{sgn:+.0f}", np.concatenate([p[1:-1], th[1:-1]])))
        stage = (np.inf, x)
        for name, x0 in cands:
            xs = prob.minimize(x0, deltas[-1:], cfg.max_inner_iter, tau=tau)
            p, t = prob.full(xs)
            v = profile_energy(p, t, g=g, tau=tau)
            diag["restarts_used"] += 1
            if v < stage[0]:
                stage = (v, xs)
        x = stage[1]
        value_a = stage[0]
        diag["trace"].append(("A", tau, value_a))
    diag["scheme_a"] = value_a
    diag["scheme_b"] = value_b
    spread = abs(value_a - value_b) / max(value_a, value_b, 1e-300)
    diag["flagged"] = bool(spread > cfg.disagreement)
    if diag["flagged"]:
        log.warning("jump_k: schemes disagree by %.1f%% (A=%.6g, B=%.6g)", 100 * spread, value_a, value_b)
    return DensityEstimate(float(min(value_a, value_b)), True, diag)


def nu_dependence(spec: JumpSpec, normals, cfg: JumpConfig | None = None, g=None):
    """Diagnostic: jump_k for several normals (profiles in 1D give identical values)."""
    vals = [jump_k(JumpSpec(spec.a, spec.b, tuple(nv), spec.alpha, spec.beta), cfg, g).value
            for nv in normals]
    spread = max(vals) - min(vals)
    log.info("jump_k nu spread %.3g over %d normals", spread, len(vals))
    return vals
