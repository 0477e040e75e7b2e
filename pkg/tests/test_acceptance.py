"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtimes are measured with ``time.perf_counter`` and are part of each check.
"""

import time

import numpy as np
import pytest

from chromabv.densities import CellProblemConfig, JumpConfig, JumpSpec, geodesic_dist, jump_k, qtf
from chromabv.energy import DensityQuery, EdgeStop, f_density, f_tilde, tangential_project
from chromabv.errors import NonZeroMean
from chromabv.fields import DEFAULT_ALPHA, DEFAULT_BETA, div, grad, grid_spacing, psnr
from chromabv.gnorm import gnorm, oscillation_decay_probe
from chromabv.solver import (benchmark, benchmark_params, denoise, gamma_probe, grad_pi_y, interface_energy,
                             project_pi_y)
from oracles import exhaustive_gnorm

G = EdgeStop()
ALPHA, BETA = DEFAULT_ALPHA, DEFAULT_BETA


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _random_queries(rng, m, tangent=True):
    r = rng.uniform(ALPHA, BETA, m)
    s = _unit(rng.standard_normal((m, 3)))
    xi = rng.standard_normal((m, 2))
    eta = rng.standard_normal((m, 3, 2))
    if tangent:
        eta = tangential_project(s, eta)
    return r, s, xi, eta


def _rotate_towards(s, angle, rng):
    """Unit vector at geodesic distance ``angle`` from ``s`` in a random direction."""
    w = rng.standard_normal(3)
    w = _unit(w - (w @ s) * s)
    return np.cos(angle) * s + np.sin(angle) * w


# 1 ----------------------------------------------------------------------------------------

def test_c01_operator_adjointness(criteria):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(100):
        H, W = (2, 2) if k == 0 else (64, 64) if k == 1 else tuple(rng.integers(2, 65, 2))
        f = rng.standard_normal((H, W, 3))
        xi = rng.standard_normal((H, W, 3, 2))
        h = grid_spacing((H, W))
        a, b = np.sum(grad(f, h) * xi), np.sum(f * div(xi, h))
        worst = max(worst, abs(a + b) / abs(a))
    dt = time.perf_counter() - t0
    criteria.check(1, worst <= 1e-12 and dt < 5, f"max rel defect {worst:.2e}, {dt:.2f}s")


# 2 ----------------------------------------------------------------------------------------

def test_c02_density_sandwich(criteria):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    r, s, xi, eta = _random_queries(rng, 1000, tangent=False)
    f = f_density(r, s, xi, eta, G)
    nx, ne = np.linalg.norm(xi, axis=-1), np.linalg.norm(eta, axis=(-2, -1))
    lower = 0.5 * nx + 0.5 * r * ne
    upper = 2 * nx + (1 + r) * ne
    ok = bool(np.all(lower <= f) and np.all(f <= upper))
    dt = time.perf_counter() - t0
    margin = min(float(np.min(f - lower)), float(np.min(upper - f)))
    criteria.check(2, ok and dt < 1, f"1000 queries, smallest margin {margin:.3e}, {dt:.3f}s")


# 3 ----------------------------------------------------------------------------------------

def test_c03_tilde_equals_f(criteria):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    r, s, xi, eta = _random_queries(rng, 1000, tangent=True)
    err = float(np.max(np.abs(f_tilde(r, s, xi, eta, G) - f_density(r, s, xi, eta, G))))
    dt = time.perf_counter() - t0
    criteria.check(3, err <= 1e-12 and dt < 1, f"max |f~ - f| {err:.2e}, {dt:.3f}s")


# 4 ----------------------------------------------------------------------------------------

def test_c04_gnorm_oracle(criteria):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        v = rng.standard_normal((2, 2) if k < 10 else (2, 3))
        v -= v.mean()
        ref = exhaustive_gnorm(v)
        worst = max(worst, abs(gnorm(v).value - ref) / ref)
    dt = time.perf_counter() - t0
    criteria.check(4, worst <= 0.01 and dt < 30, f"20 inputs, max rel deviation {worst:.2e}, {dt:.2f}s")


# 5 ----------------------------------------------------------------------------------------

def test_c05_gnorm_gate_and_homogeneity(criteria):
    t0 = time.perf_counter()
    try:
        gnorm(np.full((8, 8), 0.25))
        rejected = False
    except NonZeroMean:
        rejected = True
    v = np.random.default_rng(5).standard_normal((16, 16, 3))
    v -= v.mean(axis=(0, 1))
    a, b = gnorm(v).value, gnorm(2 * v).value
    rel = abs(b - 2 * a) / (2 * a)
    dt = time.perf_counter() - t0
    criteria.check(5, rejected and rel <= 1e-6 and dt < 10,
                   f"constant rejected {rejected}, homogeneity defect {rel:.2e}, {dt:.2f}s")


# 6 ----------------------------------------------------------------------------------------

def test_c06_oscillation_decay(criteria):
    t0 = time.perf_counter()
    rows = oscillation_decay_probe([1, 2, 4, 8, 16], n=64)
    vals = [v for _, v in rows]
    dec = all(b < a for a, b in zip(vals, vals[1:]))
    dt = time.perf_counter() - t0
    criteria.check(6, dec and dt < 120, f"G-norms {', '.join(f'{v:.4g}' for v in vals)}, {dt:.1f}s")


# 7 ----------------------------------------------------------------------------------------

def _level_best(est, n):
    return min(min(stages) for m, _, stages in est.diagnostics["trace"] if m == n)


def test_c07_qtf_bounds(criteria):
    rng = np.random.default_rng(7)
    cfg = CellProblemConfig(grid_n=16)
    t0 = time.perf_counter()
    r, s, xi, eta = _random_queries(rng, 500, tangent=True)
    bad, worst_lo, worst_hi = 0, np.inf, -np.inf
    for i in range(500):
        q = DensityQuery.make(r[i], s[i], xi[i], eta[i])
        est = qtf(q, G, cfg)
        slack = 2.0 * max(_level_best(est, 8) - _level_best(est, 16), 0.0)
        lo = 0.5 * np.linalg.norm(xi[i]) + 0.5 * ALPHA * np.linalg.norm(tangential_project(s[i], eta[i])) - slack
        f = float(f_density(r[i], s[i], xi[i], eta[i], G))
        hi = min(f, 2 * np.linalg.norm(xi[i]) + np.sqrt(2) * (1 + BETA) * np.linalg.norm(eta[i])) + 1e-6
        worst_lo, worst_hi = min(worst_lo, est.value - lo), max(worst_hi, est.value - hi)
        bad += not (lo <= est.value <= hi)
    dt = time.perf_counter() - t0
    criteria.check(7, bad == 0 and dt < 600, f"500 queries, {bad} outside, lower margin {worst_lo:.3g}, "
                   f"upper excess {worst_hi:.3g}, {dt:.0f}s")


# 8 ----------------------------------------------------------------------------------------

def test_c08_formulation_agreement(criteria):
    rng = np.random.default_rng(8)
    tan, til = CellProblemConfig(formulation="tangent"), CellProblemConfig(formulation="tilde")
    t0 = time.perf_counter()
    r, s, xi, eta = _random_queries(rng, 100, tangent=True)
    worst = 0.0
    for i in range(100):
        q = DensityQuery.make(r[i], s[i], xi[i], eta[i])
        a, b = qtf(q, G, tan).value, qtf(q, G, til).value
        worst = max(worst, abs(a - b) / max(a, b))
    dt = time.perf_counter() - t0
    criteria.check(8, worst <= 0.05 and dt < 1200, f"100 queries, max rel gap {worst:.3%}, {dt:.0f}s")


# 9 ----------------------------------------------------------------------------------------

def _egg_crate_energy(amp, k=5, n=400):
    """Cell average of f for phi = amp * min(dist(x, Z/k), dist(y, Z/k)) sampled on an n x n grid."""
    c = (np.arange(n) + 0.5) / n
    dx = np.abs(c * k - np.round(c * k)) / k
    X, Y = np.meshgrid(dx, dx, indexing="xy")
    # derivative of dist(t, Z/k) is +-1; phi follows whichever distance is smaller
    sx = np.sign(np.round(c * k) - c * k)[None, :] * -1.0
    sy = np.sign(np.round(c * k) - c * k)[:, None] * -1.0
    gx = np.where(X <= Y, amp * sx, 0.0)
    gy = np.where(X <= Y, 0.0, amp * sy)
    gphi = np.stack(np.broadcast_arrays(gx, gy), axis=-1)
    eta = np.zeros((3, 2))
    eta[0, 0] = 10.0
    return float(np.mean(f_density(np.ones((n, n)), np.array([0.0, 0.0, 1.0]), gphi, eta, G)))


def test_c09_nonquasiconvexity_witness(criteria):
    t0 = time.perf_counter()
    eta = np.zeros((3, 2))
    eta[0, 0] = 10.0
    q = DensityQuery.make(1.0, (0, 0, 1), (0, 0), eta, tangent_required=True)
    f = float(f_density(1.0, np.array([0.0, 0, 1]), np.zeros(2), eta, G))
    value = qtf(q, G, CellProblemConfig(grid_n=16)).value
    amp = 2.2
    analytic = amp + 10 * float(G(amp)) + np.sqrt(100 + amp * amp)
    sampled = _egg_crate_energy(amp)
    dt = time.perf_counter() - t0
    ok = value <= 0.9 * f and analytic < f and abs(sampled - analytic) <= 1e-2 * analytic and dt < 60
    criteria.check(9, ok, f"f = {f:g}, cell value {value:.4f}, egg-crate competitor {analytic:.4f} "
                   f"(sampled {sampled:.4f}), {dt:.1f}s")


# 10 ---------------------------------------------------------------------------------------

def _panel(rng, m=20):
    cases = []
    for k in range(m):
        ra = rng.uniform(0.3, 1.8)
        sa = _unit(rng.standard_normal(3))
        if k % 5 == 0:
            rb, sb = ra, _rotate_towards(sa, rng.uniform(0.3, 2.5), rng)  # same brightness
        elif k % 5 == 1:
            rb, sb = rng.uniform(0.3, 1.8), sa  # same chromaticity
        else:
            rb, sb = rng.uniform(0.3, 1.8), _rotate_towards(sa, rng.uniform(0.1, 3.0), rng)
        nu = _unit(rng.standard_normal(2))
        cases.append(((ra, sa), (rb, sb), nu))
    return cases


def _perturb(state, delta, rng):
    r, s = state
    return r + delta * rng.choice([-1.0, 1.0]), _rotate_towards(s, delta, rng)


def _euclid(a, b):
    return float(np.sqrt((a[0] - b[0]) ** 2 + np.sum((np.asarray(a[1]) - np.asarray(b[1])) ** 2)))


def test_c10_jump_properties(criteria):
    rng = np.random.default_rng(10)
    cfg = JumpConfig()
    t0 = time.perf_counter()
    zero_max, ratio_max, refl_max, c_fit = 0.0, 0.0, 0.0, 0.0
    for a, b, nu in _panel(rng):
        spec = JumpSpec(a, b, tuple(nu))
        zero_max = max(zero_max, jump_k(JumpSpec(a, a, tuple(nu)), cfg).value)
        k = jump_k(spec, cfg).value
        ratio_max = max(ratio_max, k / ((3 + BETA) * geodesic_dist(a, b)))
        kr = jump_k(spec.reflected(), cfg).value
        refl_max = max(refl_max, abs(k - kr) / max(k, kr))
        ap, bp = _perturb(a, 0.01, rng), _perturb(b, 0.01, rng)
        kp = jump_k(JumpSpec(ap, bp, tuple(nu)), cfg).value
        c_fit = max(c_fit, abs(kp - k) / (_euclid(a, ap) + _euclid(b, bp)))
    dt = time.perf_counter() - t0
    ok = zero_max <= 1e-8 and ratio_max <= 1.02 and refl_max <= 0.02 and c_fit <= 3 * (3 + BETA) and dt < 300
    criteria.check(10, ok, f"K(a,a) max {zero_max:.1e}, K/((3+beta)d) max {ratio_max:.3f}, reflection gap "
                   f"{refl_max:.2e}, C_fit {c_fit:.3f}, {dt:.0f}s")


# 11 ---------------------------------------------------------------------------------------

def test_c11_tilt_discovery(criteria):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    rows = []
    ok = True
    for r, deg in [(0.5, 30), (1.0, 90), (1.5, 60), (1.8, 150), (0.2, 120)]:
        s = _unit(rng.standard_normal(3))
        arc = np.radians(deg)
        s2 = _rotate_towards(s, arc, rng)
        arc = np.arccos(np.clip(s @ s2, -1, 1))
        k = jump_k(JumpSpec((r, s), (r, s2))).value
        ok &= k <= r * arc * 1.05 and k < (1 + r) * arc * 0.95
        rows.append(f"{k / (r * arc):.4f}")
    dt = time.perf_counter() - t0
    criteria.check(11, bool(ok) and dt < 120, f"K / (r arc) = {', '.join(rows)}, {dt:.1f}s")


# 12 ---------------------------------------------------------------------------------------

def _at_angle(deg, base=0.0):
    t0, t1 = np.radians(base), np.radians(base + deg)
    return np.array([np.cos(t0), np.sin(t0), 0.0]), np.array([np.cos(t1), np.sin(t1), 0.0])


def test_c12_interface_consistency(criteria):
    # brightness changes and r_b cos(angle) >= r_a, so the radius grows along the chord in R^3
    s1, s2 = _at_angle(30)
    s3, s4 = _at_angle(60, base=10)
    pairs = [((0.5, s1), (1.5, s1)), ((0.8, s1), (1.2, s2)), ((0.6, s3), (1.6, s4))]
    t0 = time.perf_counter()
    worst, rows = 0.0, []
    for a, b in pairs:
        two_d, _ = interface_energy(a, b, n=64)
        k = jump_k(JumpSpec(a, b, (1.0, 0.0))).value
        worst = max(worst, abs(two_d - k) / k)
        rows.append(f"{two_d:.4f}/{k:.4f}")
    dt = time.perf_counter() - t0
    criteria.check(12, worst <= 0.10 and dt < 600, f"2D/1D {', '.join(rows)}, max rel gap {worst:.2%}, {dt:.0f}s")


# 13, 16 -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_runs():
    clean, noisy = benchmark(32)
    p = benchmark_params()
    t0 = time.perf_counter()
    first = denoise(noisy, p)
    t1 = time.perf_counter()
    second = denoise(noisy, p)
    t2 = time.perf_counter()
    return clean, noisy, p, first, second, t1 - t0, t2 - t0


def test_c13_solver_contract(criteria, benchmark_runs):
    _, _, p, res, again, _, dt = benchmark_runs
    worst_rise = -np.inf
    for eps in p.epsilon_schedule:
        tot = [e.total for e in res.trace if e.epsilon == eps]
        worst_rise = max([worst_rise] + [y - x for x, y in zip(tot, tot[1:])])
    c, b = res.chromaticity.values, res.brightness.values
    unit = float(np.abs(np.linalg.norm(c, axis=-1) - 1).max())
    boxed = bool(np.all((b >= p.alpha) & (b <= p.beta)))
    same = (np.array_equal(res.restored.data, again.restored.data)
            and [e.total for e in res.trace] == [e.total for e in again.trace])
    ok = worst_rise <= 1e-9 and unit <= 1e-12 and boxed and same and dt < 120
    criteria.check(13, ok, f"{len(res.trace)} outer iterations, largest rise {worst_rise:.2e}, ||u_c|-1| {unit:.1e}, "
                   f"box {boxed}, bit-identical {same}, {dt:.0f}s for two runs")


def test_c16_denoising_smoke(criteria, benchmark_runs):
    clean, noisy, _, res, _, dt, _ = benchmark_runs
    before, after = psnr(noisy, clean), psnr(res.restored, clean)
    criteria.check(16, after > before and dt < 120, f"PSNR {before:.2f} dB -> {after:.2f} dB, {dt:.0f}s")


# 14 ---------------------------------------------------------------------------------------

def test_c14_gamma_probe(criteria):
    _, noisy = benchmark(16)
    p = benchmark_params(epsilon_schedule=(1.0, 0.1, 0.01, 0.001))
    t0 = time.perf_counter()
    rep = gamma_probe(noisy, p)
    dt = time.perf_counter() - t0
    gb = [r["mean_gap_brightness"] for r in rep["rows"]]
    gc = [r["mean_gap_color"] for r in rep["rows"]]
    mono = all(y <= x for x, y in zip(gb, gb[1:])) and all(y <= x for x, y in zip(gc, gc[1:]))
    final_ok = max(gb[-1], gc[-1]) <= max(10 * p.epsilon_schedule[-1], 1e-6)
    ok = mono and final_ok and rep["energy_variation"] < 0.05 and dt < 300
    criteria.check(14, ok, f"gaps b {', '.join(f'{x:.1e}' for x in gb)}; c {', '.join(f'{x:.1e}' for x in gc)}; "
                   f"energy variation {rep['energy_variation']:.2e}, {dt:.0f}s")


# 15 ---------------------------------------------------------------------------------------

def test_c15_pi_y_suite(criteria):
    rng = np.random.default_rng(15)
    t0 = time.perf_counter()
    ident, fd_rel, fixed = 0.0, 0.0, 0.0
    for _ in range(200):
        y = rng.standard_normal(3)
        y *= rng.uniform(0, 0.49) / np.linalg.norm(y)
        s = _unit(rng.standard_normal(3))
        ident = max(ident, float(np.abs(project_pi_y(y, s) - s).max()))
        w = rng.standard_normal(3)
        w -= (w @ s) * s
        fixed = max(fixed, float(np.linalg.norm(grad_pi_y(y, s) @ w - w) / np.linalg.norm(w)))
        x = rng.uniform(-1.5, 1.5, 3)
        if np.linalg.norm(x - y) < 0.2:
            continue
        J = grad_pi_y(y, x)
        k = 1e-6
        fd = np.stack([(project_pi_y(y, x + k * e) - project_pi_y(y, x - k * e)) / (2 * k) for e in np.eye(3)], 1)
        fd_rel = max(fd_rel, float(np.linalg.norm(J - fd) / np.linalg.norm(fd)))
    dt = time.perf_counter() - t0
    ok = ident <= 1e-12 and fd_rel <= 1e-5 and fixed <= 1e-10 and dt < 10
    criteria.check(15, ok, f"identity {ident:.1e}, Jacobian vs FD {fd_rel:.1e}, tangent fixed point {fixed:.1e}, "
                   f"{dt:.2f}s")
