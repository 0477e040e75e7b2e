"""Command-line entry point: ``chromabv <subcommand> ...``.

Exit codes: 0 success, 2 non-convergence (result still written), 64 usage,
65 domain error, 74 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .densities import CellProblemConfig, JumpConfig, JumpSpec, jump_k, qtf, qtf_recession
from .energy import DensityQuery, EdgeStop, energy_fid_eps, energy_reg
from .errors import ChromaBVError, ImageFormatError, NonConvergence
from .fields import (DEFAULT_ALPHA, DEFAULT_BETA, BrightnessField, ChromaticityField, ColorImage,
                     NoiseModel, add_noise, decompose, recompose, synthetic_image)
from .fileio import load_image, read_field, save_image, write_field
from .gnorm import FROBENIUS, MAX_OVER_CHANNELS, GNormConfig, gnorm
from .solver import (SolverParams, benchmark, benchmark_params, denoise, energy_trace_export, gamma_probe,
                     write_gamma_csv)

EXIT_OK, EXIT_NONCONV, EXIT_USAGE, EXIT_DOMAIN, EXIT_IO = 0, 2, 64, 65, 74

log = logging.getLogger("chromabv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_hash() -> str:
    """Short digest of the package sources, printed by ``--version``."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


# --- parsing helpers -----------------------------------------------------------


def _floats(text, n=None, name="value"):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip() != ""]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v.strip("\"'")
    return out


def _coerce(name, text, default):
    if isinstance(default, tuple):
        return tuple(_floats(text, name=name))
    if isinstance(default, bool):
        return str(text).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise UsageError(f"{name}: expected an integer, got {text!r}") from None
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"{name}: expected a number, got {text!r}") from None


def solver_params(args, base: SolverParams | None = None) -> SolverParams:
    """Defaults (or ``base``), then the config file, then explicit flags."""
    defaults = base or SolverParams()
    values = {f.name: getattr(defaults, f.name) for f in fields(SolverParams)}
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        known = {f.name for f in fields(SolverParams)}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in cfg.items():
            values[k] = _coerce(k, v, getattr(defaults, k))
    flag_map = {"lambdas": "lambdas", "eps": "epsilon_schedule", "outer_iters": "outer_iters",
                "inner_iters": "inner_iters", "step": "step", "alpha": "alpha", "beta": "beta"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = _coerce(key, v, getattr(defaults, key))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return SolverParams(**values)


def _edge_stop(args) -> EdgeStop:
    return EdgeStop(args.edge_stop, args.edge_scale)


def _emit(args, summary: str, payload: dict):
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=_jsonable))
    else:
        print(summary)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def _load_field_or_image(path):
    p = Path(path)
    if p.suffix.lower() in (".cbf", ".bin", ".field"):
        return read_field(p)
    return load_image(p).data


def _write_trace(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# --- subcommands ---------------------------------------------------------------


def cmd_denoise(args):
    img = load_image(args.input)
    p = solver_params(args)
    res = denoise(img, p, _edge_stop(args))
    save_image(res.restored, args.output, bits=args.bits)
    if args.trace:
        energy_trace_export(res, args.trace)
    final = res.trace[-1].total if res.trace else float("nan")
    _emit(args, f"denoise: final energy {final:.6g}, converged {res.all_converged}",
          {"final_energy": final, "converged": res.converged, "mean_gaps": res.mean_gaps,
           "output": str(args.output)})
    return EXIT_OK if res.all_converged else EXIT_NONCONV


def cmd_decompose(args):
    img = load_image(args.input)
    b, c = decompose(img, args.alpha, args.beta, strict=args.strict)
    write_field(args.brightness, b.values)
    write_field(args.chroma, c.values)
    _emit(args, f"decompose: {img.height}x{img.width} -> {args.brightness}, {args.chroma}",
          {"shape": list(img.shape), "brightness": str(args.brightness), "chroma": str(args.chroma)})
    return EXIT_OK


def cmd_recompose(args):
    b = read_field(args.brightness)
    c = read_field(args.chroma)
    img = recompose(BrightnessField(b, args.alpha, args.beta), ChromaticityField(c))
    save_image(img, args.output, bits=args.bits)
    _emit(args, f"recompose: wrote {args.output}", {"output": str(args.output)})
    return EXIT_OK


def cmd_gnorm(args):
    v = _load_field_or_image(args.input)
    if args.reference:
        v = v - _load_field_or_image(args.reference)
    if args.center:
        v = v - v.mean(axis=(0, 1), keepdims=True)
    cfg = GNormConfig(max_iter=args.max_iter, tol_gap=args.tol_gap, pixel_aggregation=args.aggregation)
    res = gnorm(v, cfg)
    if args.certificate:
        write_field(args.certificate, res.flux)
    if args.trace:
        _write_trace(args.trace, ["iteration", "upper", "lower"], res.trace)
    _emit(args, f"{res.value:.10g}",
          {"value": res.value, "lower_bound": res.lower_bound, "gap": res.gap,
           "feasibility_residual": res.feasibility_residual, "iterations": res.iterations,
           "converged": res.converged, "aggregation": res.aggregation})
    return EXIT_OK if res.converged else EXIT_NONCONV


def cmd_energy(args):
    if args.input:
        img = load_image(args.input)
        b, c = decompose(img, args.alpha, args.beta)
    else:
        if not (args.brightness and args.chroma):
            raise UsageError("energy needs --input or both --brightness and --chroma")
        b = BrightnessField(read_field(args.brightness), args.alpha, args.beta)
        c = ChromaticityField(read_field(args.chroma))
    g = _edge_stop(args)
    e = energy_reg(b, c, g)
    if args.datum:
        lam = _floats(args.lambdas, 3, "--lambdas") if args.lambdas else (1.0, 1.0, 1.0)
        e = e.combine(energy_fid_eps(b, c, load_image(args.datum), lam, args.epsilon))
    _emit(args, f"{e.total:.10g}", e.as_dict())
    return EXIT_OK


def _query_from_args(args):
    if args.query:
        q = json.loads(Path(args.query).read_text())
        return DensityQuery.make(q["r"], q["s"], q["xi"], q["eta"])
    if args.r is None or args.s is None or args.xi is None:
        raise UsageError("qtf needs --r, --s, --xi and --eta/--eta-zero, or --query")
    if args.eta_zero:
        eta = np.zeros((3, 2))
    elif args.eta is not None:
        eta = np.array(_floats(args.eta, 6, "--eta")).reshape(3, 2)
    else:
        raise UsageError("qtf needs --eta or --eta-zero")
    return DensityQuery.make(args.r, _floats(args.s, 3, "--s"), _floats(args.xi, 2, "--xi"), eta)


def cmd_qtf(args):
    q = _query_from_args(args)
    cfg = CellProblemConfig(grid_n=args.grid_n, formulation=args.formulation, restarts=args.restarts,
                            seed=args.seed or 0)
    g = _edge_stop(args)
    est = qtf_recession(q, g, cfg) if args.recession else qtf(q, g, cfg)
    if args.trace:
        rows = [(n, name, stage, v) for n, name, vals in est.diagnostics.get("trace", [])
                for stage, v in enumerate(vals)]
        _write_trace(args.trace, ["grid_n", "candidate", "stage", "value"], rows)
    _emit(args, f"{est.value:.10g}", est.as_dict())
    return EXIT_OK


def _state(text, name):
    v = _floats(text, 4, name)
    s = np.array(v[1:])
    return v[0], tuple(s / np.linalg.norm(s))


def _json_state(v, name):
    """``[r, s1, s2, s3]``, ``[r, [s1, s2, s3]]`` or ``{"r": .., "s": [..]}``."""
    if isinstance(v, dict):
        r, s = v.get("r"), v.get("s")
    elif isinstance(v, list) and len(v) == 4:
        r, s = v[0], v[1:]
    elif isinstance(v, list) and len(v) == 2:
        r, s = v
    else:
        raise UsageError(f"{name}: expected a state (r, s)")
    s = np.asarray(s, dtype=float)
    if r is None or s.shape != (3,) or not np.linalg.norm(s) > 0:
        raise UsageError(f"{name}: expected a state (r, s)")
    return float(r), tuple(s / np.linalg.norm(s))


def cmd_jumpk(args):
    if args.query:
        q = json.loads(Path(args.query).read_text())
        if "a" not in q or "b" not in q:
            raise UsageError("jumpk query needs keys a and b")
        spec = JumpSpec(_json_state(q["a"], "a"), _json_state(q["b"], "b"), tuple(q.get("nu", (1.0, 0.0))))
    else:
        if args.a is None or args.b is None:
            raise UsageError("jumpk needs --a and --b (r,s1,s2,s3) or --query")
        spec = JumpSpec(_state(args.a, "--a"), _state(args.b, "--b"), tuple(_floats(args.nu, 2, "--nu")))
    cfg = JumpConfig(grid_n=args.grid_n, seed=args.seed or 0)
    est = jump_k(spec, cfg, _edge_stop(args))
    if args.trace:
        _write_trace(args.trace, ["scheme", "stage", "value"], est.diagnostics.get("trace", []))
    _emit(args, f"{est.value:.10g}", est.as_dict())
    return EXIT_OK


def cmd_gamma_probe(args):
    if args.input:
        img, base = load_image(args.input), None
    else:
        (_, img), base = benchmark(16, seed=args.seed or 0), benchmark_params()
    p = solver_params(args, base)
    rep = gamma_probe(img, p, _edge_stop(args))
    if args.csv:
        write_gamma_csv(rep, args.csv)
    _emit(args, f"gamma-probe: {len(rep['rows'])} stages, ok {rep['ok']}", rep)
    return EXIT_OK if all(rep["converged"]) else EXIT_NONCONV


def cmd_noise(args):
    img = load_image(args.input) if args.input else synthetic_image(args.size, args.synthetic)
    model = NoiseModel(args.model, sigma=args.sigma, k=args.k, amp=args.amp)
    out = add_noise(img, model, seed=args.seed or 0)
    save_image(out, args.output, bits=args.bits)
    _emit(args, f"noise: wrote {args.output}", {"output": str(args.output), "model": args.model})
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _common(p, edge=False, box=False):
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--seed", type=int, default=None)
    if edge:
        p.add_argument("--edge-stop", choices=("rational", "gaussian"), default="rational")
        p.add_argument("--edge-scale", type=float, default=1.0)
    if box:
        p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        p.add_argument("--beta", type=float, default=DEFAULT_BETA)


def _solver_flags(p):
    p.add_argument("--config", help="key = value file with SolverParams fields")
    p.add_argument("--lambdas", help="lambda_v,lambda_b,lambda_c")
    p.add_argument("--eps", help="comma-separated epsilon schedule")
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--inner-iters", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)


def build_parser():
    ap = _Parser(prog="chromabv", description="Chromaticity/brightness denoising and relaxed densities")
    ap.add_argument("--version", action="store_true", help="print version and source hash")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("denoise")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--trace")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    _solver_flags(p)
    _common(p, edge=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("decompose")
    p.add_argument("--input", required=True)
    p.add_argument("--brightness", required=True)
    p.add_argument("--chroma", required=True)
    p.add_argument("--strict", action="store_true")
    _common(p, box=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("recompose")
    p.add_argument("--brightness", required=True)
    p.add_argument("--chroma", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    _common(p, box=True)
    p.set_defaults(func=cmd_recompose)

    p = sub.add_parser("gnorm")
    p.add_argument("--input", required=True, help="CBF1 field dump (.cbf) or image")
    p.add_argument("--reference", help="subtract this field/image first")
    p.add_argument("--center", action="store_true", help="remove the channel means first")
    p.add_argument("--aggregation", choices=(FROBENIUS, MAX_OVER_CHANNELS), default=FROBENIUS)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--tol-gap", type=float, default=1e-4)
    p.add_argument("--certificate", help="write the optimal flux as a CBF1 dump")
    p.add_argument("--trace", help="CSV of (iteration, upper, lower)")
    _common(p)
    p.set_defaults(func=cmd_gnorm)

    p = sub.add_parser("energy")
    p.add_argument("--input", help="image to decompose and evaluate")
    p.add_argument("--brightness")
    p.add_argument("--chroma")
    p.add_argument("--datum", help="observed image; adds the fidelity terms")
    p.add_argument("--lambdas")
    p.add_argument("--epsilon", type=float, default=1.0)
    _common(p, edge=True, box=True)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("qtf")
    p.add_argument("--r", type=float)
    p.add_argument("--s")
    p.add_argument("--xi")
    p.add_argument("--eta", help="six numbers, row-major 3x2")
    p.add_argument("--eta-zero", action="store_true")
    p.add_argument("--query", help="JSON file with r, s, xi, eta")
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--formulation", choices=("tangent", "tilde"), default="tangent")
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--recession", action="store_true")
    p.add_argument("--trace")
    _common(p, edge=True)
    p.set_defaults(func=cmd_qtf)

    p = sub.add_parser("jumpk")
    p.add_argument("--a", help="r,s1,s2,s3")
    p.add_argument("--b", help="r,s1,s2,s3")
    p.add_argument("--nu", default="1,0")
    p.add_argument("--query", help="JSON file with a, b, nu")
    p.add_argument("--grid-n", type=int, default=64)
    p.add_argument("--trace")
    _common(p, edge=True)
    p.set_defaults(func=cmd_jumpk)

    p = sub.add_parser("gamma-probe")
    p.add_argument("--input", help="defaults to the seeded 16x16 synthetic benchmark")
    p.add_argument("--csv")
    _solver_flags(p)
    _common(p, edge=True)
    p.set_defaults(func=cmd_gamma_probe)

    p = sub.add_parser("noise")
    p.add_argument("--input")
    p.add_argument("--synthetic", choices=("disk", "split", "quadrants"), default="disk")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--output", required=True)
    p.add_argument("--model", choices=("gaussian_rgb", "chroma_rotation", "texture"), default="gaussian_rgb")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--amp", type=float, default=0.0)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    _common(p)
    p.set_defaults(func=cmd_noise)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.version:
            print(f"chromabv {__version__} ({build_hash()})")
            return EXIT_OK
        if not args.command:
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (OSError, ImageFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ChromaBVError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def main():
    sys.exit(run())
