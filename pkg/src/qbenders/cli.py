"""Command-line entry point: ``qbenders build | solve | compare``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
import warnings

import numpy as np

from . import bench, benders, model, qubo, sampler
from .benders import BendersConfig, Method
from .model import MixedBinaryProgram

METHODS = ("sso", "cbd", "bd1", "bd2")

EXIT_OK, EXIT_ERROR, EXIT_LIMIT, EXIT_DISAGREE = 0, 1, 2, 3


class UsageError(Exception):
    pass


ERROR_CODES = [
    (benders.DualInfeasible, "dual_infeasible"),
    (benders.MasterInfeasible, "master_infeasible"),
    (model.InfeasibleProblem, "infeasible"),
    (model.UnboundedProblem, "unbounded"),
    (qubo.UnboundedContinuousObjective, "unbounded_continuous_objective"),
    (qubo.LayoutMismatch, "layout_mismatch"),
    (sampler.TooLarge, "sampler_too_large"),
    (bench.BoundBlowup, "bound_blowup"),
    (bench.CaseFormatError, "case_format"),
    (model.ModelError, "model_error"),
    (UsageError, "usage"),
    (OSError, "io_error"),
    (ValueError, "invalid_value"),
]


def error_code(exc: BaseException) -> str:
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return "internal"


def _resolve_case(path: str) -> str:
    if os.path.exists(path):
        return path
    name = os.path.basename(path)
    if not name.endswith(".json"):
        name += ".json"
    bundled = bench.bundled_path(name)
    if os.path.exists(bundled):
        return bundled
    raise FileNotFoundError(f"no such file: {path}")


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# build


def cmd_build(args) -> int:
    if args.kind == "ots":
        if args.E is None:
            raise UsageError("build ots needs -E")
        case = bench.NetworkCase.load(_resolve_case(args.input))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", bench.InfeasibleBudget)
            src = bench.build_ots(case, args.E)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    else:
        if args.gen is None:
            raise UsageError("build nnver needs --gen")
        nn = bench.NeuralNetSpec.load(_resolve_case(args.input))
        src = bench.build_nn_verification(nn, args.gen, args.side)
    p = model.compile(src)
    _write(args.output, p.dumps())
    print(f"n_z={p.n_z} n_y={p.n_y} rows={p.n_rows}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve


def make_config(args, method: str) -> BendersConfig:
    exact = args.sampler == "exact" or method == "cbd"
    return BendersConfig(
        eps=args.eps, R=args.R, rho=args.rho, max_iterations=args.max_iter,
        master="exact" if exact else "qubo", sampler="sa", acc_bits=args.acc_bits, seed=args.seed,
    )


def solve_model(p: MixedBinaryProgram, method: str, args):
    """Run one method; returns the result document and the convergence log (None for sso)."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    if method == "bd2" and args.R < 1:
        raise UsageError("bd2 needs R >= 1")
    t0 = time.perf_counter()
    if method == "sso":
        sol = model.branch_and_bound(p)
        cpu = (time.perf_counter() - t0) * 1e3
        obj = _source(p, sol.objective)
        return {
            "method": method, "objective": obj, "z": sol.z.tolist(), "y": sol.y.tolist(),
            "iterations": sol.evaluated, "converged": True, "lb": obj, "ub": obj,
            "timings": {"cpu_ms": cpu, "sampler_ms": 0.0},
        }, None
    cfg = make_config(args, method)
    res = benders.run(p, cfg, Method(method))
    sampler_ms = res.master_ms if cfg.master == "qubo" else 0.0
    cpu_ms = res.sp_ms + (0.0 if cfg.master == "qubo" else res.master_ms)
    lb, ub = _source(p, res.lb), _source(p, res.ub)
    if p.sense_sign < 0:      # a minimization flips which bound is which
        lb, ub = ub, lb
    doc = {
        "method": method, "objective": _source(p, res.objective),
        "z": None if res.z is None else res.z.tolist(),
        "y": None if res.y is None else res.y.tolist(),
        "iterations": res.iterations, "converged": res.converged,
        "lb": lb, "ub": ub,
        "timings": {"cpu_ms": cpu_ms, "sampler_ms": sampler_ms},
    }
    return doc, res.log


def _source(p, v):
    """Compiled (max-sense) value back in the model's own sense; None when unknown or infinite."""
    if v is None or not np.isfinite(v):
        return None
    return float(p.sense_sign * v)


def _finalize(doc: dict, timing: bool) -> str:
    if not timing:
        doc["timings"] = None
    return json.dumps(doc, indent=1, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def cmd_solve(args) -> int:
    if not args.model:
        raise UsageError("solve needs --model")
    if len(args.method) != 1:
        raise UsageError("solve takes exactly one --method")
    method = args.method[0]
    try:
        p = MixedBinaryProgram.load(args.model[0])
        doc, log = solve_model(p, method, args)
    except Exception as exc:  # reported in the result file
        doc = {"method": method, "error": {"code": error_code(exc), "message": str(exc)}}
        _write(args.output, json.dumps(doc, indent=1) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if log is not None and args.log:
        log.write_csv(args.log, timing=args.timing)
    _write(args.output, _finalize(doc, args.timing))
    return EXIT_OK if doc["converged"] else EXIT_LIMIT


# ---------------------------------------------------------------------------
# compare


COMPARE_HEADER = ["model", "method", "seed", "objective", "iterations", "converged", "mean_iter_ms", "agree"]


def cmd_compare(args) -> int:
    if not args.model:
        raise UsageError("compare needs at least one --model")
    if not args.method:
        raise UsageError("compare needs at least one --method")
    seeds = args.seed
    rows = []
    disagree = False
    for path in sorted(args.model):
        p = MixedBinaryProgram.load(path)
        cells = []
        for method in sorted(args.method):
            for seed in sorted(seeds):
                sub = argparse.Namespace(**{**vars(args), "seed": seed})
                t0 = time.perf_counter()
                doc, _ = solve_model(p, method, sub)
                ms = (time.perf_counter() - t0) * 1e3 / max(1, doc["iterations"])
                cells.append((method, seed, doc, ms))
        objs = [c[2]["objective"] for c in cells if c[2]["objective"] is not None]
        ref = max(objs, key=lambda v: (p.sense_sign * v)) if objs else None
        for method, seed, doc, ms in cells:
            ok = ref is not None and doc["objective"] is not None and abs(doc["objective"] - ref) <= args.eps
            if not ok:
                disagree = True
                print(f"DISAGREE: {path} {method} seed={seed} objective={doc['objective']} "
                      f"reference={ref}", file=sys.stderr)
            rows.append([path, method, seed, repr(doc["objective"]), doc["iterations"], doc["converged"],
                         f"{ms:.3f}" if args.timing else "", ok])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([COMPARE_HEADER] + rows)
    _write(args.output, buf.getvalue())
    return EXIT_DISAGREE if disagree else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qbenders", description="Benders decomposition with QUBO masters")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a model file from a network case or a ReLU network")
    b.add_argument("kind", choices=["ots", "nnver"])
    b.add_argument("input", help="case or network JSON (bundled names case6/case14/nn_example accepted)")
    b.add_argument("-E", type=int, help="switch-off budget (ots)")
    b.add_argument("--gen", type=int, help="target generator index (nnver)")
    b.add_argument("--side", choices=["upper", "lower"], default="upper")
    b.add_argument("-o", dest="output", default="-")
    b.set_defaults(func=cmd_build)

    for name, func in (("solve", cmd_solve), ("compare", cmd_compare)):
        s = sub.add_parser(name)
        s.add_argument("--model", nargs="+", required=True)
        s.add_argument("--method", nargs="+", choices=METHODS, required=True)
        s.add_argument("--sampler", choices=["exact", "sa"], default="exact")
        s.add_argument("-R", type=int, default=1)
        s.add_argument("--eps", type=float, default=1e-3)
        s.add_argument("--rho", type=float, default=1.0)
        if name == "compare":
            s.add_argument("--seed", type=int, nargs="+", default=[0])
        else:
            s.add_argument("--seed", type=int, default=0)
        s.add_argument("--max-iter", type=int, default=500)
        s.add_argument("--acc-bits", type=int, default=None)
        s.add_argument("--log", default=None, help="convergence CSV path")
        s.add_argument("-o", dest="output", default="-")
        s.add_argument("--timing", action="store_true", help="record wall-clock fields (not reproducible)")
        s.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except Exception as exc:
        print(f"error [{error_code(exc)}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
