"""Benders decomposition engine.

One loop drives all three variants; they differ only in feature flags:

* conventional: one dual subproblem per iteration, plain master;
* method 1: adds a Pareto cut from the dual evaluated at a running core point,
  and a Hamming-distance term in the master objective;
* method 2: the master returns its ``R`` best distinct candidates and each one
  gets its own dual subproblem (and cut) in the next iteration.

Cuts are kept in ``value(z) = const - coef @ z`` form, where ``const = v @ b``
and ``coef = A.T @ v`` for the dual vector ``v``.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lpcore import DEFAULT_TOL, LinearProgram, Sense, Status, ToleranceSet, solve_lp
from .model import MixedBinaryProgram

_log = logging.getLogger(__name__)


class BendersError(Exception):
    pass


class DualInfeasible(BendersError):
    """The dual subproblem has no feasible point: the continuous part is unbounded."""


class MasterInfeasible(BendersError):
    """Feasibility cuts exclude every binary assignment: the MILP is infeasible."""


class Method(str, enum.Enum):
    CONVENTIONAL = "cbd"
    METHOD1 = "bd1"
    METHOD2 = "bd2"


# ---------------------------------------------------------------------------
# subproblems


@dataclass
class DualOutcome:
    kind: str                  # "point" or "ray"
    vector: np.ndarray
    value: float | None        # x(z) for points, None for rays
    at: np.ndarray

    @property
    def is_ray(self) -> bool:
        return self.kind == "ray"


def dual_subproblem_lp(p: MixedBinaryProgram, z) -> LinearProgram:
    rhs = p.b - p.A @ np.asarray(z, dtype=float)
    return LinearProgram(Sense.MIN, rhs, p.B.T, [">="] * p.n_y, p.c)


def solve_dual_subproblem(p: MixedBinaryProgram, z, tol: ToleranceSet = DEFAULT_TOL) -> DualOutcome:
    """``x(z) = min lam @ (b - A z)  s.t.  B^T lam >= c, lam >= 0``."""
    z = np.asarray(z, dtype=float)
    sol = solve_lp(dual_subproblem_lp(p, z), tol)
    if sol.status is Status.OPTIMAL:
        return DualOutcome("point", sol.x, sol.objective, z)
    if sol.status is Status.UNBOUNDED:
        return DualOutcome("ray", sol.ray, None, z)
    raise DualInfeasible("dual subproblem infeasible: the continuous objective is unbounded")


def solve_pareto_subproblem(p: MixedBinaryProgram, core: "CorePointState",
                            tol: ToleranceSet = DEFAULT_TOL) -> DualOutcome:
    """Dual subproblem evaluated at the (possibly fractional) core point."""
    return solve_dual_subproblem(p, core.point, tol)


# ---------------------------------------------------------------------------
# cut pool


@dataclass
class Cut:
    kind: str                  # "opt" or "feas"
    vector: np.ndarray
    const: float
    coef: np.ndarray
    iteration: int
    active: bool = True

    def value(self, z) -> float:
        return self.const - float(self.coef @ np.asarray(z, dtype=float))


class CutPool:
    """Extreme points (optimality cuts) and extreme rays (feasibility cuts)."""

    def __init__(self, p: MixedBinaryProgram, dup_tol: float = 1e-9, cone_tol: float = 1e-7):
        self.p = p
        self.optimality: list[Cut] = []
        self.feasibility: list[Cut] = []
        self.dup_tol = dup_tol
        self.cone_tol = cone_tol

    def __len__(self):
        return len(self.optimality) + len(self.feasibility)

    @property
    def active_optimality(self) -> list[Cut]:
        return [c for c in self.optimality if c.active]

    @property
    def active_feasibility(self) -> list[Cut]:
        return [c for c in self.feasibility if c.active]

    def add(self, outcome: DualOutcome, iteration: int) -> Cut | None:
        """Store the cut derived from ``outcome``; returns None for duplicates."""
        v = np.asarray(outcome.vector, dtype=float)
        if outcome.is_ray:
            if v.min(initial=0.0) < -self.cone_tol or (self.p.B.T @ v).min(initial=0.0) < -self.cone_tol:
                raise BendersError("ray outside the dual recession cone")
            bucket, kind = self.feasibility, "feas"
        else:
            bucket, kind = self.optimality, "opt"
        for old in bucket:
            if np.all(np.abs(old.vector - v) <= self.dup_tol):
                if not old.active:
                    old.active = True
                    old.iteration = iteration
                    return old
                return None
        cut = Cut(kind, v, float(v @ self.p.b), self.p.A.T @ v, iteration)
        bucket.append(cut)
        return cut

    def prune(self, window: int, iteration: int) -> bool:
        """Deactivate cuts created more than ``window`` iterations ago."""
        if window <= 0:
            return False
        changed = False
        for cut in self.optimality + self.feasibility:
            if cut.active and iteration - cut.iteration >= window:
                cut.active = False
                changed = True
        return changed


# ---------------------------------------------------------------------------
# core point


@dataclass
class CorePointState:
    point: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        if np.any(self.point < 0) or np.any(self.point > 1):
            raise ValueError("core point components must lie in [0, 1]")


def update_core_point(state: CorePointState, z_prev) -> CorePointState:
    z_prev = np.asarray(z_prev, dtype=float)
    return CorePointState(0.5 * state.point + 0.5 * z_prev, state.history + [z_prev.copy()])


# ---------------------------------------------------------------------------
# configuration and logging


@dataclass
class BendersConfig:
    eps: float = 1e-3
    R: int = 1
    rho: float = 1.0
    max_iterations: int = 500
    core_point_seed: np.ndarray | None = None
    master: str = "exact"          # "exact" or "qubo"
    sampler: str = "exact"         # QUBO backend: "sa" or "exact"
    cut_window: int = 0
    acc_bits: int | None = None
    slack_bits: int | None = None
    penalty: float | None = None
    reads: int = 64
    sweeps: int = 2000
    seed: int = 0
    workers: int = 4
    feas_tol: float = 1e-7
    tol: ToleranceSet = DEFAULT_TOL

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.master not in ("exact", "qubo"):
            raise ValueError(f"unknown master backend {self.master!r}")
        if self.sampler not in ("exact", "sa"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


CSV_HEADER = ["iter", "lb", "ub", "gap", "opt_cuts", "feas_cuts", "sp_status", "master_backend",
              "master_ms", "sp_ms", "best_energy"]


@dataclass
class IterationRecord:
    iter: int
    lb: float
    ub: float
    gap: float
    opt_cuts: int
    feas_cuts: int
    sp_status: str
    master_backend: str
    master_ms: float
    sp_ms: float
    best_energy: float | None = None


@dataclass
class ConvergenceLog:
    records: list = field(default_factory=list)

    def append(self, rec: IterationRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_csv(self, timing: bool = True) -> str:
        """CSV text; with ``timing=False`` the wall-clock columns are left empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([
                r.iter, repr(r.lb), repr(r.ub), repr(r.gap), r.opt_cuts, r.feas_cuts, r.sp_status,
                r.master_backend,
                f"{r.master_ms:.3f}" if timing else "", f"{r.sp_ms:.3f}" if timing else "",
                "" if r.best_energy is None else repr(r.best_energy),
            ])
        return buf.getvalue()

    def write_csv(self, path, timing: bool = True):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv(timing))


# ---------------------------------------------------------------------------
# exact master


def affine_table(coef) -> np.ndarray:
    """``coef @ z`` for every binary z, indexed lexicographically (z[0] most significant)."""
    v = np.zeros(1)
    for cj in reversed(np.asarray(coef, dtype=float)):
        v = np.concatenate([v, v + cj])
    return v


def index_to_z(k: int, n: int) -> np.ndarray:
    return np.array([(k >> (n - 1 - j)) & 1 for j in range(n)], dtype=float)


def z_to_index(z) -> int:
    k = 0
    for v in z:
        k = (k << 1) | int(round(v))
    return k


def hamming_coefficients(z_prev):
    """Linear form of H(z, z') = sum z_j (1 - 2 z'_j) + z'_j for constant z'."""
    z_prev = np.asarray(z_prev, dtype=float)
    return 1.0 - 2.0 * z_prev, float(z_prev.sum())


@dataclass
class MasterResult:
    z: np.ndarray                 # regularized argmax
    s: float
    ub: float                     # max over z of i@z + s(z), no Hamming term
    objective: float              # regularized objective at z
    candidates: list = field(default_factory=list)
    z_ub: np.ndarray | None = None
    energy: float | None = None


class ExactMaster:
    """Enumerative master over all 2^n_z assignments with incremental cut tables."""

    def __init__(self, p: MixedBinaryProgram, s_max: float, feas_tol: float = 1e-7, limit: int = 20):
        if p.n_z > limit:
            raise BendersError(f"exact master enumerates at most 2^{limit} assignments, got n_z={p.n_z}")
        self.p = p
        self.n = p.n_z
        self.s_max = float(s_max)
        self.feas_tol = feas_tol
        self.base = affine_table(p.i)
        self.reset()

    def reset(self):
        self.s = np.full(self.base.size, self.s_max)
        self.feasible = np.ones(self.base.size, dtype=bool)
        self.n_opt = self.n_feas = 0

    def add(self, cut: Cut):
        vals = cut.const - affine_table(cut.coef)
        if cut.kind == "opt":
            np.minimum(self.s, vals, out=self.s)
            self.n_opt += 1
        else:
            self.feasible &= vals >= -self.feas_tol
            self.n_feas += 1

    def rebuild(self, pool: CutPool):
        self.reset()
        for cut in pool.active_optimality + pool.active_feasibility:
            self.add(cut)

    def theta(self) -> np.ndarray:
        return np.where(self.feasible, self.base + self.s, -np.inf)

    def value_at(self, z) -> float:
        k = z_to_index(z)
        return float(self.base[k] + self.s[k]) if self.feasible[k] else -np.inf

    def solve(self, z_prev, rho: float = 0.0, R: int = 1) -> MasterResult:
        if not self.feasible.any():
            raise MasterInfeasible("feasibility cuts exclude every binary assignment")
        theta = self.theta()
        k_ub = int(np.argmax(theta))
        ub = float(theta[k_ub])
        if rho:
            hc, h0 = hamming_coefficients(z_prev)
            reg = theta + rho * (affine_table(hc) + h0)
        else:
            reg = theta
        order = _top_indices(reg, R)
        k = order[0]
        return MasterResult(
            z=index_to_z(k, self.n), s=float(self.s[k]), ub=ub, objective=float(reg[k]),
            candidates=[index_to_z(j, self.n) for j in order], z_ub=index_to_z(k_ub, self.n),
        )


def _top_indices(score: np.ndarray, R: int) -> list:
    """Indices of the R largest finite scores; ties go to the smaller index."""
    finite = np.isfinite(score)
    n_fin = int(finite.sum())
    R = min(R, n_fin)
    if R == 1:
        return [int(np.argmax(score))]
    thresh = np.partition(score[finite], n_fin - R)[n_fin - R]
    idx = np.flatnonzero(score >= thresh)
    idx = idx[np.argsort(-score[idx], kind="stable")]
    return [int(j) for j in idx[:R]]


def solve_master_exact(pool: CutPool, p: MixedBinaryProgram, cfg: BendersConfig, z_prev,
                       s_max: float | None = None, rho: float | None = None, R: int = 1) -> MasterResult:
    """Exact argmax of ``i@z + s + rho*H(z, z_prev)`` under the pool's active cuts."""
    if s_max is None:
        s_max = default_s_max(p, cfg)
    m = ExactMaster(p, s_max, cfg.feas_tol)
    m.rebuild(pool)
    return m.solve(np.zeros(p.n_z) if z_prev is None else z_prev, cfg.rho if rho is None else rho, R)


def default_s_max(p: MixedBinaryProgram, cfg: BendersConfig) -> float:
    from .qubo import s_bits

    a = cfg.acc_bits if cfg.acc_bits is not None else s_bits(p, cfg.tol)
    return float(2 ** (a + 1))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class BendersResult:
    z: np.ndarray | None
    y: np.ndarray | None
    objective: float | None
    log: ConvergenceLog
    converged: bool
    iterations: int
    lb: float
    ub: float
    pool: CutPool | None = None
    sp_ms: float = 0.0
    master_ms: float = 0.0
    incumbents: list = field(default_factory=list)   # every z that raised the lower bound, in order


class _QuboMaster:
    """Master solved by compiling to a QUBO and sampling it."""

    def __init__(self, p, cfg, s_max, acc_bits):
        self.p, self.cfg, self.s_max, self.acc_bits = p, cfg, s_max, acc_bits
        self.calls = 0

    def solve(self, pool, z_prev, rho, R):
        from . import qubo, sampler

        cfg = self.cfg
        layout = qubo.compute_bit_widths(self.p, pool, cfg.tol, acc_bits=self.acc_bits,
                                         slack_bits=cfg.slack_bits)
        q = qubo.compile_master_to_qubo(pool, self.p, rho, z_prev, layout, penalty=cfg.penalty)
        if cfg.sampler == "exact":
            ss = sampler.sample_exact(q, k=max(16, 4 * R))
        else:
            sched = sampler.AnnealSchedule(reads=cfg.reads, sweeps=cfg.sweeps,
                                           seed=_derive_seed(cfg.seed, self.calls))
            ss = sampler.sample_sa(q, sched)
        self.calls += 1
        cands = sampler.top_r_feasible(ss, layout, R, q.cuts)
        values = [_exact_value(pool, self.p, c.z, self.s_max, cfg.feas_tol) for c in cands]
        best = cands[0]
        return MasterResult(z=best.z, s=best.s, ub=max(values), objective=-ss.samples[0].energy,
                            candidates=[c.z for c in cands], z_ub=None, energy=ss.samples[0].energy)


def _derive_seed(seed: int, counter: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5A, counter]).generate_state(1)[0])


def _exact_value(pool, p, z, s_max, feas_tol) -> float:
    if any(c.value(z) < -feas_tol for c in pool.active_feasibility):
        return -np.inf
    s = min([s_max] + [c.value(z) for c in pool.active_optimality])
    return float(p.i @ z + s)


def _next_candidates(res: MasterResult, evaluated: dict) -> list:
    nxt = []
    for z in res.candidates:
        key = tuple(int(v) for v in z)
        if key not in evaluated and all(key != tuple(int(v) for v in w) for w in nxt):
            nxt.append(z)
    if not nxt and res.z_ub is not None and tuple(int(v) for v in res.z_ub) not in evaluated:
        nxt = [res.z_ub]
    return nxt


#: largest n_z for which a sampled master's stopping bound is checked by enumeration
CERTIFY_LIMIT = 20


def run(p: MixedBinaryProgram, cfg: BendersConfig | None = None,
        method: Method | str = Method.METHOD1) -> BendersResult:
    cfg = cfg or BendersConfig()
    method = Method(method)
    tol = cfg.tol
    pareto = method is Method.METHOD1
    rho = cfg.rho if method in (Method.METHOD1, Method.METHOD2) else 0.0
    R = cfg.R if method is Method.METHOD2 else 1

    from .qubo import s_bits

    acc = cfg.acc_bits if cfg.acc_bits is not None else s_bits(p, tol)
    s_max = float(2 ** (acc + 1))
    pool = CutPool(p)
    if cfg.master == "exact":
        master = ExactMaster(p, s_max, cfg.feas_tol)
    else:
        master = _QuboMaster(p, cfg, s_max, acc)

    seed_pt = np.full(p.n_z, 0.5) if cfg.core_point_seed is None else cfg.core_point_seed
    core = CorePointState(seed_pt)
    log = ConvergenceLog()
    lb, ub = -np.inf, np.inf
    incumbent = None
    history = []
    evaluated = {}
    candidates = [np.zeros(p.n_z)]
    converged = False
    sp_total = master_total = 0.0
    certifier = None
    uncertified_warned = False
    executor = ThreadPoolExecutor(max_workers=max(1, min(cfg.workers, R))) if R > 1 else None
    n = 0
    try:
        for n in range(1, cfg.max_iterations + 1):
            t0 = time.perf_counter()
            if executor is not None and len(candidates) > 1:
                outcomes = list(executor.map(lambda z: solve_dual_subproblem(p, z, tol), candidates))
            else:
                outcomes = [solve_dual_subproblem(p, z, tol) for z in candidates]
            statuses = []
            new_cuts = []
            for z, out in zip(candidates, outcomes):
                key = tuple(int(v) for v in z)
                if out.is_ray:
                    evaluated[key] = None
                    statuses.append("infeasible")
                else:
                    val = float(p.i @ z) + out.value
                    evaluated[key] = val
                    statuses.append("optimal")
                    if val > lb + 1e-12 or incumbent is None and val >= lb:
                        lb = val
                        incumbent = z.copy()
                        history.append(incumbent)
                new_cuts.append(pool.add(out, n))
            z_last = candidates[0]
            if pareto:
                core = update_core_point(core, z_last)
                new_cuts.append(pool.add(solve_pareto_subproblem(p, core, tol), n))
            sp_ms = (time.perf_counter() - t0) * 1e3

            t1 = time.perf_counter()
            if isinstance(master, ExactMaster):
                if pool.prune(cfg.cut_window, n):
                    master.rebuild(pool)
                else:
                    for cut in new_cuts:
                        if cut is not None:
                            master.add(cut)
                res = master.solve(z_last, rho, R)
            else:
                pool.prune(cfg.cut_window, n)
                res = master.solve(pool, z_last, rho, R)
            backend = cfg.master
            nxt = _next_candidates(res, evaluated)
            if not isinstance(master, ExactMaster) and (res.ub - lb <= cfg.eps or not nxt):
                # a sampled master gives no valid bound; confirm the stop against enumeration
                if certifier is None and p.n_z <= CERTIFY_LIMIT:
                    certifier = ExactMaster(p, s_max, cfg.feas_tol, limit=CERTIFY_LIMIT)
                if certifier is not None:
                    certifier.rebuild(pool)
                    res = certifier.solve(z_last, rho, R)
                    nxt = _next_candidates(res, evaluated)
                    backend = cfg.master + "+exact"
                elif not uncertified_warned:
                    uncertified_warned = True
                    _log.warning("n_z=%d is too large to certify the sampled master bound", p.n_z)
            ub = res.ub
            master_ms = (time.perf_counter() - t1) * 1e3
            sp_total += sp_ms
            master_total += master_ms

            gap = ub - lb
            log.append(IterationRecord(
                n, lb + p.offset, ub + p.offset, gap, len(pool.active_optimality),
                len(pool.active_feasibility), ";".join(statuses), backend, master_ms, sp_ms,
                res.energy,
            ))
            if abs(gap) <= cfg.eps or gap < 0:
                converged = True
                break
            if not nxt:
                break
            candidates = nxt
    finally:
        if executor is not None:
            executor.shutdown()

    y = None
    objective = None
    if incumbent is not None:
        sol = solve_lp(p.subproblem(incumbent), tol)
        y = sol.x
        objective = float(p.i @ incumbent) + sol.objective + p.offset
    return BendersResult(incumbent, y, objective, log, converged, n, lb + p.offset, ub + p.offset,
                         pool, sp_total, master_total, history)
