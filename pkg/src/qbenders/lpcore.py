"""Dense two-phase revised simplex.

Every LP the decomposition needs (primal subproblems, dual subproblems, bounding
problems, relaxations in branch and bound) goes through :func:`solve_lp`.  The
solver works on a dense standard form built internally from a general
:class:`LinearProgram`, keeps an explicit basis inverse updated by elementary
pivots and refactorized every ``refactor_every`` pivots, and uses Bland's rule
in both phases.

Sign conventions of the reported multipliers:

* ``dual[i]`` is the shadow price of row ``i``, i.e. the derivative of the
  optimal objective (in the LP's own sense) with respect to ``b[i]``.
* for ``Infeasible`` the ``ray`` holds Farkas multipliers ``r`` over the rows
  with ``r[i] >= 0`` on ``<=`` rows and ``r[i] <= 0`` on ``>=`` rows, such that
  ``min_{lb <= x <= ub} r @ A @ x > r @ b``.
* for ``Unbounded`` the ``ray`` is a direction ``d`` in variable space that
  keeps every row and bound satisfied and strictly improves the objective,
  scaled to unit infinity-norm.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class LpError(Exception):
    """Base class for LP engine errors."""


class DimensionMismatch(LpError):
    pass


class NumericalBreakdown(LpError):
    """Basis became too ill-conditioned to trust; rescale the problem."""


class UnsupportedForm(LpError):
    pass


class Sense(str, enum.Enum):
    MIN = "min"
    MAX = "max"


class Rel(str, enum.Enum):
    LE = "<="
    GE = ">="
    EQ = "="


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass(frozen=True)
class ToleranceSet:
    feas_tol: float = 1e-7
    duality_tol: float = 1e-6
    pivot_tol: float = 1e-9
    max_condition: float = 1e12
    refactor_every: int = 50
    max_pivots: int = 50_000


DEFAULT_TOL = ToleranceSet()


@dataclass
class LinearProgram:
    sense: Sense
    c: np.ndarray
    A: np.ndarray
    rel: list
    b: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.sense = Sense(self.sense)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n) if n else np.zeros((len(self.rel), 0))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.rel = [Rel(r) for r in self.rel]
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1)
        m = self.A.shape[0]
        if self.b.size != m or len(self.rel) != m:
            raise DimensionMismatch(f"{m} matrix rows, {self.b.size} rhs entries, {len(self.rel)} relations")
        if self.lb.size != n or self.ub.size != n:
            raise DimensionMismatch(f"{n} columns but {self.lb.size}/{self.ub.size} bounds")
        for name, arr in (("objective", self.c), ("matrix", self.A), ("rhs", self.b)):
            if not np.all(np.isfinite(arr)):
                raise DimensionMismatch(f"non-finite entry in {name}")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)) or np.any(self.lb == np.inf) or np.any(self.ub == -np.inf):
            raise DimensionMismatch("invalid variable bounds")

    @property
    def shape(self):
        return self.A.shape


@dataclass
class LpSolution:
    status: Status
    x: np.ndarray | None
    dual: np.ndarray | None
    objective: float
    ray: np.ndarray | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


# ---------------------------------------------------------------------------
# standard form


@dataclass
class _StdForm:
    A: np.ndarray          # m_std x n_std, b >= 0 after row flips
    b: np.ndarray
    c: np.ndarray          # min-sense costs
    flip: np.ndarray       # +1/-1 per std row
    n_struct: int          # structural columns (before slacks)
    slack_col: list        # per std row: slack column index or -1
    # reconstruction: x_orig = offset + T @ x_struct
    T: np.ndarray
    offset: np.ndarray
    obj_const: float
    n_orig_rows: int
    sign: float            # +1 for min, -1 for max
    bound_rows: list = field(default_factory=list)  # (std row, orig col) of implied upper bounds


def _standardize(lp: LinearProgram) -> _StdForm:
    m, n = lp.A.shape
    sign = 1.0 if lp.sense is Sense.MIN else -1.0
    cols = []          # (orig var, coefficient +1/-1)
    offset = np.zeros(n)
    extra_rows = []    # (struct col, upper limit)
    for j in range(n):
        lo, hi = lp.lb[j], lp.ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ns = len(cols)
    T = np.zeros((n, ns))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    A_struct = lp.A @ T
    b_rows = lp.b - lp.A @ offset
    rels = list(lp.rel)
    rows = [A_struct[i] for i in range(m)]
    rhs = list(b_rows)
    bound_rows = []
    for k, lim in extra_rows:
        row = np.zeros(ns)
        row[k] = 1.0
        bound_rows.append((len(rows), cols[k][0]))
        rows.append(row)
        rhs.append(lim)
        rels.append(Rel.LE)
    m_std = len(rows)
    n_slack = sum(1 for r in rels if r is not Rel.EQ)
    A = np.zeros((m_std, ns + n_slack))
    if m_std:
        A[:, :ns] = np.array(rows)
    slack_col = []
    k = ns
    for i, r in enumerate(rels):
        if r is Rel.EQ:
            slack_col.append(-1)
            continue
        A[i, k] = 1.0 if r is Rel.LE else -1.0
        slack_col.append(k)
        k += 1
    b = np.array(rhs, dtype=float)
    flip = np.where(b < 0, -1.0, 1.0)
    A *= flip[:, None]
    b *= flip
    c = np.zeros(ns + n_slack)
    c[:ns] = sign * (lp.c @ T)
    return _StdForm(A=A, b=b, c=c, flip=flip, n_struct=ns, slack_col=slack_col, T=T,
                    offset=offset, obj_const=sign * float(lp.c @ offset), n_orig_rows=m,
                    sign=sign, bound_rows=bound_rows)


# ---------------------------------------------------------------------------
# revised simplex core


class _Basis:
    """Explicit basis inverse with pivot updates and periodic refactorization."""

    def __init__(self, A, basis, tol):
        self.A = A
        self.basis = list(basis)
        self.tol = tol
        self.since_refactor = 0
        self.refactor()

    def refactor(self):
        Bm = self.A[:, self.basis]
        if Bm.size:
            try:
                inv = np.linalg.inv(Bm)
            except np.linalg.LinAlgError as exc:
                raise NumericalBreakdown("singular basis") from exc
            cond = np.abs(Bm).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
            if not np.isfinite(cond) or cond > self.tol.max_condition:
                raise NumericalBreakdown(f"basis condition estimate {cond:.3g}")
            self.inv = inv
        else:
            self.inv = np.zeros((0, 0))
        self.since_refactor = 0

    def ftran(self, col):
        return self.inv @ col

    def pivot(self, row, entering, d):
        piv = d[row]
        e = self.inv[row] / piv
        self.inv -= np.outer(d, e)
        self.inv[row] = e
        self.basis[row] = entering
        self.since_refactor += 1
        if self.since_refactor >= self.tol.refactor_every:
            self.refactor()


def _simplex(A, b, c, basis: _Basis, allowed: np.ndarray, tol: ToleranceSet, counter: list):
    """Minimize c @ x over {A x = b, x >= 0} from a feasible basis.

    Returns ("optimal", None) or ("unbounded", (entering, d)).
    """
    m = A.shape[0]
    while True:
        if counter[0] >= tol.max_pivots:
            raise NumericalBreakdown("pivot limit reached")
        xB = basis.ftran(b)
        y = c[basis.basis] @ basis.inv
        red = c - y @ A
        red[basis.basis] = 0.0
        cand = np.flatnonzero((red < -tol.pivot_tol) & allowed)
        if cand.size == 0:
            return "optimal", None
        q = int(cand[0])
        d = basis.ftran(A[:, q])
        pos = d > tol.pivot_tol
        if not np.any(pos):
            return "unbounded", (q, d)
        ratios = np.full(m, np.inf)
        ratios[pos] = np.maximum(xB[pos], 0.0) / d[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol.pivot_tol * max(1.0, abs(best)))
        # Bland: among ties leave the basic variable with the lowest index
        r = int(min(ties, key=lambda i: basis.basis[i]))
        basis.pivot(r, q, d)
        counter[0] += 1


def solve_lp(lp: LinearProgram, tol: ToleranceSet = DEFAULT_TOL) -> LpSolution:
    """Solve ``lp`` and classify it as Optimal, Infeasible or Unbounded."""
    if not isinstance(lp, LinearProgram):
        raise DimensionMismatch("expected a LinearProgram")
    sf = _standardize(lp)
    A, b = sf.A, sf.b
    m, n = A.shape
    counter = [0]

    # phase 1: slack columns that are +1 after the row flip start in the basis
    basis = []
    art_rows = []
    for i in range(m):
        k = sf.slack_col[i]
        if k >= 0 and A[i, k] == 1.0:
            basis.append(k)
        else:
            basis.append(-1)
            art_rows.append(i)
    n_art = len(art_rows)
    if n_art:
        A1 = np.hstack([A, np.zeros((m, n_art))])
        for a, i in enumerate(art_rows):
            A1[i, n + a] = 1.0
            basis[i] = n + a
        c1 = np.zeros(n + n_art)
        c1[n:] = 1.0
        bas = _Basis(A1, basis, tol)
        allowed = np.ones(n + n_art, dtype=bool)
        _simplex(A1, b, c1, bas, allowed, tol, counter)
        xB = bas.ftran(b)
        infeas = float(c1[bas.basis] @ xB)
        if infeas > tol.feas_tol:
            y1 = c1[bas.basis] @ bas.inv
            return _infeasible(sf, y1, lp, counter[0])
        # drive zero-level artificials out of the basis where possible
        for r in range(m):
            if bas.basis[r] < n:
                continue
            row = bas.inv[r] @ A
            row[[k for k in bas.basis if k < n]] = 0.0
            cand = np.flatnonzero(np.abs(row) > 1e-7)
            if cand.size:
                q = int(cand[0])
                bas.pivot(r, q, bas.ftran(A1[:, q]))
                counter[0] += 1
        A2 = A1
        c2 = np.concatenate([sf.c, np.zeros(n_art)])
        allowed = np.concatenate([np.ones(n, dtype=bool), np.zeros(n_art, dtype=bool)])
    else:
        A2, c2 = A, sf.c
        bas = _Basis(A2, basis, tol)
        allowed = np.ones(n, dtype=bool)

    state, info = _simplex(A2, b, c2, bas, allowed, tol, counter)
    if state == "unbounded":
        q, d = info
        direction = np.zeros(A2.shape[1])
        direction[q] = 1.0
        direction[bas.basis] -= d
        ray = sf.T @ direction[: sf.n_struct]
        scale = np.abs(ray).max()
        ray = ray / scale if scale > 0 else ray
        obj = np.inf if lp.sense is Sense.MAX else -np.inf
        return LpSolution(Status.UNBOUNDED, None, None, obj, ray=ray, iterations=counter[0])

    xs = np.zeros(A2.shape[1])
    xs[bas.basis] = bas.ftran(b)
    xs = np.maximum(xs, 0.0)
    x = sf.offset + sf.T @ xs[: sf.n_struct]
    y = c2[bas.basis] @ bas.inv
    # shadow prices in the LP's own sense
    dual = sf.sign * y[: sf.n_orig_rows] * sf.flip[: sf.n_orig_rows]
    obj = float(lp.c @ x)
    return LpSolution(Status.OPTIMAL, x, dual, obj, iterations=counter[0])


def _infeasible(sf: _StdForm, y1: np.ndarray, lp: LinearProgram, iters: int) -> LpSolution:
    # phase-1 multipliers satisfy y1 @ A_std <= 0 and y1 @ b_std > 0
    ray = -(y1 * sf.flip)[: sf.n_orig_rows]
    for i, r in enumerate(lp.rel):
        # clean roundoff on the sign-constrained components
        if r is Rel.LE and ray[i] < 0:
            ray[i] = 0.0 if ray[i] > -1e-9 else ray[i]
        elif r is Rel.GE and ray[i] > 0:
            ray[i] = 0.0 if ray[i] < 1e-9 else ray[i]
    nrm = np.abs(ray).max() if ray.size else 0.0
    if nrm > 0:
        ray = ray / nrm
    return LpSolution(Status.INFEASIBLE, None, None, np.nan, ray=ray, iterations=iters)


# ---------------------------------------------------------------------------
# helpers


def farkas_gap(lp: LinearProgram, ray: np.ndarray, zero_tol: float = 1e-9) -> float:
    """``min_{lb<=x<=ub} r@A@x - r@b``; positive means ``ray`` proves infeasibility."""
    g = ray @ lp.A
    g[np.abs(g) <= zero_tol] = 0.0
    lo = np.where(g > 0, lp.lb, lp.ub)
    with np.errstate(invalid="ignore"):
        terms = np.where(g == 0, 0.0, g * lo)
    return float(terms.sum() - ray @ lp.b)


def primal_residual(lp: LinearProgram, x: np.ndarray) -> float:
    """Largest violation of any row or bound at ``x``."""
    ax = lp.A @ x - lp.b
    viol = [0.0]
    for i, r in enumerate(lp.rel):
        if r is Rel.LE:
            viol.append(ax[i])
        elif r is Rel.GE:
            viol.append(-ax[i])
        else:
            viol.append(abs(ax[i]))
    viol.extend(lp.lb - x)
    viol.extend(x - lp.ub)
    return float(max(viol))


def dual_of(lp: LinearProgram) -> LinearProgram:
    """Symmetric LP dual.

    ``max c@y s.t. B y <= b, y >= 0`` maps to ``min b@lam s.t. B^T lam >= c,
    lam >= 0`` and back, so applying it twice returns the original program.
    """
    if np.any(lp.lb != 0) or np.any(np.isfinite(lp.ub)):
        raise UnsupportedForm("dual_of expects nonnegative variables with no other bounds")
    if lp.sense is Sense.MAX:
        want, sense, rel = Rel.LE, Sense.MIN, Rel.GE
    else:
        want, sense, rel = Rel.GE, Sense.MAX, Rel.LE
    if any(r is not want for r in lp.rel):
        raise UnsupportedForm(f"{lp.sense.value}-sense dual_of expects {want.value} rows only; split equalities first")
    m, n = lp.A.shape
    return LinearProgram(sense, lp.b.copy(), lp.A.T.copy(), [rel] * n, lp.c.copy(),
                         np.zeros(m), np.full(m, np.inf))
