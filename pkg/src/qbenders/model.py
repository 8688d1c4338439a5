"""Mixed binary programs in the ``max i@z + c@y, A z + B y <= b, y >= 0`` shape.

A :class:`ModelSource` is what builders emit: named variables with arbitrary
bounds, rows with any relation and a provenance tag.  :func:`compile` turns a
source into a :class:`MixedBinaryProgram` and records how every source
variable is recovered from the compiled columns.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lpcore import DEFAULT_TOL, LinearProgram, Sense, Status, ToleranceSet, solve_lp


class ModelError(Exception):
    pass


class NonlinearTerm(ModelError):
    pass


class UnboundedFreeVariable(ModelError):
    pass


class UnusedBinary(ModelError):
    pass


class TooManyBinaries(ModelError):
    pass


class InfeasibleProblem(ModelError):
    pass


class UnboundedProblem(ModelError):
    pass


# ---------------------------------------------------------------------------
# source form


@dataclass
class Variable:
    name: str
    binary: bool = False
    lb: float = 0.0
    ub: float = math.inf


@dataclass
class Row:
    coeffs: dict
    rel: str
    rhs: float
    tag: str

    def __post_init__(self):
        if self.rel not in ("<=", ">=", "="):
            raise ModelError(f"row {self.tag!r}: unknown relation {self.rel!r}")
        if not self.tag:
            raise ModelError("every row needs a provenance tag")


@dataclass
class ModelSource:
    variables: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    sense: str = "max"
    objective_constant: float = 0.0
    name: str = ""

    def var(self, name, binary=False, lb=0.0, ub=math.inf):
        if binary:
            lb, ub = 0.0, 1.0
        self.variables.append(Variable(name, binary, float(lb), float(ub)))
        return name

    def add(self, coeffs, rel, rhs, tag):
        self.rows.append(Row(dict(coeffs), rel, float(rhs), tag))


# ---------------------------------------------------------------------------
# compiled form


@dataclass
class MixedBinaryProgram:
    i: np.ndarray
    c: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    z_names: list
    y_names: list
    offset: float = 0.0
    row_tags: list | None = None
    source_map: dict | None = None
    sense_sign: float = 1.0

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = self.b.size
        self.A = np.asarray(self.A, dtype=float).reshape(m, self.i.size)
        self.B = np.asarray(self.B, dtype=float).reshape(m, self.c.size)
        if len(self.z_names) != self.n_z or len(self.y_names) != self.n_y:
            raise ModelError("name table does not match column counts")
        if self.row_tags is None:
            self.row_tags = [f"row{k}" for k in range(m)]
        unused = [self.z_names[j] for j in range(self.n_z) if self.i[j] == 0 and not np.any(self.A[:, j])]
        if unused:
            raise UnusedBinary(f"binaries appear in neither objective nor constraints: {unused}")

    @property
    def n_z(self) -> int:
        return self.i.size

    @property
    def n_y(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.b.size

    def subproblem(self, z) -> LinearProgram:
        """Primal subproblem ``max c@y s.t. B y <= b - A z, y >= 0``."""
        rhs = self.b - self.A @ np.asarray(z, dtype=float)
        return LinearProgram(Sense.MAX, self.c, self.B, ["<="] * self.n_rows, rhs)

    def objective_value(self, z, y) -> float:
        return float(self.i @ np.asarray(z, float) + self.c @ np.asarray(y, float) + self.offset)

    def max_violation(self, z, y) -> float:
        r = self.A @ np.asarray(z, float) + self.B @ np.asarray(y, float) - self.b
        return float(max(r.max(initial=0.0), (-np.asarray(y, float)).max(initial=0.0)))

    def recover(self, y) -> dict:
        """Source-variable values for compiled continuous values ``y``."""
        if self.source_map is None:
            return {n: float(v) for n, v in zip(self.y_names, y)}
        out = {}
        for name, (kind, a, b) in self.source_map.items():
            if kind == "shift":
                out[name] = b + y[a]
            elif kind == "mirror":
                out[name] = b - y[a]
            elif kind == "split":
                out[name] = y[a] - y[b]
            else:
                out[name] = b
        return {k: float(v) for k, v in out.items()}

    # interchange -----------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "n_z": self.n_z, "n_y": self.n_y,
            "i": self.i.tolist(), "c": self.c.tolist(),
            "A": self.A.tolist(), "B": self.B.tolist(), "b": self.b.tolist(),
            "names": list(self.z_names) + list(self.y_names),
            "offset": self.offset,
            "row_tags": list(self.row_tags),
            "source_sense": "max" if self.sense_sign > 0 else "min",
        }
        if self.source_map is not None:
            d["source_map"] = {k: list(v) for k, v in self.source_map.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixedBinaryProgram":
        n_z, n_y = int(d["n_z"]), int(d["n_y"])
        names = list(d["names"])
        if len(names) != n_z + n_y:
            raise ModelError("names must list binaries then continuous variables")
        m = len(d["b"])
        smap = d.get("source_map")
        return cls(
            i=d["i"], c=d["c"],
            A=np.array(d["A"], dtype=float).reshape(m, n_z),
            B=np.array(d["B"], dtype=float).reshape(m, n_y),
            b=d["b"], z_names=names[:n_z], y_names=names[n_z:],
            offset=float(d.get("offset", 0.0)), row_tags=d.get("row_tags"),
            source_map=None if smap is None else {k: tuple(v) for k, v in smap.items()},
            sense_sign=1.0 if d.get("source_sense", "max") == "max" else -1.0,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "MixedBinaryProgram":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ModelError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        return cls.from_dict(d)

    def to_source(self) -> ModelSource:
        src = ModelSource(sense="max", objective_constant=self.offset)
        for n in self.z_names:
            src.var(n, binary=True)
        for n in self.y_names:
            src.var(n)
        for j, n in enumerate(self.z_names):
            if self.i[j]:
                src.objective[n] = float(self.i[j])
        for j, n in enumerate(self.y_names):
            if self.c[j]:
                src.objective[n] = float(self.c[j])
        for r in range(self.n_rows):
            coeffs = {n: float(self.A[r, j]) for j, n in enumerate(self.z_names) if self.A[r, j]}
            coeffs.update({n: float(self.B[r, j]) for j, n in enumerate(self.y_names) if self.B[r, j]})
            src.add(coeffs, "<=", self.b[r], self.row_tags[r])
        return src


# ---------------------------------------------------------------------------
# compiler


def compile(source: ModelSource) -> MixedBinaryProgram:  # noqa: A001 - public name
    """Normalize ``source`` into the binary/continuous ``<=`` form."""
    if source.sense not in ("max", "min"):
        raise ModelError(f"unknown sense {source.sense!r}")
    sign = 1.0 if source.sense == "max" else -1.0
    names = [v.name for v in source.variables]
    if len(set(names)) != len(names):
        raise ModelError("duplicate variable names")
    by_name = {v.name: v for v in source.variables}
    used = set()
    for row in source.rows:
        for key in row.coeffs:
            if isinstance(key, tuple):
                raise NonlinearTerm(f"row {row.tag!r} has product term {key}; linearize it first")
            if key not in by_name:
                raise ModelError(f"row {row.tag!r} references unknown variable {key!r}")
            if row.coeffs[key]:
                used.add(key)
    for key in source.objective:
        if isinstance(key, tuple):
            raise NonlinearTerm(f"objective has product term {key}")
        if key not in by_name:
            raise ModelError(f"objective references unknown variable {key!r}")

    z_names = [v.name for v in source.variables if v.binary]
    zidx = {n: k for k, n in enumerate(z_names)}
    y_names = []
    # per continuous source var: list of (column, coefficient) and constant
    expr = {}
    smap = {}
    bound_rows = []
    for v in source.variables:
        if v.binary:
            continue
        lo, hi = v.lb, v.ub
        if lo > hi:
            raise ModelError(f"variable {v.name!r} has empty bounds [{lo}, {hi}]")
        if math.isfinite(lo) and lo == hi:
            expr[v.name] = ([], lo)
            smap[v.name] = ("fixed", -1, lo)
        elif math.isfinite(lo):
            col = len(y_names)
            y_names.append(v.name)
            expr[v.name] = ([(col, 1.0)], lo)
            smap[v.name] = ("shift", col, lo)
            if math.isfinite(hi):
                bound_rows.append((col, hi - lo, v.name))
        elif math.isfinite(hi):
            col = len(y_names)
            y_names.append(v.name)
            expr[v.name] = ([(col, -1.0)], hi)
            smap[v.name] = ("mirror", col, hi)
        else:
            if v.name not in used:
                raise UnboundedFreeVariable(f"free variable {v.name!r} appears in no constraint")
            col = len(y_names)
            y_names += [v.name + "+", v.name + "-"]
            expr[v.name] = ([(col, 1.0), (col + 1, -1.0)], 0.0)
            smap[v.name] = ("split", col, col + 1)

    n_z, n_y = len(z_names), len(y_names)

    def linear(coeffs):
        a = np.zeros(n_z)
        bcol = np.zeros(n_y)
        const = 0.0
        for name, coef in coeffs.items():
            if not coef:
                continue
            if name in zidx:
                a[zidx[name]] += coef
            else:
                cols, k = expr[name]
                const += coef * k
                for col, s in cols:
                    bcol[col] += coef * s
        return a, bcol, const

    A_rows, B_rows, rhs, tags = [], [], [], []
    for row in source.rows:
        a, bcol, const = linear(row.coeffs)
        r = row.rhs - const
        if row.rel in ("<=", "="):
            A_rows.append(a); B_rows.append(bcol); rhs.append(r); tags.append(row.tag)
        if row.rel in (">=", "="):
            A_rows.append(-a); B_rows.append(-bcol); rhs.append(-r)
            tags.append(row.tag + ("#ge" if row.rel == "=" else ""))
    for col, lim, name in bound_rows:
        a = np.zeros(n_z)
        bcol = np.zeros(n_y)
        bcol[col] = 1.0
        A_rows.append(a); B_rows.append(bcol); rhs.append(lim); tags.append(f"bound:{name}")

    i_vec, c_vec, const = linear(source.objective)
    m = len(rhs)
    return MixedBinaryProgram(
        i=sign * i_vec, c=sign * c_vec,
        A=np.array(A_rows).reshape(m, n_z), B=np.array(B_rows).reshape(m, n_y), b=np.array(rhs),
        z_names=z_names, y_names=y_names,
        offset=sign * (const + source.objective_constant),
        row_tags=tags, source_map=smap, sense_sign=sign,
    )


# ---------------------------------------------------------------------------
# exact solvers


@dataclass
class MilpSolution:
    z: np.ndarray
    y: np.ndarray
    objective: float
    evaluated: int = 0


def brute_force_milp(p: MixedBinaryProgram, limit: int = 16, fixed: dict | None = None,
                     tol: ToleranceSet = DEFAULT_TOL) -> MilpSolution:
    """Enumerate every binary assignment and solve the continuous LP at each.

    ``fixed`` maps binary indices to values and restricts the enumeration to
    the remaining free binaries.  Ties go to the lexicographically smallest z.
    """
    fixed = dict(fixed or {})
    free = [j for j in range(p.n_z) if j not in fixed]
    if len(free) > limit:
        raise TooManyBinaries(f"{len(free)} free binaries exceed the enumeration limit {limit}")
    best = None
    count = 0
    for bits in itertools.product((0.0, 1.0), repeat=len(free)):
        z = np.zeros(p.n_z)
        for j, v in fixed.items():
            z[j] = v
        z[free] = bits
        sol = solve_lp(p.subproblem(z), tol)
        count += 1
        if sol.status is Status.INFEASIBLE:
            continue
        if sol.status is Status.UNBOUNDED:
            raise UnboundedProblem(f"continuous part unbounded at z={z.astype(int).tolist()}")
        val = float(p.i @ z) + sol.objective
        if best is None or val > best[0] + 1e-9:
            best = (val, z, sol.x)
    if best is None:
        raise InfeasibleProblem("no binary assignment admits a feasible continuous completion")
    return MilpSolution(best[1], best[2], best[0] + p.offset, count)


def _relaxation(p: MixedBinaryProgram, zlo, zhi) -> LinearProgram:
    return LinearProgram(
        Sense.MAX, np.concatenate([p.i, p.c]), np.hstack([p.A, p.B]), ["<="] * p.n_rows, p.b,
        lb=np.concatenate([zlo, np.zeros(p.n_y)]),
        ub=np.concatenate([zhi, np.full(p.n_y, np.inf)]),
    )


def branch_and_bound(p: MixedBinaryProgram, tol: ToleranceSet = DEFAULT_TOL, int_tol: float = 1e-6,
                     max_nodes: int = 200_000) -> MilpSolution:
    """Best-bound LP-based branch and bound on the whole program."""
    incumbent = None
    nodes = 0
    heap = []
    counter = itertools.count()

    def push(zlo, zhi):
        nonlocal nodes
        sol = solve_lp(_relaxation(p, zlo, zhi), tol)
        nodes += 1
        if sol.status is Status.INFEASIBLE:
            return
        if sol.status is Status.UNBOUNDED:
            raise UnboundedProblem("LP relaxation unbounded")
        heapq.heappush(heap, (-sol.objective, next(counter), zlo, zhi, sol.x))

    push(np.zeros(p.n_z), np.ones(p.n_z))
    while heap:
        if nodes > max_nodes:
            raise ModelError("branch and bound node limit reached")
        neg_bound, _, zlo, zhi, x = heapq.heappop(heap)
        if incumbent is not None and -neg_bound <= incumbent[0] + 1e-7:
            break
        z = x[: p.n_z]
        frac = np.abs(z - np.round(z))
        if frac.max(initial=0.0) <= int_tol:
            zr = np.round(z)
            sub = solve_lp(p.subproblem(zr), tol)
            if sub.optimal:
                val = float(p.i @ zr) + sub.objective
                if incumbent is None or val > incumbent[0] + 1e-9:
                    incumbent = (val, zr, sub.x)
            continue
        j = int(np.argmax(frac))
        for v in (1.0, 0.0):
            lo, hi = zlo.copy(), zhi.copy()
            lo[j] = hi[j] = v
            push(lo, hi)
    if incumbent is None:
        raise InfeasibleProblem("branch and bound found no feasible assignment")
    return MilpSolution(incumbent[1], incumbent[2], incumbent[0] + p.offset, nodes)


# ---------------------------------------------------------------------------
# seeded instance suite


def random_instance(seed: int, n_z: int | None = None, max_arcs: int = 20) -> MixedBinaryProgram:
    """Capacitated facility location with sparse service arcs.

    Binaries open facilities, continuous variables are arc flows.  Opening
    every facility is always feasible, so the instance is feasible by
    construction, while closing facilities can make demand unservable.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    if n_z is None:
        n_z = int(rng.integers(4, 11))
    n_cust = int(rng.integers(3, 6))
    arcs = set()
    for k in range(n_cust):
        for j in rng.choice(n_z, size=min(n_z, 2), replace=False):
            arcs.add((int(j), k))
    for j in range(n_z):
        if not any(a[0] == j for a in arcs):
            arcs.add((j, int(rng.integers(n_cust))))
    pool = [(j, k) for j in range(n_z) for k in range(n_cust) if (j, k) not in arcs]
    rng.shuffle(pool)
    while len(arcs) < max_arcs and pool:
        arcs.add(pool.pop())
    arcs = sorted(arcs)
    demand = rng.integers(5, 20, size=n_cust).astype(float)
    load = np.zeros(n_z)
    for k in range(n_cust):
        nb = [j for j, kk in arcs if kk == k]
        share = rng.dirichlet(np.ones(len(nb)))
        load[nb] += share * demand[k]
    cap = np.ceil(load * rng.uniform(1.1, 1.8, size=n_z)) + 1.0
    fixed_cost = rng.integers(5, 40, size=n_z).astype(float)
    unit_cost = rng.integers(1, 10, size=len(arcs)).astype(float)

    src = ModelSource(sense="min", name=f"facility-{seed}")
    for j in range(n_z):
        src.var(f"open{j}", binary=True)
        src.objective[f"open{j}"] = fixed_cost[j]
    for a, (j, k) in enumerate(arcs):
        src.var(f"flow{j}_{k}")
        src.objective[f"flow{j}_{k}"] = unit_cost[a]
    for j in range(n_z):
        coeffs = {f"flow{jj}_{k}": 1.0 for jj, k in arcs if jj == j}
        coeffs[f"open{j}"] = -cap[j]
        src.add(coeffs, "<=", 0.0, f"capacity{j}")
    for k in range(n_cust):
        src.add({f"flow{j}_{kk}": 1.0 for j, kk in arcs if kk == k}, ">=", demand[k], f"demand{k}")
    return compile(src)
