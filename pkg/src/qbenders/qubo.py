"""Compile a Benders master problem into a QUBO and decode samples back.

Bit order is fixed: the ``n_z`` master binaries, then the s groups (positive
powers, fractional powers, negative powers), then one integer slack block per
optimality cut and per feasibility cut.  Each s group runs i = 0..a_cc, so the
representable s magnitude reaches the master cap 2^(a_cc+1).

Each optimality cut ``s <= const - coef @ z`` becomes the equality
``const - coef @ z - s - a1 = 0`` with ``a1 >= 0``; each feasibility cut
``const - coef @ z >= 0`` becomes ``const - coef @ z - a2 = 0``.  Squared
residuals are added with penalty weights to the negated master objective.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .lpcore import DEFAULT_TOL, LinearProgram, Sense, Status, ToleranceSet, solve_lp
from .model import InfeasibleProblem, MixedBinaryProgram

log = logging.getLogger(__name__)

MAX_WIDTH = 24


class QuboError(Exception):
    pass


class UnboundedContinuousObjective(QuboError):
    pass


class LayoutMismatch(QuboError):
    pass


# ---------------------------------------------------------------------------
# bit widths


def continuous_range(p: MixedBinaryProgram, tol: ToleranceSet = DEFAULT_TOL) -> tuple[float, float]:
    """Min and max of ``c @ y`` over the LP relaxation (z in [0, 1])."""
    if p.n_y == 0:
        return 0.0, 0.0
    A = np.hstack([p.A, p.B])
    lb = np.zeros(p.n_z + p.n_y)
    ub = np.concatenate([np.ones(p.n_z), np.full(p.n_y, np.inf)])
    obj = np.concatenate([np.zeros(p.n_z), p.c])
    out = []
    for sense in (Sense.MIN, Sense.MAX):
        sol = solve_lp(LinearProgram(sense, obj, A, ["<="] * p.n_rows, p.b, lb, ub), tol)
        if sol.status is Status.UNBOUNDED:
            raise UnboundedContinuousObjective("c @ y is unbounded over the relaxation; add explicit bounds")
        if sol.status is Status.INFEASIBLE:
            raise InfeasibleProblem("the LP relaxation is infeasible")
        out.append(sol.objective)
    return out[0], out[1]


def _width(v: float) -> int:
    """Smallest count e >= 1 with 2^e - 1 >= v, i.e. ceil(log2(1 + v))."""
    if v <= 0:
        return 1
    return max(1, math.ceil(math.log2(1.0 + v) - 1e-12))


def s_bits(p: MixedBinaryProgram, tol: ToleranceSet = DEFAULT_TOL) -> int:
    lo, hi = continuous_range(p, tol)
    return _width(max(abs(lo), abs(hi)))


@dataclass(frozen=True)
class BitLayout:
    n_z: int
    a_cc: int
    e1: tuple = ()
    e2: tuple = ()

    def __post_init__(self):
        if self.a_cc < 1 or any(e < 1 for e in self.e1 + self.e2):
            raise ValueError("all bit counts must be at least 1")

    @property
    def group(self) -> int:
        return self.a_cc + 1

    @property
    def s_start(self) -> int:
        return self.n_z

    @property
    def a1_start(self) -> int:
        return self.n_z + 3 * self.group

    @property
    def a2_start(self) -> int:
        return self.a1_start + sum(self.e1)

    @property
    def dimension(self) -> int:
        return self.a2_start + sum(self.e2)

    @property
    def s_resolution(self) -> float:
        return 2.0 ** -self.a_cc

    @property
    def s_range(self) -> tuple[float, float]:
        top = 2.0 ** self.group - 1
        return -top, top + 2.0 - self.s_resolution

    def s_weights(self) -> np.ndarray:
        i = np.arange(self.group, dtype=float)
        return np.concatenate([2.0 ** i, 2.0 ** -i, -(2.0 ** i)])

    def slack_blocks(self):
        """(start, width) of each a1 block then each a2 block."""
        out, pos = [], self.a1_start
        for e in self.e1 + self.e2:
            out.append((pos, e))
            pos += e
        return out

    def names(self) -> list:
        out = [f"z_{j}" for j in range(self.n_z)]
        for g in ("pos", "dec", "neg"):
            out += [f"s_{g}_{i}" for i in range(self.group)]
        for t, e in enumerate(self.e1):
            out += [f"a1_{t}_{i}" for i in range(e)]
        for k, e in enumerate(self.e2):
            out += [f"a2_{k}_{i}" for i in range(e)]
        return out

    def to_dict(self) -> dict:
        return {"n_z": self.n_z, "a_cc": self.a_cc, "e1": list(self.e1), "e2": list(self.e2),
                "names": self.names()}

    @classmethod
    def from_dict(cls, d) -> "BitLayout":
        lay = cls(int(d["n_z"]), int(d["a_cc"]), tuple(d["e1"]), tuple(d["e2"]))
        if "names" in d and list(d["names"]) != lay.names():
            raise LayoutMismatch("name map disagrees with the bit counts")
        return lay


def _clamp(e: int, ceiling: int, what: str) -> int:
    if e > ceiling:
        log.warning("%s needs %d bits; clamped to %d", what, e, ceiling)
        return ceiling
    return e


def compute_bit_widths(p: MixedBinaryProgram, pool, tol: ToleranceSet = DEFAULT_TOL,
                       acc_bits: int | None = None, slack_bits: int | None = None,
                       ceiling: int = MAX_WIDTH) -> BitLayout:
    """Bit counts for s and every slack of the pool's active cuts.

    Slack maxima use interval arithmetic over z in [0, 1] and the
    representable s range, so they never under-allocate.
    """
    a = acc_bits if acc_bits is not None else _clamp(s_bits(p, tol), ceiling, "s")
    lay = BitLayout(p.n_z, a)
    s_lo, _ = lay.s_range
    e1, e2 = [], []
    for cut in pool.active_optimality:
        if slack_bits is not None:
            e1.append(slack_bits)
            continue
        top = cut.const + np.maximum(-cut.coef, 0).sum() - s_lo
        e1.append(_clamp(_width(top), ceiling, "optimality slack"))
    for cut in pool.active_feasibility:
        if slack_bits is not None:
            e2.append(slack_bits)
            continue
        top = cut.const + np.maximum(-cut.coef, 0).sum()
        e2.append(_clamp(_width(top), ceiling, "feasibility slack"))
    return BitLayout(p.n_z, a, tuple(e1), tuple(e2))


# ---------------------------------------------------------------------------
# program


@dataclass
class QuboProgram:
    dimension: int
    Q: dict
    offset: float
    layout: BitLayout
    P1: float
    P2: float
    cuts: list = field(default_factory=list, repr=False)   # (kind, const, coef) for decoding

    def __post_init__(self):
        for (i, j), v in self.Q.items():
            if i > j:
                raise QuboError("coefficient keys must satisfy i <= j")
            if v == 0:
                raise QuboError("zero coefficients must not be stored")

    def keys(self):
        return sorted(self.Q)

    def energy(self, bits) -> float:
        b = np.asarray(bits)
        if b.shape != (self.dimension,):
            raise LayoutMismatch(f"assignment length {b.shape} != dimension {self.dimension}")
        e = self.offset
        for (i, j) in self.keys():
            if b[i] and b[j]:
                e += self.Q[(i, j)]
        return float(e)

    def dense(self) -> np.ndarray:
        M = np.zeros((self.dimension, self.dimension))
        for (i, j), v in self.Q.items():
            M[i, j] = v
        return M

    def max_abs(self) -> float:
        return max((abs(v) for v in self.Q.values()), default=1.0)

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension, "offset": self.offset,
            "entries": [[i, j, self.Q[(i, j)]] for (i, j) in self.keys()],
            "layout": self.layout.to_dict(), "P1": self.P1, "P2": self.P2,
            "cuts": [{"kind": k, "const": c, "coef": list(map(float, v))} for k, c, v in self.cuts],
        }

    @classmethod
    def from_dict(cls, d) -> "QuboProgram":
        Q = {(int(i), int(j)): float(v) for i, j, v in d["entries"]}
        cuts = [(c["kind"], float(c["const"]), np.asarray(c["coef"], dtype=float)) for c in d.get("cuts", [])]
        q = cls(int(d["dimension"]), Q, float(d["offset"]), BitLayout.from_dict(d["layout"]),
                float(d["P1"]), float(d["P2"]), cuts)
        if q.layout.dimension != q.dimension:
            raise LayoutMismatch("layout dimension disagrees with the program")
        return q

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "QuboProgram":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_penalty(p: MixedBinaryProgram, rho: float, s_max: float) -> float:
    return 2.0 * (float(np.abs(p.i).sum()) + s_max + abs(rho) * p.n_z + 1.0)


def compile_master_to_qubo(pool, p: MixedBinaryProgram, rho: float, z_prev, layout: BitLayout,
                           penalty: float | None = None, P1: float | None = None,
                           P2: float | None = None) -> QuboProgram:
    """Minimization QUBO whose energy is the negated master objective plus penalties."""
    opt, feas = pool.active_optimality, pool.active_feasibility
    if len(opt) != len(layout.e1) or len(feas) != len(layout.e2) or layout.n_z != p.n_z:
        raise LayoutMismatch("layout slack groups do not match the cut pool")
    s_max = 2.0 ** layout.group
    P = penalty if penalty is not None else default_penalty(p, rho, s_max)
    P1 = P if P1 is None else P1
    P2 = P if P2 is None else P2
    N = layout.dimension
    nz = p.n_z
    s_sl = slice(layout.s_start, layout.a1_start)
    sw = layout.s_weights()
    M = np.zeros((N, N))
    offset = 0.0

    # -(i @ z + s + rho * H(z, z_prev)), H linear in z for fixed z_prev
    lin = np.zeros(N)
    lin[:nz] -= p.i
    lin[s_sl] -= sw
    if rho:
        zp = np.asarray(z_prev, dtype=float)
        lin[:nz] -= rho * (1.0 - 2.0 * zp)
        offset -= rho * float(zp.sum())
    M[np.diag_indices(N)] += lin

    def add_square(weight, kappa, w):
        nonlocal offset
        nz_idx = np.flatnonzero(w)
        wv = w[nz_idx]
        offset += weight * kappa * kappa
        M[nz_idx, nz_idx] += weight * (wv * wv + 2.0 * kappa * wv)
        outer = 2.0 * weight * np.outer(wv, wv)
        iu = np.triu_indices(len(nz_idx), 1)
        M[nz_idx[iu[0]], nz_idx[iu[1]]] += outer[iu]

    blocks = layout.slack_blocks()
    cuts = []
    for t, cut in enumerate(opt):
        w = np.zeros(N)
        w[:nz] = -cut.coef
        w[s_sl] = -sw
        start, e = blocks[t]
        w[start:start + e] = -(2.0 ** np.arange(e))
        add_square(P1, cut.const, w)
        cuts.append(("opt", float(cut.const), np.asarray(cut.coef, dtype=float)))
    for k, cut in enumerate(feas):
        w = np.zeros(N)
        w[:nz] = -cut.coef
        start, e = blocks[len(opt) + k]
        w[start:start + e] = -(2.0 ** np.arange(e))
        add_square(P2, cut.const, w)
        cuts.append(("feas", float(cut.const), np.asarray(cut.coef, dtype=float)))

    iu = np.triu_indices(N)
    vals = M[iu]
    keep = vals != 0
    Q = {(int(i), int(j)): float(v) for i, j, v in zip(iu[0][keep], iu[1][keep], vals[keep])}
    return QuboProgram(N, Q, float(offset), layout, float(P1), float(P2), cuts)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Decoded:
    z: np.ndarray
    s: float
    a1: list
    a2: list
    residuals: list            # optimality cuts first, then feasibility cuts
    feasible: bool
    energy: float | None = None


def decode(sample, layout: BitLayout, cuts=None, tol: float | None = None) -> Decoded:
    """Reconstruct (z, s, slacks) and per-cut residuals from a bit assignment.

    ``cuts`` may be a QuboProgram's cut list or a cut pool.  A sample is
    feasible when every residual is within half a slack step.
    """
    b = np.asarray(sample, dtype=float)
    if b.shape != (layout.dimension,):
        raise LayoutMismatch(f"assignment length {b.shape} != layout dimension {layout.dimension}")
    z = b[:layout.n_z].copy()
    s = float(layout.s_weights() @ b[layout.s_start:layout.a1_start])
    vals = []
    for start, e in layout.slack_blocks():
        vals.append(float((2.0 ** np.arange(e)) @ b[start:start + e]))
    a1, a2 = vals[:len(layout.e1)], vals[len(layout.e1):]
    if cuts is None:
        cuts = []
    elif hasattr(cuts, "active_optimality"):
        cuts = [("opt", c.const, c.coef) for c in cuts.active_optimality] + \
               [("feas", c.const, c.coef) for c in cuts.active_feasibility]
    res = []
    if cuts:
        if len(cuts) != len(vals):
            raise LayoutMismatch("cut count does not match slack groups")
        for (kind, const, coef), a in zip(cuts, vals):
            v = const - float(np.asarray(coef) @ z) - a
            res.append(v - s if kind == "opt" else v)
    half = 0.5 * max(layout.s_resolution, 1.0) if tol is None else tol
    feasible = all(abs(r) <= half + 1e-9 for r in res)
    return Decoded(z, s, a1, a2, res, feasible)


def encode_s(layout: BitLayout, v: float) -> np.ndarray:
    """s bits for a representable value (positive and negative groups never both used)."""
    g = layout.group
    step = layout.s_resolution
    top = 2 ** g - 1
    if v >= 0:
        pos, neg = min(math.floor(v), top), 0
        rest = v - pos
    else:
        pos, neg = 0, math.ceil(-v)
        rest = v + neg
    units = rest / step
    if neg > top or abs(units - round(units)) > 1e-9 or not 0 <= round(units) < 2 ** g:
        raise ValueError(f"{v} is not representable with a_cc={layout.a_cc}")
    units = int(round(units))
    bits = np.zeros(3 * g, dtype=np.uint8)
    for i in range(g):
        bits[i] = (pos >> i) & 1
        bits[2 * g + i] = (neg >> i) & 1
        # fractional bit i weighs 2^-i, i.e. 2^(a_cc - i) units of the resolution
        bits[g + i] = (units >> (layout.a_cc - i)) & 1
    return bits


def encode(layout: BitLayout, z, s: float, a1=(), a2=()) -> np.ndarray:
    bits = np.zeros(layout.dimension, dtype=np.uint8)
    bits[:layout.n_z] = np.asarray(z, dtype=np.uint8)
    bits[layout.s_start:layout.a1_start] = encode_s(layout, s)
    for (start, e), v in zip(layout.slack_blocks(), list(a1) + list(a2)):
        v = int(round(v))
        if v < 0 or v > 2 ** e - 1:
            raise ValueError(f"slack {v} does not fit in {e} bits")
        for i in range(e):
            bits[start + i] = (v >> i) & 1
    return bits


def energy(q: QuboProgram, bits) -> float:
    return q.energy(bits)
