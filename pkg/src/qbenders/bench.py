"""Benchmark model builders: optimal transmission switching and ReLU network verification."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .model import ModelSource


class BenchError(Exception):
    pass


class CaseFormatError(BenchError):
    pass


class InfeasibleBudget(UserWarning):
    pass


class BoundBlowup(BenchError):
    pass


# ---------------------------------------------------------------------------
# network cases


@dataclass
class Bus:
    id: int
    demand: float = 0.0


@dataclass
class Generator:
    bus: int
    cost: float
    pmax: float


@dataclass
class Line:
    frm: int
    to: int
    b: float
    limit: float
    switchable: bool = True


@dataclass
class NetworkCase:
    buses: list
    generators: list
    lines: list
    slack: int
    theta_bounds: tuple = (-math.pi / 2, math.pi / 2)
    name: str = ""

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseFormatError("duplicate bus ids")
        known = set(ids)
        if self.slack not in known:
            raise CaseFormatError(f"slack bus {self.slack} is not a bus")
        for g in self.generators:
            if g.bus not in known:
                raise CaseFormatError(f"generator at unknown bus {g.bus}")
            if not g.pmax > 0:
                raise CaseFormatError("generator capacity must be positive")
        for ln in self.lines:
            if ln.frm not in known or ln.to not in known or ln.frm == ln.to:
                raise CaseFormatError(f"bad line endpoints {ln.frm}-{ln.to}")
            if not ln.limit > 0 or ln.b == 0:
                raise CaseFormatError("line limit must be positive and susceptance nonzero")
        lo, hi = self.theta_bounds
        if not hi > lo:
            raise CaseFormatError("theta bounds must satisfy min < max")
        if not self._connected([True] * len(self.lines)):
            raise CaseFormatError("network is not connected with all lines in service")

    def _connected(self, on) -> bool:
        adj = {b.id: set() for b in self.buses}
        for ln, flag in zip(self.lines, on):
            if flag:
                adj[ln.frm].add(ln.to)
                adj[ln.to].add(ln.frm)
        seen, stack = {self.slack}, [self.slack]
        while stack:
            for nb in adj[stack.pop()] - seen:
                seen.add(nb)
                stack.append(nb)
        return len(seen) == len(self.buses)

    def big_m(self, line: Line) -> float:
        lo, hi = self.theta_bounds
        return abs(line.b) * (hi - lo)

    def bridge_lines(self) -> list:
        """Indices of lines that are the only connection of a demand-only bus."""
        gen_buses = {g.bus for g in self.generators}
        out = []
        for b in self.buses:
            if b.demand > 0 and b.id not in gen_buses:
                inc = [k for k, ln in enumerate(self.lines) if b.id in (ln.frm, ln.to)]
                if len(inc) == 1:
                    out.append(inc[0])
        return sorted(out)

    @property
    def switchable(self) -> list:
        return [k for k, ln in enumerate(self.lines) if ln.switchable]

    @classmethod
    def from_dict(cls, d, name="") -> "NetworkCase":
        try:
            buses = [Bus(int(b["id"]), float(b.get("demand", 0.0))) for b in d["buses"]]
            gens = [Generator(int(g["bus"]), float(g["cost"]), float(g["pmax"])) for g in d["generators"]]
            lines = [Line(int(ln["from"]), int(ln["to"]), float(ln["b"]), float(ln["limit"]),
                          bool(ln.get("switchable", True))) for ln in d["lines"]]
            tb = d.get("theta_bounds") or [-math.pi / 2, math.pi / 2]
            return cls(buses, gens, lines, int(d["slack"]), (float(tb[0]), float(tb[1])), name)
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"malformed case: {exc!r}") from exc

    def to_dict(self) -> dict:
        return {
            "buses": [{"id": b.id, "demand": b.demand} for b in self.buses],
            "generators": [{"bus": g.bus, "cost": g.cost, "pmax": g.pmax} for g in self.generators],
            "lines": [{"from": ln.frm, "to": ln.to, "b": ln.b, "limit": ln.limit, "switchable": ln.switchable}
                      for ln in self.lines],
            "slack": self.slack, "theta_bounds": list(self.theta_bounds),
        }

    @classmethod
    def load(cls, path) -> "NetworkCase":
        return cls.from_dict(_read_json(path), name=str(path))


def _read_json(path):
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def bundled_case(name: str) -> NetworkCase:
    """``case6`` or ``case14`` from the package data."""
    ref = resources.files("qbenders") / "data" / f"{name}.json"
    with resources.as_file(ref) as path:
        return NetworkCase.load(path)


def bundled_path(name: str) -> str:
    return str(resources.files("qbenders") / "data" / name)


def build_ots(case: NetworkCase, E: int) -> ModelSource:
    """DC dispatch with line switching; at most ``E`` switchable lines out of service."""
    sw = case.switchable
    if not 0 <= E <= len(case.lines):
        raise BenchError(f"E={E} must lie in [0, {len(case.lines)}]")
    forced = set(case.bridge_lines()) & set(sw)
    if forced and E > len(sw) - len(forced):
        warnings.warn(f"E={E} exceeds the {len(sw) - len(forced)} lines that can open without "
                      f"isolating a demand bus; bridge lines stay closed in any feasible plan",
                      InfeasibleBudget, stacklevel=2)

    src = ModelSource(sense="min", name=case.name or "ots")
    lo, hi = case.theta_bounds
    for k, g in enumerate(case.generators):
        src.var(f"g{k}", lb=0.0, ub=g.pmax)
        src.objective[f"g{k}"] = g.cost
    for b in case.buses:
        if b.id == case.slack:
            src.var(f"th{b.id}", lb=0.0, ub=0.0)
        else:
            src.var(f"th{b.id}", lb=lo, ub=hi)
    for k, ln in enumerate(case.lines):
        src.var(f"p{k}", lb=-ln.limit, ub=ln.limit)
        if ln.switchable:
            src.var(f"x{k}", binary=True)

    for k, ln in enumerate(case.lines):
        p, x = f"p{k}", f"x{k}"
        ti, tj = f"th{ln.frm}", f"th{ln.to}"
        if ln.switchable:
            src.add({p: 1.0, x: -ln.limit}, "<=", 0.0, f"flowmax{k}")
            src.add({p: -1.0, x: -ln.limit}, "<=", 0.0, f"flowmin{k}")
            M = case.big_m(ln)
            # p - b (th_i - th_j) within +-M (1 - x)
            src.add({p: 1.0, ti: -ln.b, tj: ln.b, x: M}, "<=", M, f"angle+{k}")
            src.add({p: -1.0, ti: ln.b, tj: -ln.b, x: M}, "<=", M, f"angle-{k}")
        else:
            src.add({p: 1.0, ti: -ln.b, tj: ln.b}, "=", 0.0, f"angle{k}")
    for b in case.buses:
        row = {}
        for k, g in enumerate(case.generators):
            if g.bus == b.id:
                row[f"g{k}"] = row.get(f"g{k}", 0.0) + 1.0
        for k, ln in enumerate(case.lines):
            if ln.frm == b.id:
                row[f"p{k}"] = row.get(f"p{k}", 0.0) - 1.0
            elif ln.to == b.id:
                row[f"p{k}"] = row.get(f"p{k}", 0.0) + 1.0
        src.add(row, "=", b.demand, f"balance{b.id}")
    if sw:
        # sum (1 - x) <= E
        src.add({f"x{k}": -1.0 for k in sw}, "<=", E - len(sw), "budget")
    return src


def ots_big_m_residual(case: NetworkCase, values: dict) -> float:
    """Largest violation of the flow/angle law on in-service lines and of zero flow on open ones."""
    worst = 0.0
    for k, ln in enumerate(case.lines):
        x = values.get(f"x{k}", 1.0)
        p = values[f"p{k}"]
        if x > 0.5:
            worst = max(worst, abs(p - ln.b * (values[f"th{ln.frm}"] - values[f"th{ln.to}"])))
        else:
            worst = max(worst, abs(p))
    return worst


# ---------------------------------------------------------------------------
# neural-network verification


@dataclass
class NeuralNetSpec:
    weights: list
    biases: list
    input_lb: np.ndarray
    input_ub: np.ndarray
    gen_limits: np.ndarray        # (n_gen, 2); the slack generator sits at slack_index
    map_d: np.ndarray             # slack output = sum(map_d @ p_d) - sum(other outputs)
    slack_index: int
    name: str = ""

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        self.input_lb = np.asarray(self.input_lb, dtype=float)
        self.input_ub = np.asarray(self.input_ub, dtype=float)
        self.gen_limits = np.asarray(self.gen_limits, dtype=float).reshape(-1, 2)
        self.map_d = np.atleast_2d(np.asarray(self.map_d, dtype=float))
        if len(self.weights) != len(self.biases) or not self.weights:
            raise CaseFormatError("need matching, nonempty weight and bias lists")
        width = self.input_lb.size
        if self.input_ub.size != width:
            raise CaseFormatError("input bounds differ in length")
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != width or b.size != W.shape[0]:
                raise CaseFormatError("layer dimensions do not chain")
            width = W.shape[0]
        if self.gen_limits.shape[0] != self.n_outputs + 1:
            raise CaseFormatError("gen_limits needs one row per output plus the slack generator")
        if not 0 <= self.slack_index <= self.n_outputs:
            raise CaseFormatError("slack_index out of range")
        if self.map_d.shape[1] != self.n_inputs:
            raise CaseFormatError("map_d columns must match the input count")
        for arr in (self.input_lb, self.input_ub, self.gen_limits, self.map_d):
            if not np.all(np.isfinite(arr)):
                raise CaseFormatError("bounds and maps must be finite")
        if np.any(self.input_lb > self.input_ub):
            raise CaseFormatError("input_lb exceeds input_ub")

    @property
    def n_inputs(self) -> int:
        return self.input_lb.size

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> list:
        return [W.shape[0] for W in self.weights[:-1]]

    def output_index(self, gen: int):
        """Network output feeding generator ``gen``, or None for the slack generator."""
        if gen == self.slack_index:
            return None
        return gen if gen < self.slack_index else gen - 1

    def forward(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(W @ h + b, 0.0)
        return self.weights[-1] @ h + self.biases[-1]

    def generation(self, x) -> np.ndarray:
        out = self.forward(x)
        slack = float(self.map_d.dot(np.asarray(x, dtype=float)).sum() - out.sum())
        return np.insert(out, self.slack_index, slack)

    @classmethod
    def from_dict(cls, d, name="") -> "NeuralNetSpec":
        try:
            return cls([l["W"] for l in d["layers"]], [l["b"] for l in d["layers"]], d["input_lb"],
                       d["input_ub"], d["gen_limits"], d["map_d"], int(d["slack_index"]), name)
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"malformed network file: {exc!r}") from exc

    def to_dict(self) -> dict:
        return {
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
            "input_lb": self.input_lb.tolist(), "input_ub": self.input_ub.tolist(),
            "gen_limits": self.gen_limits.tolist(), "map_d": self.map_d.tolist(),
            "slack_index": self.slack_index,
        }

    @classmethod
    def load(cls, path) -> "NeuralNetSpec":
        return cls.from_dict(_read_json(path), name=str(path))


def propagate_bounds(nn: NeuralNetSpec, limit: float = 1e6) -> list:
    """Interval pre-activation bounds ``(lo, hi)`` for every layer, output layer last."""
    lo, hi = nn.input_lb.copy(), nn.input_ub.copy()
    out = []
    for k, (W, b) in enumerate(zip(nn.weights, nn.biases)):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        pre_lo = Wp @ lo + Wn @ hi + b
        pre_hi = Wp @ hi + Wn @ lo + b
        if max(np.abs(pre_lo).max(), np.abs(pre_hi).max()) > limit:
            raise BoundBlowup(f"layer {k} bounds exceed {limit:g}; tighten the input box")
        out.append((pre_lo, pre_hi))
        lo, hi = np.maximum(pre_lo, 0.0), np.maximum(pre_hi, 0.0)
    return out


def build_nn_verification(nn: NeuralNetSpec, target_gen: int, bound_side: str = "upper") -> ModelSource:
    """Worst-case violation of one generator limit over the input box, one binary per hidden neuron."""
    if bound_side not in ("upper", "lower"):
        raise BenchError("bound_side must be 'upper' or 'lower'")
    if not 0 <= target_gen < nn.gen_limits.shape[0]:
        raise BenchError(f"target generator {target_gen} does not exist")
    bounds = propagate_bounds(nn)
    src = ModelSource(sense="max", name=nn.name or "nnver")
    prev = []
    for j in range(nn.n_inputs):
        src.var(f"pd{j}", lb=nn.input_lb[j], ub=nn.input_ub[j])
        prev.append(f"pd{j}")
    for k, (W, b) in enumerate(zip(nn.weights[:-1], nn.biases[:-1])):
        lo, hi = bounds[k]
        cur = []
        for u in range(W.shape[0]):
            zh, z, d = f"zh{k}_{u}", f"z{k}_{u}", f"d{k}_{u}"
            src.var(zh, lb=lo[u], ub=hi[u])
            src.var(z, lb=0.0, ub=max(0.0, hi[u]))
            src.var(d, binary=True)
            row = {zh: 1.0}
            for v, name in enumerate(prev):
                if W[u, v]:
                    row[name] = -W[u, v]
            src.add(row, "=", b[u], f"pre{k}_{u}")
            m_pos, m_neg = max(0.0, hi[u]), max(0.0, -lo[u])
            if m_pos == 0.0 and m_neg == 0.0:
                m_pos = m_neg = 1.0
            src.add({z: 1.0, zh: -1.0}, ">=", 0.0, f"relu_lo{k}_{u}")
            src.add({z: 1.0, zh: -1.0, d: m_neg}, "<=", m_neg, f"relu_off{k}_{u}")
            src.add({z: 1.0, d: -m_pos}, "<=", 0.0, f"relu_on{k}_{u}")
            cur.append(z)
        prev = cur
    W, b = nn.weights[-1], nn.biases[-1]
    lo, hi = bounds[-1]
    outs = []
    for u in range(W.shape[0]):
        name = f"out{u}"
        src.var(name, lb=lo[u], ub=hi[u])
        row = {name: 1.0}
        for v, pn in enumerate(prev):
            if W[u, v]:
                row[pn] = -W[u, v]
        src.add(row, "=", b[u], f"out{u}")
        outs.append(name)

    # generator expression as a linear form over inputs and outputs
    oi = nn.output_index(target_gen)
    expr = {}
    if oi is None:
        md = nn.map_d.sum(axis=0)
        for j in range(nn.n_inputs):
            if md[j]:
                expr[f"pd{j}"] = md[j]
        for name in outs:
            expr[name] = expr.get(name, 0.0) - 1.0
    else:
        expr[outs[oi]] = 1.0
    g_lo, g_hi = nn.gen_limits[target_gen]
    if bound_side == "upper":
        src.objective.update(expr)
        src.objective_constant = -g_hi
    else:
        src.objective.update({k: -v for k, v in expr.items()})
        src.objective_constant = g_lo
    return src


def random_network(seed: int, n_in: int = 2, hidden=(3,), n_out: int = 1, scale: float = 1.0) -> NeuralNetSpec:
    """Small random ReLU network with unit input box, for tests and examples."""
    rng = np.random.default_rng(seed)
    sizes = [n_in, *hidden, n_out]
    Ws = [np.round(rng.normal(0, scale, (sizes[k + 1], sizes[k])), 3) for k in range(len(sizes) - 1)]
    bs = [np.round(rng.normal(0, 0.5 * scale, sizes[k + 1]), 3) for k in range(len(sizes) - 1)]
    lims = np.array([[0.0, 1.0]] * (n_out + 1))
    return NeuralNetSpec(Ws, bs, np.zeros(n_in), np.ones(n_in), lims, np.ones((1, n_in)),
                         slack_index=n_out, name=f"random{seed}")
