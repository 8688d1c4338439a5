"""QUBO sampling backends: multi-read simulated annealing and exhaustive enumeration."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .qubo import Decoded, QuboProgram, decode


class SamplerError(Exception):
    pass


class TooLarge(SamplerError):
    pass


@dataclass
class Sample:
    bits: np.ndarray
    energy: float
    read: int
    seed: int | None = None

    def key(self):
        return (self.energy, tuple(int(b) for b in self.bits))


class SampleSet:
    """Samples sorted by energy, ties broken by lexicographic assignment."""

    def __init__(self, samples):
        self.samples = sorted(samples, key=Sample.key)
        if not self.samples:
            raise SamplerError("a sample set needs at least one sample")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def best(self) -> Sample:
        return self.samples[0]

    def distinct(self) -> list:
        seen, out = set(), []
        for s in self.samples:
            k = s.bits.tobytes()
            if k not in seen:
                seen.add(k)
                out.append(s)
        return out

    def to_bytes(self) -> bytes:
        parts = []
        for s in self.samples:
            parts.append(s.bits.astype(np.uint8).tobytes())
            parts.append(np.float64(s.energy).tobytes())
            parts.append(np.int64(s.read).tobytes())
            parts.append(np.uint64(s.seed or 0).tobytes())
        return b"".join(parts)


@dataclass
class AnnealSchedule:
    reads: int = 64
    sweeps: int = 2000
    beta_init: float | None = None     # default 0.1 / max|Q|
    beta_final: float | None = None    # default 10 / max|Q|
    seed: int = 0

    def __post_init__(self):
        if self.reads < 1 or self.sweeps < 1:
            raise ValueError("reads and sweeps must be at least 1")
        if self.beta_init is not None and self.beta_final is not None:
            if not self.beta_final > self.beta_init > 0:
                raise ValueError("need beta_final > beta_init > 0")

    def betas(self, q: QuboProgram) -> tuple[float, float]:
        scale = q.max_abs()
        b0 = self.beta_init if self.beta_init is not None else 0.1 / scale
        b1 = self.beta_final if self.beta_final is not None else 10.0 / scale
        return b0, b1


def read_seed(master: int, read: int) -> int:
    """Counter-based per-read seed, independent of execution order."""
    return int(np.random.SeedSequence([master, read]).generate_state(1, dtype=np.uint32)[0])


def _csr(q: QuboProgram):
    """Diagonal plus symmetric off-diagonal neighbour lists."""
    n = q.dimension
    diag = np.zeros(n)
    rows = [[] for _ in range(n)]
    for (i, j), v in q.Q.items():
        if i == j:
            diag[i] += v
        else:
            rows[i].append((j, v))
            rows[j].append((i, v))
    indptr = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        indptr[k + 1] = indptr[k] + len(rows[k])
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])
    for k in range(n):
        for t, (j, v) in enumerate(sorted(rows[k])):
            indices[indptr[k] + t] = j
            data[indptr[k] + t] = v
    return diag, indptr, indices, data


@numba.njit(cache=True)
def _anneal(diag, indptr, indices, data, betas, seed):
    np.random.seed(seed)
    n = diag.shape[0]
    x = np.empty(n, dtype=np.uint8)
    for k in range(n):
        x[k] = 1 if np.random.random() < 0.5 else 0
    # field[k] = sum of off-diagonal couplings to active neighbours
    field = np.zeros(n)
    for k in range(n):
        if x[k]:
            for t in range(indptr[k], indptr[k + 1]):
                field[indices[t]] += data[t]
    for beta in betas:
        for k in range(n):
            local = diag[k] + field[k]
            delta = -local if x[k] else local
            if delta <= 0.0 or np.random.random() < np.exp(-beta * delta):
                sign = -1.0 if x[k] else 1.0
                x[k] = 1 - x[k]
                for t in range(indptr[k], indptr[k + 1]):
                    field[indices[t]] += sign * data[t]
    # finish with a deterministic descent so every read is a local minimum
    improved = True
    while improved:
        improved = False
        for k in range(n):
            local = diag[k] + field[k]
            delta = -local if x[k] else local
            if delta < -1e-12:
                sign = -1.0 if x[k] else 1.0
                x[k] = 1 - x[k]
                for t in range(indptr[k], indptr[k + 1]):
                    field[indices[t]] += sign * data[t]
                improved = True
    return x


def sample_sa(q: QuboProgram, sched: AnnealSchedule | None = None) -> SampleSet:
    """Independent single-flip Metropolis chains with a geometric inverse-temperature ramp."""
    sched = sched or AnnealSchedule()
    b0, b1 = sched.betas(q)
    betas = np.geomspace(b0, b1, sched.sweeps)
    diag, indptr, indices, data = _csr(q)
    out = []
    for r in range(sched.reads):
        seed = read_seed(sched.seed, r)
        bits = _anneal(diag, indptr, indices, data, betas, seed)
        out.append(Sample(bits, q.energy(bits), r, seed))
    return SampleSet(out)


@numba.njit(cache=True)
def _enumerate(diag, M):
    """Energies (without offset) of all assignments; index bit n-1-v holds variable v."""
    n = diag.shape[0]
    total = 1 << n
    E = np.empty(total)
    x = np.zeros(n, dtype=np.uint8)
    field = np.zeros(n)
    e = 0.0
    E[0] = 0.0
    for g in range(1, total):
        # Gray code: flip the lowest set bit of g
        t = 0
        while not (g >> t) & 1:
            t += 1
        v = n - 1 - t
        local = diag[v] + field[v]
        if x[v]:
            e -= local
            x[v] = 0
            for j in range(n):
                field[j] -= M[v, j]
        else:
            e += local
            x[v] = 1
            for j in range(n):
                field[j] += M[v, j]
        gray = g ^ (g >> 1)
        E[gray] = e
    return E


def sample_exact(q: QuboProgram, limit: int = 24, k: int = 16) -> SampleSet:
    """Full scan of all 2^N assignments; returns the k lowest in (energy, lexicographic) order."""
    n = q.dimension
    if n > limit:
        raise TooLarge(f"dimension {n} exceeds enumeration limit {limit}")
    if n == 0:
        return SampleSet([Sample(np.zeros(0, dtype=np.uint8), q.offset, 0)])
    dense = q.dense()
    diag = np.diag(dense).copy()
    M = dense + dense.T
    np.fill_diagonal(M, 0.0)
    E = _enumerate(diag, M)
    k = min(k, E.size)
    thresh = np.partition(E, k - 1)[k - 1]
    slack = 1e-9 * (1.0 + np.abs(E).max())
    idx = np.flatnonzero(E <= thresh + slack)
    samples = []
    for j in idx:
        bits = np.array([(j >> (n - 1 - v)) & 1 for v in range(n)], dtype=np.uint8)
        samples.append(Sample(bits, q.energy(bits), 0))
    ss = SampleSet(samples)
    ss.samples = ss.samples[:k]
    return ss


def top_r_feasible(ss: SampleSet, layout, R: int, cuts=None) -> list:
    """Up to R decoded candidates with distinct z, in energy order.

    Penalty-violating samples are skipped; if none qualifies, the best sample
    is returned anyway with ``feasible=False`` so the caller can still cut.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    out, seen = [], set()
    for s in ss:
        d = decode(s.bits, layout, cuts)
        d.energy = s.energy
        key = tuple(int(v) for v in d.z)
        if not d.feasible or key in seen:
            continue
        seen.add(key)
        out.append(d)
        if len(out) == R:
            break
    if not out:
        d = decode(ss.best.bits, layout, cuts)
        d.energy = ss.best.energy
        out.append(d)
    return out
