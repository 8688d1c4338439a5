import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qbenders.benders import Cut, CutPool, ExactMaster, solve_dual_subproblem
from qbenders.model import MixedBinaryProgram, random_instance
from qbenders.qubo import (
    BitLayout, LayoutMismatch, QuboError, QuboProgram, UnboundedContinuousObjective, compile_master_to_qubo,
    compute_bit_widths, continuous_range, decode, default_penalty, encode, encode_s, s_bits,
)
from qbenders.sampler import sample_exact

from oracles import small_master


def single(c, B, b, A=None):
    B = np.atleast_2d(B)
    A = np.ones((B.shape[0], 1)) if A is None else A
    return MixedBinaryProgram(i=[1.0], c=c, A=A, B=B, b=b, z_names=["z"], y_names=[f"y{k}" for k in range(len(c))])


def all_bits(n):
    for bits in itertools.product((0, 1), repeat=n):
        yield np.array(bits, dtype=np.uint8)


def reference_energy(p, pool, rho, z_prev, lay, P, bits):
    """Energy written out term by term from the bit meanings."""
    b = bits.astype(float)
    n, g = p.n_z, lay.a_cc + 1
    z = b[:n]
    pos, dec, neg = b[n:n + g], b[n + g:n + 2 * g], b[n + 2 * g:n + 3 * g]
    s = sum(2.0 ** i * pos[i] + 2.0 ** -i * dec[i] - 2.0 ** i * neg[i] for i in range(g))
    h = sum(z[j] * (1 - 2 * z_prev[j]) + z_prev[j] for j in range(n))
    e = -(p.i @ z + s + rho * h)
    pos_ = n + 3 * g
    widths = list(lay.e1) + list(lay.e2)
    cuts = pool.active_optimality + pool.active_feasibility
    for cut, width in zip(cuts, widths):
        a = sum(2.0 ** i * b[pos_ + i] for i in range(width))
        pos_ += width
        r = cut.const - cut.coef @ z - a - (s if cut.kind == "opt" else 0.0)
        e += P * r * r
    return e, s


class TestWidths:
    def test_hundred_gives_seven(self):
        p = single([1.0], [[1.0]], [100.0], A=np.zeros((1, 1)))
        assert continuous_range(p) == pytest.approx((0.0, 100.0))
        assert s_bits(p) == 7

    def test_zero_objective_is_one_bit(self):
        assert s_bits(single([0.0], [[1.0]], [5.0])) == 1

    def test_negative_range_uses_magnitude(self):
        # a pure cost: c y in [-100, 0]
        p = single([-1.0], [[1.0]], [100.0], A=np.zeros((1, 1)))
        assert s_bits(p) == 7

    def test_unbounded(self):
        with pytest.raises(UnboundedContinuousObjective):
            s_bits(single([1.0], [[-1.0]], [1.0]))

    def test_slack_widths_cover_interval(self):
        p, pool, _, _ = small_master(3)
        lay = compute_bit_widths(p, pool, acc_bits=1)
        lo, _ = lay.s_range
        for cut, e in zip(pool.active_optimality, lay.e1):
            worst = max(cut.value(np.array(z)) for z in itertools.product((0, 1), repeat=p.n_z)) - lo
            assert 2 ** e - 1 >= worst
        assert all(e >= 1 for e in lay.e1 + lay.e2)

    def test_override_and_clamp(self, caplog):
        p = random_instance(0)
        pool = CutPool(p)
        pool.add(solve_dual_subproblem(p, np.ones(p.n_z)), 1)
        lay = compute_bit_widths(p, pool, acc_bits=10, slack_bits=10)
        assert lay.a_cc == 10 and lay.e1 == (10,)
        with caplog.at_level(logging.WARNING):
            lay = compute_bit_widths(p, pool, ceiling=3)
        assert lay.a_cc == 3 and "clamped" in caplog.text


class TestLayout:
    def test_names_and_dimension(self):
        lay = BitLayout(2, 1, (2,), (1,))
        names = lay.names()
        assert len(names) == lay.dimension == 2 + 6 + 3
        assert names[:3] == ["z_0", "z_1", "s_pos_0"]
        assert names[-1] == "a2_0_0"

    def test_counts_at_least_one(self):
        with pytest.raises(ValueError):
            BitLayout(1, 0)

    def test_mismatch(self):
        p, pool, rho, zp = small_master(0)
        with pytest.raises(LayoutMismatch):
            compile_master_to_qubo(pool, p, rho, zp, BitLayout(p.n_z, 1, (), ()))


class TestDecode:
    def test_all_zero(self):
        lay = BitLayout(2, 2, (3,), (2,))
        d = decode(np.zeros(lay.dimension), lay)
        assert d.s == 0.0 and d.a1 == [0.0] and d.a2 == [0.0]

    def test_pos_and_neg(self):
        lay = BitLayout(0, 2)
        b = np.zeros(lay.dimension)
        b[0] = b[2] = 1          # pos i = 0, 2
        b[2 * 3 + 1] = 1         # neg i = 1
        assert decode(b, lay).s == 3.0

    @given(st.integers(-7 * 4, 8 * 4 + 3))
    def test_round_trip(self, k):
        lay = BitLayout(1, 2, (3,), ())
        v = k / 4.0          # every quarter in the representable range [-7, 8.75]
        bits = encode(lay, [1], v, [5])
        d = decode(bits, lay)
        assert d.s == v and d.a1 == [5.0] and d.z.tolist() == [1.0]

    def test_unrepresentable(self):
        with pytest.raises(ValueError):
            encode_s(BitLayout(0, 2), 0.1)

    def test_length_checked(self):
        with pytest.raises(LayoutMismatch):
            decode(np.zeros(3), BitLayout(1, 1))


class TestCompile:
    def test_empty_pool_energy_is_minus_s(self):
        p = MixedBinaryProgram(i=[0.0], c=[1.0], A=[[1.0]], B=[[1.0]], b=[1.0], z_names=["z"], y_names=["y"])
        lay = BitLayout(1, 2)
        q = compile_master_to_qubo(CutPool(p), p, 0.0, [0.0], lay)
        for bits in all_bits(lay.dimension):
            assert q.energy(bits) == -decode(bits, lay).s
        best = sample_exact(q, k=1).best
        d = decode(best.bits, lay)
        assert d.s == lay.s_range[1]

    def test_energy_matches_reference_exhaustively(self):
        for seed in range(6):
            p, pool, rho, zp = small_master(seed)
            lay = compute_bit_widths(p, pool, acc_bits=1)
            q = compile_master_to_qubo(pool, p, rho, zp, lay)
            assert q.dimension <= 16
            for bits in all_bits(q.dimension):
                ref, _ = reference_energy(p, pool, rho, zp, lay, q.P1, bits)
                assert q.energy(bits) == pytest.approx(ref, abs=1e-9)

    def test_penalty_zero_exactly_on_canonical_equality(self):
        p = MixedBinaryProgram(i=[1.0], c=[1.0], A=[[1.0]], B=[[1.0]], b=[1.0], z_names=["z"], y_names=["y"])
        pool = CutPool(p)
        pool.optimality.append(Cut("opt", np.zeros(1), 2.0, np.array([1.0]), 1))
        lay = BitLayout(1, 1, (3,), ())
        assert lay.dimension == 10
        q = compile_master_to_qubo(pool, p, 0.0, [0.0], lay)
        for bits in all_bits(10):
            d = decode(bits, lay, q.cuts)
            objective = p.i @ d.z + d.s
            penalty = q.energy(bits) + objective
            holds = 2.0 - d.z[0] - d.s - d.a1[0] == 0.0
            assert (penalty == 0.0) == holds

    def test_penalty_dominance(self):
        for seed in range(10):
            p, pool, rho, zp = small_master(seed)
            lay = compute_bit_widths(p, pool, acc_bits=1)
            q = compile_master_to_qubo(pool, p, rho, zp, lay)
            m = ExactMaster(p, 2.0 ** (lay.a_cc + 1))
            m.rebuild(pool)
            res = m.solve(zp, rho)
            a1 = [c.value(res.z) - res.s for c in pool.active_optimality]
            a2 = [c.value(res.z) for c in pool.active_feasibility]
            e_opt = q.energy(encode(lay, res.z, res.s, a1, a2))
            for bits in all_bits(q.dimension):
                d = decode(bits, lay, q.cuts)
                if any(r != 0 for r in d.residuals):
                    assert q.energy(bits) > e_opt

    def test_deterministic_and_upper_triangular(self):
        p, pool, rho, zp = small_master(11)
        lay = compute_bit_widths(p, pool, acc_bits=1)
        a = compile_master_to_qubo(pool, p, rho, zp, lay)
        b = compile_master_to_qubo(pool, p, rho, zp, lay)
        assert a.Q == b.Q and a.offset == b.offset
        assert all(i <= j and v != 0 for (i, j), v in a.Q.items())

    def test_default_penalty(self):
        p, _, _, _ = small_master(1)
        assert default_penalty(p, -1.0, 4.0) == 2 * (np.abs(p.i).sum() + 4.0 + p.n_z + 1)

    def test_invalid_entries_rejected(self):
        with pytest.raises(QuboError):
            QuboProgram(2, {(1, 0): 1.0}, 0.0, BitLayout(2, 1), 1.0, 1.0)

    def test_json_round_trip(self, tmp_path):
        p = random_instance(2)
        pool = CutPool(p)
        pool.add(solve_dual_subproblem(p, np.ones(p.n_z)), 1)
        pool.add(solve_dual_subproblem(p, np.zeros(p.n_z)), 1)
        lay = compute_bit_widths(p, pool)
        q = compile_master_to_qubo(pool, p, 1.0, np.ones(p.n_z), lay)
        path = tmp_path / "q.json"
        q.save(path)
        back = QuboProgram.load(path)
        assert back.Q == q.Q and back.offset == q.offset and back.P1 == q.P1 and back.P2 == q.P2
        assert back.layout == q.layout and back.dumps() == q.dumps()
        rng = np.random.default_rng(0)
        for _ in range(20):
            bits = rng.integers(0, 2, q.dimension)
            assert back.energy(bits) == q.energy(bits)


class TestFidelity:
    def test_minimizer_matches_exact_master(self):
        for seed in range(10):
            p, pool, rho, zp = small_master(seed)
            lay = compute_bit_widths(p, pool, acc_bits=1)
            q = compile_master_to_qubo(pool, p, rho, zp, lay)
            d = decode(sample_exact(q, k=1).best.bits, lay, q.cuts)
            res = ExactMaster(p, 2.0 ** (lay.a_cc + 1))
            res.rebuild(pool)
            ex = res.solve(zp, rho)
            assert d.z.tolist() == ex.z.tolist()
            assert abs(d.s - ex.s) <= 2.0 ** -(lay.a_cc + 1) + 1e-9
            assert all(r == 0 for r in d.residuals)

    def test_fixed_point_error_bound(self):
        lay = BitLayout(0, 3)
        step = lay.s_resolution
        for v in np.linspace(-10, 10, 41):
            snapped = round(v / step) * step
            assert abs(decode(encode(lay, [], snapped), lay).s - v) <= 2.0 ** -(lay.a_cc + 1) + 1e-12
