import warnings

import numpy as np
import pytest

from qbenders.bench import build_ots, bundled_case
from qbenders.benders import (
    CSV_HEADER, BendersConfig, BendersError, CorePointState, CutPool, DualInfeasible, DualOutcome,
    ExactMaster, MasterInfeasible, Method, affine_table, index_to_z, run, solve_dual_subproblem,
    solve_master_exact, solve_pareto_subproblem, update_core_point, z_to_index,
)
from qbenders.lpcore import solve_lp
from qbenders.model import MixedBinaryProgram, brute_force_milp, compile, random_instance


def tiny():
    # max z1 + y  s.t. y <= 2 - 2 z1
    return MixedBinaryProgram(i=[1.0], c=[1.0], A=[[2.0]], B=[[1.0]], b=[2.0], z_names=["z1"], y_names=["y"])


class TestSubproblems:
    def test_point_matches_primal(self):
        for seed in range(5):
            p = random_instance(seed)
            z = np.ones(p.n_z)
            out = solve_dual_subproblem(p, z)
            assert not out.is_ray
            prim = solve_lp(p.subproblem(z))
            assert out.value == pytest.approx(prim.objective, abs=1e-7)

    def test_ray_separates_on_six_bus(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = compile(build_ots(bundled_case("case6"), 5))
        z = np.zeros(p.n_z)
        out = solve_dual_subproblem(p, z)
        assert out.is_ray
        pool = CutPool(p)
        cut = pool.add(out, 1)
        assert cut.kind == "feas"
        assert cut.value(z) < 0

    def test_value_at_brute_force_optimum(self):
        for seed in range(10):
            p = random_instance(seed)
            ref = brute_force_milp(p)
            out = solve_dual_subproblem(p, ref.z)
            assert p.i @ ref.z + out.value + p.offset == pytest.approx(ref.objective, abs=1e-6)

    def test_dual_infeasible(self):
        p = MixedBinaryProgram(i=[1.0], c=[1.0], A=[[1.0]], B=[[-1.0]], b=[1.0], z_names=["z"], y_names=["y"])
        with pytest.raises(DualInfeasible):
            solve_dual_subproblem(p, [0.0])


class TestPareto:
    def test_binary_core_equals_conventional(self):
        p = random_instance(4)
        z = np.zeros(p.n_z)
        z[::2] = 1
        a = solve_dual_subproblem(p, z)
        b = solve_pareto_subproblem(p, CorePointState(z))
        assert a.kind == b.kind
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_midpoint_cut_is_valid_at_optimum(self):
        for seed in range(10):
            p = random_instance(seed)
            ref = brute_force_milp(p)
            core = CorePointState(0.5 * (np.ones(p.n_z) + ref.z))
            out = solve_pareto_subproblem(p, core)
            pool = CutPool(p)
            cut = pool.add(out, 1)
            cy = p.c @ ref.y
            if cut.kind == "opt":
                assert cut.value(ref.z) >= cy - 1e-6
            else:
                assert cut.value(ref.z) >= -1e-6

    def test_unique_dual_optimum(self):
        # dual feasible set {lam >= 1} with positive slack rhs: lam = 1 everywhere
        p = MixedBinaryProgram(i=[1.0, 1.0], c=[1.0], A=[[1.0, 1.0]], B=[[1.0]], b=[5.0],
                               z_names=["a", "b"], y_names=["y"])
        conv = solve_dual_subproblem(p, [1.0, 0.0])
        par = solve_pareto_subproblem(p, CorePointState([0.5, 0.25]))
        np.testing.assert_array_equal(conv.vector, par.vector)


class TestCorePoint:
    def test_half_step(self):
        st = update_core_point(CorePointState(np.zeros(3)), np.ones(3))
        np.testing.assert_array_equal(st.point, [0.5, 0.5, 0.5])

    def test_fixed_point(self):
        z = np.array([1.0, 0.0, 1.0])
        st = update_core_point(CorePointState(z), z)
        np.testing.assert_array_equal(st.point, z)

    def test_alternating_units(self):
        st = CorePointState(np.zeros(2))
        for z in ([1, 0], [0, 1], [1, 0]):
            st = update_core_point(st, z)
        np.testing.assert_array_equal(st.point, [0.625, 0.25])
        assert len(st.history) == 3

    def test_rejects_out_of_box(self):
        with pytest.raises(ValueError):
            CorePointState([1.5])


class TestCutPool:
    def test_duplicates_dropped(self):
        p = tiny()
        pool = CutPool(p)
        out = solve_dual_subproblem(p, [0.0])
        assert pool.add(out, 1) is not None
        assert pool.add(DualOutcome("point", out.vector + 1e-12, 0.0, np.zeros(1)), 2) is None
        assert len(pool.optimality) == 1

    def test_ray_must_lie_in_cone(self):
        p = tiny()
        with pytest.raises(BendersError):
            CutPool(p).add(DualOutcome("ray", np.array([-1.0]), None, np.zeros(1)), 1)

    def test_window_pruning(self):
        p = random_instance(2)
        pool = CutPool(p)
        pool.add(solve_dual_subproblem(p, np.zeros(p.n_z)), 1)
        pool.add(solve_dual_subproblem(p, np.ones(p.n_z)), 3)
        assert pool.prune(2, 3)
        assert len(pool.active_optimality) == 1


class TestExactMaster:
    def test_lexicographic_index(self):
        for k in range(16):
            assert z_to_index(index_to_z(k, 4)) == k
        t = affine_table([1.0, 2.0, 4.0])
        for k in range(8):
            assert t[k] == pytest.approx(np.dot([1.0, 2.0, 4.0], index_to_z(k, 3)))

    def test_empty_pool(self):
        p = MixedBinaryProgram(i=[1.0, 2.0], c=[1.0], A=[[1.0, 1.0]], B=[[1.0]], b=[1.0],
                               z_names=["a", "b"], y_names=["y"])
        cfg = BendersConfig(rho=0.0, acc_bits=3)
        res = solve_master_exact(CutPool(p), p, cfg, None)
        np.testing.assert_array_equal(res.z, [1.0, 1.0])
        assert res.ub == pytest.approx(3.0 + 2 ** 4)

    def test_empty_pool_tie_is_lexicographic(self):
        p = MixedBinaryProgram(i=[0.0, 0.0], c=[1.0], A=[[1.0, 1.0]], B=[[1.0]], b=[1.0],
                               z_names=["a", "b"], y_names=["y"])
        res = solve_master_exact(CutPool(p), p, BendersConfig(rho=0.0, acc_bits=2), None)
        np.testing.assert_array_equal(res.z, [0.0, 0.0])

    def test_single_cut(self):
        # s <= 5 - 3 z1 with i = 0
        p = MixedBinaryProgram(i=[0.0], c=[1.0], A=[[3.0]], B=[[1.0]], b=[5.0], z_names=["z1"], y_names=["y"])
        pool = CutPool(p)
        pool.add(DualOutcome("point", np.array([1.0]), 5.0, np.zeros(1)), 1)
        res = solve_master_exact(pool, p, BendersConfig(rho=0.0, acc_bits=4), None)
        assert res.z.tolist() == [0.0] and res.s == 5.0

    def test_zero_rho_matches_plain_argmax(self):
        for seed in range(8):
            p = random_instance(seed)
            pool = CutPool(p)
            rng = np.random.default_rng(seed)
            for _ in range(4):
                pool.add(solve_dual_subproblem(p, rng.integers(0, 2, p.n_z).astype(float)), 1)
            cfg = BendersConfig(rho=0.0)
            res = solve_master_exact(pool, p, cfg, rng.integers(0, 2, p.n_z), s_max=1e6)
            # independent plain argmax without any Hamming machinery
            best, best_z = -np.inf, None
            for k in range(2 ** p.n_z):
                z = index_to_z(k, p.n_z)
                if any(c.value(z) < -cfg.feas_tol for c in pool.active_feasibility):
                    continue
                v = p.i @ z + min([1e6] + [c.value(z) for c in pool.active_optimality])
                if v > best + 1e-9:
                    best, best_z = v, z
            np.testing.assert_array_equal(res.z, best_z)

    @pytest.mark.parametrize("rho", [1.0, -1.0])
    def test_hamming_sign(self, rho):
        # flat objective: the Hamming term alone decides
        p = MixedBinaryProgram(i=[0.0, 0.0], c=[1.0], A=[[1.0, 1.0]], B=[[1.0]], b=[1.0],
                               z_names=["a", "b"], y_names=["y"])
        m = ExactMaster(p, 4.0)
        res = m.solve([1.0, 0.0], rho=rho)
        assert res.z.tolist() == ([0.0, 1.0] if rho > 0 else [1.0, 0.0])

    def test_top_r_distinct_and_ordered(self):
        p = random_instance(5)
        pool = CutPool(p)
        pool.add(solve_dual_subproblem(p, np.ones(p.n_z)), 1)
        m = ExactMaster(p, 1e4)
        m.rebuild(pool)
        res = m.solve(np.zeros(p.n_z), rho=0.0, R=5)
        keys = [z_to_index(z) for z in res.candidates]
        assert len(set(keys)) == len(keys) == 5
        vals = [m.value_at(z) for z in res.candidates]
        assert vals == sorted(vals, reverse=True)

    def test_master_infeasible(self):
        p = tiny()
        m = ExactMaster(p, 4.0)
        m.feasible[:] = False
        with pytest.raises(MasterInfeasible):
            m.solve([0.0])


class TestRun:
    def test_no_binaries(self):
        p = MixedBinaryProgram(i=np.zeros(0), c=[2.0], A=np.zeros((1, 0)), B=[[1.0]], b=[3.0],
                               z_names=[], y_names=["y"])
        for m in Method:
            r = run(p, BendersConfig(), m)
            assert r.iterations == 1 and r.converged
            assert r.objective == pytest.approx(6.0)

    def test_tiny(self):
        for m in Method:
            r = run(tiny(), BendersConfig(R=2), m)
            assert r.objective == pytest.approx(2.0) and r.converged

    @pytest.mark.parametrize("method", list(Method))
    def test_random_suite_subset(self, method):
        for seed in range(0, 50, 5):
            p = random_instance(seed)
            ref = brute_force_milp(p).objective
            r = run(p, BendersConfig(R=3), method)
            assert r.converged
            assert abs(r.objective - ref) <= 1e-3

    def test_cut_validity_and_monotone_bounds(self):
        for seed in range(10):
            p = random_instance(seed)
            ref = brute_force_milp(p)
            r = run(p, BendersConfig(), Method.METHOD1)
            cy = p.c @ ref.y
            for cut in r.pool.optimality:
                assert cut.value(ref.z) >= cy - 1e-6
            for cut in r.pool.feasibility:
                assert cut.value(ref.z) >= -1e-6
            lbs = [rec.lb for rec in r.log.records]
            ubs = [rec.ub for rec in r.log.records]
            assert all(b >= a for a, b in zip(lbs, lbs[1:]))
            assert all(b <= a + 1e-9 for a, b in zip(ubs, ubs[1:]))

    def test_method2_iterations_shrink_with_R(self):
        wins = 0
        for seed in range(20):
            p = random_instance(seed)
            one = run(p, BendersConfig(R=1), Method.METHOD2).iterations
            three = run(p, BendersConfig(R=3), Method.METHOD2).iterations
            wins += three <= one
        assert wins >= 12

    def test_iteration_limit(self):
        p = random_instance(13)
        r = run(p, BendersConfig(max_iterations=1), Method.CONVENTIONAL)
        assert not r.converged and r.iterations == 1 and len(r.log) == 1
        # the all-closed start is infeasible, so no incumbent exists yet
        assert r.objective is None and r.lb == -np.inf

    def test_infeasible_milp(self):
        # y <= 2 z - 1 needs z >= 1/2, z <= 1/2 forbids z = 1; the relaxation z = 1/2 is fine
        p = MixedBinaryProgram(i=[1.0], c=[1.0], A=[[-2.0], [1.0]], B=[[1.0], [0.0]], b=[-1.0, 0.5],
                               z_names=["z"], y_names=["y"])
        with pytest.raises(MasterInfeasible):
            run(p, BendersConfig(), Method.METHOD1)

    def test_log_csv(self):
        r = run(random_instance(1), BendersConfig(), Method.METHOD1)
        lines = r.log.to_csv(timing=False).splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == r.iterations + 1
        assert r.log.to_csv(timing=False) == run(random_instance(1), BendersConfig(), "bd1").log.to_csv(False)

    def test_cut_window_still_converges(self):
        p = random_instance(6)
        ref = brute_force_milp(p).objective
        r = run(p, BendersConfig(cut_window=50), Method.METHOD1)
        assert r.objective == pytest.approx(ref, abs=1e-3)

    def test_qubo_master_with_annealer(self):
        p = random_instance(3)
        ref = brute_force_milp(p).objective
        r = run(p, BendersConfig(master="qubo", sampler="sa", max_iterations=60), Method.METHOD1)
        assert r.objective == pytest.approx(ref, abs=1e-3)
        assert r.log.records[0].best_energy is not None

    def test_annealer_stop_is_certified(self):
        # the annealer rarely reaches a feasible state of this master; the stop must not trust it
        p = random_instance(4)
        ref = brute_force_milp(p).objective
        for seed in range(3):
            r = run(p, BendersConfig(master="qubo", sampler="sa", seed=seed), Method.METHOD1)
            assert r.converged and r.objective == pytest.approx(ref, abs=1e-3)
            assert r.log.records[-1].master_backend == "qubo+exact"
            assert r.ub - r.lb <= 1e-3

    def test_qubo_master_exact_sampler(self):
        p = MixedBinaryProgram(i=[2.0, -1.0], c=[1.0], A=[[1.0, -1.0], [0.0, 0.0]], B=[[1.0], [1.0]],
                               b=[1.0, 2.0], z_names=["a", "b"], y_names=["y"])
        ref = brute_force_milp(p).objective
        r = run(p, BendersConfig(master="qubo", sampler="exact", acc_bits=1, R=2), Method.METHOD2)
        assert r.objective == pytest.approx(ref, abs=1e-3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BendersConfig(eps=0)
        with pytest.raises(ValueError):
            BendersConfig(R=0)
        with pytest.raises(ValueError):
            BendersConfig(max_iterations=0)
