"""Expansion-table recursion, its Duhamel/explicit oracles, partial sums."""

import numpy as np
import pytest

from mfhier.config import load_model_file
from mfhier.errors import StructuralError
from mfhier.expansion import (
    build_table,
    duhamel_coeff,
    explicit_e11,
    explicit_e20,
    init_table,
    partial_sum,
    quad_weights,
    table_csv,
    truncated_marginal,
)
from mfhier.hierarchy import correlation_errors
from mfhier.meanfield import solve_meanfield
from mfhier.tensor_core import symmetrize, tensor_power, trace_norm

from conftest import random_state


@pytest.fixture
def kac2():
    return load_model_file("configs/kac_m2.toml")


@pytest.fixture
def quantum2():
    return load_model_file("configs/quantum_m2.toml")


@pytest.fixture(params=["kac", "quantum"])
def model_init(request, kac2, quantum2):
    return {"kac": kac2, "quantum": quantum2}[request.param]


class TestQuadWeights:
    def test_polynomial_exactness(self):
        # composite Simpson (with 3/8 tail) integrates cubics exactly
        for n in (2, 3, 4, 5, 8, 11):
            h = 0.7 / n
            x = np.linspace(0.0, 0.7, n + 1)
            w = quad_weights(n, h)
            for p in range(4):
                assert w @ x**p == pytest.approx(0.7 ** (p + 1) / (p + 1), rel=1e-12)

    def test_single_interval_trapezoid(self):
        w = quad_weights(1, 0.5)
        assert np.allclose(w, [0.25, 0.25])


class TestInitTable:
    def test_factorized_all_zero(self, model_init):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.1, 20)
        table = init_table(model, traj, 32, 2, 2)
        for (j, k) in table.stored_orders():
            assert trace_norm(table.coeff(j, k, 0)) == 0.0
        assert trace_norm(table.coeff(0, 0, 0)) == 1.0
        assert trace_norm(table.coeff(0, 1, 0)) == 0.0
        assert trace_norm(table.coeff(-1, 0, 0)) == 0.0

    def test_parity_split_of_initial_errors(self, model_init, rng):
        # even j lands at k=0 with weight N^{j/2}; odd j at k=1
        model, init = model_init
        traj = solve_meanfield(model, init, 0.1, 20)
        marginals = [symmetrize(random_state(model.site, j, rng, physical=True)) for j in (1, 2)]
        fam = correlation_errors(marginals, init)
        table = init_table(model, traj, 25, 2, 2, e0_family=fam)
        assert np.allclose(table.coeff(1, 1, 0).data, 5.0 * fam.entry(1).data)
        assert trace_norm(table.coeff(1, 0, 0)) == 0.0
        assert np.allclose(table.coeff(2, 0, 0).data, 25.0 * fam.entry(2).data)
        assert trace_norm(table.coeff(2, 1, 0)) == 0.0


def small_table(model, init, n_particles=32, t_final=0.5, steps=100, j_max=2, k_max=2, mode="exact-N"):
    traj = solve_meanfield(model, init, t_final, steps)
    return build_table(model, traj, n_particles, j_max, k_max, mode=mode)


class TestEvolveTable:
    def test_parity_sparsity(self, model_init):
        model, init = model_init
        table = small_table(model, init, steps=50)
        assert table.parity_defect() <= 1e-10
        # in particular the first odd-order coefficient stays zero
        assert max(trace_norm(st) for st in table.coeffs[(1, 0)]) == 0.0

    def test_deterministic_recomputation(self, kac2):
        model, init = kac2
        a = small_table(model, init, steps=40)
        b = small_table(model, init, steps=40)
        for key in a.coeffs:
            for sa, sb in zip(a.coeffs[key], b.coeffs[key]):
                assert np.array_equal(sa.data, sb.data)

    def test_ancestor_cone_determines_value(self, kac2):
        # a table sized exactly to the dependency cone of (2,2) reproduces
        # the value computed inside a larger table bit-for-bit
        model, init = kac2
        big = small_table(model, init, steps=40, j_max=3, k_max=3)
        cone = small_table(model, init, steps=40, j_max=2, k_max=2)
        assert np.array_equal(big.coeffs[(2, 2)][-1].data, cone.coeffs[(2, 2)][-1].data)
        assert np.array_equal(big.coeffs[(1, 1)][-1].data, cone.coeffs[(1, 1)][-1].data)

    def test_limit_mode_runs_and_differs(self, kac2):
        model, init = kac2
        ex = small_table(model, init, n_particles=24, steps=50)
        lim = small_table(model, init, n_particles=None, steps=50, mode="limit")
        gap = np.abs(ex.coeffs[(2, 0)][-1].data - lim.coeffs[(2, 0)][-1].data).max()
        assert gap > 1e-4  # finite-N operators leave an O(1/N) imprint
        ex2 = small_table(model, init, n_particles=48, steps=50)
        gap2 = np.abs(ex2.coeffs[(2, 0)][-1].data - lim.coeffs[(2, 0)][-1].data).max()
        assert 1.7 <= gap / gap2 <= 2.4

    def test_csv_export(self, kac2, tmp_path):
        model, init = kac2
        table = small_table(model, init, steps=10)
        p = tmp_path / "table.csv"
        table_csv(table, str(p))
        lines = p.read_text().splitlines()
        assert lines[0] == "t,j,k,trace_norm,trace"
        assert len(lines) == 1 + len(table.coeffs) * 11


def rel_gap(a, b):
    scale = max(trace_norm(a), trace_norm(b), 1e-30)
    return trace_norm(a.with_data(a.data - b.data)) / scale


class TestDualPath:
    @pytest.mark.parametrize("jk", [(2, 0), (1, 1), (3, 1), (4, 0), (2, 2), (1, 3)])
    def test_duhamel_matches_table(self, model_init, jk):
        model, init = model_init
        j, k = jk
        table = small_table(model, init, t_final=0.4, steps=80, j_max=2, k_max=3)
        if (j, k) not in table.coeffs:
            pytest.skip("outside table budget")
        direct = table.coeffs[(j, k)][-1]
        oracle = duhamel_coeff(table, j, k, 0.4)
        if trace_norm(direct) < 1e-12:
            assert trace_norm(oracle) < 1e-10  # parity zeros agree trivially
        else:
            assert rel_gap(direct, oracle) <= 1e-5

    def test_explicit_e20(self, model_init):
        model, init = model_init
        table = small_table(model, init, t_final=0.4, steps=80)
        got = explicit_e20(model, table.background, 0.4, 32)
        assert rel_gap(table.coeffs[(2, 0)][-1], got) <= 1e-5

    def test_explicit_e11(self, model_init):
        model, init = model_init
        table = small_table(model, init, t_final=0.4, steps=80)
        got = explicit_e11(model, table.background, 0.4, 32)
        assert rel_gap(table.coeffs[(1, 1)][-1], got) <= 1e-5

    def test_explicit_e11_sign_is_material(self, kac2):
        # flipping the scalar-source sign (the as-displayed reading) must
        # break the dual-path agreement
        model, init = kac2
        table = small_table(model, init, t_final=0.4, steps=80)
        got = explicit_e11(model, table.background, 0.4, 32)
        q_term = got  # recursion-consistent
        from mfhier.meanfield import FlowOperatorConfig, flow_apply, q_bilinear
        from mfhier.expansion import quad_weights as qw
        import numpy as np

        traj = table.background
        cfg1 = FlowOperatorConfig(1, "exact-N", traj, n_particles=32)
        w = qw(80, traj.dt)
        flipped = got.data.copy()
        for s in range(81):
            if w[s]:
                f = traj.states[s]
                q = q_bilinear(model, f, f)
                flipped = flipped + 2 * w[s] * flow_apply(cfg1, q, traj.times[s], 0.4).data
        assert rel_gap(table.coeffs[(1, 1)][-1], got.with_data(flipped)) > 1e-3

    def test_odd_interval_count_refused(self, kac2):
        model, init = kac2
        table = small_table(model, init, t_final=0.4, steps=81)
        with pytest.raises(StructuralError, match="even"):
            duhamel_coeff(table, 2, 0, 0.4)


class TestPartialSums:
    def test_zero_table_gives_tensor_power(self, kac2):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.2, 40)
        table = init_table(model, traj, 32, 2, 2)
        # only node 0 exists; truncated marginal must be the pure product
        out = truncated_marginal(table, 2, 1, 0)
        assert np.allclose(out.data, tensor_power(init, 2).data, atol=1e-14)

    def test_depth_validation(self, kac2):
        model, init = kac2
        table = small_table(model, init, steps=20, k_max=2)
        with pytest.raises(StructuralError, match="K_max"):
            partial_sum(table, 1, 2, 0)

    def test_leading_power_by_parity(self, kac2):
        # E_1^n carries no integer power below 1/N: the k=0 coefficient is
        # identically zero, so N * E_1^1 is N-independent at fixed table
        model, init = kac2
        table = small_table(model, init, steps=60, t_final=0.3)
        e11 = partial_sum(table, 1, 1, 60, n_particles=10**4)
        e11_big = partial_sum(table, 1, 1, 60, n_particles=10**8)
        assert trace_norm(e11) * 1e4 == pytest.approx(trace_norm(e11_big) * 1e8, rel=1e-10)

    def test_remainder_improves_with_order(self, kac2):
        # against the exact occupation-sector run: n = 1 beats n = 0 by ~1/N
        from mfhier.nbody import evolve_symmetric, marginal_symmetric, symmetric_product_state

        model, init = kac2
        n_part, t_final, steps = 48, 0.3, 300
        s0 = symmetric_product_state(init, n_part)
        traj = evolve_symmetric(model, s0, t_final, steps, store_stride=steps)
        mf = solve_meanfield(model, init, t_final, steps)
        fam = correlation_errors(
            [marginal_symmetric(traj.states[-1], j) for j in (1, 2)], mf.states[-1]
        )
        table = build_table(model, mf, n_part, 2, 2)
        e1 = fam.entry(1)
        gap0 = trace_norm(e1.with_data(e1.data - partial_sum(table, 1, 0, steps).data))
        gap1 = trace_norm(e1.with_data(e1.data - partial_sum(table, 1, 1, steps).data))
        assert gap1 < gap0 / (n_part / 4)

    def test_truncated_marginal_against_exact(self, kac2):
        from mfhier.nbody import evolve_symmetric, marginal_symmetric, symmetric_product_state

        model, init = kac2
        n_part, t_final, steps = 48, 0.3, 300
        s0 = symmetric_product_state(init, n_part)
        traj = evolve_symmetric(model, s0, t_final, steps, store_stride=steps)
        mf = solve_meanfield(model, init, t_final, steps)
        table = build_table(model, mf, n_part, 2, 2)
        f1 = marginal_symmetric(traj.states[-1], 1)
        gap_mf = trace_norm(f1.with_data(f1.data - mf.states[-1].data))
        trunc = truncated_marginal(table, 1, 1, steps)
        gap_n1 = trace_norm(f1.with_data(f1.data - trunc.data))
        assert gap_n1 < gap_mf / (n_part / 4)


class TestInitialDataWarning:
    def test_nonfactorized_initial_errors_warn(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.1, 20)
        margs = [symmetrize(random_state(model.site, j, rng, physical=True)) for j in (1, 2)]
        fam = correlation_errors(margs, init)
        with pytest.warns(UserWarning, match="E_1"):
            init_table(model, traj, 25, 2, 2, e0_family=fam)
