"""Mean-field solution, linearized generators, and two-parameter flows."""

import numpy as np
import pytest

from mfhier.config import load_model_file
from mfhier.errors import StructuralError
from mfhier.meanfield import (
    FlowOperatorConfig,
    apply_delta_j,
    d_full_apply,
    delta_apply,
    flow_apply,
    flow_matrix,
    q_bilinear,
    solve_meanfield,
)
from mfhier.models import KacModelConfig, build_kac_model
from mfhier.tensor_core import (
    NBodyState,
    symmetrize,
    tensor_power,
    tensor_product,
    trace,
    trace_norm,
)

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


def traceless(space, rng):
    a = random_state(space, 1, rng, physical=True)
    b = random_state(space, 1, rng, physical=True)
    return a.with_data(a.data - b.data)


class TestQBilinear:
    def test_zero_interaction(self, rng):
        model = build_kac_model(KacModelConfig(np.zeros((2, 2, 2, 2))), 2)
        f = random_state(model.site, 1, rng)
        assert np.allclose(q_bilinear(model, f, f).data, 0.0)

    def test_trace_vanishes(self, model_init, rng):
        model, _ = model_init
        f = random_state(model.site, 1, rng)
        g = random_state(model.site, 1, rng)
        assert abs(trace(q_bilinear(model, f, g))) < 1e-13

    def test_bilinearity(self, model_init, rng):
        model, _ = model_init
        f, g, h = (random_state(model.site, 1, rng) for _ in range(3))
        lhs = q_bilinear(model, f.with_data(2.0 * f.data + g.data), h)
        rhs = 2.0 * q_bilinear(model, f, h).data + q_bilinear(model, g, h).data
        assert np.allclose(lhs.data, rhs, atol=1e-13)

    def test_single_channel_hand_enumeration(self):
        # one channel (0,1)->(1,0) at rate 1 plus swap image; enumerate the
        # four pair states by hand:  [V(FxF)](v,w) summed over w.
        rates = np.zeros((2, 2, 2, 2))
        rates[0, 1, 1, 0] = 1.0
        rates[1, 0, 0, 1] = 1.0
        model = build_kac_model(KacModelConfig(rates), 2)
        f = NBodyState(model.site, 1, np.array([0.8, 0.2]))
        p = np.multiply.outer(f.data, f.data)
        v_pair = np.zeros((2, 2))
        v_pair[1, 0] += p[0, 1]  # gain from (0,1) -> (1,0)
        v_pair[0, 1] -= p[0, 1]  # loss out of (0,1)
        v_pair[0, 1] += p[1, 0]
        v_pair[1, 0] -= p[1, 0]
        expect = v_pair.sum(axis=1)
        got = q_bilinear(model, f, f)
        assert np.allclose(got.data, expect, atol=1e-14)


class TestSolveMeanfield:
    def test_frozen_without_dynamics(self, rng):
        model = build_kac_model(KacModelConfig(np.zeros((2, 2, 2, 2))), 2)
        f0 = random_state(model.site, 1, rng, physical=True)
        traj = solve_meanfield(model, f0, 1.0, 40)
        assert np.allclose(traj.states[-1].data, f0.data)

    def test_detailed_balance_stationary(self):
        rates = np.zeros((2, 2, 2, 2))
        rates[0, 1, 1, 0] = rates[1, 0, 0, 1] = 1.0
        model = build_kac_model(KacModelConfig(rates), 2)
        uniform = NBodyState(model.site, 1, np.array([0.5, 0.5]))
        rhs = q_bilinear(model, uniform, uniform)
        assert np.allclose(rhs.data, 0.0, atol=1e-15)
        traj = solve_meanfield(model, uniform, 1.0, 50)
        assert np.allclose(traj.states[-1].data, uniform.data, atol=1e-14)

    def test_invariants_hold(self, model_init):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.5, 500)
        traj.validate()
        assert abs(trace(traj.states[-1]) - 1.0) < 1e-12

    def test_off_grid_refused(self, kac2):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.5, 10)
        with pytest.raises(StructuralError, match="grid"):
            traj.index_of(0.512)

    def test_cubic_interp_matches_fine_solution(self, kac2):
        model, init = kac2
        coarse = solve_meanfield(model, init, 0.5, 50)
        fine = solve_meanfield(model, init, 0.5, 100)
        mid = coarse.interp(0.205)
        assert np.abs(mid.data - fine.states[41].data).max() < 1e-9


class TestDelta:
    def test_j1_is_linearized_collision(self, model_init, rng):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.2, 40)
        a = random_state(model.site, 1, rng)
        lhs = apply_delta_j(model, traj, 0.1, a)
        f = traj.state_at(0.1)
        rhs = q_bilinear(model, f, a).data + q_bilinear(model, a, f).data
        assert np.allclose(lhs.data, rhs, atol=1e-13)

    def test_product_rule_two_sites(self, model_init, rng):
        # Delta_2 on symmetrized two-factor products expands factor by factor
        model, init = model_init
        f = init
        g1 = random_state(model.site, 1, rng)
        g2 = random_state(model.site, 1, rng)
        sym = tensor_product(g1, g2).data + tensor_product(g2, g1).data
        lhs = delta_apply(model, f, NBodyState(model.site, 2, sym))
        d1g1 = q_bilinear(model, f, g1).data + q_bilinear(model, g1, f).data
        d1g2 = q_bilinear(model, f, g2).data + q_bilinear(model, g2, f).data
        d1g1 = NBodyState(model.site, 1, d1g1)
        d1g2 = NBodyState(model.site, 1, d1g2)
        rhs = (
            tensor_product(d1g1, g2).data
            + tensor_product(g1, d1g2).data
            + tensor_product(d1g2, g1).data
            + tensor_product(g2, d1g1).data
        )
        assert np.allclose(lhs.data, rhs, atol=1e-12)

    def test_zero_interaction(self, rng):
        model = build_kac_model(KacModelConfig(np.zeros((2, 2, 2, 2))), 2)
        f = random_state(model.site, 1, rng, physical=True)
        a = random_state(model.site, 2, rng)
        assert np.allclose(delta_apply(model, f, a).data, 0.0)

    def test_d_full_approaches_delta(self, model_init, rng):
        model, init = model_init
        a = random_state(model.site, 2, rng)
        lim = delta_apply(model, init, a)
        gaps = []
        for n in (32, 64):
            fin = d_full_apply(model, init, a, n)
            gaps.append(trace_norm(a.with_data(fin.data - lim.data)))
        assert gaps[1] <= gaps[0] * 0.6  # O(1/N) convergence


class TestFlows:
    def test_identity_at_equal_times(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.5, 100)
        cfg = FlowOperatorConfig(2, "limit", traj)
        a = random_state(model.site, 2, rng)
        out = flow_apply(cfg, a, 0.2, 0.2)
        assert np.allclose(out.data, a.data)

    def test_cocycle(self, model_init, rng):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.5, 100)
        cfg = FlowOperatorConfig(2, "limit", traj)
        a = random_state(model.site, 2, rng)
        once = flow_apply(cfg, a, 0.0, 0.5)
        twice = flow_apply(cfg, flow_apply(cfg, a, 0.0, 0.25), 0.25, 0.5)
        assert trace_norm(a.with_data(once.data - twice.data)) <= 1e-8

    def test_backward_inverts(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.5, 200)
        cfg = FlowOperatorConfig(1, "limit", traj)
        a = traceless(model.site, rng)
        there = flow_apply(cfg, a, 0.0, 0.5)
        back = flow_apply(cfg, there, 0.5, 0.0)
        assert np.abs(back.data - a.data).max() <= 1e-9

    def test_factorization_on_powers(self, model_init, rng):
        # limit flow on G (x) G equals the tensor square of the order-1 flow
        model, init = model_init
        traj = solve_meanfield(model, init, 0.5, 250)
        g = traceless(model.site, rng)
        u2 = flow_apply(FlowOperatorConfig(2, "limit", traj), tensor_power(g, 2), 0.0, 0.5)
        u1 = flow_apply(FlowOperatorConfig(1, "limit", traj), g, 0.0, 0.5)
        gap = trace_norm(u2.with_data(u2.data - tensor_power(u1, 2).data))
        assert gap <= 1e-8

    def test_factorization_three_sites(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.4, 200)
        g = traceless(model.site, rng)
        u3 = flow_apply(FlowOperatorConfig(3, "limit", traj), tensor_power(g, 3), 0.0, 0.4)
        u1 = flow_apply(FlowOperatorConfig(1, "limit", traj), g, 0.0, 0.4)
        assert trace_norm(u3.with_data(u3.data - tensor_power(u1, 3).data)) <= 1e-8

    def test_symmetrized_mixed_products(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.4, 200)
        g1, g2 = traceless(model.site, rng), traceless(model.site, rng)
        sym_in = symmetrize(tensor_product(g1, g2))
        u2 = flow_apply(FlowOperatorConfig(2, "limit", traj), sym_in, 0.0, 0.4)
        u1a = flow_apply(FlowOperatorConfig(1, "limit", traj), g1, 0.0, 0.4)
        u1b = flow_apply(FlowOperatorConfig(1, "limit", traj), g2, 0.0, 0.4)
        expect = symmetrize(tensor_product(u1a, u1b))
        assert trace_norm(u2.with_data(u2.data - expect.data)) <= 1e-8

    def test_gronwall_bound(self, model_init, rng):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.5, 100)
        for j, variant, n in [(1, "exact-N", 16), (2, "exact-N", 16), (2, "limit", None)]:
            cfg = FlowOperatorConfig(j, variant, traj, n_particles=n)
            for _ in range(5):
                a = random_state(model.site, j, rng)
                out = flow_apply(cfg, a, 0.0, 0.5)
                bound = np.exp(j * model.v_norm * 0.5) * trace_norm(a) + 1e-9
                assert trace_norm(out) <= bound

    def test_exact_n_minus_limit_halves(self, model_init, rng):
        model, init = model_init
        traj = solve_meanfield(model, init, 0.5, 100)
        a = random_state(model.site, 2, rng)
        lim = flow_apply(FlowOperatorConfig(2, "limit", traj), a, 0.0, 0.5)
        gaps = []
        for n in (32, 64):
            fin = flow_apply(FlowOperatorConfig(2, "exact-N", traj, n_particles=n), a, 0.0, 0.5)
            gaps.append(trace_norm(a.with_data(fin.data - lim.data)))
        ratio = gaps[0] / gaps[1]
        assert 1.7 <= ratio <= 2.4

    def test_linearization_consistency(self, kac2, rng):
        model, init = kac2
        t_final, steps = 0.4, 200
        base = solve_meanfield(model, init, t_final, steps)
        cfg = FlowOperatorConfig(1, "limit", base)
        a = traceless(model.site, rng)
        a = a.with_data(a.data * 0.2)
        lin = flow_apply(cfg, a, 0.0, t_final)
        residuals = []
        for eps in (1e-3, 1e-4):
            bumped = init.with_data(init.data + eps * a.data)
            pert = solve_meanfield(model, bumped, t_final, steps)
            diff = (pert.states[-1].data - base.states[-1].data) / eps
            residuals.append(trace_norm(a.with_data(diff - lin.data)))
        assert residuals[1] <= residuals[0] * 0.2  # first-order decay

    def test_flow_matrix_consistent(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.3, 60)
        cfg = FlowOperatorConfig(1, "limit", traj)
        mat = flow_matrix(cfg, 0.0, 0.3)
        a = random_state(model.site, 1, rng)
        assert np.allclose(mat @ a.data, flow_apply(cfg, a, 0.0, 0.3).data, atol=1e-12)

    def test_off_grid_endpoint_refused(self, kac2, rng):
        model, init = kac2
        traj = solve_meanfield(model, init, 0.5, 100)
        cfg = FlowOperatorConfig(1, "limit", traj)
        with pytest.raises(StructuralError):
            flow_apply(cfg, random_state(model.site, 1, rng), 0.0, 0.5001)
