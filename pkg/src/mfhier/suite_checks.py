"""The invariant battery behind ``mfhier suite``.

Every module-level invariant is exercised at desk scale against one model
file; results are ledger rows (check id, measured value, threshold,
verdict).  Failures are verdicts, not exceptions.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.linalg import expm

from .config import load_model_file
from .expansion import build_table, duhamel_coeff
from .hierarchy import (
    correlation_error_trajectory,
    correlation_errors,
    d_lower1_rescaled,
    d_lower2_rescaled,
    d_raise,
    d_diag,
    error_hierarchy_residual,
    reconstruct_marginals,
)
from .meanfield import FlowOperatorConfig, flow_apply, solve_meanfield
from .models import ModelSpec
from .nbody import (
    bbgky_residual,
    build_generator,
    evolve,
    evolve_symmetric,
    marginal,
    marginal_symmetric,
    marginal_trajectory,
    symmetric_generator,
)
from .tensor_core import (
    NBodyState,
    compress_symmetric,
    decompress,
    place,
    partial_trace_site,
    scalar_state,
    swap_sites,
    symmetrize,
    symmetry_defect,
    tensor_power,
    trace,
    trace_norm,
)

DEFAULTS = {"N": 5, "t_final": 0.2, "steps_per_unit_time": 1000, "seed": 7052}


def _rand_state(space, n, rng, physical=False):
    if space.is_quantum:
        d = space.dim**n
        a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        mat = a @ a.conj().T if physical else (a + a.conj().T) / 2
        if physical:
            mat = mat / np.trace(mat)
        return NBodyState(space, n, mat.reshape(space.state_shape(n)))
    data = rng.random(space.state_shape(n)) if physical else rng.normal(size=space.state_shape(n))
    if physical:
        data = data / data.sum()
    return NBodyState(space, n, data)


def run_all(model_path: str, sizes: dict, _d_ops: dict | None = None) -> list:
    cfg = dict(DEFAULTS)
    cfg.update(sizes)
    model, init = load_model_file(model_path)
    if init is None:
        init = _default_initial(model)
    rng = np.random.default_rng(cfg["seed"])
    ledger: list = []

    n_small = int(cfg["N"])
    t_final = float(cfg["t_final"])
    steps = max(4, round(cfg["steps_per_unit_time"] * t_final))

    _tensor_checks(ledger, model, rng)
    _model_checks(ledger, model, rng)
    traj = evolve(
        build_generator(model, n_small), tensor_power(init, n_small), t_final, steps
    )
    mf = solve_meanfield(model, init, t_final, steps)
    _dynamics_checks(ledger, model, n_small, traj, mf, rng)
    _meanfield_checks(ledger, model, mf, rng)
    _hierarchy_checks(ledger, model, n_small, traj, mf, rng, _d_ops)
    _expansion_checks(ledger, model, mf)
    return ledger


def _default_initial(model: ModelSpec) -> NBodyState:
    m = model.m
    if model.site.is_quantum:
        w = np.arange(1, m + 1, dtype=float)
        return NBodyState(model.site, 1, np.diag(w / w.sum()).astype(complex))
    w = np.arange(1, m + 1, dtype=float)[::-1]
    return NBodyState(model.site, 1, w / w.sum())


def _push(ledger, check_id, value, threshold):
    ledger.append(
        {
            "check": check_id,
            "value": float(value),
            "threshold": float(threshold),
            "passed": bool(value <= threshold),
        }
    )


def _tensor_checks(ledger, model, rng):
    space = model.site
    f = _rand_state(space, 3, rng)
    worst_tr = max(
        abs(trace(partial_trace_site(f, k)) - trace(f)) / max(1.0, abs(trace(f)))
        for k in (1, 2, 3)
    )
    _push(ledger, "tensor.partial_trace.trace_preserved", worst_tr, 1e-13)

    pos = _rand_state(space, 2, rng, physical=True)
    gap = abs(trace_norm(partial_trace_site(pos, 1)) - trace_norm(pos))
    _push(ledger, "tensor.partial_trace.positive_norm_equality", gap, 1e-12)
    contraction = trace_norm(partial_trace_site(f, 2)) - trace_norm(f)
    _push(ledger, "tensor.partial_trace.norm_contraction", contraction, 1e-12)

    worst_swap = 0.0
    g = _rand_state(space, 3, rng)
    for i, jj in itertools.combinations(range(1, 4), 2):
        worst_swap = max(
            worst_swap,
            abs(trace_norm(swap_sites(g, i, jj)) - trace_norm(g)) / trace_norm(g),
        )
    _push(ledger, "tensor.swap.norm_preserved", worst_swap, 1e-13)

    filler = _rand_state(space, 1, rng)
    worst_place = 0.0
    for j in (2, 3, 4):
        for pair in itertools.combinations(range(1, j + 1), 2):
            a, b = pair
            body = _rand_state(space, j - 2, rng)
            rest = [s for s in range(1, j + 1) if s != a]
            nested = place(j, filler, {a}, place(j - 1, filler, {rest.index(b) + 1}, body))
            direct = place(j, filler, {a, b}, body)
            worst_place = max(worst_place, float(np.abs(nested.data - direct.data).max()))
    _push(ledger, "tensor.place.interchange", worst_place, 1e-12)

    if not space.is_quantum:
        sym = symmetrize(_rand_state(space, 4, rng, physical=True))
        back = decompress(compress_symmetric(sym))
        _push(
            ledger,
            "tensor.compression.round_trip",
            float(np.abs(back.data - sym.data).max()),
            1e-11,
        )


def _model_checks(ledger, model, rng):
    space = model.site
    worst_iso, worst_pos = 0.0, 0.0
    for t in (0.1, 0.5):
        if not model.K.is_zero:
            flow = expm(t * model.K.matrix)
            for _ in range(10):
                g = _rand_state(space, 1, rng, physical=True)
                out = g.with_data((flow @ g.data.reshape(-1)).reshape(g.data.shape))
                worst_iso = max(worst_iso, abs(trace_norm(out) - 1.0))
                worst_pos = max(worst_pos, -min(np.linalg.eigvalsh(
                    out.data.reshape(space.dim, space.dim)).min() if space.is_quantum
                    else out.data.min(), 0.0))
        pair_flow = expm(t * model.V.matrix)
        for _ in range(10):
            g2 = _rand_state(space, 2, rng, physical=True)
            out = g2.with_data((pair_flow @ g2.data.reshape(-1)).reshape(g2.data.shape))
            worst_iso = max(worst_iso, abs(trace_norm(out) - 1.0))
    _push(ledger, "model.semigroup.isometry", worst_iso, 1e-9)
    _push(ledger, "model.semigroup.positivity", worst_pos, 1e-9)

    g2 = _rand_state(space, 2, rng)
    from .models import apply_V_pair

    _push(ledger, "model.trace_annihilation", abs(trace(apply_V_pair(model, g2, 1, 2))), 1e-12)
    h2 = _rand_state(space, 2, rng)
    lin = apply_V_pair(model, g2.with_data(1.7 * g2.data - 0.4 * h2.data), 1, 2)
    parts = 1.7 * apply_V_pair(model, g2, 1, 2).data - 0.4 * apply_V_pair(model, h2, 1, 2).data
    _push(ledger, "model.pairwise_linearity", float(np.abs(lin.data - parts).max()), 1e-12)
    lhs = apply_V_pair(model, swap_sites(g2, 1, 2), 1, 2)
    rhs = swap_sites(apply_V_pair(model, g2, 1, 2), 1, 2)
    _push(ledger, "model.v_swap_symmetry", float(np.abs(lhs.data - rhs.data).max()), 1e-12)
    if model.backend == "kac":
        gen = symmetric_generator(model, 12)
        _push(
            ledger,
            "model.kac.conservativity",
            float(np.abs(np.asarray(gen.sum(axis=0))).max()),
            1e-13,
        )


def _dynamics_checks(ledger, model, n_small, traj, mf, rng):
    worst_sym = max(symmetry_defect(st)[0] for st in traj.states[:: max(1, len(traj) // 5)])
    _push(ledger, "nbody.symmetry_propagation", worst_sym, 1e-9)
    worst_iso = max(
        abs(trace_norm(st) - 1.0) for st in traj.states[:: max(1, len(traj) // 5)]
    )
    _push(ledger, "nbody.isometry", worst_iso, 1e-9)

    fin = traj.states[-1]
    worst_tower = 0.0
    for j in range(1, n_small):
        a = marginal(fin, j)
        b = partial_trace_site(marginal(fin, j + 1), j + 1)
        worst_tower = max(worst_tower, float(np.abs(a.data - b.data).max()))
    _push(ledger, "nbody.marginal_tower", worst_tower, 1e-13)

    for j in (1, 2):
        r = bbgky_residual(
            model, n_small, marginal_trajectory(traj, j), marginal_trajectory(traj, j + 1), j
        )
        _push(ledger, f"nbody.bbgky_residual.j={j}", r, 1e-6)

    if model.backend == "kac":
        s0 = compress_symmetric(tensor_power(mf.states[0], 4))
        comp = evolve_symmetric(model, s0, 0.2, 200)
        dense = evolve(build_generator(model, 4), tensor_power(mf.states[0], 4), 0.2, 200)
        gap = float(np.abs(decompress(comp.states[-1]).data - dense.states[-1].data).max())
        _push(ledger, "nbody.occupation_vs_dense", gap, 1e-10)
        gapm = max(
            float(
                np.abs(
                    marginal_symmetric(comp.states[-1], j).data - marginal(dense.states[-1], j).data
                ).max()
            )
            for j in (1, 2)
        )
        _push(ledger, "nbody.occupation_marginals", gapm, 1e-11)


def _meanfield_checks(ledger, model, mf, rng):
    drift = max(abs(trace(st) - 1.0) for st in mf.states) / max(mf.times[-1], 1e-9)
    _push(ledger, "meanfield.trace_conservation", drift, 1e-12)

    t_end = float(mf.times[-1])
    space = model.site

    def traceless():
        a = _rand_state(space, 1, rng, physical=True)
        b = _rand_state(space, 1, rng, physical=True)
        return a.with_data(a.data - b.data)

    g = traceless()
    u2 = flow_apply(FlowOperatorConfig(2, "limit", mf), tensor_power(g, 2), 0.0, t_end)
    u1 = flow_apply(FlowOperatorConfig(1, "limit", mf), g, 0.0, t_end)
    gap = trace_norm(u2.with_data(u2.data - tensor_power(u1, 2).data))
    _push(ledger, "meanfield.flow_factorization", gap, 1e-8)

    worst = 0.0
    for j in (1, 2, 3):
        for variant, n in (("limit", None), ("exact-N", 16)):
            cfg = FlowOperatorConfig(j, variant, mf, n_particles=n)
            for _ in range(4):
                a = _rand_state(space, j, rng)
                out = flow_apply(cfg, a, 0.0, t_end)
                bound = np.exp(j * model.v_norm * t_end) * trace_norm(a) + 1e-9
                worst = max(worst, trace_norm(out) - bound)
    _push(ledger, "meanfield.gronwall", worst, 0.0)

    mid = mf.times[len(mf) // 2]
    cfg = FlowOperatorConfig(2, "limit", mf)
    a = _rand_state(space, 2, rng)
    once = flow_apply(cfg, a, 0.0, t_end)
    twice = flow_apply(cfg, flow_apply(cfg, a, 0.0, mid), mid, t_end)
    _push(ledger, "meanfield.cocycle", trace_norm(once.with_data(once.data - twice.data)), 1e-8)

    f0 = mf.states[0]
    a = traceless()
    lin = flow_apply(FlowOperatorConfig(1, "limit", mf), a, 0.0, t_end)
    resid = []
    for eps in (1e-3, 1e-4):
        pert = solve_meanfield(
            model, f0.with_data(f0.data + eps * a.data), t_end, len(mf) - 1, validate=False
        )
        diff = (pert.states[-1].data - mf.states[-1].data) / eps
        resid.append(trace_norm(a.with_data(diff - lin.data)))
    decay = resid[1] / max(resid[0], 1e-30)
    _push(ledger, "meanfield.linearization_decay", decay, 0.2)


def _hierarchy_checks(ledger, model, n_small, traj, mf, rng, d_ops):
    space = model.site
    f = _rand_state(space, 1, rng, physical=True)
    worst_rt = 0.0
    for _ in range(5):
        margs = [symmetrize(_rand_state(space, j, rng, physical=True)) for j in (1, 2, 3, 4)]
        fam = correlation_errors(margs, f)
        rec = reconstruct_marginals(fam, f)
        worst_rt = max(
            worst_rt, max(float(np.abs(r.data - m.data).max()) for r, m in zip(rec, margs))
        )
    _push(ledger, "hierarchy.inversion_round_trip", worst_rt, 1e-12)

    fam0 = correlation_errors([tensor_power(f, j) for j in range(1, 7)], f)
    _push(
        ledger,
        "hierarchy.factorized_zero",
        max(trace_norm(fam0.entry(j)) for j in range(1, 7)),
        1e-14,
    )

    err = correlation_error_trajectory(traj, mf, 3)
    worst_trace = max(
        abs(trace(famt.entry(j)))
        for famt in err.families[:: max(1, len(err.families) // 5)]
        for j in (1, 2, 3)
    )
    _push(ledger, "hierarchy.error_traces_vanish", worst_trace, 1e-12)

    for j in (1, 2):
        r = error_hierarchy_residual(model, n_small, err, mf, j, d_ops=d_ops)
        _push(ledger, f"hierarchy.residual.j={j}", r, 1e-6)

    f_mf = mf.states[0]
    worst_slack = 0.0
    for j in (1, 2, 3, 4):
        for _ in range(12):
            e = _rand_state(space, j, rng)
            val = trace_norm(d_diag(model, f_mf, e, 24)) - j * model.v_norm * trace_norm(e)
            worst_slack = max(worst_slack, val)
            e_up = _rand_state(space, j + 1, rng)
            val = trace_norm(d_raise(model, e_up, j, 24)) - j * model.v_norm * trace_norm(e_up)
            worst_slack = max(worst_slack, val)
            e_dn = _rand_state(space, j - 1, rng) if j > 1 else scalar_state(space)
            val = trace_norm(d_lower1_rescaled(model, f_mf, e_dn, j)) / 24 - (
                j * j / 24
            ) * model.v_norm * trace_norm(e_dn)
            worst_slack = max(worst_slack, val)
            if j >= 2:
                e2 = _rand_state(space, j - 2, rng) if j > 2 else scalar_state(space)
                val = trace_norm(d_lower2_rescaled(model, f_mf, e2, j)) / 24 - (
                    j * j / 24
                ) * model.v_norm * trace_norm(e2)
                worst_slack = max(worst_slack, val)
    _push(ledger, "hierarchy.operator_norm_bounds", worst_slack, 0.0)


def _expansion_checks(ledger, model, mf):
    steps = len(mf) - 1
    if steps % 2:
        steps -= 1
    t_end = float(mf.times[steps])
    table = build_table(model, mf, 32, 2, 2)
    _push(ledger, "expansion.parity", table.parity_defect(), 1e-10)
    for (j, k) in ((2, 0), (1, 1)):
        direct = table.coeffs[(j, k)][steps]
        oracle = duhamel_coeff(table, j, k, t_end)
        scale = max(trace_norm(direct), 1e-30)
        _push(
            ledger,
            f"expansion.dual_path.j={j}.k={k}",
            trace_norm(direct.with_data(direct.data - oracle.data)) / scale,
            1e-5,
        )
