"""Recursive asymptotic-expansion coefficients in inverse powers of sqrt(N).

The rescaled coefficients live in a lower-triangular table over (j, k):
level k couples to itself through the double-lowering operator and to
level k-1 through the raising/lowering pair.  The production path is one
joint fixed-step RK4 sweep over the whole table; the variation-of-constants
form (`duhamel_coeff`) and the explicit first-order formulas
(`explicit_e20`, `explicit_e11`) are kept as independent cross-check
oracles.  Conventions: the (0, k) coefficient is the Kronecker delta, and
negative indices contribute nothing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .hierarchy import (
    ErrorFamily,
    arr_lower1,
    arr_lower2,
    d_lower2_rescaled,
    d_raise,
    reconstruct_marginal,
)
from .meanfield import (
    FlowOperatorConfig,
    MeanFieldTrajectory,
    arr_linearized,
    flow_apply,
    q_bilinear,
)
from .models import ModelSpec, arr_apply_K, arr_apply_T
from .tensor_core import NBodyState, scalar_state, trace, trace_norm

MODES = ("exact-N", "limit")


@dataclass(frozen=True, eq=False)
class ExpansionTable:
    """Rescaled expansion coefficients on the mean-field grid.

    ``coeffs[(j, k)]`` holds one j-site state per node for
    1 <= j <= j_max + k_max - k; the budget shrinks with k because each
    level consumes one raising step of its ancestors.
    """

    model: ModelSpec
    background: MeanFieldTrajectory
    j_max: int
    k_max: int
    mode: str
    n_particles: int | None
    convention: str
    coeffs: dict = field(default_factory=dict, repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.background.times

    def stored_orders(self):
        for k in range(self.k_max + 1):
            for j in range(1, self.j_max + self.k_max - k + 1):
                yield j, k

    def coeff(self, j: int, k: int, node: int) -> NBodyState:
        """Total accessor implementing the index conventions."""
        space = self.model.site
        if k < 0 or j < 0:
            return scalar_state(space, 0.0)
        if j == 0:
            return scalar_state(space, 1.0 if k == 0 else 0.0)
        if (j, k) not in self.coeffs:
            raise StructuralError(
                f"coefficient ({j},{k}) outside the stored table "
                f"(j_max={self.j_max}, k_max={self.k_max})"
            )
        return self.coeffs[(j, k)][node]

    def parity_defect(self) -> float:
        """Largest 1-norm among stored coefficients with odd j + k."""
        worst = 0.0
        for (j, k), states in self.coeffs.items():
            if (j + k) % 2 == 0:
                continue
            for st in states:
                worst = max(worst, trace_norm(st))
        return worst


def init_table(
    model: ModelSpec,
    background: MeanFieldTrajectory,
    n_particles: int | None,
    j_max: int,
    k_max: int,
    mode: str = "exact-N",
    convention: str = "resolved",
    e0_family: ErrorFamily | None = None,
) -> ExpansionTable:
    """Table at t = 0: nonzero initial errors split by parity of j.

    E_j(0) lands in level k = 0 (j even) or k = 1 (j odd), scaled by
    N^{j/2}; factorized initial data leaves every coefficient zero.
    """
    if mode not in MODES:
        raise StructuralError(f"unknown table mode {mode!r}")
    if mode == "exact-N" and n_particles is None:
        raise StructuralError("exact-N tables need the particle number")
    table = ExpansionTable(model, background, j_max, k_max, mode, n_particles, convention)
    if e0_family is not None and e0_family.j_max >= 1 and n_particles:
        scaled = n_particles * trace_norm(e0_family.entry(1))
        if scaled > 0.0:
            # the expansion assumes E_1(0) = O(1/N); report the effective bound
            warnings.warn(
                f"initial E_1 has N*|E_1(0)| = {scaled:.3g}; "
                "expansion accuracy assumes this stays O(1)"
            )
    for j, k in table.stored_orders():
        data = np.zeros(model.site.state_shape(j), dtype=model.site.dtype())
        if e0_family is not None and j <= e0_family.j_max and k == j % 2:
            if n_particles is None:
                raise StructuralError("nonzero initial errors need the particle number")
            data = e0_family.entry(j).data * n_particles ** (j / 2.0)
        table.coeffs[(j, k)] = [NBodyState(model.site, j, data)]
    return table


def _rhs_table(table: ExpansionTable, values: dict, f: NBodyState) -> dict:
    """Right-hand side of the coupled linear system at one stage time.

    Identically-zero operands (the odd-parity sector for factorized data)
    are skipped, which preserves the exact parity zeros.
    """
    model = table.model
    space = model.site
    f_arr = f.data
    n = table.n_particles if table.mode == "exact-N" else None
    conv = table.convention
    scalar_one = np.ones((), dtype=space.dtype())
    out = {}
    for j, k in table.stored_orders():
        y = values[(j, k)]
        acc = np.zeros_like(y)
        if y.any():
            if not model.K.is_zero:
                acc = acc + arr_apply_K(model, j, y)
            if n is not None and j >= 2:
                acc = acc + arr_apply_T(model, j, y) / n
            acc = acc + arr_linearized(model, f_arr, y, j, n)
        if j >= 2:
            op = scalar_one if j == 2 and k == 0 else None
            if j > 2 and values[(j - 2, k)].any():
                op = values[(j - 2, k)]
            if op is not None:
                acc = acc + arr_lower2(model, f_arr, op, j - 2, j, conv)
        if k >= 1:
            up = values[(j + 1, k - 1)]
            if up.any():
                acc = acc + d_raise(model, NBodyState(space, j + 1, up), j, n).data
            op = scalar_one if j == 1 and k == 1 else None
            if j > 1 and values[(j - 1, k - 1)].any():
                op = values[(j - 1, k - 1)]
            if op is not None:
                acc = acc + arr_lower1(model, f_arr, op, j - 1, j, conv)
        out[(j, k)] = acc
    return out


def evolve_table(table: ExpansionTable) -> ExpansionTable:
    """One joint RK4 sweep over the background grid (k ascending, j ascending)."""
    traj = table.background
    if len(traj) < 2:
        return table
    h = traj.dt
    values = {key: table.coeffs[key][0].data.copy() for key in table.coeffs}
    for step in range(len(traj) - 1):
        t0 = traj.times[step]
        f0 = traj.states[step]
        fm = traj.interp(t0 + 0.5 * h)
        f1 = traj.states[step + 1]
        k1 = _rhs_table(table, values, f0)
        k2 = _rhs_table(table, {q: values[q] + 0.5 * h * k1[q] for q in values}, fm)
        k3 = _rhs_table(table, {q: values[q] + 0.5 * h * k2[q] for q in values}, fm)
        k4 = _rhs_table(table, {q: values[q] + h * k3[q] for q in values}, f1)
        for q in values:
            values[q] = values[q] + (h / 6.0) * (k1[q] + 2 * k2[q] + 2 * k3[q] + k4[q])
        for (j, k) in table.stored_orders():
            table.coeffs[(j, k)].append(NBodyState(table.model.site, j, values[(j, k)]))
    return table


def build_table(
    model: ModelSpec,
    background: MeanFieldTrajectory,
    n_particles: int | None,
    j_max: int,
    k_max: int,
    mode: str = "exact-N",
    convention: str = "resolved",
    e0_family: ErrorFamily | None = None,
) -> ExpansionTable:
    return evolve_table(
        init_table(model, background, n_particles, j_max, k_max, mode, convention, e0_family)
    )


# ---------------------------------------------------------------------------
# quadrature helpers


def quad_weights(n_intervals: int, h: float) -> np.ndarray:
    """Composite Simpson weights; odd interval counts end with a 3/8 block.

    A single interval falls back to the trapezoid rule.
    """
    if n_intervals < 0:
        raise StructuralError("negative interval count")
    w = np.zeros(n_intervals + 1)
    if n_intervals == 0:
        return w
    if n_intervals == 1:
        return np.array([0.5, 0.5]) * h
    head = n_intervals if n_intervals % 2 == 0 else n_intervals - 3
    if head:
        w[0] += 1.0
        w[head] += 1.0
        w[1:head:2] += 4.0
        w[2:head:2] += 2.0
        w[: head + 1] *= h / 3.0
    if n_intervals % 2:
        tail = np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
        w[head:] += tail
    return w


def _flow_for(table: ExpansionTable, j: int, substeps: int = 1) -> FlowOperatorConfig:
    variant = "exact-N" if table.mode == "exact-N" else "limit"
    return FlowOperatorConfig(
        j, variant, table.background, n_particles=table.n_particles, substeps=substeps
    )


def _source_at(table: ExpansionTable, j: int, k: int, node: int) -> np.ndarray:
    """Inhomogeneity of the (j, k) coefficient at one grid node."""
    model = table.model
    f = table.background.states[node].data
    conv = table.convention
    n = table.n_particles if table.mode == "exact-N" else None
    acc = np.zeros(model.site.state_shape(j), dtype=model.site.dtype())
    if j >= 2:
        down2 = table.coeff(j - 2, k, node)
        if down2.data.any():
            acc = acc + arr_lower2(model, f, down2.data, down2.n, j, conv)
    if k >= 1:
        up = table.coeff(j + 1, k - 1, node)
        if up.data.any():
            acc = acc + d_raise(model, up, j, n).data
        down1 = table.coeff(j - 1, k - 1, node)
        if down1.data.any():
            acc = acc + arr_lower1(model, f, down1.data, down1.n, j, conv)
    return acc


def duhamel_coeff(table: ExpansionTable, j: int, k: int, t: float, substeps: int = 1) -> NBodyState:
    """Variation-of-constants evaluation of one coefficient.

    U_j(t,0) applied to the initial value plus the Simpson-quadrature
    integral of U_j(t,s) against the lower-level sources; independent of
    the joint-ODE sweep, used as its oracle for small j + k.  Flow values
    at the quadrature nodes are obtained by composing one checkpointed
    flow step per grid interval.
    """
    traj = table.background
    node_t = traj.index_of(t)
    if node_t % 2:
        raise StructuralError("duhamel quadrature needs an even number of grid intervals")
    cfg = _flow_for(table, j, substeps)
    init = table.coeff(j, k, 0)
    acc = init.data.copy() if init.n == j else np.zeros(
        table.model.site.state_shape(j), dtype=table.model.site.dtype()
    )
    if node_t == 0:
        return NBodyState(table.model.site, j, acc)
    weights = quad_weights(node_t, traj.dt)
    acc = acc + weights[0] * _source_at(table, j, k, 0)
    for node in range(node_t):
        carried = flow_apply(
            cfg,
            NBodyState(table.model.site, j, acc),
            traj.times[node],
            traj.times[node + 1],
        )
        acc = carried.data + weights[node + 1] * _source_at(table, j, k, node + 1)
    return NBodyState(table.model.site, j, acc)


# ---------------------------------------------------------------------------
# explicit first orders (independent of the recursion code path)


def explicit_e20(
    model: ModelSpec,
    background: MeanFieldTrajectory,
    t: float,
    n_particles: int | None,
    mode: str = "exact-N",
    convention: str = "resolved",
) -> NBodyState:
    """First even coefficient: integral of the flowed pair source.

    The source is the interaction applied to F(s) (x) F(s) minus its
    collision-contraction completions.
    """
    traj = background
    node_t = traj.index_of(t)
    variant = "exact-N" if mode == "exact-N" else "limit"
    cfg = FlowOperatorConfig(2, variant, traj, n_particles=n_particles)
    out = np.zeros(model.site.state_shape(2), dtype=model.site.dtype())
    if node_t == 0:
        return NBodyState(model.site, 2, out)
    weights = quad_weights(node_t, traj.dt)
    one = scalar_state(model.site, 1.0)
    acc = weights[0] * d_lower2_rescaled(model, traj.states[0], one, 2, convention).data
    for node in range(node_t):
        carried = flow_apply(
            cfg, NBodyState(model.site, 2, acc), traj.times[node], traj.times[node + 1]
        )
        src = d_lower2_rescaled(model, traj.states[node + 1], one, 2, convention)
        acc = carried.data + weights[node + 1] * src.data
    return NBodyState(model.site, 2, acc)


def explicit_e11(
    model: ModelSpec,
    background: MeanFieldTrajectory,
    t: float,
    n_particles: int | None,
    mode: str = "exact-N",
    convention: str = "resolved",
) -> NBodyState:
    """First odd coefficient via the once-unrolled double integral.

    -int U_1(t,s) Q(F,F)(s) ds plus (1 - 1/N) times the iterated integral
    of C_2 U_2(s,u) applied to the pair source at u.  The sign of the first
    term follows the recursion's scalar convention.
    """
    traj = background
    node_t = traj.index_of(t)
    variant = "exact-N" if mode == "exact-N" else "limit"
    cfg1 = FlowOperatorConfig(1, variant, traj, n_particles=n_particles)
    cfg2 = FlowOperatorConfig(2, variant, traj, n_particles=n_particles)
    if node_t == 0:
        return NBodyState(model.site, 1, np.zeros(model.site.state_shape(1), dtype=model.site.dtype()))
    outer = quad_weights(node_t, traj.dt)
    one = scalar_state(model.site, 1.0)

    # inner kernel: rows z[u] propagated forward through the pair flow,
    # contracted to one site at every s >= u
    contracted = [[None] * (node_t + 1) for _ in range(node_t + 1)]
    for u in range(node_t + 1):
        z = d_lower2_rescaled(model, traj.states[u], one, 2, convention)
        contracted[u][u] = d_raise(model, z, 1, None).data
        for s in range(u, node_t):
            z = flow_apply(cfg2, z, traj.times[s], traj.times[s + 1])
            contracted[u][s + 1] = d_raise(model, z, 1, None).data
    coeff = 1.0 if n_particles is None else 1.0 - 1.0 / n_particles

    def integrand_at(s):
        f = traj.states[s]
        val = -q_bilinear(model, f, f).data
        if s > 0:
            inner_w = quad_weights(s, traj.dt)
            inner = np.zeros_like(val)
            for u in range(s + 1):
                if inner_w[u]:
                    inner = inner + inner_w[u] * contracted[u][s]
            val = val + coeff * inner
        return val

    out = outer[0] * integrand_at(0)
    for s in range(node_t):
        carried = flow_apply(
            cfg1, NBodyState(model.site, 1, out), traj.times[s], traj.times[s + 1]
        )
        out = carried.data + outer[s + 1] * integrand_at(s + 1)
    return NBodyState(model.site, 1, out)


# ---------------------------------------------------------------------------
# partial sums and truncated marginals


def partial_sum(
    table: ExpansionTable, j: int, n_order: int, node: int, n_particles: int | None = None
) -> NBodyState:
    """E_j^n: the expansion truncated at k = 2n, with the N powers restored."""
    n_part = table.n_particles if n_particles is None else n_particles
    if n_part is None:
        raise StructuralError("partial sums need the particle number")
    if 2 * n_order > table.k_max:
        raise StructuralError(
            f"partial sum to order n={n_order} needs K_max >= {2 * n_order}"
        )
    acc = np.zeros(table.model.site.state_shape(j), dtype=table.model.site.dtype())
    for k in range(0, 2 * n_order + 1):
        acc = acc + float(n_part) ** (-(j + k) / 2.0) * table.coeff(j, k, node).data
    return NBodyState(table.model.site, j, acc)


def truncated_marginal(
    table: ExpansionTable, j: int, n_order: int, node: int, n_particles: int | None = None
) -> NBodyState:
    """Marginal reconstruction with every correlation error truncated at order n."""
    f = table.background.states[node]
    entries = [partial_sum(table, jj, n_order, node, n_particles) for jj in range(1, j + 1)]
    fam = ErrorFamily(j, entries)
    return reconstruct_marginal(f, fam, j)


def table_csv(table: ExpansionTable, path: str):
    """Columns: t, j, k, trace_norm, trace."""
    fmt = "%.17g"
    with open(path, "w") as fh:
        fh.write("t,j,k,trace_norm,trace\n")
        for (j, k), states in table.coeffs.items():
            for t, st in zip(table.times, states):
                fh.write(
                    ",".join(
                        [fmt % t, str(j), str(k), fmt % trace_norm(st), fmt % np.real(trace(st))]
                    )
                    + "\n"
                )
