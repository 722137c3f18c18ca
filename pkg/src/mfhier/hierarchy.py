"""Correlation errors and their closed hierarchy.

``correlation_errors`` builds the alternating subset sums E_j measuring the
defect of factorization of the j-marginals around the mean-field solution;
``reconstruct_marginals`` is its exact inverse.  The four hierarchy
operators (diagonal D_j, raising D_j^1, and the two lowering operators
D_j^-1 and D_j^-2) are assembled from slot placement, collision
contractions, pair interactions, and the bilinear collision term.  The
``error_hierarchy_residual`` check validates, in one shot, the error
definition, the N-body dynamics, and the operator algebra.

The pair-interaction prefactor of the lowering operators is ambiguous in
the source displays, so three readings are kept behind ``convention``:

* "resolved" (default): 1/N over ordered pairs in D_j^-1 and 1/(2N) in
  D_j^-2.  This is the unique reading under which the residual test
  reaches the finite-difference floor (and the scalar conventions
  D_1^-1(1) = -Q/N, D_2^-2(1) = (T(FxF) - QxF - FxQ)/N emerge from the
  general formulas instead of being special-cased).
* "appendix_b": 1/(2N) ordered-pair sums in both lowering operators.
* "section2": 1/N ordered-pair sums in both.

The residual test is the designated arbiter; both uniform readings fail
it at order j >= 2 once E_1 is nonzero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, StructuralError
from .meanfield import MeanFieldTrajectory, arr_q, d_full_apply, delta_apply
from .models import ModelSpec, apply_K_sites, apply_T, arr_apply_C
from .nbody import Trajectory, marginal_trajectory
from .tensor_core import (
    SUBSET_ENUM_MAX,
    NBodyState,
    _site_perm,
    arr_pair_apply,
    arr_tensor,
    place,
    scalar_state,
    symmetry_defect,
    trace,
    trace_norm,
    zero_state,
)

CONVENTIONS = ("resolved", "appendix_b", "section2")

# rescaled coefficients of the ordered-pair T sums: (D_j^-1, D_j^-2)
_PAIR_COEFFICIENTS = {
    "resolved": (1.0, 0.5),
    "appendix_b": (0.5, 0.5),
    "section2": (1.0, 1.0),
}


def _pair_coefficients(convention: str) -> tuple[float, float]:
    if convention not in CONVENTIONS:
        raise StructuralError(f"unknown convention {convention!r}")
    return _PAIR_COEFFICIENTS[convention]


# ---------------------------------------------------------------------------
# correlation errors and inversion


@dataclass(frozen=True, eq=False)
class ErrorFamily:
    """E_0 = 1 together with E_1..E_J at one time."""

    j_max: int
    entries: list  # NBodyState for j = 1..j_max
    meta: dict = field(default_factory=dict)

    def entry(self, j: int) -> NBodyState:
        space = self.entries[0].space
        if j < 0:
            return scalar_state(space, 0.0)   # E_{-1} = E_{-2} = 0 by convention
        if j == 0:
            return scalar_state(space, 1.0)
        if j > self.j_max:
            raise StructuralError(f"error order {j} out of range 0..{self.j_max}")
        return self.entries[j - 1]


def correlation_errors(marginals: list, f: NBodyState, meta: dict | None = None) -> ErrorFamily:
    """Alternating subset sum: E_j = sum_K (-1)^|K| [F on K] F^N_{j-|K|}."""
    j_max = len(marginals)
    if j_max < 1:
        raise StructuralError("need at least the first marginal")
    if j_max > SUBSET_ENUM_MAX:
        raise CapacityError(f"subset enumeration capped at j = {SUBSET_ENUM_MAX}")
    for j, fj in enumerate(marginals, start=1):
        if fj.n != j or fj.space != f.space:
            raise StructuralError(f"marginal {j} has wrong arity or site space")
    entries = []
    for j in range(1, j_max + 1):
        acc = np.zeros_like(marginals[j - 1].data)
        for k in range(j + 1):
            sign = -1.0 if k % 2 else 1.0
            body = scalar_state(f.space, 1.0) if k == j else marginals[j - k - 1]
            for slots in itertools.combinations(range(1, j + 1), k):
                acc = acc + sign * place(j, f, slots, body).data
        entries.append(NBodyState(f.space, j, acc))
    return ErrorFamily(j_max, entries, dict(meta or {}))


def reconstruct_marginal(f: NBodyState, errors: ErrorFamily, j: int) -> NBodyState:
    """F^N_j = sum_K [F on K] E_{j-|K|}: exact inverse of the error map."""
    acc = np.zeros(f.space.state_shape(j), dtype=f.space.dtype())
    for k in range(j + 1):
        body = errors.entry(j - k)
        for slots in itertools.combinations(range(1, j + 1), k):
            acc = acc + place(j, f, slots, body).data
    return NBodyState(f.space, j, acc)


def reconstruct_marginals(errors: ErrorFamily, f: NBodyState) -> list:
    return [reconstruct_marginal(f, errors, j) for j in range(1, errors.j_max + 1)]


# ---------------------------------------------------------------------------
# rescaling


@dataclass(frozen=True, eq=False)
class RescaledFamily:
    """View of an ErrorFamily carrying the N^{j/2} factors; never a copy."""

    base: ErrorFamily
    n_particles: int

    @property
    def j_max(self) -> int:
        return self.base.j_max

    def entry(self, j: int) -> NBodyState:
        raw = self.base.entry(j)
        if j == 0:
            return raw
        return raw.with_data(raw.data * self.n_particles ** (j / 2.0))

    def norm(self, j: int) -> float:
        # factor applied symbolically to avoid forming large scaled tensors
        return self.n_particles ** (j / 2.0) * trace_norm(self.base.entry(j))


def rescale(errors: ErrorFamily, n_particles: int) -> RescaledFamily:
    return RescaledFamily(errors, n_particles)


# ---------------------------------------------------------------------------
# the four hierarchy operators.  Cores take the mean-field state directly;
# public wrappers resolve it from a trajectory node.


def d_diag(model: ModelSpec, f: NBodyState, e: NBodyState, n_particles: int | None) -> NBodyState:
    """Diagonal operator D_j (finite N) or its limit Delta_j (N = None)."""
    if n_particles is None:
        return delta_apply(model, f, e)
    return d_full_apply(model, f, e, n_particles)


def d_raise(model: ModelSpec, e_up: NBodyState, j: int, n_particles: int | None) -> NBodyState:
    """Raising operator D_j^1 = (1 - j/N) C_{j+1} on a (j+1)-site operand."""
    if e_up.n != j + 1:
        raise StructuralError(f"raising operand must have {j + 1} sites")
    if n_particles is not None and j >= n_particles:
        return zero_state(model.site, j)   # D_N^1 = 0
    out = np.zeros(model.site.state_shape(j), dtype=model.site.dtype())
    if model.V.is_zero:
        return NBodyState(model.site, j, out)
    for i in range(1, j + 1):
        out = out + arr_apply_C(model, j + 1, e_up.data, i)
    coeff = 1.0 if n_particles is None else (n_particles - j) / n_particles
    return NBodyState(model.site, j, coeff * out)


def _one_filler_placements(space, filler: np.ndarray, e: np.ndarray, e_n: int, j: int) -> list:
    """index l in 1..j -> array with filler at slot l of j slots, e elsewhere."""
    prod = arr_tensor(space, e, e_n, filler, 1)
    out = [None]
    for l in range(1, j + 1):
        mapping = tuple([s for s in range(1, j + 1) if s != l] + [l])
        out.append(prod.transpose(_site_perm(space, j, mapping)) if j > 1 else prod)
    return out


def arr_lower1(
    model: ModelSpec, f: np.ndarray, e: np.ndarray, e_n: int, j: int, convention: str
) -> np.ndarray:
    """Array core of N D_j^-1 on a (j-1)-site operand."""
    space = model.site
    t_coef = _pair_coefficients(convention)[0]
    shape = space.state_shape(j)
    if model.V.is_zero:
        return np.zeros(shape, dtype=space.dtype())
    q = arr_q(model, f, f)
    out = np.zeros(shape, dtype=space.dtype())
    placed_q = _one_filler_placements(space, q, e, e_n, j)
    for i in range(1, j + 1):
        out = out - j * placed_q[i]
    placed_f = _one_filler_placements(space, f, e, e_n, j)
    for i in range(1, j + 1):
        for r in range(1, j + 1):
            if r == i:
                continue
            out = out + t_coef * arr_pair_apply(
                space, j, placed_f[i], model.V.matrix, min(i, r), max(i, r)
            )
    # collision cross terms.  For each spectator slot l the inner sum over
    # i != l covers every contracted position exactly once, so it is one
    # fixed (j-1)-site body placed against F at every l.
    if j >= 2:
        x1 = arr_tensor(space, e, e_n, f, 1)  # operand first, F at the last position
        body = np.zeros(space.state_shape(j - 1), dtype=space.dtype())
        for p in range(1, j):
            body = body + arr_apply_C(model, j, x1, p)
            body = body + arr_apply_C(model, j, placed_f[p], p)
        lifted = arr_tensor(space, body, j - 1, f, 1)
        for l in range(1, j + 1):
            mapping = tuple([s for s in range(1, j + 1) if s != l] + [l])
            out = out - lifted.transpose(_site_perm(space, j, mapping))
    return out


def d_lower1_rescaled(
    model: ModelSpec, f: NBodyState, e: NBodyState, j: int, convention: str = "resolved"
) -> NBodyState:
    """N D_j^-1 on a (j-1)-site operand (scalar E_0 handled by the same formula).

    Every contribution of D_j^-1 carries exactly one 1/N, so the rescaled
    operator is N-free.
    """
    if j < 1:
        return scalar_state(model.site, 0.0)
    if e.n != j - 1:
        raise StructuralError(f"lowering operand must have {j - 1} sites")
    return NBodyState(model.site, j, arr_lower1(model, f.data, e.data, e.n, j, convention))


def arr_lower2(
    model: ModelSpec, f: np.ndarray, e: np.ndarray, e_n: int, j: int, convention: str
) -> np.ndarray:
    """Array core of N D_j^-2 on a (j-2)-site operand."""
    space = model.site
    shape = space.state_shape(j)
    if model.V.is_zero:
        return np.zeros(shape, dtype=space.dtype())
    t_coef = _pair_coefficients(convention)[1]
    q = arr_q(model, f, f)
    out = np.zeros(shape, dtype=space.dtype())
    prod2 = arr_tensor(space, arr_tensor(space, e, e_n, f, 1), e_n + 1, f, 1)
    for i in range(1, j + 1):
        for s in range(i + 1, j + 1):
            mapping = tuple([x for x in range(1, j + 1) if x not in (i, s)] + [i, s])
            placed = prod2.transpose(_site_perm(space, j, mapping)) if j > 1 else prod2
            out = out + 2 * t_coef * arr_pair_apply(space, j, placed, model.V.matrix, i, s)
    # the inner spectator sum is independent of the Q slot, as in arr_lower1
    inner = _one_filler_placements(space, f, e, e_n, j - 1)
    body = inner[1]
    for p in range(2, j):
        body = body + inner[p]
    placed_q = _one_filler_placements(space, q, body, j - 1, j)
    for i in range(1, j + 1):
        out = out - placed_q[i]
    return out


def d_lower2_rescaled(
    model: ModelSpec, f: NBodyState, e: NBodyState, j: int, convention: str = "resolved"
) -> NBodyState:
    """N D_j^-2 on a (j-2)-site operand; zero for j < 2 by convention."""
    if j < 2:
        return zero_state(model.site, max(j, 0))
    if e.n != j - 2:
        raise StructuralError(f"double-lowering operand must have {j - 2} sites")
    return NBodyState(model.site, j, arr_lower2(model, f.data, e.data, e.n, j, convention))


def _mf_state(traj: MeanFieldTrajectory, t: float) -> NBodyState:
    return traj.state_at(t)


def apply_D(model, traj: MeanFieldTrajectory, t, n_particles, j, e_j, convention="resolved"):
    if e_j.n != j:
        raise StructuralError("diagonal operand arity mismatch")
    return d_diag(model, _mf_state(traj, t), e_j, n_particles)


def apply_D1(model, traj, t, n_particles, j, e_up, convention="resolved"):
    return d_raise(model, e_up, j, n_particles)


def apply_Dm1(model, traj, t, n_particles, j, e_down, convention="resolved"):
    out = d_lower1_rescaled(model, _mf_state(traj, t), e_down, j, convention)
    return out.with_data(out.data / n_particles)


def apply_Dm2(model, traj, t, n_particles, j, e_down2, convention="resolved"):
    out = d_lower2_rescaled(model, _mf_state(traj, t), e_down2, j, convention)
    return out.with_data(out.data / n_particles)


# ---------------------------------------------------------------------------
# error trajectories and the hierarchy residual


@dataclass(frozen=True, eq=False)
class ErrorTrajectory:
    times: np.ndarray
    families: list  # ErrorFamily per node

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.times)


def correlation_error_trajectory(
    nbody_traj: Trajectory, mf_traj: MeanFieldTrajectory, j_max: int
) -> ErrorTrajectory:
    """Errors E_1..E_{j_max} at every node of an N-body trajectory."""
    if len(nbody_traj) != len(mf_traj) or not np.allclose(nbody_traj.times, mf_traj.times):
        raise StructuralError("N-body and mean-field trajectories must share one grid")
    margs = [marginal_trajectory(nbody_traj, j) for j in range(1, j_max + 1)]
    n_particles = nbody_traj.meta.get("N")
    families = []
    for k in range(len(nbody_traj)):
        fam = correlation_errors(
            [margs[j - 1].states[k] for j in range(1, j_max + 1)],
            mf_traj.states[k],
            meta={"N": n_particles, "t": float(nbody_traj.times[k])},
        )
        families.append(fam)
    return ErrorTrajectory(nbody_traj.times, families)


def _default_d_ops():
    return {
        "diag": d_diag,
        "raise": d_raise,
        "lower1": d_lower1_rescaled,
        "lower2": d_lower2_rescaled,
    }


def error_hierarchy_residual(
    model: ModelSpec,
    n_particles: int,
    err_traj: ErrorTrajectory,
    mf_traj: MeanFieldTrajectory,
    j: int,
    convention: str = "resolved",
    d_ops: dict | None = None,
) -> float:
    """Max interior-node defect of the closed error hierarchy at order j.

    Central time differences of E_j are compared against
    (K^j + T_j/N) E_j + D_j E_j + D_j^1 E_{j+1} + D_j^-1 E_{j-1} + D_j^-2 E_{j-2}.
    ``d_ops`` allows tests to substitute corrupted operators.
    """
    if len(err_traj) != len(mf_traj) or not np.allclose(err_traj.times, mf_traj.times):
        raise StructuralError("error and mean-field trajectories must share one grid")
    if err_traj.families[0].j_max < j + 1:
        raise StructuralError(f"residual at order {j} needs errors up to {j + 1}")
    if len(err_traj) < 3:
        raise StructuralError("need at least 3 nodes for the residual check")
    ops = _default_d_ops() if d_ops is None else d_ops
    dt = err_traj.dt
    worst = 0.0
    for k in range(1, len(err_traj) - 1):
        fam = err_traj.families[k]
        f = mf_traj.states[k]
        e_j = fam.entry(j)
        dot = (err_traj.families[k + 1].entry(j).data - err_traj.families[k - 1].entry(j).data) / (
            2 * dt
        )
        rhs = apply_K_sites(model, e_j).data.copy()
        rhs = rhs + apply_T(model, e_j).data / n_particles
        rhs = rhs + ops["diag"](model, f, e_j, n_particles).data
        rhs = rhs + ops["raise"](model, fam.entry(j + 1), j, n_particles).data
        rhs = rhs + ops["lower1"](model, f, fam.entry(j - 1), j, convention).data / n_particles
        low2 = ops["lower2"](model, f, fam.entry(j - 2), j, convention)
        if low2.n == j:
            rhs = rhs + low2.data / n_particles
        worst = max(worst, trace_norm(e_j.with_data(dot - rhs)))
    return worst


def error_family_csv(err_traj: ErrorTrajectory, path: str):
    """Columns: t, j, trace_norm_Ej, trace_Ej, symmetry_defect."""
    fmt = "%.17g"
    with open(path, "w") as fh:
        fh.write("t,j,trace_norm_Ej,trace_Ej,symmetry_defect\n")
        for t, fam in zip(err_traj.times, err_traj.families):
            for j in range(1, fam.j_max + 1):
                e = fam.entry(j)
                row = (
                    fmt % t,
                    str(j),
                    fmt % trace_norm(e),
                    fmt % np.real(trace(e)),
                    fmt % symmetry_defect(e)[0],
                )
                fh.write(",".join(row) + "\n")
