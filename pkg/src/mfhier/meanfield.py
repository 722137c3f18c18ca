"""Mean-field equation and its linearization.

``solve_meanfield`` integrates dF/dt = K F + Q(F, F) on one site.  Around a
stored solution, ``delta_apply``/``d_full_apply`` give the limit and
finite-N linearized generators on j sites, and ``flow_apply`` integrates
the corresponding two-parameter propagators between grid nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationQualityError, StructuralError
from .models import ModelSpec, arr_apply_C, arr_apply_K, arr_apply_T
from .tensor_core import (
    NBodyState,
    _site_perm,
    arr_tensor,
    assert_physical,
    min_spectrum,
    trace,
    trace_norm,
)


def arr_q(model: ModelSpec, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return arr_apply_C(model, 2, arr_tensor(model.site, f, 1, g, 1), 1)


def q_bilinear(model: ModelSpec, f: NBodyState, g: NBodyState) -> NBodyState:
    """Q(F, G) = Tr^2( V (F (x) G) ): the collision/interaction contraction."""
    if f.n != 1 or g.n != 1:
        raise StructuralError("q_bilinear takes one-site states")
    if model.V.is_zero:
        return f.with_data(np.zeros_like(f.data))
    return NBodyState(model.site, 1, arr_q(model, f.data, g.data))


def _mf_rhs(model: ModelSpec, data: np.ndarray) -> np.ndarray:
    out = arr_q(model, data, data)
    if not model.K.is_zero:
        out = out + arr_apply_K(model, 1, data)
    return out


@dataclass(frozen=True, eq=False)
class MeanFieldTrajectory:
    """One-site mean-field solution stored on a uniform grid."""

    times: np.ndarray
    states: list  # NBodyState per node
    model: ModelSpec = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_midpoints", {})

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.times)

    def index_of(self, t: float) -> int:
        """Grid index of ``t``; off-grid times are refused, not interpolated."""
        if len(self.times) == 1:
            if abs(t - self.times[0]) < 1e-12:
                return 0
            raise StructuralError(f"time {t} not on the trajectory grid")
        dt = self.dt
        idx = int(round((t - self.times[0]) / dt))
        if idx < 0 or idx >= len(self.times) or abs(self.times[idx] - t) > 1e-9 * max(1.0, dt):
            raise StructuralError(f"time {t} not on the trajectory grid (dt={dt})")
        return idx

    def state_at(self, t: float) -> NBodyState:
        return self.states[self.index_of(t)]

    def interp(self, t: float) -> NBodyState:
        """Cubic Lagrange interpolation on the 4 nodes around ``t``.

        Grid nodes are returned exactly; used by flow integrators to evaluate
        the background at Runge-Kutta stage times.
        """
        times = self.times
        if len(times) < 4:
            raise StructuralError("cubic interpolation needs at least 4 nodes")
        dt = self.dt
        x = (t - times[0]) / dt
        i = int(np.floor(x))
        if abs(x - round(x)) < 1e-9 and 0 <= round(x) < len(times):
            return self.states[int(round(x))]
        if x < 0 or x > len(times) - 1:
            raise StructuralError(f"time {t} outside the trajectory range")
        half = round(2 * x)
        key = half if abs(2 * x - half) < 1e-9 else None
        if key is not None and key in self._midpoints:
            return self._midpoints[key]
        base = min(max(i - 1, 0), len(times) - 4)
        xi = x - base
        coeff = np.array(
            [
                np.prod([(xi - b) / (a - b) for b in range(4) if b != a])
                for a in range(4)
            ]
        )
        data = sum(c * self.states[base + k].data for k, c in enumerate(coeff))
        out = NBodyState(self.model.site, 1, data)
        if key is not None:
            self._midpoints[key] = out
        return out

    def validate(self, trace_tol: float = 1e-10, pos_tol: float = 1e-8, norm_tol: float = 1e-9):
        for t, st in zip(self.times, self.states):
            drift = abs(trace(st) - 1.0)
            if drift > trace_tol:
                raise IntegrationQualityError(
                    f"mean-field trace drift {drift:.3e} at t={t}", drift=drift
                )
            neg = min_spectrum(st)
            if neg < -pos_tol:
                raise IntegrationQualityError(
                    f"mean-field positivity violation {neg:.3e} at t={t}", drift=-neg
                )
            if abs(trace_norm(st) - 1.0) > norm_tol:
                raise IntegrationQualityError(f"mean-field 1-norm drift at t={t}")


def solve_meanfield(
    model: ModelSpec, f0: NBodyState, t_final: float, steps: int, validate: bool = True
) -> MeanFieldTrajectory:
    """Fixed-step RK4 for the nonlinear one-site mean-field equation."""
    assert_physical(f0)
    if steps < 1:
        raise StructuralError("steps must be >= 1")
    if t_final == 0.0:
        return MeanFieldTrajectory(np.array([0.0]), [f0], model)
    h = t_final / steps
    times = np.linspace(0.0, t_final, steps + 1)
    states = [f0]
    y = f0.data.copy()
    for _ in range(steps):
        k1 = _mf_rhs(model, y)
        k2 = _mf_rhs(model, y + 0.5 * h * k1)
        k3 = _mf_rhs(model, y + 0.5 * h * k2)
        k4 = _mf_rhs(model, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states.append(NBodyState(model.site, 1, y))
    traj = MeanFieldTrajectory(times, states, model)
    if validate:
        traj.validate()
    return traj


# ---------------------------------------------------------------------------
# linearized generators around the mean-field solution


def _placed_family(model: ModelSpec, f: np.ndarray, a: np.ndarray, j: int) -> list:
    """index l -> the (j+1)-site array with F at slot l and A elsewhere.

    Index 0 holds the placement at slot j+1 (the shared product A (x) F);
    the others are cached single transposes of it.
    """
    space = model.site
    prod = arr_tensor(space, a, j, f, 1)
    placed = [prod]
    for l in range(1, j + 1):
        mapping = tuple([s for s in range(1, j + 2) if s != l] + [l])
        placed.append(prod.transpose(_site_perm(space, j + 1, mapping)))
    return placed


def delta_apply(model: ModelSpec, f: NBodyState, a: NBodyState) -> NBodyState:
    """Limit linearized generator on j sites.

    Delta_j A = sum_i C_{i,j+1}[ A with F placed at slot i  +  A with F at
    slot j+1 ]; for j = 1 this is Q(F, .) + Q(., F).
    """
    return a.with_data(arr_linearized(model, f.data, a.data, a.n, None))


def arr_linearized(
    model: ModelSpec, f: np.ndarray, a: np.ndarray, j: int, n_particles: int | None
) -> np.ndarray:
    """Array core of Delta_j (n_particles=None) and of the finite-N D_j."""
    if j == 0 or model.V.is_zero:
        return np.zeros_like(a)
    placed = _placed_family(model, f, a, j)
    main = np.zeros_like(a)
    for i in range(1, j + 1):
        main = main + arr_apply_C(model, j + 1, placed[i] + placed[0], i)
    if n_particles is None:
        return main
    # sum over l != i collapses by linearity of each collision contraction
    total = placed[1]
    for l in range(2, j + 1):
        total = total + placed[l]
    cross = np.zeros_like(a)
    for i in range(1, j + 1):
        cross = cross + arr_apply_C(model, j + 1, total - placed[i], i)
    coeff = (n_particles - j) / n_particles
    return coeff * main - cross / n_particles


def d_full_apply(model: ModelSpec, f: NBodyState, a: NBodyState, n_particles: int) -> NBodyState:
    """Finite-N diagonal hierarchy operator D_j (limit of which is Delta_j).

    Carries the (N-j)/N prefactor on the main placements and the -1/N
    cross term summed over ordered pairs i != l.
    """
    return a.with_data(arr_linearized(model, f.data, a.data, a.n, n_particles))


def apply_delta_j(model: ModelSpec, traj: MeanFieldTrajectory, t: float, a: NBodyState) -> NBodyState:
    """Public entry point: Delta_j(t) applied to A, with t a grid node."""
    return delta_apply(model, traj.state_at(t), a)


# ---------------------------------------------------------------------------
# two-parameter flows


@dataclass(frozen=True, eq=False)
class FlowOperatorConfig:
    """Configuration of the order-j linearized flow.

    variant "limit" integrates K^j + Delta_j(t); variant "exact-N"
    integrates K^j + T_j/N + D_j(t) for the given particle number.
    """

    j: int
    variant: str
    background: MeanFieldTrajectory
    n_particles: int | None = None
    substeps: int = 1

    def __post_init__(self):
        if self.variant not in ("limit", "exact-N"):
            raise StructuralError(f"unknown flow variant {self.variant!r}")
        if self.variant == "exact-N":
            if self.n_particles is None or not 1 <= self.j <= self.n_particles:
                raise StructuralError("exact-N flow needs 1 <= j <= N")
        if self.substeps < 1:
            raise StructuralError("substeps must be >= 1")

    @property
    def model(self) -> ModelSpec:
        return self.background.model


def _flow_rhs(cfg: FlowOperatorConfig, tau: float, data: np.ndarray) -> np.ndarray:
    model = cfg.model
    f = cfg.background.interp(tau).data
    j = cfg.j
    out = np.zeros_like(data)
    if not model.K.is_zero:
        out = out + arr_apply_K(model, j, data)
    if cfg.variant == "limit":
        out = out + arr_linearized(model, f, data, j, None)
    else:
        n = cfg.n_particles
        out = out + arr_apply_T(model, j, data) / n
        out = out + arr_linearized(model, f, data, j, n)
    return out


def flow_apply(cfg: FlowOperatorConfig, a: NBodyState, s: float, t: float) -> NBodyState:
    """Apply U_j(t, s) (or its limit variant) to ``a``.

    ``s`` and ``t`` must be grid nodes of the background trajectory; s > t
    integrates the same generator in reverse.
    """
    if a.n != cfg.j:
        raise StructuralError(f"flow of order {cfg.j} applied to {a.n}-site state")
    traj = cfg.background
    i0, i1 = traj.index_of(s), traj.index_of(t)
    if i0 == i1:
        return a
    h = traj.dt / cfg.substeps
    if i1 < i0:
        h = -h
    y = a.data.copy()
    steps = abs(i1 - i0) * cfg.substeps
    tau = traj.times[i0]
    for _ in range(steps):
        k1 = _flow_rhs(cfg, tau, y)
        k2 = _flow_rhs(cfg, tau + 0.5 * h, y + 0.5 * h * k1)
        k3 = _flow_rhs(cfg, tau + 0.5 * h, y + 0.5 * h * k2)
        k4 = _flow_rhs(cfg, tau + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += h
    return a.with_data(y)


def flow_matrix(cfg: FlowOperatorConfig, s: float, t: float) -> np.ndarray:
    """Assembled flow on flattened j-site coordinates (small systems only)."""
    space = cfg.model.site
    dim = space.state_size(cfg.j)
    if dim > 4096:
        raise StructuralError(f"assembled flow of dimension {dim} exceeds the 4096 cap")
    cols = []
    shape = space.state_shape(cfg.j)
    for b in range(dim):
        e = np.zeros(dim, dtype=space.dtype())
        e[b] = 1.0
        basis = NBodyState(space, cfg.j, e.reshape(shape))
        cols.append(flow_apply(cfg, basis, s, t).data.reshape(-1))
    return np.stack(cols, axis=1)
