"""Exact N-body evolution, marginals, and the hierarchy residual check.

Dense states evolve by fixed-step RK4 (or, for quantum systems within the
Hilbert-space cap, by one eigendecomposition and exact unitary conjugation).
Symmetric classical states evolve directly in occupation coordinates, where
the pair-collision generator is a sparse Markov matrix over occupation
classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .errors import CapacityError, IntegrationQualityError, StructuralError
from .models import ModelSpec, apply_C, apply_K_sites, apply_T
from .tensor_core import (
    NBodyState,
    SymmetricClassicalState,
    assert_physical,
    class_multiplicity,
    min_spectrum,
    occupation_classes,
    partial_trace_last,
    trace,
    trace_norm,
)

DENSE_CLASSICAL_CAP = 2**24     # entries of the weight tensor
HILBERT_DIM_CAP = 4096          # m^N for the quantum exact path
ASSEMBLE_THRESHOLD = 4096       # flattened dimension for sparse assembly


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on a uniform time grid, plus integrator metadata."""

    times: np.ndarray
    states: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise StructuralError("trajectory times and states differ in length")
        if len(self.times) > 2:
            gaps = np.diff(self.times)
            if not np.allclose(gaps, gaps[0], rtol=1e-12, atol=1e-15):
                raise StructuralError("trajectory grid must be uniform")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class GeneratorHandle:
    """K^N + (1/N) sum_{i<r} V_{i,r} on the full N-site space."""

    model: ModelSpec
    n_particles: int
    mode: str                      # "assembled" | "matrix-free"
    matrix: object = field(default=None, repr=False)

    def apply(self, f: NBodyState) -> NBodyState:
        return f.with_data(self.apply_data(f.data))

    def apply_data(self, data: np.ndarray) -> np.ndarray:
        n = self.n_particles
        if self.mode == "assembled":
            flat = self.matrix @ data.reshape(-1)
            return flat.reshape(data.shape)
        f = NBodyState(self.model.site, n, data)
        out = apply_K_sites(self.model, f).data.copy()
        if not self.model.V.is_zero:
            out += apply_T(self.model, f).data / n
        return out


def _site_permutation(shape: tuple, axes: list[int]) -> np.ndarray:
    """Flat-index permutation that moves ``axes`` to the front."""
    size = int(np.prod(shape))
    rest = [a for a in range(len(shape)) if a not in axes]
    return np.arange(size).reshape(shape).transpose(axes + rest).ravel()


def _embed_operator(opmat: np.ndarray, shape: tuple, axes: list[int]) -> sps.csr_matrix:
    """Sparse matrix of "apply opmat on the given tensor axes" in flat coordinates."""
    size = int(np.prod(shape))
    d = opmat.shape[0]
    perm = _site_permutation(shape, axes)
    p = sps.csr_matrix((np.ones(size), (np.arange(size), perm)), shape=(size, size))
    core = sps.kron(sps.csr_matrix(opmat), sps.identity(size // d, format="csr"), format="csr")
    return (p.T @ core @ p).tocsr()


def _pair_axes(model: ModelSpec, n: int, i: int, r: int) -> list[int]:
    if model.site.is_quantum:
        return [i - 1, r - 1, n + i - 1, n + r - 1]
    return [i - 1, r - 1]


def build_generator(model: ModelSpec, n_particles: int) -> GeneratorHandle:
    """Assembled sparse generator when the flattened dimension permits, else matrix-free."""
    if n_particles < 1:
        raise StructuralError("particle number must be >= 1")
    size = model.site.state_size(n_particles)
    cap = DENSE_CLASSICAL_CAP if not model.site.is_quantum else HILBERT_DIM_CAP ** 2
    if size > cap:
        raise CapacityError(
            f"dense state space of dimension {size} exceeds the cap; "
            "use the symmetric-sector path for classical backends"
        )
    if size > ASSEMBLE_THRESHOLD:
        return GeneratorHandle(model, n_particles, "matrix-free")
    shape = model.site.state_shape(n_particles)
    total = sps.csr_matrix((size, size), dtype=model.site.dtype())
    if not model.K.is_zero:
        for k in range(1, n_particles + 1):
            axes = [k - 1, n_particles + k - 1] if model.site.is_quantum else [k - 1]
            total = total + _embed_operator(model.K.matrix, shape, axes)
    if not model.V.is_zero:
        for i in range(1, n_particles + 1):
            for r in range(i + 1, n_particles + 1):
                axes = _pair_axes(model, n_particles, i, r)
                total = total + _embed_operator(model.V.matrix, shape, axes) / n_particles
    return GeneratorHandle(model, n_particles, "assembled", total.tocsr())


# ---------------------------------------------------------------------------
# evolution


def _check_quality(f: NBodyState, where: str, trace_tol: float, pos_tol: float, spectrum: bool):
    drift = abs(trace(f) - 1.0)
    if drift > trace_tol:
        raise IntegrationQualityError(f"trace drift {drift:.3e} {where}", drift=drift)
    if spectrum:
        neg = min_spectrum(f)
        if neg < -pos_tol:
            raise IntegrationQualityError(f"positivity violation {neg:.3e} {where}", drift=-neg)


def evolve(
    gen: GeneratorHandle,
    f0: NBodyState,
    t_final: float,
    steps: int,
    method: str = "auto",
    store_stride: int = 1,
    trace_tol: float = 1e-10,
    pos_tol: float = 1e-10,
) -> Trajectory:
    """Evolve a physical state; stores every ``store_stride``-th node.

    ``method`` is "rk4", "exact" (quantum eigendecomposition), or "auto"
    which picks "exact" for quantum backends within the Hilbert cap.
    """
    model = gen.model
    assert_physical(f0, tol=max(pos_tol, 1e-10))
    if f0.n != gen.n_particles:
        raise StructuralError("initial state arity does not match the generator")
    if method == "auto":
        method = (
            "exact"
            if model.site.is_quantum and model.m**gen.n_particles <= HILBERT_DIM_CAP
            else "rk4"
        )
    meta = {
        "integrator": method,
        "model_hash": model.model_hash,
        "backend": model.backend,
        "N": gen.n_particles,
        "sites": gen.n_particles,
    }
    if t_final == 0.0:
        return Trajectory(np.array([0.0]), [f0], meta)
    if steps < 1 or steps % store_stride:
        raise StructuralError("steps must be >= 1 and divisible by store_stride")
    times = np.linspace(0.0, t_final, steps // store_stride + 1)
    meta["dt"] = t_final / steps * store_stride

    if method == "exact":
        states = _evolve_exact(model, f0, times)
    elif method == "rk4":
        h = t_final / steps
        y = f0.data.copy()
        states = [f0]
        for step in range(1, steps + 1):
            k1 = gen.apply_data(y)
            k2 = gen.apply_data(y + 0.5 * h * k1)
            k3 = gen.apply_data(y + 0.5 * h * k2)
            k4 = gen.apply_data(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if step % store_stride == 0:
                states.append(NBodyState(model.site, gen.n_particles, y))
    else:
        raise StructuralError(f"unknown integration method {method!r}")

    for t, st in zip(times[1:], states[1:]):
        drift = abs(trace(st) - 1.0)
        if drift > trace_tol:
            raise IntegrationQualityError(f"trace drift {drift:.3e} at t={t}", drift=drift)
    check_spectrum = model.site.state_size(gen.n_particles) <= 2**18
    _check_quality(states[-1], f"at t={t_final}", trace_tol, pos_tol, check_spectrum)
    return Trajectory(times, states, meta)


def _evolve_exact(model: ModelSpec, f0: NBodyState, times: np.ndarray) -> list:
    """Quantum evolution by eigendecomposition of the assembled Hamiltonian."""
    n = f0.n
    m = model.m
    dim = m**n
    if dim > HILBERT_DIM_CAP:
        raise CapacityError(f"Hilbert dimension {dim} exceeds the exact-mode cap")
    shape = (m,) * n
    h_total = sps.csr_matrix((dim, dim), dtype=complex)
    h1, v2 = model.quantum.h1, model.quantum.v2
    if np.any(h1):
        for k in range(1, n + 1):
            h_total = h_total + _embed_operator(h1, shape, [k - 1])
    if np.any(v2) and n >= 2:
        for i in range(1, n + 1):
            for r in range(i + 1, n + 1):
                h_total = h_total + _embed_operator(v2, shape, [i - 1, r - 1]) / n
    w, u = np.linalg.eigh(h_total.toarray())
    a = u.conj().T @ f0.data.reshape(dim, dim) @ u
    gaps = w[:, None] - w[None, :]
    states = []
    for t in times:
        if t == 0.0:
            states.append(f0)
            continue
        phase = np.exp(-1j * gaps * t / model.hbar)
        mat = u @ (a * phase) @ u.conj().T
        states.append(NBodyState(model.site, n, mat.reshape(model.site.state_shape(n))))
    return states


def rk4_order_estimate(gen: GeneratorHandle, f0: NBodyState, t_final: float, steps: int) -> float:
    """Empirical convergence order from one step-halving self-check.

    Runs the integrator at h, h/2, h/4 and returns log2 of the successive
    end-state differences; a healthy fourth-order run reports ~4.
    """
    ends = []
    for mult in (1, 2, 4):
        traj = evolve(gen, f0, t_final, steps * mult, method="rk4", store_stride=steps * mult)
        ends.append(traj.states[-1].data)
    e1 = float(np.abs(ends[0] - ends[1]).max())
    e2 = float(np.abs(ends[1] - ends[2]).max())
    if e2 == 0.0:
        return float("inf")
    return float(np.log2(e1 / e2))


# ---------------------------------------------------------------------------
# symmetric-sector evolution (classical)

_SYM_GEN_CACHE: dict = {}


def symmetric_generator(model: ModelSpec, n_particles: int) -> sps.csr_matrix:
    """Pair-collision generator over occupation classes, scaled by 1/N.

    A site pair with velocities {a, b} occurs n_a n_b times (a != b) or
    n_a (n_a - 1)/2 times (a = b) in a configuration of the class; each
    collision moves the class by -e_a - e_b + e_c + e_d.
    """
    if model.backend != "kac":
        raise StructuralError("symmetric-sector evolution supports the kac backend only")
    key = (model.model_hash, n_particles)
    if key in _SYM_GEN_CACHE:
        return _SYM_GEN_CACHE[key]
    m = model.m
    classes = occupation_classes(m, n_particles)
    occ = np.array(classes, dtype=np.int64)
    codes = occ @ ((n_particles + 1) ** np.arange(m, dtype=np.int64))
    order = np.argsort(codes)
    sorted_codes = codes[order]
    base = (n_particles + 1) ** np.arange(m, dtype=np.int64)

    rates = model.kac.rates
    lam = model.kac.total_rates()
    rows, cols, vals = [], [], []
    idx = np.arange(len(classes))
    for a in range(m):
        for b in range(a, m):
            counts = occ[:, a] * (occ[:, a] - 1) / 2.0 if a == b else occ[:, a] * occ[:, b]
            mask = counts > 0
            if not mask.any() or lam[a, b] == 0.0:
                continue
            src = idx[mask]
            weight = counts[mask] / n_particles
            rows.append(src)
            cols.append(src)
            vals.append(-weight * lam[a, b])
            for c in range(m):
                for d in range(c, m):
                    rate = rates[a, b, c, d] if c == d else rates[a, b, c, d] + rates[a, b, d, c]
                    if rate == 0.0:
                        continue
                    delta = np.zeros(m, dtype=np.int64)
                    delta[a] -= 1
                    delta[b] -= 1
                    delta[c] += 1
                    delta[d] += 1
                    dst_codes = codes[src] + delta @ base
                    pos = np.searchsorted(sorted_codes, dst_codes)
                    dst = order[pos]
                    rows.append(dst)
                    cols.append(src)
                    vals.append(weight * rate)
    if rows:
        gen = sps.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(classes), len(classes)),
        ).tocsr()
    else:
        gen = sps.csr_matrix((len(classes), len(classes)))
    _SYM_GEN_CACHE[key] = gen
    return gen


def symmetric_product_state(f0: NBodyState, n_particles: int) -> SymmetricClassicalState:
    """Occupation weights of the product state F0^(x)N (multinomial law)."""
    if f0.space.is_quantum or f0.n != 1:
        raise StructuralError("symmetric product state needs a classical one-site state")
    occ = np.array(occupation_classes(f0.m, n_particles), dtype=np.int64)
    mult = np.array([class_multiplicity(tuple(c)) for c in occ], dtype=float)
    weights = mult * np.prod(np.asarray(f0.data)[None, :] ** occ, axis=1)
    return SymmetricClassicalState(f0.space, n_particles, weights)


def evolve_symmetric(
    model: ModelSpec,
    s0: SymmetricClassicalState,
    t_final: float,
    steps: int,
    store_stride: int = 1,
    mass_tol: float = 1e-12,
) -> Trajectory:
    """RK4 in occupation coordinates; mass is monitored against ``mass_tol`` drift."""
    gen = symmetric_generator(model, s0.n_particles)
    meta = {
        "integrator": "rk4-occupation",
        "model_hash": model.model_hash,
        "backend": model.backend,
        "N": s0.n_particles,
        "sites": s0.n_particles,
        "representation": "occupation",
    }
    if t_final == 0.0:
        return Trajectory(np.array([0.0]), [s0], meta)
    if steps < 1 or steps % store_stride:
        raise StructuralError("steps must be >= 1 and divisible by store_stride")
    h = t_final / steps
    times = np.linspace(0.0, t_final, steps // store_stride + 1)
    meta["dt"] = h * store_stride
    mass0 = s0.total_weight()
    y = s0.data.copy()
    states = [s0]
    for step in range(1, steps + 1):
        k1 = gen @ y
        k2 = gen @ (y + 0.5 * h * k1)
        k3 = gen @ (y + 0.5 * h * k2)
        k4 = gen @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if step % store_stride == 0:
            states.append(SymmetricClassicalState(s0.space, s0.n_particles, y))
    drift = abs(states[-1].total_weight() - mass0)
    if drift > mass_tol:
        raise IntegrationQualityError(f"mass drift {drift:.3e} in occupation RK4", drift=drift)
    return Trajectory(times, states, meta)


# ---------------------------------------------------------------------------
# marginals


def marginal(f: NBodyState, j: int) -> NBodyState:
    """j-particle marginal by tracing out the last n - j sites."""
    if j < 0 or j > f.n:
        raise StructuralError(f"marginal order {j} out of range 0..{f.n}")
    return partial_trace_last(f, f.n - j)


def _falling(n: np.ndarray, r: int):
    out = np.ones_like(n, dtype=float)
    for k in range(r):
        out = out * (n - k)
    return out


def marginal_symmetric(s: SymmetricClassicalState, j: int) -> NBodyState:
    """Dense j-site marginal of an occupation-compressed state.

    Uses the exact contraction G(u) = sum_cls W(cls) prod_v (n_v)_(k_v) / (N)_j,
    where k is the occupation vector of the requested prefix u.
    """
    n, m = s.n_particles, s.m
    if j < 0 or j > n:
        raise StructuralError(f"marginal order {j} out of range 0..{n}")
    if j == 0:
        return NBodyState(s.space, 0, np.asarray(s.total_weight()))
    occ = np.array(occupation_classes(m, n), dtype=np.int64)
    denom = math.prod(range(n - j + 1, n + 1))
    out = np.zeros((m,) * j)
    coeff_cache: dict = {}
    for u in np.ndindex(*(m,) * j):
        k = tuple(int(np.sum(np.array(u) == v)) for v in range(m))
        if k not in coeff_cache:
            c = np.ones(len(occ))
            for v in range(m):
                if k[v]:
                    c = c * _falling(occ[:, v], k[v])
            coeff_cache[k] = c / denom
        out[u] = float(coeff_cache[k] @ s.data)
    return NBodyState(s.space, j, out)


def marginal_trajectory(traj: Trajectory, j: int) -> Trajectory:
    """Per-node marginals; accepts dense or occupation-compressed trajectories."""
    states = []
    for st in traj.states:
        if isinstance(st, SymmetricClassicalState):
            states.append(marginal_symmetric(st, j))
        else:
            states.append(marginal(st, j))
    meta = dict(traj.meta)
    meta["sites"] = j
    meta["representation"] = "dense"
    return Trajectory(traj.times, states, meta)


# ---------------------------------------------------------------------------
# hierarchy residual


def bbgky_residual(
    model: ModelSpec, n_particles: int, traj_j: Trajectory, traj_j1: Trajectory, j: int
) -> float:
    """Max interior-node defect of the marginal hierarchy equation.

    Central differences of F_j in time are compared with
    (K^j + T_j/N) F_j + ((N-j)/N) C_{j+1} F_{j+1}; the return value is the
    largest 1-norm, dominated by the O(dt^2) finite-difference truncation.
    """
    if not (1 <= j < n_particles):
        raise StructuralError("bbgky residual needs 1 <= j < N")
    if len(traj_j) != len(traj_j1) or not np.allclose(traj_j.times, traj_j1.times):
        raise StructuralError("marginal trajectories must share one grid")
    if len(traj_j) < 3:
        raise StructuralError("need at least 3 nodes for the residual check")
    dt = traj_j.dt
    worst = 0.0
    for k in range(1, len(traj_j) - 1):
        fj = traj_j.states[k]
        dot = (traj_j.states[k + 1].data - traj_j.states[k - 1].data) / (2 * dt)
        rhs = apply_K_sites(model, fj).data.copy()
        rhs += apply_T(model, fj).data / n_particles
        cterm = np.zeros_like(rhs)
        fj1 = traj_j1.states[k]
        for i in range(1, j + 1):
            cterm += apply_C(model, fj1, i).data
        rhs += (n_particles - j) / n_particles * cterm
        worst = max(worst, trace_norm(fj.with_data(dot - rhs)))
    return worst


# ---------------------------------------------------------------------------
# textual export

_FMT = "%.17g"


def _flatten_record(st) -> np.ndarray:
    if isinstance(st, SymmetricClassicalState):
        return st.data
    if st.space.is_quantum:
        flat = st.data.reshape(-1)
        return np.column_stack([flat.real, flat.imag]).reshape(-1)
    return st.data.reshape(-1)


def write_trajectory(traj: Trajectory, path: str):
    """Header with metadata, then one line per node: time then coefficients.

    Quantum coefficients are written as alternating real/imaginary parts in
    row-major index order; occupation-compressed states list class weights
    in lexicographic occupation order.
    """
    meta = traj.meta
    with open(path, "w") as fh:
        fh.write("# mfhier-trajectory v1\n")
        keys = ["backend", "model_hash", "N", "sites", "dt", "integrator", "representation"]
        parts = [f"{k}={meta[k]}" for k in keys if k in meta]
        fh.write("# " + " ".join(parts) + "\n")
        for t, st in zip(traj.times, traj.states):
            row = _flatten_record(st)
            fh.write(" ".join([_FMT % t] + [_FMT % v for v in row]) + "\n")


def write_diagnostics_csv(traj: Trajectory, path: str):
    """Per-node scalars: trace/total weight, minimum of the spectrum, 1-norm."""
    with open(path, "w") as fh:
        fh.write("t,trace,min_spectrum,trace_norm\n")
        for t, st in zip(traj.times, traj.states):
            if isinstance(st, SymmetricClassicalState):
                tr, mn, nrm = st.total_weight(), float(st.data.min()), float(np.abs(st.data).sum())
            else:
                tr, mn, nrm = np.real(trace(st)), min_spectrum(st), trace_norm(st)
            fh.write(",".join(_FMT % v for v in (t, tr, mn, nrm)) + "\n")
