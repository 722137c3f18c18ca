"""Finite-dimensional tensor algebra shared by both backends.

States live on ``n`` identical sites of dimension ``m``.  Classical states
are real arrays of shape ``(m,)*n`` (probability weights, site 1 slowest);
quantum states are complex arrays of shape ``(m,)*2n`` whose first ``n``
axes are row indices and last ``n`` axes are column indices of the density
operator.  ``n = 0`` states are scalars (0-d arrays).

Sites are 1-based everywhere.  All operations are pure: inputs are never
mutated and returned arrays are frozen read-only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, StructuralError

CLASSICAL = "classical"
QUANTUM = "quantum"

# Fixed point tolerance for the iterative symmetrizer; exact permutation
# averaging is used up to this site count.
_SYM_ENUM_MAX_SITES = 6
_SYM_FIX_TOL = 1e-14

# Subset enumeration in Definition-style alternating sums caps at 2^12 terms.
SUBSET_ENUM_MAX = 12


@dataclass(frozen=True)
class SiteSpace:
    """One-site state space: ``m`` discrete velocities or an ``m``-level system."""

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in (CLASSICAL, QUANTUM):
            raise StructuralError(f"unknown site kind {self.kind!r}")
        if self.dim < 2:
            raise StructuralError(f"site dimension must be >= 2, got {self.dim}")

    @property
    def is_quantum(self) -> bool:
        return self.kind == QUANTUM

    def dtype(self):
        return np.complex128 if self.is_quantum else np.float64

    def state_shape(self, n: int) -> tuple:
        reps = 2 * n if self.is_quantum else n
        return (self.dim,) * reps

    def state_size(self, n: int) -> int:
        return self.dim ** (2 * n if self.is_quantum else n)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class NBodyState:
    """An ``n``-site state (weight tensor or density-operator coefficients)."""

    space: SiteSpace
    n: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n < 0:
            raise StructuralError("site count must be >= 0")
        expected = self.space.state_shape(self.n)
        if tuple(self.data.shape) != expected:
            raise StructuralError(
                f"state data has shape {self.data.shape}, expected {expected} "
                f"for n={self.n} {self.space.kind} sites"
            )
        object.__setattr__(self, "data", _freeze(np.asarray(self.data, dtype=self.space.dtype())))

    @property
    def m(self) -> int:
        return self.space.dim

    def with_data(self, data: np.ndarray) -> "NBodyState":
        return NBodyState(self.space, self.n, data)


def state(space: SiteSpace, data, n: int | None = None) -> NBodyState:
    """Wrap raw coefficients as an :class:`NBodyState`, inferring ``n`` from shape."""
    arr = np.asarray(data, dtype=space.dtype())
    if n is None:
        reps = 2 if space.is_quantum else 1
        if arr.ndim % reps:
            raise StructuralError("quantum state needs an even number of axes")
        n = arr.ndim // reps
    return NBodyState(space, n, arr)


def scalar_state(space: SiteSpace, value=1.0) -> NBodyState:
    return NBodyState(space, 0, np.asarray(value, dtype=space.dtype()))


def zero_state(space: SiteSpace, n: int) -> NBodyState:
    return NBodyState(space, n, np.zeros(space.state_shape(n), dtype=space.dtype()))


def site_axes(st: NBodyState, k: int) -> tuple:
    """Array axes carrying site ``k`` (1-based): one axis classical, row+column quantum."""
    if not 1 <= k <= st.n:
        raise StructuralError(f"site index {k} out of range 1..{st.n}")
    if st.space.is_quantum:
        return (k - 1, st.n + k - 1)
    return (k - 1,)


# ---------------------------------------------------------------------------
# products, traces, swaps, placement


def tensor_product(a: NBodyState, b: NBodyState) -> NBodyState:
    """Outer product A (x) B; A's sites come first."""
    if a.space != b.space:
        raise StructuralError("tensor_product requires matching site spaces")
    return NBodyState(a.space, a.n + b.n, arr_tensor(a.space, a.data, a.n, b.data, b.n))


def tensor_power(a: NBodyState, p: int) -> NBodyState:
    if p < 0:
        raise StructuralError("tensor power must be >= 0")
    out = scalar_state(a.space, 1.0)
    for _ in range(p):
        out = tensor_product(out, a)
    return out


def partial_trace_site(f: NBodyState, k: int) -> NBodyState:
    """Trace out site ``k``, returning an ``n-1``-site state."""
    if f.n < 1:
        raise StructuralError("cannot trace a 0-site state")
    if not 1 <= k <= f.n:
        raise StructuralError(f"site index {k} out of range 1..{f.n}")
    if f.space.is_quantum:
        out = np.trace(f.data, axis1=k - 1, axis2=f.n + k - 1)
    else:
        out = f.data.sum(axis=k - 1)
    return NBodyState(f.space, f.n - 1, out)


def partial_trace_last(f: NBodyState, count: int) -> NBodyState:
    """Trace out the last ``count`` sites (marginal of order ``n-count``)."""
    if count < 0 or count > f.n:
        raise StructuralError(f"cannot trace {count} sites of an {f.n}-site state")
    out = f
    for _ in range(count):
        out = partial_trace_site(out, out.n)
    return out


def swap_sites(f: NBodyState, i: int, j: int) -> NBodyState:
    """Exchange sites ``i`` and ``j`` (involutive, 1-norm preserving)."""
    if not (1 <= i <= f.n and 1 <= j <= f.n):
        raise StructuralError(f"swap indices ({i},{j}) out of range 1..{f.n}")
    if i == j:
        return f
    data = f.data.swapaxes(i - 1, j - 1)
    if f.space.is_quantum:
        data = data.swapaxes(f.n + i - 1, f.n + j - 1)
    return NBodyState(f.space, f.n, data)


def permute_sites(f: NBodyState, perm: Sequence[int]) -> NBodyState:
    """Relabel sites: source site ``p`` becomes site ``perm[p-1]`` (1-based)."""
    if sorted(perm) != list(range(1, f.n + 1)):
        raise StructuralError(f"{perm} is not a permutation of 1..{f.n}")
    if f.n <= 1:
        return f
    return NBodyState(f.space, f.n, f.data.transpose(_site_perm(f.space, f.n, tuple(perm))))


def place(j: int, filler: NBodyState, slots: Iterable[int], body: NBodyState) -> NBodyState:
    """Assemble a ``j``-site state with ``filler`` on ``slots`` and ``body`` elsewhere.

    ``filler`` is a 1-site state placed on every slot in ``slots``; the sites
    of ``body`` fill the remaining slots in increasing order.  Multilinear in
    (filler, body) and order-independent for disjoint slot sets.
    """
    slots = tuple(sorted(set(slots)))
    if slots and (slots[0] < 1 or slots[-1] > j):
        raise StructuralError(f"slots {slots} out of range 1..{j}")
    if filler.n != 1:
        raise StructuralError("filler must be a 1-site state")
    if body.n != j - len(slots):
        raise StructuralError(
            f"body has {body.n} sites, expected {j - len(slots)} "
            f"for {len(slots)} filled slots out of {j}"
        )
    return NBodyState(
        filler.space, j, arr_place(filler.space, j, filler.data, slots, body.data, body.n)
    )


def trace(f: NBodyState):
    """Total trace: sum of weights (classical) or matrix trace (quantum)."""
    if f.n == 0:
        return complex(f.data) if f.space.is_quantum else float(f.data)
    if f.space.is_quantum:
        d = f.m**f.n
        return complex(np.trace(f.data.reshape(d, d)))
    return float(f.data.sum())


def trace_norm(f: NBodyState) -> float:
    """1-norm: sum of absolute weights, or sum of singular values."""
    if f.n == 0:
        return float(abs(f.data))
    if f.space.is_quantum:
        d = f.m**f.n
        return float(np.linalg.svd(f.data.reshape(d, d), compute_uv=False).sum())
    return float(np.abs(f.data).sum())


def to_matrix(f: NBodyState) -> np.ndarray:
    """Quantum state as an (m^n, m^n) matrix."""
    if not f.space.is_quantum:
        raise StructuralError("to_matrix applies to quantum states")
    d = f.m**f.n
    return f.data.reshape(d, d)


def from_matrix(space: SiteSpace, n: int, mat: np.ndarray) -> NBodyState:
    return NBodyState(space, n, np.asarray(mat).reshape(space.state_shape(n)))


def min_spectrum(f: NBodyState) -> float:
    """Smallest weight (classical) or eigenvalue of the Hermitian part (quantum)."""
    if f.n == 0:
        v = trace(f)
        return float(np.real(v))
    if f.space.is_quantum:
        mat = to_matrix(f)
        return float(np.linalg.eigvalsh((mat + mat.conj().T) / 2).min())
    return float(f.data.min())


def assert_physical(f: NBodyState, tol: float = 1e-10):
    """Check trace one and positivity within ``tol``; raise otherwise."""
    tr = trace(f)
    if abs(tr - 1.0) > 1e-8:
        raise StructuralError(f"state trace {tr} differs from 1 beyond 1e-8")
    low = min_spectrum(f)
    if low < -tol:
        raise StructuralError(f"state has negative part {low} below floor {-tol}")
    if f.space.is_quantum and f.n > 0:
        mat = to_matrix(f)
        herm = float(np.abs(mat - mat.conj().T).max())
        if herm > 1e-9:
            raise StructuralError(f"state is not Hermitian (defect {herm})")


# ---------------------------------------------------------------------------
# array-level fast core.  All tensors here have shape (m,)*reps, so axis
# permutations depend only on (reps, axes) and are cached.  The public
# NBodyState operations delegate to these helpers.

_PERM_CACHE: dict = {}


def _front_perm(reps: int, axes: tuple) -> tuple:
    """Transpose order equivalent to moveaxis(axes -> front)."""
    key = (reps, axes)
    perm = _PERM_CACHE.get(key)
    if perm is None:
        rest = [a for a in range(reps) if a not in axes]
        perm = tuple(list(axes) + rest)
        _PERM_CACHE[key] = perm
    return perm


def _inverse_perm(perm: tuple) -> tuple:
    key = ("inv", perm)
    inv = _PERM_CACHE.get(key)
    if inv is None:
        inv = [0] * len(perm)
        for pos, axis in enumerate(perm):
            inv[axis] = pos
        inv = tuple(inv)
        _PERM_CACHE[key] = inv
    return inv


def _site_perm(space: SiteSpace, n: int, mapping: tuple) -> tuple:
    """Axis permutation realizing a 1-based site relabeling p -> mapping[p-1]."""
    key = (space.kind, n, mapping)
    perm = _PERM_CACHE.get(key)
    if perm is None:
        axis_dst = [mapping[p] - 1 for p in range(n)]
        if space.is_quantum:
            axis_dst = axis_dst + [n + a for a in axis_dst]
        inv = [0] * len(axis_dst)
        for src_axis, dst_axis in enumerate(axis_dst):
            inv[dst_axis] = src_axis
        perm = tuple(inv)
        _PERM_CACHE[key] = perm
    return perm


def arr_tensor(space: SiteSpace, a: np.ndarray, na: int, b: np.ndarray, nb: int) -> np.ndarray:
    if na == 0:
        return a[()] * b
    if nb == 0:
        return a * b[()]
    out = np.multiply.outer(a, b)
    if space.is_quantum:
        perm = _PERM_CACHE.get(("tp", na, nb))
        if perm is None:
            perm = tuple(
                list(range(na))
                + [2 * na + i for i in range(nb)]
                + [na + i for i in range(na)]
                + [2 * na + nb + i for i in range(nb)]
            )
            _PERM_CACHE[("tp", na, nb)] = perm
        out = out.transpose(perm)
    return out


def arr_ptrace_site(space: SiteSpace, n: int, data: np.ndarray, k: int) -> np.ndarray:
    if space.is_quantum:
        return np.trace(data, axis1=k - 1, axis2=n + k - 1)
    return data.sum(axis=k - 1)


def arr_site_apply(space: SiteSpace, n: int, data: np.ndarray, opmat: np.ndarray, k: int):
    axes = (k - 1, n + k - 1) if space.is_quantum else (k - 1,)
    reps = data.ndim
    perm = _front_perm(reps, axes)
    moved = data.transpose(perm)
    shape = moved.shape
    out = opmat @ moved.reshape(opmat.shape[0], -1)
    return out.reshape(shape).transpose(_inverse_perm(perm))


def arr_pair_apply(space: SiteSpace, n: int, data: np.ndarray, opmat: np.ndarray, i: int, r: int):
    if space.is_quantum:
        axes = (i - 1, r - 1, n + i - 1, n + r - 1)
    else:
        axes = (i - 1, r - 1)
    reps = data.ndim
    perm = _front_perm(reps, axes)
    moved = data.transpose(perm)
    shape = moved.shape
    out = opmat @ moved.reshape(opmat.shape[0], -1)
    return out.reshape(shape).transpose(_inverse_perm(perm))


def arr_place(
    space: SiteSpace, j: int, filler: np.ndarray, slots: tuple, body: np.ndarray, body_n: int
) -> np.ndarray:
    """Single-transpose placement; ``slots`` must be a sorted tuple."""
    prod = body
    n = body_n
    for _ in slots:
        prod = arr_tensor(space, prod, n, filler, 1)
        n += 1
    rest = [s for s in range(1, j + 1) if s not in slots]
    mapping = tuple(rest + list(slots))
    return prod.transpose(_site_perm(space, j, mapping)) if j > 1 else prod


# ---------------------------------------------------------------------------
# one- and two-site operator application


def apply_site_operator(f: NBodyState, opmat: np.ndarray, k: int) -> NBodyState:
    """Apply a one-site superoperator (given in flattened site coordinates) at site ``k``."""
    if not 1 <= k <= f.n:
        raise StructuralError(f"site index {k} out of range 1..{f.n}")
    return NBodyState(f.space, f.n, arr_site_apply(f.space, f.n, f.data, opmat, k))


def apply_pair_operator(f: NBodyState, opmat: np.ndarray, i: int, r: int) -> NBodyState:
    """Apply a two-site superoperator to the (ordered) site pair ``(i, r)``.

    Quantum axis order fed to the operator is (row_i, row_r, col_i, col_r),
    matching superoperators built as ``kron(v, I) - kron(I, v.T)``.
    """
    if i == r:
        raise StructuralError("pair operator needs two distinct sites")
    if not (1 <= i <= f.n and 1 <= r <= f.n):
        raise StructuralError(f"pair indices ({i},{r}) out of range 1..{f.n}")
    return NBodyState(f.space, f.n, arr_pair_apply(f.space, f.n, f.data, opmat, i, r))


# ---------------------------------------------------------------------------
# symmetry


def symmetry_defect(f: NBodyState) -> tuple[float, tuple[int, int]]:
    """Worst absolute deviation from any adjacent site swap, and the swap."""
    worst, pair = 0.0, (0, 0)
    for i in range(1, f.n):
        d = float(np.abs(f.data - swap_sites(f, i, i + 1).data).max())
        if d > worst:
            worst, pair = d, (i, i + 1)
    return worst, pair


def is_symmetric(f: NBodyState, tol: float = 1e-9) -> bool:
    return symmetry_defect(f)[0] <= tol


def symmetrize(f: NBodyState) -> NBodyState:
    """Project onto the permutation-invariant sector.

    Exact group average up to 6 sites; beyond that, sweeps of pairwise
    averaging over adjacent transpositions iterated to a 1e-14 fixed point.
    """
    if f.n <= 1:
        return f
    if f.n <= _SYM_ENUM_MAX_SITES:
        acc = np.zeros_like(f.data)
        count = 0
        for perm in itertools.permutations(range(1, f.n + 1)):
            acc = acc + permute_sites(f, perm).data
            count += 1
        return NBodyState(f.space, f.n, acc / count)
    cur = f
    for _ in range(100_000):
        nxt = cur
        for i in range(1, f.n):
            nxt = nxt.with_data((nxt.data + swap_sites(nxt, i, i + 1).data) / 2)
        delta = float(np.abs(nxt.data - cur.data).max())
        cur = nxt
        if delta <= _SYM_FIX_TOL:
            return cur
    raise StructuralError("symmetrize failed to reach its fixed point")


# ---------------------------------------------------------------------------
# symmetric-sector compression (classical only)


@lru_cache(maxsize=None)
def occupation_classes(m: int, n_particles: int) -> tuple:
    """All occupation vectors (n_1..n_m) with sum N, in lexicographic order."""

    def rec(left: int, slots: int):
        if slots == 1:
            yield (left,)
            return
        for head in range(left + 1):
            for tail in rec(left - head, slots - 1):
                yield (head,) + tail

    return tuple(rec(n_particles, m))


@lru_cache(maxsize=None)
def class_index(m: int, n_particles: int) -> dict:
    return {occ: i for i, occ in enumerate(occupation_classes(m, n_particles))}


def class_multiplicity(occ: Sequence[int]) -> int:
    """Number of site configurations in an occupation class (multinomial)."""
    total = sum(occ)
    mult, left = 1, total
    for c in occ:
        mult *= math.comb(left, c)
        left -= c
    return mult


@dataclass(frozen=True, eq=False)
class SymmetricClassicalState:
    """Symmetric classical state stored as total mass per occupation class."""

    space: SiteSpace
    n_particles: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.space.is_quantum:
            raise StructuralError("symmetric compression is classical-only")
        expected = len(occupation_classes(self.space.dim, self.n_particles))
        if self.data.shape != (expected,):
            raise StructuralError(
                f"occupation weights have shape {self.data.shape}, expected ({expected},)"
            )
        object.__setattr__(self, "data", _freeze(np.asarray(self.data, dtype=np.float64)))

    @property
    def m(self) -> int:
        return self.space.dim

    def total_weight(self) -> float:
        return float(self.data.sum())

    def with_data(self, data: np.ndarray) -> "SymmetricClassicalState":
        return SymmetricClassicalState(self.space, self.n_particles, data)


def _config_class_indices(m: int, n: int) -> np.ndarray:
    """For every flat site configuration, the index of its occupation class."""
    size = m**n
    if size > 2**26:
        raise CapacityError(f"dense configuration table of size {size} exceeds cap")
    idx = np.arange(size)
    digits = (idx[:, None] // (m ** np.arange(n - 1, -1, -1))) % m
    occ = np.stack([(digits == v).sum(axis=1) for v in range(m)], axis=1)
    lookup = class_index(m, n)
    codes = occ @ ((n + 1) ** np.arange(m))
    code_of_class = np.array(
        [np.array(c) @ ((n + 1) ** np.arange(m)) for c in occupation_classes(m, n)]
    )
    order = np.argsort(code_of_class)
    pos = np.searchsorted(code_of_class[order], codes)
    return order[pos]


def compress_symmetric(f: NBodyState, tol: float = 1e-9) -> SymmetricClassicalState:
    """Bucket a symmetric classical state into occupation-class weights."""
    if f.space.is_quantum:
        raise StructuralError("symmetric compression is classical-only")
    defect, pair = symmetry_defect(f)
    if defect > tol:
        raise StructuralError(
            f"state is not symmetric: swap {pair} deviates by {defect} (> {tol})"
        )
    cls = _config_class_indices(f.m, f.n)
    weights = np.zeros(len(occupation_classes(f.m, f.n)))
    np.add.at(weights, cls, f.data.ravel())
    return SymmetricClassicalState(f.space, f.n, weights)


def decompress(s: SymmetricClassicalState) -> NBodyState:
    """Expand occupation-class weights back to the full site tensor."""
    m, n = s.m, s.n_particles
    mult = np.array([class_multiplicity(c) for c in occupation_classes(m, n)], dtype=float)
    per_config = s.data / mult
    cls = _config_class_indices(m, n)
    data = per_config[cls].reshape((m,) * n)
    return NBodyState(s.space, n, data)
