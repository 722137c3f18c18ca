"""Concrete model backends behind one interface.

A model consists of a one-body generator K and a two-body generator V on a
finite site space, with a cached upper bound ``v_norm`` on the 1-norm of V
used by every estimate in the library.

* quantum: K and V are commutator superoperators built from a Hermitian
  one-body Hamiltonian ``h1`` and a pair-swap-symmetric pair potential
  ``v2``; generators are anti-Hermitian, so the flow is trace-norm
  isometric.
* kac: K = 0 and V is a conservative jump generator assembled from a rate
  table over velocity-pair transitions; the flow is stochastic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError
from .tensor_core import (
    CLASSICAL,
    QUANTUM,
    NBodyState,
    SiteSpace,
    apply_pair_operator,
    arr_pair_apply,
    arr_ptrace_site,
    arr_site_apply,
)

HERMITICITY_TOL = 1e-12
SWAP_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PairwiseOp:
    """A linear map on 1- or 2-site states, stored as a superoperator matrix.

    ``matrix`` acts on flattened site coordinates: length m (classical site),
    m^2 (quantum site or classical pair), or m^4 (quantum pair, axis order
    row_i, row_r, col_i, col_r).  ``bound`` caches an upper estimate of the
    operator 1-norm.
    """

    arity: int
    matrix: np.ndarray = field(repr=False)
    bound: float
    trace_annihilating: bool = False

    @property
    def is_zero(self) -> bool:
        return not np.any(self.matrix)


@dataclass(frozen=True, eq=False)
class QuantumModelConfig:
    h1: np.ndarray
    v2: np.ndarray
    hbar: float = 1.0

    def validate(self, m: int):
        if self.hbar <= 0:
            raise ValidationError("quantum.hbar must be positive")
        if self.h1.shape != (m, m):
            raise ValidationError(f"quantum.h1 must be {m}x{m}, got {self.h1.shape}")
        if self.v2.shape != (m * m, m * m):
            raise ValidationError(f"quantum.v2 must be {m * m}x{m * m}, got {self.v2.shape}")
        herm = max(
            float(np.abs(self.h1 - self.h1.conj().T).max()),
            float(np.abs(self.v2 - self.v2.conj().T).max()),
        )
        if herm > HERMITICITY_TOL:
            raise ValidationError(f"quantum.h1/v2 not Hermitian (defect {herm:.3e})")
        s = pair_swap_matrix(m)
        defect = float(np.abs(s @ self.v2 @ s - self.v2).max())
        if defect > SWAP_SYMMETRY_TOL:
            raise ValidationError(f"quantum.v2 not pair-swap symmetric (defect {defect:.3e})")


@dataclass(frozen=True, eq=False)
class KacModelConfig:
    """Collision rate table: rates[a, b, c, d] is the jump rate (a,b) -> (c,d)."""

    rates: np.ndarray

    def validate(self, m: int, strict: bool = False):
        if self.rates.shape != (m, m, m, m):
            raise ValidationError(f"kac rates must have shape {(m,) * 4}, got {self.rates.shape}")
        if float(self.rates.min()) < 0:
            raise ValidationError("kac rates must be nonnegative")
        defect = float(np.abs(self.rates - self.rates.transpose(1, 0, 3, 2)).max())
        if strict and defect > 0:
            raise ValidationError(
                f"kac rates asymmetric under pair swap (defect {defect:.3e}) in strict mode"
            )

    def symmetrized(self) -> "KacModelConfig":
        return KacModelConfig((self.rates + self.rates.transpose(1, 0, 3, 2)) / 2)

    def total_rates(self) -> np.ndarray:
        """lambda(a, b): total jump rate out of the ordered pair (a, b)."""
        return self.rates.sum(axis=(2, 3))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A backend instance: site space, generators, and the norm bound."""

    site: SiteSpace
    K: PairwiseOp
    V: PairwiseOp
    v_norm: float
    hbar: float
    backend: str
    quantum: QuantumModelConfig | None = None
    kac: KacModelConfig | None = None
    model_hash: str = ""

    @property
    def m(self) -> int:
        return self.site.dim


def pair_swap_matrix(m: int) -> np.ndarray:
    """Permutation matrix exchanging the two factors of C^m (x) C^m."""
    s = np.zeros((m * m, m * m))
    for v in range(m):
        for w in range(m):
            s[w * m + v, v * m + w] = 1.0
    return s


def _commutator_superop(h: np.ndarray, hbar: float) -> np.ndarray:
    """Superoperator X -> (h X - X h) / (i hbar) in row-major vec convention."""
    d = h.shape[0]
    eye = np.eye(d)
    return (np.kron(h, eye) - np.kron(eye, h.T)) / (1j * hbar)


def _spectral_norm(h: np.ndarray) -> float:
    return float(np.linalg.norm(h, 2))


def _hash_payload(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_quantum_model(cfg: QuantumModelConfig, m: int) -> ModelSpec:
    """Quantum finite-level model: K, V as commutator superoperators.

    v_norm = 2 |v2| / hbar bounds the trace-norm of the commutator map.
    """
    cfg = QuantumModelConfig(
        np.asarray(cfg.h1, dtype=complex), np.asarray(cfg.v2, dtype=complex), float(cfg.hbar)
    )
    cfg.validate(m)
    site = SiteSpace(QUANTUM, m)
    kmat = _commutator_superop(cfg.h1, cfg.hbar)
    vmat = _commutator_superop(cfg.v2, cfg.hbar)
    k_op = PairwiseOp(1, kmat, 2 * _spectral_norm(cfg.h1) / cfg.hbar)
    v_op = PairwiseOp(2, vmat, 2 * _spectral_norm(cfg.v2) / cfg.hbar, trace_annihilating=True)
    payload = {
        "backend": "quantum",
        "m": m,
        "hbar": cfg.hbar,
        "h1": [[[z.real, z.imag] for z in row] for row in cfg.h1],
        "v2": [[[z.real, z.imag] for z in row] for row in cfg.v2],
    }
    return ModelSpec(
        site, k_op, v_op, v_op.bound, cfg.hbar, "quantum", quantum=cfg,
        model_hash=_hash_payload(payload),
    )


def build_kac_model(cfg: KacModelConfig, m: int, strict: bool = False) -> ModelSpec:
    """Discrete-velocity jump model: K = 0, V the conservative pair generator.

    Unless ``strict``, asymmetric rate tables are symmetrized under the
    simultaneous swap of inputs and outputs.  v_norm = 2 max lambda.
    """
    cfg = KacModelConfig(np.asarray(cfg.rates, dtype=float))
    cfg.validate(m, strict=strict)
    if not strict:
        cfg = cfg.symmetrized()
    site = SiteSpace(CLASSICAL, m)
    lam = cfg.total_rates()
    gain = cfg.rates.transpose(2, 3, 0, 1).reshape(m * m, m * m)
    vmat = gain - np.diag(lam.ravel())
    k_op = PairwiseOp(1, np.zeros((m, m)), 0.0)
    v_op = PairwiseOp(2, vmat, 2 * float(lam.max(initial=0.0)), trace_annihilating=True)
    payload = {"backend": "kac", "m": m, "rates": cfg.rates.ravel().tolist()}
    return ModelSpec(
        site, k_op, v_op, v_op.bound, 1.0, "kac", kac=cfg, model_hash=_hash_payload(payload)
    )


def kac_rates_from_kernel(m: int, kernel) -> KacModelConfig:
    """Sample ``kernel(a, b, c, d) -> rate`` into a symmetric rate table."""
    rates = np.zeros((m, m, m, m))
    for a in range(m):
        for b in range(m):
            for c in range(m):
                for d in range(m):
                    rates[a, b, c, d] = max(0.0, float(kernel(a, b, c, d)))
    return KacModelConfig(rates).symmetrized()


# ---------------------------------------------------------------------------
# hierarchy building blocks


def apply_V_pair(model: ModelSpec, f: NBodyState, i: int, r: int) -> NBodyState:
    """Two-body generator acting on sites ``(i, r)`` of an n-site state."""
    if not (1 <= i < r <= f.n):
        raise StructuralError(f"pair indices ({i},{r}) must satisfy 1 <= i < r <= {f.n}")
    return apply_pair_operator(f, model.V.matrix, i, r)


def arr_apply_C(model: ModelSpec, n_sites: int, data: np.ndarray, i: int) -> np.ndarray:
    """Array core of C_{i,n}: pair generator at (i, n), then trace the last site."""
    out = arr_pair_apply(model.site, n_sites, data, model.V.matrix, i, n_sites)
    return arr_ptrace_site(model.site, n_sites, out, n_sites)


def apply_C(model: ModelSpec, f: NBodyState, i: int) -> NBodyState:
    """Collision contraction C_{i,j+1}: interact sites (i, j+1), trace the last.

    ``f`` has j+1 sites and the result has j; the 1-norm is bounded by
    v_norm times the operand's.
    """
    j = f.n - 1
    if not 1 <= i <= j:
        raise StructuralError(f"collision index {i} out of range 1..{j}")
    return NBodyState(model.site, j, arr_apply_C(model, f.n, f.data, i))


def apply_C_full(model: ModelSpec, f: NBodyState) -> NBodyState:
    """C_{j+1} = sum_i C_{i,j+1} over i = 1..j."""
    j = f.n - 1
    out = np.zeros(model.site.state_shape(j), dtype=model.site.dtype())
    for i in range(1, j + 1):
        out = out + arr_apply_C(model, f.n, f.data, i)
    return NBodyState(model.site, j, out)


def arr_apply_T(model: ModelSpec, n_sites: int, data: np.ndarray) -> np.ndarray:
    out = np.zeros_like(data)
    if n_sites < 2 or model.V.is_zero:
        return out
    for i in range(1, n_sites + 1):
        for r in range(i + 1, n_sites + 1):
            out = out + arr_pair_apply(model.site, n_sites, data, model.V.matrix, i, r)
    return out


def apply_T(model: ModelSpec, f: NBodyState) -> NBodyState:
    """Pair-interaction sum T_j over all unordered site pairs; zero for j < 2."""
    return f.with_data(arr_apply_T(model, f.n, f.data))


def arr_apply_K(model: ModelSpec, n_sites: int, data: np.ndarray) -> np.ndarray:
    out = np.zeros_like(data)
    if model.K.is_zero or n_sites == 0:
        return out
    for k in range(1, n_sites + 1):
        out = out + arr_site_apply(model.site, n_sites, data, model.K.matrix, k)
    return out


def apply_K_sites(model: ModelSpec, f: NBodyState) -> NBodyState:
    """One-body generator summed over all sites (K^j)."""
    return f.with_data(arr_apply_K(model, f.n, f.data))
