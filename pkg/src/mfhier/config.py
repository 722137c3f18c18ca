"""Declarative configuration files (TOML) for models and studies.

Syntax errors carry the parser's line/column; semantic errors cite the
offending key path.  The model schema is documented in the README.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .models import (
    KacModelConfig,
    ModelSpec,
    QuantumModelConfig,
    build_kac_model,
    build_quantum_model,
)
from .tensor_core import NBodyState, SiteSpace


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file")
    except tomllib.TOMLDecodeError as exc:
        # tomllib reports "... (at line L, column C)"
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc


def _require(table: dict, key: str, path: str, where: str = ""):
    if key not in table:
        raise ConfigError(f"{path}: missing required key '{where}{key}'")
    return table[key]


def _complex_matrix(raw, shape, path: str, key: str) -> np.ndarray:
    """Row-major array of [re, im] pairs -> complex matrix."""
    arr = np.asarray(raw, dtype=float)
    if arr.shape != shape + (2,):
        raise ConfigError(
            f"{path}: key '{key}' must be a {shape[0]}x{shape[1]} array of [re, im] "
            f"pairs, got shape {arr.shape}"
        )
    return arr[..., 0] + 1j * arr[..., 1]


def load_model_file(path: str) -> tuple[ModelSpec, NBodyState | None]:
    """Parse a model file; returns the model and its initial one-site state, if given."""
    doc = _load_toml(path)
    backend = _require(doc, "backend", path)
    if backend not in ("quantum", "kac"):
        raise ConfigError(f"{path}: key 'backend' must be 'quantum' or 'kac', got {backend!r}")
    m = _require(doc, "site_dim", path)
    if not isinstance(m, int) or m < 2:
        raise ConfigError(f"{path}: key 'site_dim' must be an integer >= 2")

    if backend == "quantum":
        q = _require(doc, "quantum", path)
        hbar = float(doc.get("hbar", q.get("hbar", 1.0)))
        h1 = _complex_matrix(_require(q, "h1", path, "quantum."), (m, m), path, "quantum.h1")
        v2 = _complex_matrix(
            _require(q, "v2", path, "quantum."), (m * m, m * m), path, "quantum.v2"
        )
        try:
            model = build_quantum_model(QuantumModelConfig(h1, v2, hbar), m)
        except ValueError as exc:
            raise ConfigError(f"{path}: table 'quantum': {exc}") from exc
    else:
        k = _require(doc, "kac", path)
        strict = bool(k.get("strict_symmetry", False))
        rates = np.zeros((m, m, m, m))
        entries = k.get("collisions", [])
        if not isinstance(entries, list):
            raise ConfigError(f"{path}: key 'kac.collisions' must be an array of tables")
        for idx, entry in enumerate(entries):
            where = f"kac.collisions[{idx}]"
            pair_in = _require(entry, "in", path, where + ".")
            pair_out = _require(entry, "out", path, where + ".")
            rate = _require(entry, "rate", path, where + ".")
            for name, pair in (("in", pair_in), ("out", pair_out)):
                if (
                    not isinstance(pair, list)
                    or len(pair) != 2
                    or not all(isinstance(v, int) and 0 <= v < m for v in pair)
                ):
                    raise ConfigError(
                        f"{path}: key '{where}.{name}' must be two velocity indices in 0..{m - 1}"
                    )
            if not isinstance(rate, (int, float)) or rate < 0:
                raise ConfigError(f"{path}: key '{where}.rate' must be a nonnegative number")
            rates[pair_in[0], pair_in[1], pair_out[0], pair_out[1]] += float(rate)
        try:
            model = build_kac_model(KacModelConfig(rates), m, strict=strict)
        except ValueError as exc:
            raise ConfigError(f"{path}: table 'kac': {exc}") from exc

    initial = None
    if "initial" in doc:
        initial = _parse_initial(doc["initial"], model.site, path)
    return model, initial


def _parse_initial(table: dict, site: SiteSpace, path: str) -> NBodyState:
    if site.is_quantum:
        rho = _complex_matrix(
            _require(table, "rho", path, "initial."), (site.dim, site.dim), path, "initial.rho"
        )
        state = NBodyState(site, 1, rho)
    else:
        w = np.asarray(_require(table, "weights", path, "initial."), dtype=float)
        if w.shape != (site.dim,):
            raise ConfigError(f"{path}: key 'initial.weights' must have length {site.dim}")
        state = NBodyState(site, 1, w)
    from .tensor_core import assert_physical

    try:
        assert_physical(state)
    except ValueError as exc:
        raise ConfigError(f"{path}: table 'initial': {exc}") from exc
    return state


# ---------------------------------------------------------------------------
# study configuration


@dataclass
class SlopeExpectation:
    """A verdict row: fitted slope of one error metric must land in a window."""

    metric: str  # "marginal_gap" | "series_gap" | "error_norm"
    j: int
    n: int | None
    slope_min: float | None
    slope_max: float | None

    def label(self) -> str:
        if self.metric == "error_norm":
            return f"slope[E_{self.j}]"
        tag = "F" if self.metric == "marginal_gap" else "E"
        return f"slope[{tag}_{self.j};n={self.n}]"


@dataclass
class StudyConfig:
    model_path: str
    n_values: list[int]
    t_final: float = 0.5
    steps_per_unit_time: int = 1000
    nbody_steps_per_unit_time: int = 0  # 0 -> scale with N automatically
    j_values: list[int] = field(default_factory=lambda: [1, 2])
    n_orders: list[int] = field(default_factory=lambda: [0, 1])
    ej_values: list[int] = field(default_factory=list)
    j_max: int = 2
    k_max: int = 2
    mode: str = "exact-N"
    convention: str = "resolved"
    out_dir: str = "study-out"
    threads: int = 1
    tolerances: dict = field(default_factory=dict)
    expectations: list[SlopeExpectation] = field(default_factory=list)

    def validate(self):
        if len(self.n_values) < 3:
            raise ConfigError("study: N list needs >= 3 entries for slope fits")
        if sorted(self.n_values) != self.n_values:
            raise ConfigError("study: N list must be ascending")
        if self.mode not in ("exact-N", "limit"):
            raise ConfigError("study: mode must be 'exact-N' or 'limit'")
        need = max(self.j_values) + 2 * max(self.n_orders)
        if need > self.j_max + self.k_max:
            raise ConfigError(
                f"study: J_max+K_max={self.j_max + self.k_max} cannot close the "
                f"recursion for max(j)+2*max(n)={need}"
            )
        if max(self.n_orders, default=0) * 2 > self.k_max:
            raise ConfigError("study: K_max must be >= 2*max(n)")


def load_study_file(path: str) -> StudyConfig:
    doc = _load_toml(path)
    base = os.path.dirname(os.path.abspath(path))
    model_path = _require(doc, "model", path)
    if not os.path.isabs(model_path):
        model_path = os.path.join(base, model_path)
    expectations = []
    for idx, row in enumerate(doc.get("expect", [])):
        where = f"expect[{idx}]"
        metric = _require(row, "metric", path, where + ".")
        if metric not in ("meanfield_gap", "marginal_gap", "series_gap", "error_norm"):
            raise ConfigError(
                f"{path}: key '{where}.metric' must be one of meanfield_gap|marginal_gap|series_gap|error_norm"
            )
        expectations.append(
            SlopeExpectation(
                metric=metric,
                j=int(_require(row, "j", path, where + ".")),
                n=row.get("n"),
                slope_min=row.get("slope_min"),
                slope_max=row.get("slope_max"),
            )
        )
    cfg = StudyConfig(
        model_path=model_path,
        n_values=list(_require(doc, "N", path)),
        t_final=float(doc.get("t_final", 0.5)),
        steps_per_unit_time=int(doc.get("steps_per_unit_time", 1000)),
        nbody_steps_per_unit_time=int(doc.get("nbody_steps_per_unit_time", 0)),
        j_values=list(doc.get("j", [1, 2])),
        n_orders=list(doc.get("n", [0, 1])),
        ej_values=list(doc.get("ej", [])),
        j_max=int(doc.get("J_max", 2)),
        k_max=int(doc.get("K_max", 2)),
        mode=doc.get("mode", "exact-N"),
        convention=doc.get("convention", "appendix_b"),
        out_dir=doc.get("out_dir", "study-out"),
        threads=int(doc.get("threads", 1)),
        tolerances=dict(doc.get("tolerances", {})),
        expectations=expectations,
    )
    cfg.validate()
    return cfg
