"""Study orchestration: convergence runs across N, slope fits, verdicts.

A study evolves the exact N-body system for every requested N, forms
marginals and correlation errors at the final time, builds the expansion
table on the shared mean-field grid, and fits log-log slopes of the error
norms against N.  Verdicts compare fitted slopes with configured windows;
each verdict cites the evidence rows it was computed from.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import SlopeExpectation, StudyConfig, load_model_file
from .errors import CapacityError, StructuralError
from .expansion import build_table, partial_sum, truncated_marginal
from .hierarchy import correlation_errors
from .meanfield import solve_meanfield
from .models import ModelSpec
from .nbody import (
    HILBERT_DIM_CAP,
    build_generator,
    evolve,
    evolve_symmetric,
    marginal,
    marginal_symmetric,
    symmetric_product_state,
)
from .tensor_core import NBodyState, tensor_power, trace_norm

STUDY_DENSE_CAP = 4096  # prefer the occupation sector beyond this size


def fit_slope(n_values, errors, zero_floor: float = 0.0) -> tuple[float, float, float]:
    """Least squares on (log N, log err); returns (slope, intercept, rms residual).

    Nonpositive error values (and values at or below ``zero_floor``, which
    studies set to 1e-14 so roundoff on exactly-zero metrics does not fit a
    noise slope) are dropped with a warning; fewer than three surviving
    points refuse the fit.
    """
    n_values = np.asarray(n_values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > max(zero_floor, 0.0)
    if not keep.all():
        warnings.warn(f"fit_slope dropped {int((~keep).sum())} nonpositive error values")
    n_values, errors = n_values[keep], errors[keep]
    if len(errors) < 3:
        raise StructuralError("slope fit refused: fewer than 3 positive points")
    x, y = np.log(n_values), np.log(errors)
    a = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = float(np.sqrt(np.mean((a @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), resid


# ---------------------------------------------------------------------------
# per-N pipeline


def final_marginals(
    model: ModelSpec,
    init: NBodyState,
    n_particles: int,
    t_final: float,
    steps: int,
    j_max: int,
    dense_cap: int = STUDY_DENSE_CAP,
) -> list:
    """Marginals F^N_1..F^N_{j_max} at t_final, choosing the cheapest exact path."""
    m = model.m
    if model.site.is_quantum:
        if m**n_particles > HILBERT_DIM_CAP:
            raise CapacityError(
                f"quantum study needs m^N <= {HILBERT_DIM_CAP}, got {m**n_particles}"
            )
        f0 = tensor_power(init, n_particles)
        traj = evolve(build_generator(model, n_particles), f0, t_final, steps, store_stride=steps)
        return [marginal(traj.states[-1], j) for j in range(1, j_max + 1)]
    if m**n_particles <= dense_cap:
        f0 = tensor_power(init, n_particles)
        traj = evolve(build_generator(model, n_particles), f0, t_final, steps, store_stride=steps)
        return [marginal(traj.states[-1], j) for j in range(1, j_max + 1)]
    s0 = symmetric_product_state(init, n_particles)
    traj = evolve_symmetric(model, s0, t_final, steps, store_stride=steps)
    return [marginal_symmetric(traj.states[-1], j) for j in range(1, j_max + 1)]


@dataclass(frozen=True)
class StudyRow:
    n_particles: int
    metric: str
    j: int
    n_order: int | None
    value: float


@dataclass
class Verdict:
    label: str
    passed: bool
    slope: float | None
    window: tuple
    evidence: list  # (N, value) pairs
    reason: str = ""


@dataclass
class StudyReport:
    config: dict
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)      # (metric, j, n) -> dict
    verdicts: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts) and all(
            c["passed"] for c in self.checks
        )

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": [
                {
                    "N": r.n_particles,
                    "metric": r.metric,
                    "j": r.j,
                    "n": r.n_order,
                    "value": r.value,
                }
                for r in self.rows
            ],
            "fits": {"|".join(map(str, k)): v for k, v in self.fits.items()},
            "verdicts": [
                {
                    "label": v.label,
                    "passed": v.passed,
                    "slope": v.slope,
                    "window": list(v.window),
                    "evidence": [[n, val] for n, val in v.evidence],
                    "reason": v.reason,
                }
                for v in self.verdicts
            ],
            "checks": self.checks,
            "all_passed": self.all_passed,
        }


def _nbody_steps(cfg: StudyConfig, model: ModelSpec, n_particles: int) -> int:
    per_unit = cfg.nbody_steps_per_unit_time
    if per_unit <= 0:
        # resolve both accuracy and RK4 stability: the occupation-sector
        # generator norm grows like N v_norm / 2
        per_unit = max(cfg.steps_per_unit_time, int(8 * n_particles * max(model.v_norm, 0.125)))
    return max(1, round(per_unit * cfg.t_final))


def _study_one_n(cfg: StudyConfig, model, init, mf, n_particles: int, j_need: int):
    steps = _nbody_steps(cfg, model, n_particles)
    dense_cap = int(cfg.tolerances.get("dense_cap", STUDY_DENSE_CAP))
    margs = final_marginals(
        model, init, n_particles, cfg.t_final, steps, j_need, dense_cap=dense_cap
    )
    f_final = mf.states[-1]
    fam = correlation_errors(margs, f_final, meta={"N": n_particles})
    table = build_table(
        model,
        mf,
        n_particles,
        cfg.j_max,
        cfg.k_max,
        mode=cfg.mode,
        convention=cfg.convention,
    )
    last = len(mf) - 1
    rows = []
    for j in cfg.j_values:
        power = tensor_power(f_final, j)
        gap = trace_norm(margs[j - 1].with_data(margs[j - 1].data - power.data))
        rows.append(StudyRow(n_particles, "meanfield_gap", j, None, gap))
        for n_order in cfg.n_orders:
            trunc = truncated_marginal(table, j, n_order, last)
            gap = trace_norm(margs[j - 1].with_data(margs[j - 1].data - trunc.data))
            rows.append(StudyRow(n_particles, "marginal_gap", j, n_order, gap))
            series = partial_sum(table, j, n_order, last)
            e_j = fam.entry(j)
            gap = trace_norm(e_j.with_data(e_j.data - series.data))
            rows.append(StudyRow(n_particles, "series_gap", j, n_order, gap))
    for j in cfg.ej_values:
        rows.append(StudyRow(n_particles, "error_norm", j, None, trace_norm(fam.entry(j))))
    return rows


def run_study(cfg: StudyConfig) -> StudyReport:
    """Execute the full pipeline; deterministic for a fixed configuration."""
    cfg.validate()
    model, init = load_model_file(cfg.model_path)
    if init is None:
        raise StructuralError(f"{cfg.model_path}: study needs an [initial] table")
    steps = max(4, round(cfg.steps_per_unit_time * cfg.t_final))
    mf = solve_meanfield(model, init, cfg.t_final, steps)
    j_need = max(max(cfg.j_values, default=1), max(cfg.ej_values, default=1))

    work = [(n,) for n in cfg.n_values]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(
                pool.map(lambda w: _study_one_n(cfg, model, init, mf, w[0], j_need), work)
            )
    else:
        results = [_study_one_n(cfg, model, init, mf, n, j_need) for (n,) in work]

    report = StudyReport(config=_config_echo(cfg, model))
    for rows in results:
        report.rows.extend(rows)

    metrics = sorted({(r.metric, r.j, r.n_order) for r in report.rows}, key=str)
    for key in metrics:
        values = [
            (r.n_particles, r.value)
            for r in report.rows
            if (r.metric, r.j, r.n_order) == key
        ]
        values.sort()
        try:
            slope, intercept, resid = fit_slope(
                [v[0] for v in values], [v[1] for v in values], zero_floor=1e-14
            )
            report.fits[key] = {
                "slope": slope,
                "intercept": intercept,
                "residual": resid,
                "points": values,
            }
        except (StructuralError, ValueError) as exc:
            report.fits[key] = {"slope": None, "refused": str(exc), "points": values}

    for expect in cfg.expectations:
        report.verdicts.append(_verdict_for(report, expect))
    return report


def _verdict_for(report: StudyReport, expect: SlopeExpectation) -> Verdict:
    key = (expect.metric, expect.j, expect.n)
    window = (expect.slope_min, expect.slope_max)
    fit = report.fits.get(key)
    if fit is None or fit.get("slope") is None:
        reason = "no fit available" if fit is None else fit.get("refused", "fit refused")
        return Verdict(expect.label(), False, None, window, fit["points"] if fit else [], reason)
    slope = fit["slope"]
    ok = True
    if expect.slope_min is not None and slope < expect.slope_min:
        ok = False
    if expect.slope_max is not None and slope > expect.slope_max:
        ok = False
    return Verdict(expect.label(), ok, slope, window, fit["points"])


def _config_echo(cfg: StudyConfig, model: ModelSpec) -> dict:
    return {
        "model": cfg.model_path,
        "model_hash": model.model_hash,
        "backend": model.backend,
        "N": cfg.n_values,
        "t_final": cfg.t_final,
        "steps_per_unit_time": cfg.steps_per_unit_time,
        "nbody_steps_per_unit_time": cfg.nbody_steps_per_unit_time,
        "j": cfg.j_values,
        "n": cfg.n_orders,
        "ej": cfg.ej_values,
        "J_max": cfg.j_max,
        "K_max": cfg.k_max,
        "mode": cfg.mode,
        "convention": cfg.convention,
        "threads": cfg.threads,
    }


_FMT = "%.17g"


def write_report(report: StudyReport, out_dir: str):
    """report.json plus a flat rows.csv; byte-stable for a fixed config."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "rows.csv"), "w") as fh:
        fh.write("N,metric,j,n,value\n")
        for r in sorted(report.rows, key=lambda r: (r.metric, r.j, str(r.n_order), r.n_particles)):
            n_str = "" if r.n_order is None else str(r.n_order)
            fh.write(f"{r.n_particles},{r.metric},{r.j},{n_str},{_FMT % r.value}\n")


# ---------------------------------------------------------------------------
# invariant suite


def _check(ledger: list, check_id: str, value: float, threshold: float, larger_ok=False):
    passed = value >= threshold if larger_ok else value <= threshold
    ledger.append(
        {
            "check": check_id,
            "value": float(value),
            "threshold": float(threshold),
            "passed": bool(passed),
        }
    )


def run_invariant_suite(model_path: str, sizes: dict | None = None) -> list:
    """Execute every module-level invariant at desk scale.

    Returns a machine-readable ledger; failures are verdict rows, never
    aborts.  ``sizes`` may override N, t_final, and steps_per_unit_time.
    """
    from . import suite_checks

    return suite_checks.run_all(model_path, sizes or {})


def write_ledger(ledger: list, path: str):
    with open(path, "w") as fh:
        json.dump({"checks": ledger, "all_passed": all(c["passed"] for c in ledger)}, fh, indent=2)
        fh.write("\n")
