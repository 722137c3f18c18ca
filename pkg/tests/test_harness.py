"""Study runner, slope fits, invariant suite, and the CLI surface."""

import json
import os

import numpy as np
import pytest

from mfhier import suite_checks
from mfhier.cli import main
from mfhier.config import SlopeExpectation, StudyConfig
from mfhier.errors import CapacityError, StructuralError
from mfhier.harness import (
    fit_slope,
    final_marginals,
    run_invariant_suite,
    run_study,
    write_report,
)


class TestFitSlope:
    def test_exact_power_laws(self):
        n = np.array([32, 64, 128, 256])
        slope, _, resid = fit_slope(n, 3.0 / n)
        assert slope == pytest.approx(-1.0, abs=1e-12)
        assert resid <= 1e-12
        slope, _, _ = fit_slope(n, 0.7 / n**2)
        assert slope == pytest.approx(-2.0, abs=1e-12)

    def test_two_term_contamination(self):
        # c/N + d/N^2 over a decade lands between -1.15 and -1.0
        n = np.array([32, 64, 128, 256, 320])
        slope, _, _ = fit_slope(n, 1.0 / n + 4.0 / n**2)
        assert -1.15 <= slope <= -1.0

    def test_nonpositive_filtered_with_warning(self):
        n = [16, 32, 64, 128]
        with pytest.warns(UserWarning, match="dropped"):
            slope, _, _ = fit_slope(n, [0.0, 1 / 32, 1 / 64, 1 / 128])
        assert slope == pytest.approx(-1.0)

    def test_refusal_below_three_points(self):
        with pytest.raises(StructuralError, match="refused"):
            with pytest.warns(UserWarning):
                fit_slope([16, 32, 64], [0.0, 0.0, 1e-3])


def small_study(tmp_path, **overrides):
    cfg = StudyConfig(
        model_path="configs/kac_m2.toml",
        n_values=[8, 16, 32],
        t_final=0.3,
        steps_per_unit_time=600,
        j_values=[1],
        n_orders=[0, 1],
        ej_values=[2],
        j_max=2,
        k_max=2,
        out_dir=str(tmp_path / "out"),
        expectations=[
            SlopeExpectation("meanfield_gap", 1, None, -1.4, -0.75),
            SlopeExpectation("marginal_gap", 1, 1, None, -1.6),
            SlopeExpectation("error_norm", 2, None, -1.4, -0.7),
        ],
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


class TestRunStudy:
    def test_small_kac_study(self, tmp_path):
        report = run_study(small_study(tmp_path))
        assert report.all_passed, [v for v in report.verdicts if not v.passed]
        # every verdict cites the evidence rows behind its fit
        for v in report.verdicts:
            assert len(v.evidence) == 3
            assert [n for n, _ in v.evidence] == [8, 16, 32]

    def test_rows_cover_requested_metrics(self, tmp_path):
        report = run_study(small_study(tmp_path))
        metrics = {(r.metric, r.j, r.n_order) for r in report.rows}
        assert ("meanfield_gap", 1, None) in metrics
        assert ("marginal_gap", 1, 0) in metrics
        assert ("series_gap", 1, 1) in metrics
        assert ("error_norm", 2, None) in metrics

    def test_zero_interaction_reports_refused_fits(self, tmp_path):
        model = tmp_path / "null.toml"
        model.write_text(
            'backend = "kac"\nsite_dim = 2\n[initial]\nweights = [0.7, 0.3]\n[kac]\n'
        )
        cfg = small_study(tmp_path, model_path=str(model))
        with pytest.warns(UserWarning):
            report = run_study(cfg)
        assert all(f["slope"] is None for f in report.fits.values())
        assert not report.all_passed  # verdicts cannot pass without fits

    def test_report_files_reproducible(self, tmp_path):
        cfg = small_study(tmp_path)
        a1 = run_study(cfg)
        write_report(a1, str(tmp_path / "a"))
        a2 = run_study(cfg)
        write_report(a2, str(tmp_path / "b"))
        for name in ("report.json", "rows.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_threaded_matches_serial(self, tmp_path):
        serial = run_study(small_study(tmp_path))
        threaded = run_study(small_study(tmp_path, threads=3))
        for a, b in zip(sorted(serial.rows, key=str), sorted(threaded.rows, key=str)):
            assert a == b

    def test_quantum_capacity_guard(self):
        from mfhier.config import load_model_file

        model, init = load_model_file("configs/quantum_m2.toml")
        with pytest.raises(CapacityError):
            final_marginals(model, init, 30, 0.1, 10, 1)


class TestInvariantSuite:
    def test_default_config_passes(self):
        ledger = run_invariant_suite("configs/kac_m2.toml", {"N": 4, "t_final": 0.1})
        assert ledger and all(c["passed"] for c in ledger)

    def test_corrupted_lowering_operator_names_j(self):
        from mfhier.hierarchy import _default_d_ops

        ops = _default_d_ops()
        real = ops["lower1"]
        ops["lower1"] = lambda *a, **k: real(*a, **k).with_data(-real(*a, **k).data)
        ledger = suite_checks.run_all(
            "configs/kac_m2.toml", {"N": 4, "t_final": 0.1}, _d_ops=ops
        )
        failed = [c["check"] for c in ledger if not c["passed"]]
        assert any(c.startswith("hierarchy.residual.j=") for c in failed)
        passed_res = [c for c in ledger if c["check"].startswith("hierarchy.residual")]
        assert all(not c["passed"] for c in passed_res)


def run_cli(*argv):
    return main(list(argv))


class TestCLI:
    def test_model_check(self, capsys):
        assert run_cli("model", "check", "configs/kac_m2.toml") == 0
        out = capsys.readouterr().out
        assert "v_norm=1" in out

    def test_model_check_bad_file(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text('backend = "kac"\n')
        assert run_cli("model", "check", str(p)) == 1

    def test_evolve_and_files(self, tmp_path):
        out = tmp_path / "evo"
        rc = run_cli(
            "evolve", "configs/kac_m2.toml", "--N", "4", "--t", "0.1",
            "--steps", "200", "--store-stride", "10", "--out", str(out),
        )
        assert rc == 0
        assert (out / "trajectory.txt").exists()
        header = (out / "trajectory.txt").read_text().splitlines()[1]
        assert "N=4" in header
        assert (out / "diagnostics.csv").read_text().startswith("t,trace,min_spectrum,trace_norm")

    def test_evolve_occupation_path(self, tmp_path):
        out = tmp_path / "occ"
        rc = run_cli(
            "evolve", "configs/kac_m2.toml", "--N", "64", "--t", "0.05",
            "--steps", "2000", "--store-stride", "100", "--out", str(out),
        )
        assert rc == 0
        assert "representation=occupation" in (out / "trajectory.txt").read_text().splitlines()[1]

    def test_meanfield(self, tmp_path):
        out = tmp_path / "mf"
        rc = run_cli("meanfield", "configs/quantum_m2.toml", "--t", "0.2",
                     "--steps", "100", "--out", str(out))
        assert rc == 0
        assert (out / "meanfield.txt").exists()

    def test_errors(self, tmp_path):
        out = tmp_path / "err"
        rc = run_cli("errors", "configs/kac_m2.toml", "--N", "4", "--jmax", "2",
                     "--t", "0.1", "--steps", "400", "--out", str(out))
        assert rc == 0
        lines = (out / "errors.csv").read_text().splitlines()
        assert lines[0] == "t,j,trace_norm_Ej,trace_Ej,symmetry_defect"

    def test_expand(self, tmp_path):
        out = tmp_path / "exp"
        rc = run_cli("expand", "configs/kac_m2.toml", "--N", "16", "--t", "0.1",
                     "--steps", "200", "--jmax", "1", "--kmax", "1",
                     "--dump", "--out", str(out))
        assert rc == 0
        assert (out / "table.csv").exists()
        assert (out / "coeff_j1_k1.txt").exists()

    def test_study_and_exit_codes(self, tmp_path):
        study = tmp_path / "study.toml"
        study.write_text(
            f'model = "{os.path.abspath("configs/kac_m2.toml")}"\n'
            "N = [8, 16, 32]\nt_final = 0.25\nsteps_per_unit_time = 400\n"
            "j = [1]\nn = [0]\nej = []\nJ_max = 1\nK_max = 1\n"
            f'out_dir = "{tmp_path / "study-out"}"\n'
            "[[expect]]\nmetric = \"meanfield_gap\"\nj = 1\nslope_min = -1.4\nslope_max = -0.7\n"
        )
        assert run_cli("study", str(study)) == 0
        report = json.loads((tmp_path / "study-out" / "report.json").read_text())
        assert report["all_passed"] is True
        # impossible window -> nonzero exit
        study.write_text(study.read_text().replace("-0.7", "-3.0").replace("-1.4", "-4.0"))
        assert run_cli("study", str(study)) == 1

    def test_suite_command(self, tmp_path):
        study = tmp_path / "study.toml"
        study.write_text(
            f'model = "{os.path.abspath("configs/kac_m2.toml")}"\n'
            "N = [8, 16, 32]\nt_final = 0.2\nsteps_per_unit_time = 500\n"
            f'out_dir = "{tmp_path / "suite-out"}"\n'
        )
        assert run_cli("suite", str(study), "--N", "4") == 0
        ledger = json.loads((tmp_path / "suite-out" / "invariants.json").read_text())
        assert ledger["all_passed"] is True

    def test_env_thread_override(self, tmp_path, monkeypatch):
        study = tmp_path / "study.toml"
        study.write_text(
            f'model = "{os.path.abspath("configs/kac_m2.toml")}"\n'
            "N = [8, 16, 32]\nt_final = 0.1\nsteps_per_unit_time = 200\n"
            "j = [1]\nn = [0]\nJ_max = 1\nK_max = 1\n"
            f'out_dir = "{tmp_path / "env-out"}"\n'
        )
        monkeypatch.setenv("MFHIER_THREADS", "2")
        assert run_cli("study", str(study)) == 0
