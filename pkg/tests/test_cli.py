import json

import pytest

import reference_values as ref
from conftest import DATA_DIR
from pereml.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestFitCommand:
    def test_table2_text_reproduces_reference_table(self, capsys):
        code, out, _ = run_cli(
            capsys,
            "fit",
            "--data",
            str(DATA_DIR / "table2.csv"),
            "--strata",
            "whole_plot",
            "--method",
            "both",
            "--kr",
        )
        assert code == 0
        assert "sigma1^2=5.3738" in out
        assert "sigma1^2=3.1085" in out
        for needle in ("8.2320", "1.1169", "0.9578", "0.7245"):
            assert needle in out

    def test_table2_json_matches_reference_values(self, capsys, tmp_path):
        out_path = tmp_path / "fit.json"
        code, out, _ = run_cli(
            capsys,
            "fit",
            "--data",
            str(DATA_DIR / "table2.csv"),
            "--strata",
            "whole_plot",
            "--kr",
            "--format",
            "json",
            "--out",
            str(out_path),
        )
        assert code == 0
        doc = json.loads(out_path.read_text())
        rows = {r["coef"]: r for r in doc["coefficients"]}
        for nm, (est_rs, est_pe, se_rs, se_pe, kr_rs, kr_pe) in ref.TABLE3.items():
            row = rows[nm]
            assert row["estimate_RS-REML"] == pytest.approx(est_rs, abs=1e-3)
            assert row["estimate_PE-REML"] == pytest.approx(est_pe, abs=1e-3)
            assert row["se_RS-REML"] == pytest.approx(se_rs, abs=1e-3)
            assert row["se_PE-REML"] == pytest.approx(se_pe, abs=1e-3)
            assert row["se_RS-REML-KR"] == pytest.approx(kr_rs, abs=1e-3)
            assert row["se_PE-REML-KR"] == pytest.approx(kr_pe, abs=1e-3)
        # the machine-readable form carries full precision
        assert doc["variance_components"]["PE-REML"]["sigma"][1] == pytest.approx(
            10.551793, abs=1e-5
        )

    def test_saturated_design_pe_infeasible(self, capsys, tmp_path):
        p = tmp_path / "sat.csv"
        lines = ["block,x1,y"]
        for i in range(8):
            lines.append(f"{i // 4},{float(i)},{float(i) * 1.1}")
        p.write_text("\n".join(lines) + "\n")
        code, out, err = run_cli(
            capsys, "fit", "--data", str(p), "--strata", "block", "--method", "pe-reml"
        )
        assert code == 3
        assert "PE-REML infeasible: no pure error degrees of freedom" in err

    def test_schema_error_exit_code(self, capsys, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("block,x1,y\n0,zap,1\n")
        code, _, err = run_cli(
            capsys, "fit", "--data", str(p), "--strata", "block"
        )
        assert code == 2
        assert "zap" in err

    def test_missing_file_exit_code(self, capsys):
        code, _, err = run_cli(
            capsys, "fit", "--data", "nope.csv", "--strata", "block"
        )
        assert code == 2


class TestCheckCommand:
    def test_table2_report(self, capsys):
        code, out, _ = run_cli(
            capsys, "check", "--data", str(DATA_DIR / "table2.csv"), "--strata", "whole_plot"
        )
        assert code == 0
        assert "treatments: 49" in out
        assert "pure-error residual df (n - rank(X_t)): 11" in out
        assert "feasible: yes" in out


class TestSimulateCommand:
    def test_deterministic_outputs(self, capsys, tmp_path):
        args = (
            "simulate",
            "--scenario",
            str(DATA_DIR / "scenarios" / "sec5_correct.json"),
            "--replicates",
            "20",
            "--threads",
            "2",
        )
        code1, _, _ = run_cli(capsys, *args, "--out", str(tmp_path / "a"))
        code2, _, _ = run_cli(capsys, *args, "--out", str(tmp_path / "b"))
        assert code1 == code2 == 0
        assert (tmp_path / "a" / "report.csv").read_bytes() == (
            tmp_path / "b" / "report.csv"
        ).read_bytes()
        doc = json.loads((tmp_path / "a" / "report.json").read_text())
        assert doc["n_replicates"] == 20
        assert doc["mean_sigma_hat"]["PE-REML"][0] > 0

    def test_seed_override_changes_results(self, capsys, tmp_path):
        args = (
            "simulate",
            "--scenario",
            str(DATA_DIR / "scenarios" / "sec5_correct.json"),
            "--replicates",
            "10",
        )
        run_cli(capsys, *args, "--seed", "1", "--out", str(tmp_path / "a"))
        run_cli(capsys, *args, "--seed", "2", "--out", str(tmp_path / "b"))
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        assert a["mean_sigma_hat"] != b["mean_sigma_hat"]

    def test_single_replicate_warns(self, capsys):
        code, out, err = run_cli(
            capsys,
            "simulate",
            "--scenario",
            str(DATA_DIR / "scenarios" / "sec5_correct.json"),
            "--replicates",
            "1",
        )
        assert code == 0
        assert "single replicate" in err

    def test_bad_scenario_exit_code(self, capsys, tmp_path):
        p = tmp_path / "s.json"
        p.write_text("{}")
        code, _, err = run_cli(capsys, "simulate", "--scenario", str(p))
        assert code == 2
