import json
import math

import numpy as np

from entroport.cli import main

FIT_CONFIG = """
[run]
dimension = 1
seed = 12

[grid]
lower = [-8.0]
upper = [8.0]
nodes = [201]

[constraints]
constraints = [{"expr": "x1^2", "target": 0.5}]

[solver]
tol = 1e-10
"""

PIPELINE_CONFIG = """
[run]
dimension = 2
seed = 7

[grid]
lower = [-5.0, -5.0]
upper = [5.0, 5.0]
nodes = [61, 61]

[constraints]
constraints = [{"expr": "x1^2 + x2^2", "lambda": 1.0}]

[dynamics]
dt = 2e-3
time = 0.5
diffusion = 1.0
particles = 20000

[transport]
path = [[0.0, 0.0], [1.0, 1.0]]

[contour]
levels = [1.0]
step = 1e-2
max_steps = 20000

[certificate]
tol_fp_residual = 0.05
"""


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(tmp_path, command, text, extra=()):
    cfg = write_config(tmp_path, text)
    out = tmp_path / "out"
    code = main([command, "--config", cfg, "--output", str(out), *extra])
    return code, out


class TestFit:
    def test_fit_converges_with_unit_multiplier(self, tmp_path):
        code, out = run(tmp_path, "fit", FIT_CONFIG)
        assert code == 0
        report = json.loads((out / "fit_report.json").read_text())
        assert report["converged"] is True
        assert abs(report["lambda"][0] - 1.0) <= 1e-8
        assert (out / "density.csv").exists()
        sidecar = json.loads((out / "density.json").read_text())
        assert sidecar["provenance"] == "el-built"

    def test_duplicate_constraints_exit_2(self, tmp_path, capsys):
        text = FIT_CONFIG.replace(
            '[{"expr": "x1^2", "target": 0.5}]',
            '[{"expr": "x1^2", "target": 0.5}, {"expr": "x1^2", "target": 0.5}]')
        code, _ = run(tmp_path, "fit", text)
        assert code == 2
        assert "singular" in capsys.readouterr().err.lower()

    def test_malformed_expression_exit_1(self, tmp_path, capsys):
        text = FIT_CONFIG.replace("x1^2", "x1^^2")
        code, _ = run(tmp_path, "fit", text)
        assert code == 1
        assert "offset" in capsys.readouterr().err

    def test_fixed_lambda_config_rejected_for_fit(self, tmp_path):
        text = FIT_CONFIG.replace('"target": 0.5', '"lambda": 1.0')
        code, _ = run(tmp_path, "fit", text)
        assert code == 1

    def test_constraint_with_both_modes_rejected(self, tmp_path, capsys):
        text = FIT_CONFIG.replace('"target": 0.5', '"target": 0.5, "lambda": 1.0')
        code, _ = run(tmp_path, "fit", text)
        assert code == 1
        assert "exactly one" in capsys.readouterr().err


class TestTransport:
    def test_exact_connection_factor(self, tmp_path):
        code, out = run(tmp_path, "transport", PIPELINE_CONFIG)
        assert code == 0
        result = json.loads((out / "transport.json").read_text())
        assert abs(result["factor"] - math.exp(-2.0)) <= 1e-9
        assert result["pathIndependent"] is True

    def test_rotational_drift_exit_3(self, tmp_path):
        text = PIPELINE_CONFIG + "\n[drift]\ncomponents = [\"x2\", \"-x1\"]\n"
        code, out = run(tmp_path, "transport", text)
        assert code == 3
        result = json.loads((out / "transport.json").read_text())
        assert result["pathSpread"] > result["pathSpreadTolerance"]


class TestEvolveAndSample:
    def test_evolve_writes_snapshots_and_convergence(self, tmp_path):
        code, out = run(tmp_path, "evolve", PIPELINE_CONFIG)
        assert code == 0
        summary = json.loads((out / "convergence.json").read_text())
        assert summary["times"][0] == 0.0
        assert all(abs(m - 1.0) < 1e-9 for m in summary["mass"])
        fe = summary["free_energy"]
        assert all(a >= b - 1e-8 for a, b in zip(fe, fe[1:]))
        csvs = sorted(out.glob("p_t*.csv"))
        assert len(csvs) == len(summary["times"])

    def test_evolve_unstable_dt_exit_2(self, tmp_path):
        text = PIPELINE_CONFIG.replace("dt = 2e-3", "dt = 5e-2")
        code, _ = run(tmp_path, "evolve", text)
        assert code == 2

    def test_sample_writes_histogram(self, tmp_path):
        code, out = run(tmp_path, "sample", PIPELINE_CONFIG)
        assert code == 0
        meta = json.loads((out / "sample.json").read_text())
        assert meta["particles"] == 20000
        assert (out / "histogram.csv").exists()


class TestCertifyAndContour:
    def test_gradient_drift_certifies(self, tmp_path):
        code, out = run(tmp_path, "certify", PIPELINE_CONFIG)
        assert code == 0
        cert = json.loads((out / "certificate.json").read_text())
        assert cert["verdict"] == "stationary-solvable"

    def test_rotational_drift_exit_3(self, tmp_path):
        text = PIPELINE_CONFIG + \
            "\n[drift]\ncomponents = [\"-2*x1 + x2\", \"-2*x2 - x1\"]\n"
        code, out = run(tmp_path, "certify", text)
        assert code == 3
        cert = json.loads((out / "certificate.json").read_text())
        assert abs(cert["curvatureMax"] - 2.0) <= 1e-6

    def test_contour_writes_closed_polyline(self, tmp_path):
        code, out = run(tmp_path, "contour", PIPELINE_CONFIG)
        assert code == 0
        text = (out / "contour_1.0.csv").read_text().splitlines()
        assert text[0] == "x1,x2"
        first = np.array([float(v) for v in text[1].split(",")])
        assert abs(np.hypot(*first) - 1.0) <= 1e-6


class TestDeterminismAndRoundTrip:
    def test_identical_runs_are_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, PIPELINE_CONFIG)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["transport", "--config", cfg, "--output", str(out1)]) == 0
        assert main(["transport", "--config", cfg, "--output", str(out2)]) == 0
        assert (out1 / "transport.json").read_bytes() == \
            (out2 / "transport.json").read_bytes()

    def test_effective_config_reproduces_outputs(self, tmp_path):
        code, out = run(tmp_path, "transport", PIPELINE_CONFIG)
        assert code == 0
        first = (out / "transport.json").read_bytes()
        out2 = tmp_path / "rerun"
        code2 = main(["transport", "--config", str(out / "effective.cfg"),
                      "--output", str(out2)])
        assert code2 == 0
        assert (out2 / "transport.json").read_bytes() == first

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path, PIPELINE_CONFIG)
        out = tmp_path / "o"
        main(["transport", "--config", cfg, "--output", str(out), "--seed", "99"])
        eff = (out / "effective.cfg").read_text()
        assert "seed = 99" in eff

    def test_output_dir_env_override(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, PIPELINE_CONFIG)
        env_out = tmp_path / "env_out"
        monkeypatch.setenv("OUTPUT_DIR", str(env_out))
        assert main(["transport", "--config", cfg]) == 0
        assert (env_out / "transport.json").exists()

    def test_missing_config_exit_1(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "nope.cfg")]) == 1
