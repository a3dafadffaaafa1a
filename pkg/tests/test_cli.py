import json
import math
from pathlib import Path

import numpy as np
import pytest

from kdcl.cli import cli_main
from kdcl.errors import ConfigError
from kdcl.io import (
    config_to_dict,
    emit_results,
    parse_config,
    read_jacobian_log,
    serialize_config,
    write_jacobian_log,
)
from kdcl.observability import JacobianRecord
from kdcl.simulate import default_config, monte_carlo

DEFAULT_YAML = """
n: 4
dt: 0.1
steps: 12
trials: 2
filters: [std, kd]
"""


def write_config(tmp_path, text=DEFAULT_YAML):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


class TestParseConfig:
    def test_empty_document_gives_defaults(self):
        cfg = parse_config("")
        assert cfg.dt == 0.1
        assert cfg.sigma_v == 0.3
        assert cfg.sigma_omega == 0.08
        assert cfg.sigma_meas == 0.1
        assert cfg.trials == 100
        assert cfg.n == 4

    def test_rejects_zero_trials(self):
        with pytest.raises(ConfigError, match="trials"):
            parse_config("trials: 0")

    def test_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="sigma_vel"):
            parse_config("sigma_vel: 0.5")

    def test_rejects_unknown_helix_key(self):
        doc = serialize_config(default_config(n=2))
        doc = doc.replace("radius:", "radiuss:")
        with pytest.raises(ConfigError, match="helices"):
            parse_config(doc)

    def test_rejects_bad_types(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config("steps: hello")
        with pytest.raises(ConfigError, match="steps"):
            parse_config("steps: true")
        with pytest.raises(ConfigError, match="mapping"):
            parse_config("- 1\n- 2")
        with pytest.raises(ConfigError, match="malformed"):
            parse_config("a: [unclosed")

    def test_round_trip_identity(self):
        cfg = default_config(n=3, steps=77, trials=9,
                             sigma_v=1 / 3, master_seed=987654321,
                             helices=tuple(default_helix_variants()))
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text

    def test_round_trip_of_defaults(self):
        cfg = default_config()
        assert parse_config(serialize_config(cfg)) == cfg


def default_helix_variants():
    from kdcl.simulate import HelixSpec

    for i in range(3):
        yield HelixSpec(center=(1.0 + i, 2.0 - i), radius=0.5 + i,
                        angular_rate=0.1 * (i + 1), vertical_rate=0.01 * i,
                        z_bounds=(1.0, 3.0 + i), yaw_rate=-0.2 * i,
                        initial_phase=0.1 + i, initial_yaw=math.pi / (i + 2))


class TestEmission:
    def test_curve_file_shape(self, tmp_path):
        cfg = default_config(n=2, steps=2, trials=1, filters=("std",))
        metrics = monte_carlo(cfg, jobs=1)
        paths = emit_results(metrics, tmp_path)
        curves = (tmp_path / "curves.csv").read_text().splitlines()
        # header + steps * robots * filters rows
        assert len(curves) == 1 + 2 * 2 * 1
        assert curves[0].startswith("step,time_s,filter,robot,err_px")
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert len(summary) == 2
        assert (tmp_path / "curves.csv").read_text().endswith("\n")

    def test_summary_rows_match_filters(self, tmp_path):
        cfg = default_config(n=2, steps=3, trials=1, filters=("std", "kd"))
        metrics = monte_carlo(cfg, jobs=1)
        emit_results(metrics, tmp_path)
        rows = (tmp_path / "summary.csv").read_text().splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["std", "kd"]

    def test_numeric_round_trip_9_digits(self, tmp_path):
        # 9 significant decimal digits round-trip to within half an ulp of
        # the 9th digit, i.e. 5e-9 relative
        cfg = default_config(n=2, steps=3, trials=1, filters=("std",))
        metrics = monte_carlo(cfg, jobs=1)
        emit_results(metrics, tmp_path)
        rows = (tmp_path / "curves.csv").read_text().splitlines()[1:]
        curve = metrics.curves["std"]
        for row in rows:
            cells = row.split(",")
            k, robot = int(cells[0]) - 1, int(cells[3])
            for c, ref in zip(cells[4:8], curve.err_rms[k, robot]):
                assert abs(float(c) - ref) <= 5e-9 * max(1.0, abs(ref))
            assert abs(float(cells[12]) - curve.nees_mean[k, robot]) <= 5e-9 * max(
                1.0, abs(curve.nees_mean[k, robot]))


class TestJacobianLog:
    def test_round_trip(self, tmp_path, rng):
        records = [
            JacobianRecord(k + 1, rng.normal(size=(8, 8)),
                           rng.normal(size=(6, 8)), rng.normal(size=8))
            for k in range(5)
        ]
        path = tmp_path / "log.bin"
        write_jacobian_log(path, "std", records)
        kind, again = read_jacobian_log(path)
        assert kind == "std"
        assert len(again) == 5
        for a, b in zip(records, again):
            assert a.step == b.step
            np.testing.assert_array_equal(a.f, b.f)
            np.testing.assert_array_equal(a.h, b.h)
            np.testing.assert_array_equal(a.mean, b.mean)

    def test_magic_header(self, tmp_path, rng):
        path = tmp_path / "log.bin"
        write_jacobian_log(path, "kd", [JacobianRecord(1, np.eye(8),
                                                       np.zeros((0, 8)),
                                                       np.zeros(8))])
        assert path.read_bytes()[:6] == b"KDCL1\n"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOTLOG" + b"\0" * 64)
        with pytest.raises(ConfigError, match="magic"):
            read_jacobian_log(path)


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli_main(["validate", "--config", str(path)]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_bad_config(self, tmp_path, capsys):
        path = write_config(tmp_path, "trials: 0\n")
        assert cli_main(["validate", "--config", str(path)]) == 1
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli_main(["validate", "--config", str(tmp_path / "nope.yaml")]) == 1

    def test_unknown_subcommand(self, capsys):
        assert cli_main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli_main(["validate", "--config", str(path), "--bogus"]) == 1

    def test_montecarlo_deterministic_outputs(self, tmp_path, capsys):
        path = write_config(tmp_path)
        out1, out2, out3 = (tmp_path / d for d in ("a", "b", "c"))
        assert cli_main(["montecarlo", "--config", str(path),
                         "--out", str(out1), "--jobs", "1"]) == 0
        assert cli_main(["montecarlo", "--config", str(path),
                         "--out", str(out2), "--jobs", "1"]) == 0
        assert cli_main(["montecarlo", "--config", str(path),
                         "--out", str(out3), "--jobs", "2"]) == 0
        for name in ("summary.csv", "curves.csv"):
            ref = (out1 / name).read_bytes()
            assert (out2 / name).read_bytes() == ref
            assert (out3 / name).read_bytes() == ref
        manifests = []
        for out in (out1, out2, out3):
            doc = json.loads((out / "manifest.json").read_text())
            doc.pop("started_at")
            doc.pop("finished_at")
            manifests.append(json.dumps(doc, sort_keys=True))
        assert manifests[0] == manifests[1] == manifests[2]

    def test_montecarlo_seed_override_changes_results(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        cli_main(["montecarlo", "--config", str(path), "--out", str(out1),
                  "--jobs", "1"])
        cli_main(["montecarlo", "--config", str(path), "--out", str(out2),
                  "--jobs", "1", "--seed", "42"])
        assert (out1 / "summary.csv").read_bytes() != (out2 / "summary.csv").read_bytes()
        doc = json.loads((out2 / "manifest.json").read_text())
        assert doc["master_seed"] == 42
        assert set(doc["summary"]) == {"std", "kd"}

    def test_trial_writes_curves_and_logs(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "trial0"
        assert cli_main(["trial", "--config", str(path), "--index", "0",
                         "--out", str(out)]) == 0
        assert (out / "curves.csv").exists()
        assert (out / "summary.csv").exists()
        assert (out / "jacobians_std.bin").exists()
        assert (out / "jacobians_kd.bin").exists()
        kind, records = read_jacobian_log(out / "jacobians_std.bin")
        assert kind == "std" and len(records) == 12

    def test_observability_on_logged_runs(self, tmp_path, capsys):
        path = write_config(tmp_path, DEFAULT_YAML.replace("steps: 12",
                                                           "steps: 20"))
        out = tmp_path / "trial0"
        cli_main(["trial", "--config", str(path), "--index", "0",
                  "--out", str(out)])
        capsys.readouterr()
        assert cli_main(["observability", "--log",
                         str(out / "jacobians_std.bin")]) == 0
        std_out = capsys.readouterr().out
        assert "dim=3" in std_out
        assert "dropped below 4" in std_out
        assert cli_main(["observability", "--log",
                         str(out / "jacobians_kd.bin")]) == 0
        kd_out = capsys.readouterr().out
        assert "dim=3" not in kd_out
        assert "all" in kd_out and "windows" in kd_out

    def test_help_exits_zero(self, capsys):
        assert cli_main(["--help"]) == 0
