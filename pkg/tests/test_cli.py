import json

import numpy as np
import pytest

from bohmvel import cli, protocol
from bohmvel import scenario as scn
from bohmvel.wavecore import QuadratureError

# frozen output schemas; changing any of these breaks downstream readers
PROFILE_HEADER = ["x_s_m", "v_e", "v_exact", "v_smeared", "J_e", "J_exact", "rho", "eps_w", "eps_s"]
SWEEP_HEADER = ["axis1", "axis2", "eps_w_int", "eps_s_int", "eps_total_int", "current_eps_w_int",
                "current_eps_s_int", "current_eps_total_int", "excluded_fraction", "reason"]
BOUNDARY_HEADER = ["variant", "axis2", "axis1"]
ESTIMATE_HEADER = ["bin", "v_hat", "stderr", "count"]
RECORDS_HEADER = ["seed_id", "x_w_m", "x_s_m"]


def run(argv):
    return cli.main([str(a) for a in argv])


def columns(path):
    h, header, rows = cli.read_csv(path)
    data = {name: [r[i] for r in rows] for i, name in enumerate(header)}
    return h, header, data


def floats(values):
    return np.array([float(v) for v in values])


@pytest.fixture(scope="module")
def default_hash():
    return scn.build_double_slit().manifest_hash()


@pytest.fixture(scope="module")
def profile_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("profile")
    assert run(["profile", "--out", out, "--n", 512]) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    assert run(["sweep", "--out", out, "--n", 512]) == cli.EXIT_OK
    return out


class TestProfile:
    def test_schema_and_hash(self, profile_dir, default_hash):
        h, header, data = columns(profile_dir / "profile.csv")
        assert header == PROFILE_HEADER
        assert h == default_hash
        assert len(data["x_s_m"]) == 512

    def test_physics_columns(self, profile_dir):
        _, _, d = columns(profile_dir / "profile.csv")
        x, v = floats(d["x_s_m"]), floats(d["v_exact"])
        assert np.all(np.diff(x) > 0)
        assert np.allclose(v, -v[::-1], rtol=1e-8, atol=1e-9 * np.abs(v).max())
        ve, je = floats(d["v_e"]), floats(d["J_e"])
        # J_e = v_e P(x_s); P is positive, so J_e and v_e share signs
        assert np.all(np.sign(je) == np.sign(ve))

    def test_manifest(self, profile_dir, default_hash):
        m = json.loads((profile_dir / "manifest.json").read_text())
        assert m["manifest_sha256"] == default_hash
        assert m["command"] == "profile"
        assert m["scenario"]["sigma0_source"] == "calibrated"
        assert {"numpy", "scipy", "python"} <= set(m["versions"])
        assert m["tolerances"]["moment_epsabs"] == protocol.MOMENT_EPSABS
        assert m["run"]["integrated"]["velocity_observed"] < 0.01

    def test_rerun_byte_identical(self, profile_dir, tmp_path):
        assert run(["profile", "--out", tmp_path, "--n", 512]) == cli.EXIT_OK
        assert (tmp_path / "profile.csv").read_bytes() == (profile_dir / "profile.csv").read_bytes()

    def test_override_changes_hash(self, tmp_path, default_hash):
        assert run(["profile", "--out", tmp_path, "--n", 16, "--sigma-w-m", 2e-7]) == cli.EXIT_OK
        h, _, _ = cli.read_csv(tmp_path / "profile.csv")
        assert h != default_hash


class TestSweep:
    def test_schema(self, sweep_dir, default_hash):
        h, header, data = columns(sweep_dir / "sweep.csv")
        assert header == SWEEP_HEADER and h == default_hash
        assert len(data["axis1"]) == 25 * 9
        hb, hdr, _ = cli.read_csv(sweep_dir / "boundary.csv")
        assert hdr == BOUNDARY_HEADER and hb == default_hash

    def test_monotone_in_sigma_w(self, sweep_dir):
        _, _, d = columns(sweep_dir / "sweep.csv")
        s_w, tau, ew = floats(d["axis1"]), floats(d["axis2"]), floats(d["eps_w_int"])
        for t in np.unique(tau):
            sel = tau == t
            order = np.argsort(s_w[sel])
            assert np.all(np.diff(ew[sel][order]) < 0)

    def test_eps_s_grows_as_tau_shrinks(self, sweep_dir):
        _, _, d = columns(sweep_dir / "sweep.csv")
        s_w, tau, es = floats(d["axis1"]), floats(d["axis2"]), floats(d["eps_s_int"])
        # the 1/tau term dominates only at short tau; near 10 ps it competes
        # with the velocity-gradient terms
        sel = (s_w == s_w.min()) & (tau <= 1.0001e-12)
        order = np.argsort(tau[sel])
        assert sel.sum() >= 4
        assert np.all(np.diff(es[sel][order]) < 0)

    def test_boundary_near_150nm_at_1ps(self, sweep_dir):
        _, _, d = columns(sweep_dir / "boundary.csv")
        tau = floats(d["axis2"])
        at = [float(a) for a, t, v in zip(d["axis1"], tau, d["variant"])
              if abs(t - 1e-12) < 1e-18 and v == "velocity"]
        assert len(at) == 1 and 75e-9 < at[0] < 300e-9

    def test_invalid_cells_report_reason(self, slit, tmp_path):
        d = slit.to_dict()
        d["sweep"] = {"axis1": {"key": "sigma_w_m", "min": 1e-7, "max": 2e-7, "count": 2, "scale": "log"},
                      "axis2": {"key": "tau_s", "min": 1e-12, "max": 2e-11, "count": 2, "scale": "log"}}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(d))
        assert run(["sweep", "--scenario", path, "--out", tmp_path, "--n", 64]) == cli.EXIT_OK
        _, _, data = columns(tmp_path / "sweep.csv")
        bad = [i for i, r in enumerate(data["reason"]) if r]
        assert len(bad) == 2
        assert all(data["reason"][i].startswith("invalid:") for i in bad)
        assert all(np.isnan(float(data["eps_w_int"][i])) for i in bad)

    def test_workers_match_serial(self, slit, tmp_path):
        d = slit.to_dict()
        d["sweep"]["axis1"]["count"] = 3
        d["sweep"]["axis2"]["count"] = 2
        path = tmp_path / "s.json"
        path.write_text(json.dumps(d))
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["sweep", "--scenario", path, "--out", a, "--n", 128]) == cli.EXIT_OK
        assert run(["sweep", "--scenario", path, "--out", b, "--n", 128, "--workers", 2]) == cli.EXIT_OK
        assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()

    def test_boundary_crossings_interpolation(self):
        a = np.array([1.0, 10.0, 100.0])
        assert cli.boundary_crossings(a, [0.1, 0.001, 0.0001]) == pytest.approx([10.0 ** 0.5])
        assert cli.boundary_crossings(a, [np.nan, 0.1, 0.001]) == pytest.approx([10.0 ** 1.5])
        assert cli.boundary_crossings(a, [0.1, 0.1, 0.1]) == []


class TestSample:
    def test_outputs(self, tmp_path, default_hash):
        assert run(["sample", "--out", tmp_path, "--n", 300, "--seed", 4]) == cli.EXIT_OK
        h, header, data = columns(tmp_path / "estimate.csv")
        assert header == ESTIMATE_HEADER and h == default_hash
        assert sum(int(c) for c in data["count"]) == 300
        lines = (tmp_path / "records.csv").read_text().splitlines()
        assert lines[0] == f"# manifest_sha256: {default_hash}"
        assert lines[1].split(",") == RECORDS_HEADER
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["run"]["seed"] == 4 and m["run"]["required_samples"] >= 1

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["sample", "--out", out, "--n", 100, "--seed", 11]) == cli.EXIT_OK
        assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()
        assert (a / "estimate.csv").read_bytes() == (b / "estimate.csv").read_bytes()

    def test_required_samples_printed(self, tmp_path, capsys):
        assert run(["sample", "--out", tmp_path, "--n", 10, "--target-eps-m-s", 1.5e3]) == cli.EXIT_OK
        assert "required_samples for target 1.5000e+03 m/s: 5000" in capsys.readouterr().out


class TestValidate:
    def test_passes(self, tmp_path, capsys):
        assert run(["validate", "--out", tmp_path]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 9
        report = json.loads((tmp_path / "validate.json").read_text())
        assert all(c["passed"] for c in report["checks"])
        assert report["regime"]["r2_ok"] is True

    def test_coarse_window_fails(self, tmp_path, capsys):
        assert run(["validate", "--out", tmp_path, "--grid-window-std", 2]) == cli.EXIT_VALIDATION
        assert "FAIL  grid_support" in capsys.readouterr().out


class TestOracleCompare:
    def test_passes(self, tmp_path):
        assert run(["oracle-compare", "--out", tmp_path]) == cli.EXIT_OK
        report = json.loads((tmp_path / "oracle_compare.json").read_text())
        assert {c["name"] for c in report["checks"]} == {
            "backend_equivalence", "field_equivalence", "joint_probability_grid", "ensemble_closed_form"}


class TestExitCodes:
    def test_missing_scenario_file(self, tmp_path, capsys):
        assert run(["profile", "--scenario", tmp_path / "none.json", "--out", tmp_path]) == cli.EXIT_VALIDATION
        assert json.loads(capsys.readouterr().err)["error"] == "io"

    def test_invalid_scenario(self, tmp_path, capsys):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"packet": {"terms": []}, "params": {}}))
        assert run(["profile", "--scenario", path, "--out", tmp_path]) == cli.EXIT_VALIDATION
        assert json.loads(capsys.readouterr().err)["error"] == "validation"

    def test_tau_override_too_large(self, tmp_path):
        assert run(["profile", "--out", tmp_path, "--tau-s", 2e-11]) == cli.EXIT_VALIDATION

    def test_bad_n(self, tmp_path):
        assert run(["sample", "--out", tmp_path, "--n", 0]) == cli.EXIT_VALIDATION

    def test_numerical_breakdown(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise QuadratureError("did not converge", 0.5, 1e-3)

        monkeypatch.setattr(protocol, "compute_profile", boom)
        assert run(["profile", "--out", tmp_path]) == cli.EXIT_NUMERICAL
        report = json.loads(capsys.readouterr().err)
        assert report == {"error": "numerical", "type": "QuadratureError", "message": "did not converge"}

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["nope"])
        assert exc.value.code == 2


class TestCsvHelpers:
    def test_round_trip_and_precision(self, tmp_path):
        path = tmp_path / "t.csv"
        cli.write_csv(path, ["a", "b", "c"], [(0.1 + 0.2, 3, "x"), (np.float64(1e-300), np.int64(7), "")], "h")
        h, header, rows = cli.read_csv(path)
        assert h == "h" and header == ["a", "b", "c"]
        assert float(rows[0][0]) == 0.1 + 0.2 and rows[0][1] == "3" and rows[1][2] == ""

    def test_missing_hash_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            cli.read_csv(path)
