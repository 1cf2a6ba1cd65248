"""Command-line tests: subprocess round trips, exit codes, manifests."""

import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

TABLE2_INITIAL = (
    "13.50,14.00,16.00,15.00,17.00,17.00,1.50,3.50,9.00,4.00,"
    "3.00,5.00,2.00,2.00,2.00,7.00,10.00,4.50,6.00,4.00"
).split(",")


def run_cli(*argv, env=None):
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "defreg", *argv],
        capture_output=True,
        text=True,
        env=full_env,
    )


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    """One small synthetic case shared by the command tests."""
    out = tmp_path_factory.mktemp("case")
    proc = run_cli(
        "synth", "--out", str(out), "--dims", "16", "16", "16", "--seed", "4",
        "--num-blobs", "20", "--field-bumps", "2", "--max-disp", "2",
        "--num-landmarks", "5", "--noise-sigma", "0",
    )
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="module")
def registered(case_dir, tmp_path_factory):
    """A quick freeform registration of the shared case."""
    out = tmp_path_factory.mktemp("reg")
    field = out / "out.dfield"
    proc = run_cli(
        "register",
        "--fixed", str(case_dir / "fixed.vol"),
        "--moving", str(case_dir / "moving.vol"),
        "--out-field", str(field),
        "--out-warped", str(out / "warped.vol"),
        "--mode", "freeform", "--levels", "2", "--iters", "40",
        "--lambda", "0.1", "--ncc-window", "5", "--learning-rate", "0.3",
    )
    assert proc.returncode == 0, proc.stderr
    return out, field, proc


class TestVersion:
    def test_prints_version(self):
        proc = run_cli("version")
        assert proc.returncode == 0
        assert proc.stdout.strip().startswith("defreg ")

    def test_missing_command_is_user_error(self):
        proc = run_cli()
        assert proc.returncode == 1
        assert "usage" in proc.stderr.lower()


class TestSynthCommand:
    def test_writes_case_files_and_manifest(self, case_dir):
        for name in (
            "fixed.vol", "fixed.vol.json", "moving.vol", "moving.vol.json",
            "true_field.dfield", "true_field.dfield.json",
            "fixed_landmarks.csv", "moving_landmarks.csv",
            "case.json", "manifest.json",
        ):
            assert (case_dir / name).exists(), name

    def test_manifest_well_formed(self, case_dir):
        m = json.loads((case_dir / "manifest.json").read_text())
        assert m["command"] == "synth"
        assert m["config"]["seed"] == 4
        assert m["config"]["dims"] == [16, 16, 16]
        assert isinstance(m["wall_seconds"], float)
        assert any(p.endswith("fixed.vol") for p in m["outputs"])

    def test_same_seed_identical_bytes(self, case_dir, tmp_path):
        proc = run_cli(
            "synth", "--out", str(tmp_path), "--dims", "16", "16", "16", "--seed", "4",
            "--num-blobs", "20", "--field-bumps", "2", "--max-disp", "2",
            "--num-landmarks", "5", "--noise-sigma", "0",
        )
        assert proc.returncode == 0, proc.stderr
        for name in ("fixed.vol", "moving.vol", "true_field.dfield"):
            assert (tmp_path / name).read_bytes() == (case_dir / name).read_bytes()

    def test_invalid_dims_is_user_error(self, tmp_path):
        proc = run_cli("synth", "--out", str(tmp_path / "x"), "--dims", "4", "4", "4")
        assert proc.returncode == 1
        assert "error" in proc.stderr.lower()
        assert proc.stderr.count("\n") <= 2  # single-line diagnostic

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "synth.json"
        cfg.write_text(json.dumps({"dims": [16, 16, 16], "seed": 9, "noise_sigma": 0.0,
                                   "num_landmarks": 5, "max_displacement": 1.0}))
        out = tmp_path / "case"
        proc = run_cli("synth", "--out", str(out), "--config", str(cfg), "--seed", "10")
        assert proc.returncode == 0, proc.stderr
        manifest = json.loads((out / "case.json").read_text())
        assert manifest["config"]["seed"] == 10  # flag wins
        assert manifest["config"]["dims"] == [16, 16, 16]  # file value used


class TestRegisterCommand:
    def test_happy_path_outputs(self, registered):
        out, field, proc = registered
        assert field.exists()
        assert (out / "out.dfield.json").exists()
        assert (out / "warped.vol").exists()
        assert (out / "out.dfield.report.json").exists()
        assert (out / "out.dfield.manifest.json").exists()
        line = proc.stdout.strip().splitlines()[-1]
        assert "total=" in line and "iterations=" in line and "stop=" in line

    def test_report_structure(self, registered):
        out, _, _ = registered
        report = json.loads((out / "out.dfield.report.json").read_text())
        assert report["mode"] == "freeform"
        assert report["config"]["pyramid_levels"] == 2
        assert len(report["levels"]) == 2
        assert report["field_path"].endswith("out.dfield")

    def test_manifest_records_input_digests(self, registered, case_dir):
        out, _, _ = registered
        m = json.loads((out / "out.dfield.manifest.json").read_text())
        assert m["command"] == "register"
        path = next(p for p in m["inputs"] if p.endswith("fixed.vol"))
        want = hashlib.sha256((case_dir / "fixed.vol").read_bytes()).hexdigest()
        assert m["inputs"][path] == want

    def test_zero_iterations_writes_zero_field(self, case_dir, tmp_path):
        field = tmp_path / "zero.dfield"
        proc = run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--moving", str(case_dir / "moving.vol"),
            "--out-field", str(field),
            "--iters", "0",
        )
        assert proc.returncode == 0, proc.stderr
        from defreg.warp import load_field

        assert not load_field(field).data.any()

    def test_missing_flag_is_user_error(self, case_dir, tmp_path):
        proc = run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--out-field", str(tmp_path / "x.dfield"),
        )
        assert proc.returncode == 1
        assert "usage" in proc.stderr.lower()

    def test_missing_input_file_is_io_error(self, tmp_path):
        proc = run_cli(
            "register",
            "--fixed", str(tmp_path / "absent.vol"),
            "--moving", str(tmp_path / "absent.vol"),
            "--out-field", str(tmp_path / "x.dfield"),
        )
        assert proc.returncode == 2
        assert "i/o error" in proc.stderr

    def test_checkpoint_requires_convnet_mode(self, case_dir, tmp_path):
        proc = run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--moving", str(case_dir / "moving.vol"),
            "--out-field", str(tmp_path / "x.dfield"),
            "--out-checkpoint", str(tmp_path / "x.ckpt"),
            "--mode", "freeform",
        )
        assert proc.returncode == 1

    def test_convnet_mode_writes_checkpoint(self, case_dir, tmp_path):
        field = tmp_path / "cn.dfield"
        ckpt = tmp_path / "cn.ckpt"
        proc = run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--moving", str(case_dir / "moving.vol"),
            "--out-field", str(field),
            "--out-checkpoint", str(ckpt),
            "--mode", "convnet", "--iters", "2",
            "--net-levels", "2", "--base-filters", "2",
            "--ncc-window", "5", "--lambda", "0.1",
        )
        assert proc.returncode == 0, proc.stderr
        assert ckpt.read_bytes()[:4] == b"IRNW"
        from defreg.model import load_checkpoint

        params = load_checkpoint(ckpt)
        assert params.config.levels == 2

    def test_single_thread_runs_are_byte_identical(self, case_dir, tmp_path):
        fields = []
        for tag in ("a", "b"):
            field = tmp_path / f"{tag}.dfield"
            proc = run_cli(
                "--threads", "1", "register",
                "--fixed", str(case_dir / "fixed.vol"),
                "--moving", str(case_dir / "moving.vol"),
                "--out-field", str(field),
                "--levels", "1", "--iters", "5", "--ncc-window", "5",
                "--lambda", "0.1",
            )
            assert proc.returncode == 0, proc.stderr
            fields.append(field.read_bytes())
        assert fields[0] == fields[1]

    def test_help_lists_spec_defaults(self):
        proc = run_cli("register", "--help", env={"COLUMNS": "200"})
        assert proc.returncode == 0
        for needle in ("default: 9", "default: 200 freeform, 100 convnet", "default: 1e-6"):
            assert needle in proc.stdout


class TestEvalCommand:
    def test_zero_field_against_exact_landmarks(self, case_dir, tmp_path):
        # zero displacement: method errors equal initial errors, nothing
        # strictly improves
        field = tmp_path / "zero.dfield"
        run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--moving", str(case_dir / "moving.vol"),
            "--out-field", str(field),
            "--iters", "0",
        )
        prefix = str(tmp_path / "eval_")
        proc = run_cli(
            "eval",
            "--field", str(field),
            "--fixed-landmarks", str(case_dir / "fixed_landmarks.csv"),
            "--moving-landmarks", str(case_dir / "moving_landmarks.csv"),
            "--out-prefix", prefix,
        )
        assert proc.returncode == 0, proc.stderr
        assert "robustness=0.0" in proc.stdout
        metrics = json.loads((tmp_path / "eval_metrics.json").read_text())[0]
        assert metrics["mae_median"] == pytest.approx(metrics["initial_mae_median"], abs=1e-9)
        long_lines = (tmp_path / "eval_errors_long.csv").read_text().strip().splitlines()
        assert long_lines[0] == "case,method,error"
        assert len(long_lines) == 1 + 2 * 5  # initial + registered rows
        assert (tmp_path / "eval_manifest.json").exists()

    def test_registered_field_improves_over_initial(self, case_dir, registered):
        _, field, _ = registered
        proc = run_cli(
            "eval",
            "--field", str(field),
            "--fixed-landmarks", str(case_dir / "fixed_landmarks.csv"),
            "--moving-landmarks", str(case_dir / "moving_landmarks.csv"),
        )
        assert proc.returncode == 0, proc.stderr
        kv = dict(part.split("=", 1) for part in proc.stdout.strip().split())
        assert float(kv["mae_median"]) < float(kv["initial_mae_median"])

    def test_summarize_reproduces_published_row(self, tmp_path):
        col = tmp_path / "initial.csv"
        col.write_text("value\n" + "\n".join(TABLE2_INITIAL) + "\n")
        proc = run_cli("eval", "--summarize", str(col))
        assert proc.returncode == 0, proc.stderr
        kv = dict(part.split("=", 1) for part in proc.stdout.strip().split())
        assert float(kv["n"]) == 20
        assert float(kv["mean"]) == pytest.approx(7.80, abs=0.005)
        assert float(kv["median"]) == pytest.approx(5.50, abs=0.005)
        assert float(kv["stddev"]) == pytest.approx(5.62, abs=0.01)
        assert float(kv["q25"]) == pytest.approx(3.38, abs=0.006)
        assert float(kv["q75"]) == pytest.approx(13.63, abs=0.006)

    def test_id_mismatch_is_user_error(self, case_dir, tmp_path):
        bad = tmp_path / "bad.csv"
        lines = (case_dir / "moving_landmarks.csv").read_text().strip().splitlines()
        head, first = lines[0], lines[1].split(",")
        first[0] = "999"
        bad.write_text("\n".join([head, ",".join(first)] + lines[2:]) + "\n")
        field = tmp_path / "zero.dfield"
        run_cli(
            "register",
            "--fixed", str(case_dir / "fixed.vol"),
            "--moving", str(case_dir / "moving.vol"),
            "--out-field", str(field), "--iters", "0",
        )
        proc = run_cli(
            "eval",
            "--field", str(field),
            "--fixed-landmarks", str(case_dir / "fixed_landmarks.csv"),
            "--moving-landmarks", str(bad),
        )
        assert proc.returncode == 1
        assert "error" in proc.stderr.lower()

    def test_missing_inputs_without_summarize(self):
        proc = run_cli("eval")
        assert proc.returncode == 1


class TestSlicesCommand:
    def test_volume_slice_pgm(self, case_dir, tmp_path):
        out = tmp_path / "s.pgm"
        proc = run_cli(
            "slices", "--volume", str(case_dir / "fixed.vol"),
            "--axis", "z", "--index", "8", "--out", str(out),
        )
        assert proc.returncode == 0, proc.stderr
        raw = out.read_bytes()
        assert raw.startswith(b"P5\n16 16\n255\n")
        assert (tmp_path / "s.pgm.manifest.json").exists()

    def test_jacobian_slice_matches_library(self, case_dir, tmp_path):
        out = tmp_path / "j.pgm"
        proc = run_cli(
            "slices", "--field", str(case_dir / "true_field.dfield"),
            "--jacobian", "--axis", "z", "--index", "8", "--out", str(out),
        )
        assert proc.returncode == 0, proc.stderr
        from defreg.warp import jacobian_determinant, load_field

        jm = jacobian_determinant(load_field(case_dir / "true_field.dfield"))
        plane = jm.data[:, :, 8]
        lo, hi = plane.min(), plane.max()
        want = np.rint((plane - lo) / (hi - lo) * 255.0).clip(0, 255).astype(np.uint8)
        raw = out.read_bytes()
        header_end = raw.index(b"255\n") + 4
        pixels = np.frombuffer(raw[header_end:], dtype=np.uint8).reshape(16, 16).T
        np.testing.assert_array_equal(pixels, want)

    def test_volume_and_field_together_rejected(self, case_dir, tmp_path):
        proc = run_cli(
            "slices", "--volume", str(case_dir / "fixed.vol"),
            "--field", str(case_dir / "true_field.dfield"),
            "--jacobian", "--axis", "z", "--index", "8",
            "--out", str(tmp_path / "x.pgm"),
        )
        assert proc.returncode == 1

    def test_field_without_jacobian_rejected(self, case_dir, tmp_path):
        proc = run_cli(
            "slices", "--field", str(case_dir / "true_field.dfield"),
            "--axis", "z", "--index", "8", "--out", str(tmp_path / "x.pgm"),
        )
        assert proc.returncode == 1

    def test_out_of_range_index_rejected(self, case_dir, tmp_path):
        proc = run_cli(
            "slices", "--volume", str(case_dir / "fixed.vol"),
            "--axis", "z", "--index", "99", "--out", str(tmp_path / "x.pgm"),
        )
        assert proc.returncode == 1


class TestThreadConfiguration:
    def test_env_fallback_sets_thread_vars(self):
        code = (
            "import os\n"
            "os.environ['DEFREG_THREADS'] = '3'\n"
            "from defreg.cli import _configure_threads\n"
            "_configure_threads(None)\n"
            "print(os.environ['OMP_NUM_THREADS'], os.environ['OPENBLAS_NUM_THREADS'])\n"
        )
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.split() == ["3", "3"]

    def test_flag_overrides_env(self):
        code = (
            "import os\n"
            "os.environ['DEFREG_THREADS'] = '3'\n"
            "from defreg.cli import _configure_threads\n"
            "_configure_threads(2)\n"
            "print(os.environ['OMP_NUM_THREADS'])\n"
        )
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip() == "2"
