import math
import subprocess
import sys

import numpy as np
import pytest

from flowdet import checks, cli
from flowdet.data import synthetic_images
from flowdet.io import load_checkpoint, read_ppm, save_checkpoint, save_csv, write_image_raw
from flowdet.layers import build_model
from flowdet.training import TrainTrace


def run(capsys, *argv):
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


def values(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


@pytest.fixture
def small_run(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dataset=rings\nn_samples=600\nblocks_per_level=1\nhidden=6\nbins=4\n"
                   "steps=15\nbatch_size=64\nout_dir=out\n")
    return cfg


class TestTrain:
    def test_outputs(self, capsys, small_run):
        code, out, _ = run(capsys, "train", small_run)
        assert code == 0
        d = small_run.parent / "out"
        lines = (d / "trace.csv").read_text().splitlines()
        assert len(lines) == 16
        assert lines[0].startswith("nll_nats,nll_bpd,logdet_0,var_0,gradnorm_0")
        assert (d / "config.resolved").exists() and (d / "model.ckpt").exists()
        assert "heldout_nll_end" in values(out)

    def test_zero_steps(self, capsys, tmp_path):
        cfg = tmp_path / "z.cfg"
        cfg.write_text("steps=0\nblocks_per_level=1\nhidden=4\nbins=3\nn_samples=50\nout_dir=o\n")
        assert run(capsys, "train", cfg)[0] == 0
        assert len((tmp_path / "o" / "trace.csv").read_text().splitlines()) == 1
        model = load_checkpoint(tmp_path / "o" / "model.ckpt")
        fresh = build_model((2, 1, 1), blocks_per_level=1, hidden=4, bins=3)
        np.testing.assert_array_equal(model.get_flat(), fresh.get_flat())

    def test_volume_preserving_first_row(self, capsys, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text("beta=0.5\nsteps=2\nblocks_per_level=2\nhidden=4\nn_samples=200\n"
                       "batch_size=32\nout_dir=o\n")
        assert run(capsys, "train", cfg)[0] == 0
        trace = TrainTrace.read_csv(tmp_path / "o" / "trace.csv")
        assert abs(sum(trace.logdet[0])) <= 1e-9

    def test_echo_rerun_bit_identical(self, capsys, small_run):
        assert run(capsys, "train", small_run)[0] == 0
        d = small_run.parent / "out"
        first = {n: (d / n).read_bytes() for n in ("model.ckpt", "trace.csv", "events.log")}
        echo = small_run.parent / "echo.cfg"
        echo.write_bytes((d / "config.resolved").read_bytes())
        assert run(capsys, "train", echo)[0] == 0
        for name, blob in first.items():
            assert (d / name).read_bytes() == blob, name

    def test_unknown_key_exit_1(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("steps=1\nlearning_rate=3\n")
        code, _, err = run(capsys, "train", cfg)
        assert code == 1
        assert "line 2" in err

    def test_missing_file_exit_1(self, capsys, tmp_path):
        assert run(capsys, "train", tmp_path / "nope.cfg")[0] == 1

    def test_divergence_exit_2(self, capsys, small_run, monkeypatch):
        def diverging(model, config, data):
            trace = TrainTrace(len(model.layers))
            trace.diverged = True
            trace.events.append((0, "diverged", "forced"))
            return model, trace

        monkeypatch.setattr(cli, "train", diverging)
        assert run(capsys, "train", small_run)[0] == 2


class TestEval:
    def test_uniform_identity(self, capsys, tmp_path, rng):
        save_checkpoint(tmp_path / "u.ckpt", build_model((2, 1, 1), blocks_per_level=0,
                                                         base="uniform"))
        save_csv(tmp_path / "d.csv", rng.uniform(0.01, 0.99, size=(50, 2)))
        code, out, _ = run(capsys, "eval", tmp_path / "u.ckpt", tmp_path / "d.csv")
        assert code == 0
        assert float(values(out)["nll_nats"]) == 0.0

    def test_normal_identity_entropy(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        save_csv(tmp_path / "d.csv", np.random.default_rng(0).standard_normal((100_000, 2)))
        code, out, _ = run(capsys, "eval", tmp_path / "n.ckpt", tmp_path / "d.csv")
        assert code == 0
        assert float(values(out)["nll_nats"]) == pytest.approx(math.log(2 * math.pi) + 1, abs=0.02)

    def test_linear_flow_respects_bound(self, capsys, tmp_path):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((5000, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.5, 0.3]])
        save_csv(tmp_path / "d.csv", data)
        (tmp_path / "l.cfg").write_text("dataset=csv\ndata_path=d.csv\narch=linear\nsteps=600\n"
                                        "batch_size=500\nout_dir=o\n")
        assert run(capsys, "train", tmp_path / "l.cfg")[0] == 0
        _, out, _ = run(capsys, "eval", tmp_path / "o" / "model.ckpt", tmp_path / "d.csv")
        nll = float(values(out)["nll_nats"])
        _, out, _ = run(capsys, "qlf-bound", tmp_path / "d.csv")
        assert nll >= -float(values(out)["lmax_nats"]) - 1e-6

    def test_dimension_mismatch(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        save_csv(tmp_path / "d.csv", np.zeros((3, 3)))
        assert run(capsys, "eval", tmp_path / "n.ckpt", tmp_path / "d.csv")[0] == 1

    def test_image_data(self, capsys, tmp_path):
        write_image_raw(tmp_path / "i.raw", synthetic_images(10, bits=5), 5)
        save_checkpoint(tmp_path / "m.ckpt", build_model((1, 8, 8), blocks_per_level=0,
                                                         base="uniform"))
        code, out, _ = run(capsys, "eval", tmp_path / "m.ckpt", tmp_path / "i.raw")
        assert code == 0
        assert float(values(out)["nll_bpd"]) == pytest.approx(5.0)


class TestSampleAndDensity:
    def test_sample_csv(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        assert run(capsys, "sample", tmp_path / "n.ckpt", "--n", 7, "--out", tmp_path / "s.csv")[0] == 0
        assert len((tmp_path / "s.csv").read_text().splitlines()) == 7

    def test_sample_ppm_deterministic(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", build_model((1, 4, 4), blocks_per_level=1, k=2,
                                                         hidden=4, bins=3))
        for name in ("a.ppm", "b.ppm"):
            run(capsys, "sample", tmp_path / "m.ckpt", "--n", 4, "--seed", 3, "--out",
                tmp_path / name)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_density_identity(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        code, out, _ = run(capsys, "density2d", tmp_path / "n.ckpt", "--grid", 41, "--window", 4,
                           "--out", tmp_path / "h.ppm")
        assert code == 0
        img = read_ppm(tmp_path / "h.ppm")
        assert img.shape == (41, 41, 3)
        dens = np.loadtxt(tmp_path / "h.csv", delimiter=",", skiprows=1)[:, 2].reshape(41, 41)
        assert np.unravel_index(np.argmax(dens), dens.shape) == (20, 20)
        np.testing.assert_allclose(dens, dens.T, rtol=1e-12)
        assert 0.95 <= float(values(out)["riemann_sum"]) <= 1.02

    def test_density_grid_400(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        code, out, _ = run(capsys, "density2d", tmp_path / "n.ckpt", "--grid", 400, "--out",
                           tmp_path / "h.ppm")
        assert read_ppm(tmp_path / "h.ppm").shape == (400, 400, 3)
        assert 0.95 <= float(values(out)["riemann_sum"]) <= 1.02

    def test_density_needs_2d(self, capsys, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((3, 1, 1), blocks_per_level=0))
        assert run(capsys, "density2d", tmp_path / "n.ckpt", "--out", tmp_path / "h.ppm")[0] == 1


class TestQlfBound:
    def test_standard_normal(self, capsys, tmp_path):
        save_csv(tmp_path / "d.csv", np.random.default_rng(1).standard_normal((100_000, 2)))
        code, out, _ = run(capsys, "qlf-bound", tmp_path / "d.csv")
        assert code == 0
        assert float(values(out)["lmax_nats"]) == pytest.approx(-2.837877, abs=0.02)

    def test_axis_line(self, capsys, tmp_path):
        save_csv(tmp_path / "d.csv", np.stack([np.arange(10.0), np.zeros(10)], axis=1))
        _, out, _ = run(capsys, "qlf-bound", tmp_path / "d.csv")
        assert values(out)["floored_count"] == "1"

    def test_scaling(self, capsys, tmp_path, rng):
        x = rng.standard_normal((1000, 2))
        save_csv(tmp_path / "a.csv", x)
        save_csv(tmp_path / "b.csv", 2 * x)
        a = float(values(run(capsys, "qlf-bound", tmp_path / "a.csv")[1])["lmax_nats"])
        b = float(values(run(capsys, "qlf-bound", tmp_path / "b.csv")[1])["lmax_nats"])
        assert a - b == pytest.approx(2 * math.log(2.0), abs=0.02)

    def test_per_point_mode(self, capsys, tmp_path):
        save_csv(tmp_path / "d.csv", np.ones((4, 3)))
        _, out, _ = run(capsys, "qlf-bound", tmp_path / "d.csv", "--mode", "per_point")
        assert values(out)["floored_count"] == "8"


class TestDiagnose:
    def test_flags_ramp(self, capsys, tmp_path):
        trace = TrainTrace(2)
        for t in range(6):
            trace.append(1.0, 1.0, np.array([0.0, t]), np.ones(2), np.ones(2))
        trace.write_csv(tmp_path / "t.csv")
        code, out, _ = run(capsys, "diagnose", tmp_path / "t.csv", "--layer", 0, "--threshold", 2.5)
        assert code == 0
        assert values(out)["first_flag"] == "3"

    def test_lipschitz_threshold(self, capsys, tmp_path):
        trace = TrainTrace(2)
        trace.append(1.0, 1.0, np.zeros(2), np.ones(2), np.ones(2))
        trace.write_csv(tmp_path / "t.csv")
        _, out, _ = run(capsys, "diagnose", tmp_path / "t.csv", "--lipschitz", 2, "--dim", 3)
        assert float(values(out)["threshold"]) == pytest.approx(3 * math.log(2))

    def test_needs_threshold(self, capsys, tmp_path):
        trace = TrainTrace(1)
        trace.append(1.0, 1.0, np.zeros(1), np.ones(1), np.ones(1))
        trace.write_csv(tmp_path / "t.csv")
        assert run(capsys, "diagnose", tmp_path / "t.csv")[0] == 1


class TestPerturb:
    @pytest.fixture
    def image_model(self, tmp_path):
        model = build_model((1, 8, 8), levels=3, blocks_per_level=1, k=2, hidden=4, bins=3)
        save_checkpoint(tmp_path / "m.ckpt", model)
        write_image_raw(tmp_path / "i.raw", synthetic_images(5, bits=5), 5)
        return tmp_path

    def test_keep_all_levels(self, capsys, image_model):
        code, out, _ = run(capsys, "perturb", image_model / "m.ckpt", image_model / "i.raw",
                           "--k", 3, "--out", image_model / "p.ppm")
        assert code == 0
        assert float(values(out)["reconstruction_rmse"]) <= 1e-6
        assert (image_model / "p.ppm").exists()

    def test_k_out_of_range(self, capsys, image_model):
        assert run(capsys, "perturb", image_model / "m.ckpt", image_model / "i.raw",
                   "--k", 4)[0] == 1


class TestCheckCommand:
    def test_nan_knots_fail_spline_property(self, capsys, monkeypatch):
        def poisoned(rng, bins):
            tx = rng.standard_normal(bins + 1)
            tx[3] = np.nan
            return tx, rng.standard_normal(bins + 1), rng.standard_normal(bins + 1), 2.0

        monkeypatch.setattr(checks, "_random_knot_params", poisoned)
        monkeypatch.setattr(checks, "CHECKS", (checks.check_spline_roundtrip,
                                               checks.check_spline_linear))
        code, out, err = run(capsys, "check")
        assert code == 3
        assert "spline_roundtrip" in err
        assert "FAIL" in out


class TestEntryPoint:
    def test_bad_command_exit_1(self, capsys):
        assert run(capsys, "frobnicate")[0] == 1

    def test_module_runs(self, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", build_model((2, 1, 1), blocks_per_level=0))
        save_csv(tmp_path / "d.csv", np.zeros((2, 2)))
        proc = subprocess.run([sys.executable, "-m", "flowdet", "eval", str(tmp_path / "n.ckpt"),
                               str(tmp_path / "d.csv")], capture_output=True, text=True,
                              env={"FLOWDET_THREADS": "1", "PATH": ""}, check=False)
        assert proc.returncode == 0, proc.stderr
        assert values(proc.stdout)["nll_nats"] == repr(math.log(2 * math.pi))
