import json

import numpy as np
import pytest

from proxflow import cli, linalg
from proxflow.flow import load_checkpoint


def run(argv, capsys=None):
    return cli.run([str(a) for a in argv])


def small_config(tmp_path, **overrides):
    cfg = dict(n=2, K=2, p=2, h=4, gamma=1.2, batch_b=16, epochs_e=1,
               steps_s=4, lr_tau=1e-3, seed=11)
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestUsageErrors:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["sample", "--ckpt", tmp_path / "nope.json",
                    "-n", 3, "--out", tmp_path / "s.csv"]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "usage"

    def test_config_with_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n": 2, "bogus": 1}))
        assert run(["train", "--config", path, "--problem", "two_moons",
                    "--out", tmp_path / "run"]) == 1

    def test_circle_oracle_with_y_is_usage_error(self, tmp_path):
        assert run(["oracle", "--problem", "circle", "--y", "0.5",
                    "-n", 10, "--out", tmp_path / "o.csv"]) == 1


class TestTrainAndArtifacts:
    def test_train_writes_run_directory(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--problem", "two_moons",
                    "--out", out]) == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "history.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 11
        assert manifest["config"]["n"] == 2
        history = (out / "history.csv").read_text().splitlines()
        assert history[0] == "step,loss,penalty"
        assert len(history) == 1 + 4

    def test_train_determinism_byte_for_byte(self, tmp_path):
        cfg = small_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(["train", "--config", cfg, "--problem", "two_moons",
                    "--out", out1]) == 0
        assert run(["train", "--config", cfg, "--problem", "two_moons",
                    "--out", out2]) == 0
        assert ((out1 / "checkpoint.json").read_bytes()
                == (out2 / "checkpoint.json").read_bytes())

    def test_sample_density_invert_cycle(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--problem", "two_moons",
                    "--out", out]) == 0
        ckpt = out / "checkpoint.json"
        samples = tmp_path / "samples.csv"
        assert run(["sample", "--ckpt", ckpt, "-n", 20, "--seed", 3,
                    "--out", samples]) == 0
        header, rows = cli.read_csv(samples)
        assert header == ["x0", "x1"] and rows.shape == (20, 2)

        dens = tmp_path / "dens.csv"
        assert run(["density", "--ckpt", ckpt, "--in", samples,
                    "--out", dens]) == 0
        _, logps = cli.read_csv(dens)
        assert np.all(np.isfinite(logps))

        # invert maps latent rows through T^{-1}; feeding the forward image
        # of x back gives x
        inv = tmp_path / "inv.csv"
        assert run(["invert", "--ckpt", ckpt, "--in", samples,
                    "--out", inv]) == 0
        _, pre = cli.read_csv(inv)
        assert pre.shape == rows.shape


class TestOracleAndEval:
    def test_eval_w2_self_distance_zero(self, tmp_path):
        pts = linalg.make_rng(1).standard_normal((30, 2))
        a = tmp_path / "a.csv"
        cli.write_csv(a, pts, ["x0", "x1"])
        out = tmp_path / "w2.json"
        assert run(["eval", "--metric", "w2", "--a", a, "--b", a,
                    "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["metric"] == "w2"
        assert report["value"] == 0.0

    def test_mixture_oracle_calibration_run(self, tmp_path):
        pairs = tmp_path / "pairs.csv"
        assert run(["oracle", "--problem", "mixture", "--dim", 4,
                    "-n", 1, "--seed", 5, "--out", pairs]) == 0
        header, rows = cli.read_csv(pairs)
        assert header[:4] == ["y0", "y1", "y2", "y3"]
        y = ",".join(repr(float(v)) for v in rows[0, :4])

        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(["oracle", "--problem", "mixture", "--dim", 4, "--y", y,
                    "-n", 200, "--seed", 6, "--out", a]) == 0
        assert run(["oracle", "--problem", "mixture", "--dim", 4, "--y", y,
                    "-n", 200, "--seed", 7, "--out", b]) == 0
        out = tmp_path / "w2.json"
        assert run(["eval", "--metric", "w2", "--a", a, "--b", b,
                    "--out", out]) == 0
        val = json.loads(out.read_text())["value"]
        assert np.isfinite(val) and val > 0.0

    def test_eval_kl_with_grid(self, tmp_path):
        rng = linalg.make_rng(2)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.write_csv(a, rng.standard_normal((500, 2)), ["x0", "x1"])
        cli.write_csv(b, rng.standard_normal((500, 2)), ["x0", "x1"])
        assert run(["eval", "--metric", "kl", "--a", a, "--b", b,
                    "--grid", "8,8"]) == 0

    def test_circle_oracle_pairs(self, tmp_path):
        out = tmp_path / "circle.csv"
        assert run(["oracle", "--problem", "circle", "-n", 50,
                    "--out", out]) == 0
        header, rows = cli.read_csv(out)
        assert header == ["y0", "x0", "x1"]
        assert rows.shape == (50, 3)


class TestGradcheck:
    def test_small_model_passes(self, tmp_path):
        cfg = small_config(tmp_path, K=1, steps_s=1)
        assert run(["gradcheck", "--config", cfg, "--coords", 20]) == 0


class TestConditionalCli:
    def test_conditional_train_and_sample(self, tmp_path):
        cfg = small_config(tmp_path, d=1, batch_b=32)
        out = tmp_path / "run"
        assert run(["train", "--config", cfg, "--problem", "circle",
                    "--out", out]) == 0
        ckpt = out / "checkpoint.json"
        assert load_checkpoint(ckpt)["cond_dim"] == 1

        samples = tmp_path / "cond_samples.csv"
        assert run(["sample", "--ckpt", ckpt, "-n", 10, "--cond", "0.7",
                    "--out", samples]) == 0
        _, rows = cli.read_csv(samples)
        assert rows.shape == (10, 2)

        # conditional sample without --cond is a usage error
        assert run(["sample", "--ckpt", ckpt, "-n", 5,
                    "--out", tmp_path / "x.csv"]) == 1
