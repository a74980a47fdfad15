import os

import numpy as np
import pytest

from ccan.cli import main, parse_config
from ccan.errors import ConfigError, UsageError


class TestParseConfig:
    def test_defaults_match_reference_table(self, tmp_path):
        empty = tmp_path / "empty.cfg"
        empty.write_text("# nothing here\n")
        cfg = parse_config(str(empty), [])
        assert cfg["model.J"] == 6
        assert cfg["model.M"] == 512
        assert cfg["model.C"] == 2
        assert cfg["model.D_l"] == 512
        assert cfg["model.D_f"] == 2048
        assert cfg["model.p_do"] == 0.9
        assert cfg["model.f_max"] == 10.0
        assert cfg["model.I"] == 6
        assert cfg["model.S"] == 2
        assert cfg["train.lr_max"] == 5e-6
        assert cfg["train.batch_size"] == 30
        assert cfg["train.epochs"] == 100
        assert cfg["train.fractions"] == (0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00)

    def test_flag_overrides_file(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("model.J = 4\nmodel.M = 64\n")
        cfg = parse_config(str(f), [("model.J", "2")])
        assert cfg["model.J"] == 2
        assert cfg["model.M"] == 64

    def test_type_error_cites_key(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("model.M = abc\n")
        with pytest.raises(ConfigError, match="model.M"):
            parse_config(str(f), [])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="model.Q"):
            parse_config(None, [("model.Q", "1")])

    def test_env_seed_default(self, monkeypatch):
        monkeypatch.setenv("CCAN_SEED", "123")
        assert parse_config(None, [])["seed"] == 123
        assert parse_config(None, [("seed", "9")])["seed"] == 9

    def test_echo_round_trips(self, tmp_path):
        cfg = parse_config(None, [("model.J", "3"), ("train.lr_max", "0.001"),
                                  ("sweep.models", "ccan,mean-pool")])
        echo = tmp_path / "echo.cfg"
        cfg.echo(str(echo))
        again = parse_config(str(echo), [])
        assert again.values == cfg.values

    def test_model_config_builder(self):
        cfg = parse_config(None, [("model.J", "2"), ("model.M", "8"), ("model.D_l", "16"),
                                  ("model.D_f", "12"), ("model.I", "2")])
        mc = cfg.model_config()
        assert mc.n_stages == 2 and mc.n_latents == 8 and mc.d_encoded == 12 + 8


class TestArgv:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "commands:" in capsys.readouterr().err

    def test_no_args(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_value(self, capsys):
        assert main(["train", "--model.J"]) == 1

    def test_missing_required_path(self, capsys):
        assert main(["explain"]) == 1
        assert "paths.checkpoint" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """synth -> split -> train once; shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    plan = str(root / "plan.csv")
    run_dir = str(root / "run")
    model_flags = [
        "--model.J", "2", "--model.M", "8", "--model.D_l", "16", "--model.D_f", "24",
        "--model.S", "1", "--model.I", "2", "--model.p_do", "0.3",
    ]
    assert main(["synth", "--paths.out", data, "--data.n_bags", "24", "--model.D_f", "24",
                 "--data.n_min", "8", "--data.n_max", "16", "--data.grid_rows", "6",
                 "--data.grid_cols", "6", "--data.witness_min", "1", "--data.witness_max", "3",
                 "--seed", "5"]) == 0
    assert main(["split", "--paths.data", data, "--paths.out", plan, "--data.k", "3",
                 "--seed", "5"]) == 0
    assert main(["train", "--paths.data", data, "--paths.plan", plan, "--fold", "0",
                 "--paths.run_dir", run_dir, *model_flags,
                 "--train.epochs", "2", "--train.batch_size", "6", "--train.lr_max", "1e-3",
                 "--seed", "5"]) == 0
    return {"data": data, "plan": plan, "run_dir": run_dir, "model_flags": model_flags}


class TestCommands:
    def test_train_outputs_exist(self, tiny_run):
        assert os.path.exists(os.path.join(tiny_run["run_dir"], "best.ckpt"))
        assert os.path.exists(os.path.join(tiny_run["run_dir"], "history.csv"))
        assert os.path.exists(os.path.join(tiny_run["run_dir"], "config.txt"))

    def test_eval(self, tiny_run, capsys):
        rc = main(["eval", "--paths.checkpoint", os.path.join(tiny_run["run_dir"], "best.ckpt"),
                   "--paths.data", tiny_run["data"], "--paths.plan", tiny_run["plan"],
                   "--fold", "0", "--subset", "val"])
        assert rc == 0
        assert "val auc:" in capsys.readouterr().out

    def test_explain(self, tiny_run, tmp_path, capsys):
        bag_path = os.path.join(tiny_run["data"], "bag0000.ccfb")
        out = str(tmp_path / "heat")
        rc = main(["explain", "--paths.checkpoint", os.path.join(tiny_run["run_dir"], "best.ckpt"),
                   "--paths.bag", bag_path, "--paths.out", out, "--top_k", "3"])
        assert rc == 0
        assert os.path.exists(out + ".csv") and os.path.exists(out + ".pgm")
        assert "highest-3" in capsys.readouterr().out

    def test_embed(self, tiny_run, tmp_path):
        out = str(tmp_path / "emb.csv")
        rc = main(["embed", "--paths.checkpoint", os.path.join(tiny_run["run_dir"], "best.ckpt"),
                   "--paths.data", tiny_run["data"], "--paths.out", out])
        assert rc == 0
        lines = open(out).read().strip().splitlines()
        assert len(lines) == 1 + 24 * 2  # header + bags * stages

    def test_sweep(self, tiny_run, tmp_path, capsys):
        run_dir = str(tmp_path / "sweep_run")
        rc = main(["sweep", "--paths.data", tiny_run["data"], "--paths.plan", tiny_run["plan"],
                   "--paths.run_dir", run_dir, *tiny_run["model_flags"],
                   "--train.epochs", "1", "--train.batch_size", "8", "--train.lr_max", "1e-3",
                   "--train.fractions", "1.0", "--sweep.models", "mean-pool", "--seed", "5"])
        assert rc == 0
        lines = open(os.path.join(run_dir, "sweep.csv")).read().strip().splitlines()
        assert lines[0] == "fold,fraction,model,best_epoch,val_auc,test_auc"
        assert len(lines) == 1 + 3  # one model x one fraction x three folds

    def test_bench(self, tmp_path, capsys):
        out = str(tmp_path / "bench.csv")
        rc = main(["bench", "--model.J", "2", "--model.M", "8", "--model.D_l", "16",
                   "--model.D_f", "24", "--model.S", "1", "--model.I", "2", "--model.p_do", "0",
                   "--bench.ns", "20,40", "--bench.repeats", "5", "--paths.out", out])
        assert rc == 0
        assert os.path.exists(out)
        assert "baseline attention MACs" in capsys.readouterr().out

    def test_preprocess(self, tmp_path, capsys):
        from ccan.netpbm import write_ppm

        rng = np.random.default_rng(0)
        blocks = rng.integers(30, 220, size=(65, 65, 3))
        pixels = np.repeat(np.repeat(blocks, 8, axis=0), 8, axis=1)[:512, :512].astype(np.uint8)
        img_path = str(tmp_path / "slide.ppm")
        write_ppm(pixels, img_path)
        meta_path = str(tmp_path / "slide.txt")
        with open(meta_path, "w") as fh:
            fh.write("microns_per_pixel = 1.0\nlabel = 1\nbag_id = s0\npatient_id = p0\n")
        out = str(tmp_path / "slide.ccfb")
        rc = main(["preprocess", "--paths.image", img_path, "--paths.meta", meta_path,
                   "--paths.out", out, "--model.D_f", "32", "--seed", "2"])
        assert rc == 0
        assert os.path.exists(out) and os.path.exists(out + ".qc.csv")

        from ccan.data import read_bag

        bag = read_bag(out)
        assert bag.n_tokens == 4 and bag.d_feature == 32


class TestReproducibility:
    def test_synth_byte_identical(self, tmp_path):
        args = ["--data.n_bags", "6", "--model.D_f", "8", "--data.n_min", "4",
                "--data.n_max", "6", "--data.grid_rows", "4", "--data.grid_cols", "4",
                "--data.witness_min", "1", "--data.witness_max", "2", "--seed", "11"]
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["synth", "--paths.out", a, *args]) == 0
        assert main(["synth", "--paths.out", b, *args]) == 0
        for name in sorted(os.listdir(a)):
            if name.endswith(".ccfb") or name.endswith(".csv"):
                with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                    assert fa.read() == fb.read(), name
