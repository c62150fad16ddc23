import json
from pathlib import Path

import numpy as np
import pytest

from strumpl import cli
from strumpl import config as C
from strumpl import world as W

TINY_CONFIG = """
[experiment]
name = tiny
seeds = 11

[world]
K = 4
C_in = 8
patch_size = 8
n_gedi = 8
n_plot = 4
seed = 5
mnar.steepness = 2.0
true_phi.alpha = 1.1
noise_sd.H = 0.3

[model]
D = 8
encoder_blocks = 1
physics_variant = allometric_no_wd

[loss]
sup_mode = aipw
lambda_cons = 0.05

[train]
batch_size = 4
peak_lr = 0.001
warmup_steps = 5
max_epochs = 2
val_every_steps = 4
patience_checks = 10

[eval]
n_quantiles = 4
n_bootstrap = 200
"""


@pytest.fixture()
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return path


class TestConfigParsing:
    def test_values_and_nesting(self, tiny_config_path):
        exp = C.parse_experiment_config(tiny_config_path)
        assert exp.name == "tiny"
        assert exp.seeds == [11]
        assert exp.world.n_gedi == 8
        assert exp.world.mnar.steepness == 2.0
        assert exp.world.true_phi["alpha"] == 1.1
        assert exp.world.noise_sd["H"] == 0.3
        assert exp.model.D == 8
        assert exp.loss.lambda_cons == 0.05
        assert exp.train.batch_size == 4
        assert exp.eval.n_quantiles == 4

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[world]\nnot_a_field = 1\n")
        with pytest.raises(C.ConfigError, match="not_a_field"):
            C.parse_experiment_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nbatch_size = many\n")
        with pytest.raises(C.ConfigError, match="integer"):
            C.parse_experiment_config(path)

    def test_validation_runs_after_parse(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[world]\nn_gedi = 2\nn_plot = 6\n")
        with pytest.raises(C.ConfigError, match="n_gedi"):
            C.parse_experiment_config(path)

    def test_apply_patch_and_revalidation(self, tiny_config_path):
        exp = C.parse_experiment_config(tiny_config_path)
        patched = C.apply_patch(exp, {"loss.sup_mode": "ipw", "model.D": "4"})
        assert patched.loss.sup_mode == "ipw"
        assert patched.model.D == 4
        assert exp.loss.sup_mode == "aipw"  # original untouched
        with pytest.raises(C.ConfigError):
            C.apply_patch(exp, {"loss.pi_min": "1.5"})
        with pytest.raises(C.ConfigError):
            C.apply_patch(exp, {"nonsense": "1"})


class TestGrids:
    def test_parse_grid_file(self, tmp_path):
        grid_path = tmp_path / "grid.ini"
        grid_path.write_text(
            "[grid]\nbase = base.ini\n"
            "[variant:naive]\nloss.sup_mode = naive\n"
            "[variant:steep]\nworld.mnar.steepness = 3.0\n"
        )
        grid = C.parse_grid(grid_path)
        assert grid.base_path == "base.ini"
        assert list(grid.variants) == ["naive", "steep"]
        assert grid.variants["naive"] == {"loss.sup_mode": "naive"}

    def test_duplicate_variant_rejected(self, tmp_path):
        grid_path = tmp_path / "grid.ini"
        grid_path.write_text("[variant:a]\nx = 1\n[variant:a ]\ny = 2\n")
        with pytest.raises(C.ConfigError, match="duplicate"):
            C.parse_grid(grid_path)

    def test_builtin_grid_covers_required_rows(self):
        grid = C.builtin_grid()
        names = set(grid.variants)
        assert {"naive", "ipw", "aipw", "no_detach_pi", "no_detach_mu",
                "physics_power_law", "physics_mlp"} <= names
        assert any(n.startswith("no_") or n == "mtl_sup_only" for n in names)


class TestCliEndToEnd:
    def test_generate_train_evaluate_roundtrip(self, tiny_config_path, tmp_path):
        out = tmp_path / "out"
        rc = cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out)])
        assert rc == 0
        ds_dir = out / "tiny" / "dataset"
        assert (ds_dir / "manifest.json").exists()

        rc = cli.main(["train", "--config", str(tiny_config_path), "--out", str(out)])
        assert rc == 0
        run_dir = out / "tiny" / "runs" / "seed_11"
        assert (run_dir / "best.strm").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["status"] == "complete"
        assert "dataset_hash" in manifest
        assert (out / "tiny" / "summary.csv").exists()

        rc = cli.main([
            "evaluate", "--run", str(run_dir), "--dataset", str(ds_dir),
            "--config", str(tiny_config_path), "--stratified", "--calibration",
            "--bootstrap-against", str(run_dir),
        ])
        assert rc == 0
        eval_dir = run_dir / "eval"
        assert (eval_dir / "per_variable.csv").exists()
        strat_rows = (eval_dir / "stratified.csv").read_text().splitlines()
        assert len(strat_rows) == 1 + 4  # header + n_quantiles
        calib_rows = (eval_dir / "calibration.csv").read_text().splitlines()
        assert len(calib_rows) == 1 + 10
        boot = (eval_dir / "bootstrap.csv").read_text().splitlines()[1].split(",")
        delta, ci_lo, ci_hi = float(boot[0]), float(boot[1]), float(boot[2])
        assert delta == 0.0
        assert ci_lo <= 0.0 <= ci_hi

    def test_generate_is_deterministic_on_disk(self, tiny_config_path, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out_a)]) == 0
        assert cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out_b)]) == 0
        ha = W.dataset_hash(out_a / "tiny" / "dataset")
        hb = W.dataset_hash(out_b / "tiny" / "dataset")
        assert ha == hb

    def test_malformed_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[world]\nK = seven\n")
        assert cli.main(["generate", "--config", str(bad)]) == 2

    def test_missing_dataset_exit_3(self, tiny_config_path, tmp_path):
        rc = cli.main(["train", "--config", str(tiny_config_path),
                       "--out", str(tmp_path / "none")])
        assert rc == 3

    def test_k_mismatch_exit_4(self, tiny_config_path, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        assert cli.main(["train", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        other_cfg = tmp_path / "k5.ini"
        other_cfg.write_text(TINY_CONFIG.replace("K = 4", "K = 5").replace(
            "name = tiny", "name = tiny5"))
        assert cli.main(["generate", "--config", str(other_cfg), "--out", str(out)]) == 0
        rc = cli.main([
            "evaluate", "--run", str(out / "tiny" / "runs" / "seed_11"),
            "--dataset", str(out / "tiny5" / "dataset"),
        ])
        assert rc == 4

    def test_wd_mask_absent_for_k4(self, tiny_config_path, tmp_path):
        out = tmp_path / "out"
        cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out)])
        manifest = json.loads((out / "tiny" / "dataset" / "manifest.json").read_text())
        assert "WD" not in manifest["variables"]

    def test_empty_grid_exit_2(self, tiny_config_path, tmp_path):
        grid = tmp_path / "empty.ini"
        grid.write_text("")
        rc = cli.main(["ablate", "--grid", str(grid), "--config", str(tiny_config_path),
                       "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_small_ablation_grid(self, tiny_config_path, tmp_path):
        grid = tmp_path / "grid.ini"
        grid.write_text(
            "[variant:base]\n\n"
            "[variant:naive]\nloss.sup_mode = naive\n"
            "[variant:broken]\nloss.sup_mode = bogus\n"
        )
        out = tmp_path / "out"
        rc = cli.main(["ablate", "--grid", str(grid), "--config", str(tiny_config_path),
                       "--out", str(out)])
        assert rc == 0
        rows = (out / "ablation" / "results.csv").read_text().splitlines()
        assert len(rows) == 4  # header + three variants
        assert any("error" in r for r in rows if r.startswith("broken"))
        ok_rows = [r for r in rows[1:] if ",ok," in r]
        assert len(ok_rows) == 2

    def test_metric_csv_reproducible_across_runs(self, tiny_config_path, tmp_path):
        out_a, out_b = tmp_path / "ra", tmp_path / "rb"
        for out in (out_a, out_b):
            cli.main(["generate", "--config", str(tiny_config_path), "--out", str(out)])
            cli.main(["train", "--config", str(tiny_config_path), "--out", str(out)])
        csv_a = (out_a / "tiny" / "runs" / "seed_11" / "metrics.csv").read_bytes()
        csv_b = (out_b / "tiny" / "runs" / "seed_11" / "metrics.csv").read_bytes()
        assert csv_a == csv_b
        ck_a = (out_a / "tiny" / "runs" / "seed_11" / "best.strm").read_bytes()
        ck_b = (out_b / "tiny" / "runs" / "seed_11" / "best.strm").read_bytes()
        assert ck_a == ck_b
