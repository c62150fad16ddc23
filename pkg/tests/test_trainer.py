import numpy as np
import pytest

from strumpl import losses as L
from strumpl import model as M
from strumpl import trainer as TR
from strumpl import world as W


def dummy_dataset(n_gedi, n_plot):
    """Lightweight patches for sampler arithmetic (no real fields needed)."""
    def patch(source):
        z = np.zeros((1, 1, 1))
        return W.Patch(covariates=np.zeros((1, 1, 1)), targets=z, mask=z.copy(),
                       source=source, true_propensity=z.copy())

    splits = {"train": [patch("G") for _ in range(n_gedi)] + [patch("P") for _ in range(n_plot)]}
    return W.Dataset(config=W.WorldConfig(n_gedi=max(n_gedi, n_plot), n_plot=max(n_plot, 1)),
                     splits=splits, norm=W.NormStats(np.zeros(1), np.ones(1)))


@pytest.fixture(scope="module")
def tiny_world():
    return W.generate_world(W.WorldConfig(n_gedi=12, n_plot=6, patch_size=8, seed=3))


@pytest.fixture(scope="module")
def tiny_model():
    return M.ModelConfig(C_in=8, K=4, D=8, encoder_blocks=1)


def tiny_train_config(**kw):
    base = dict(batch_size=4, peak_lr=1e-3, warmup_steps=5, max_epochs=3,
                val_every_steps=4, patience_checks=20, seed=42)
    base.update(kw)
    return TR.TrainConfig(**base)


class TestBalancedBatches:
    def test_half_and_half_composition(self):
        ds = dummy_dataset(64, 8)
        rng = np.random.default_rng(0)
        for batch in TR.balanced_batches(ds, 32, rng):
            sources = [p.source for p in batch]
            assert sources.count("G") == 16
            assert sources.count("P") == 16

    def test_epoch_length_floor(self):
        ds = dummy_dataset(2000, 18)
        rng = np.random.default_rng(0)
        batches = list(TR.balanced_batches(ds, 32, rng))
        assert len(batches) == 125  # floor(2000/16)
        assert TR.epoch_length(2000, 32) == 125

    def test_each_gedi_patch_exactly_once_per_epoch(self):
        ds = dummy_dataset(48, 6)
        rng = np.random.default_rng(1)
        seen = []
        for batch in TR.balanced_batches(ds, 16, rng):
            seen.extend(id(p) for p in batch if p.source == "G")
        assert len(seen) == 48
        assert len(set(seen)) == 48

    def test_spain_regime_effective_plot_passes(self):
        n_gedi, n_plot, b = 2000, 18, 32
        batches = TR.epoch_length(n_gedi, b)
        passes = batches * (b // 2) / n_plot
        assert abs(passes - n_gedi / n_plot) <= 1.0
        assert abs(passes - 111.1) < 1.0

    def test_empty_source_rejected(self):
        ds = dummy_dataset(8, 0)
        with pytest.raises(TR.TrainError, match="both sources"):
            list(TR.balanced_batches(ds, 4, np.random.default_rng(0)))

    def test_odd_batch_size_rejected(self):
        with pytest.raises(TR.TrainError, match="even"):
            TR.TrainConfig(batch_size=7)


class TestAdamW:
    def params_of(self, value):
        cfg = M.ModelConfig(C_in=2, K=4, D=4, encoder_blocks=1)
        params = M.ModelParams(cfg, {"w": np.asarray(value, dtype=np.float64)})
        return params

    def test_zero_gradient_zero_decay_is_fixed_point(self):
        params = self.params_of([1.0, -2.0])
        state = TR.OptimState.for_params(params)
        TR.adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(params.arrays["w"], [1.0, -2.0])

    def test_first_step_unit_gradient_moves_by_lr(self):
        params = self.params_of(0.0)
        state = TR.OptimState.for_params(params)
        TR.adamw_step(params, {"w": np.asarray(1.0)}, state, lr=0.01, weight_decay=0.0)
        assert float(params.arrays["w"]) == pytest.approx(-0.01, rel=1e-6)

    def test_decay_only(self):
        params = self.params_of(2.0)
        state = TR.OptimState.for_params(params)
        TR.adamw_step(params, {"w": np.asarray(0.0)}, state, lr=0.1, weight_decay=0.5)
        assert float(params.arrays["w"]) == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_nonfinite_gradient_names_block(self):
        params = self.params_of(0.0)
        state = TR.OptimState.for_params(params)
        with pytest.raises(TR.TrainError, match="'w'"):
            TR.adamw_step(params, {"w": np.asarray(np.nan)}, state, 0.1, 0.0)


class TestLrSchedule:
    def test_endpoints(self):
        cfg = TR.TrainConfig(warmup_steps=100, peak_lr=5e-4)
        assert TR.lr_schedule(0, cfg, 1000) == 0.0
        assert TR.lr_schedule(100, cfg, 1000) == pytest.approx(5e-4)
        assert TR.lr_schedule(1000, cfg, 1000) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint_is_half_peak(self):
        cfg = TR.TrainConfig(warmup_steps=100, peak_lr=4e-3)
        assert TR.lr_schedule(550, cfg, 1000) == pytest.approx(2e-3)

    def test_clip_gradients_scales_to_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        _, norm = TR.clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)
        grads2 = {"a": np.array([0.3, 0.4])}
        TR.clip_gradients(grads2, 1.0)
        np.testing.assert_allclose(grads2["a"], [0.3, 0.4])


class TestTrainLoop:
    def test_deterministic_runs(self, tiny_world, tiny_model):
        cfg = tiny_train_config()
        a = TR.train(tiny_world, tiny_model, L.LossConfig(), cfg)
        b = TR.train(tiny_world, tiny_model, L.LossConfig(), cfg)
        assert len(a.history) == len(b.history)
        for ra, rb in zip(a.history, b.history):
            assert ra == rb
        for name in a.best_params.names():
            arr_a = a.best_params.arrays[name]
            arr_b = b.best_params.arrays[name]
            assert arr_a.tobytes() == arr_b.tobytes()

    def test_validation_checks_are_recorded(self, tiny_world, tiny_model):
        run = TR.train(tiny_world, tiny_model, L.LossConfig(), tiny_train_config())
        assert run.checks[0]["step"] == 0
        assert all("val_rmse_AGB" in c for c in run.checks)
        assert all(np.isfinite(c["mean_pi_plot"]) for c in run.checks)

    def test_schedule_lambda_in_history(self, tiny_world, tiny_model):
        run = TR.train(tiny_world, tiny_model, L.LossConfig(), tiny_train_config())
        assert run.history[0]["lambda_phys"] == pytest.approx(0.05)

    def test_nonfinite_loss_aborts_with_diagnostics(self, tiny_world, tiny_model):
        cfg = tiny_train_config(peak_lr=1e9, warmup_steps=1, grad_clip=0.0)
        with pytest.raises(TR.TrainError, match="non-finite"):
            TR.train(tiny_world, tiny_model, L.LossConfig(), cfg)

    def test_k_mismatch_rejected(self, tiny_world):
        bad = M.ModelConfig(C_in=8, K=5, D=8, encoder_blocks=1,
                            physics_variant="allometric")
        with pytest.raises(TR.TrainError, match="K"):
            TR.train(tiny_world, bad, L.LossConfig(), tiny_train_config())

    def test_labelled_validation_mode(self, tiny_world, tiny_model):
        run = TR.train(tiny_world, tiny_model, L.LossConfig(),
                       tiny_train_config(val_pixels="labelled", max_epochs=1))
        assert np.isfinite(run.best_val_rmse)


class TestRunDir:
    def test_artifacts_written_and_deterministic(self, tiny_world, tiny_model, tmp_path):
        run = TR.train(tiny_world, tiny_model, L.LossConfig(), tiny_train_config())
        d1 = TR.write_run_dir(run, tmp_path / "a", dataset_hash="abc")
        d2 = TR.write_run_dir(run, tmp_path / "b", dataset_hash="abc")
        for name in ("manifest.json", "metrics.csv", "best.strm"):
            assert (d1 / name).exists()
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_metrics_csv_has_loss_and_val_columns(self, tiny_world, tiny_model, tmp_path):
        run = TR.train(tiny_world, tiny_model, L.LossConfig(), tiny_train_config())
        out = TR.write_run_dir(run, tmp_path / "c")
        header = (out / "metrics.csv").read_text().splitlines()[0].split(",")
        for col in ("step", "lr", "l_sup", "l_phys", "l_cons", "l_bias", "l_imp",
                    "total", "val_rmse_AGB", "mean_pi_plot"):
            assert col in header
