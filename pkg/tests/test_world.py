import numpy as np
import pytest

from strumpl import world as W


def small_config(**kw):
    base = dict(n_gedi=24, n_plot=6, seed=11)
    base.update(kw)
    return W.WorldConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return W.generate_world(small_config())


class TestGeneration:
    def test_fixed_seed_is_bit_identical(self):
        a = W.generate_world(small_config())
        b = W.generate_world(small_config())
        for split in a.splits:
            for pa, pb in zip(a.splits[split], b.splits[split]):
                assert pa.source == pb.source
                np.testing.assert_array_equal(pa.covariates, pb.covariates)
                np.testing.assert_array_equal(pa.targets, pb.targets)
                np.testing.assert_array_equal(pa.mask, pb.mask)
                np.testing.assert_array_equal(pa.true_propensity, pb.true_propensity)

    def test_zero_noise_agb_matches_hand_allometry(self):
        zero = {"H": 0.0, "C": 0.0, "SD": 0.0, "WD": 0.0, "AGB": 0.0}
        ds = W.generate_world(small_config(K=4, noise_sd=zero))
        phi = ds.config.true_phi

        def sp(x):
            return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))

        for p in ds.splits["train"][:5]:
            h, c, sd = p.targets[0], p.targets[1], p.targets[2]
            core = phi["d"] * sp(sd) * (
                phi["b"] * np.log(sp(h) + 1e-6) + phi["c"] * np.log(sp(c) + 1e-6)
            )
            expected = np.clip(phi["alpha"] + phi["scale"] * np.exp(core), 0.0, 2000.0)
            np.testing.assert_allclose(p.targets[3], expected, rtol=1e-12)

    def test_source_imbalance_regime(self):
        cfg = W.WorldConfig(n_gedi=2000, n_plot=18, seed=0)
        assert cfg.n_gedi / cfg.n_plot == pytest.approx(111.1, abs=0.2)

    def test_agb_within_plausible_range(self, dataset):
        for split in dataset.splits.values():
            for p in split:
                assert p.targets[3].min() >= 0.0
                assert p.targets[3].max() <= 2000.0

    def test_degenerate_config_rejected(self):
        with pytest.raises(W.WorldError):
            W.WorldConfig(n_gedi=0, n_plot=0)
        with pytest.raises(W.WorldError):
            W.WorldConfig(n_gedi=4, n_plot=8)  # inverted regime
        with pytest.raises(W.WorldError):
            W.WorldConfig(true_phi={"alpha": -1.0, "scale": 1, "b": 1, "c": 1, "d": 1, "e": 1})

    def test_power_law_family_switch(self):
        ds = W.generate_world(small_config(generator_family="power_law"))
        assert np.isfinite(ds.splits["train"][0].targets[3]).all()


class TestObservationProcess:
    def test_disjoint_sources(self, dataset):
        k = dataset.config.K
        for split in dataset.splits.values():
            for p in split:
                if p.source == "G":
                    assert p.mask[list(W.plot_rows(k))].sum() == 0
                    assert p.mask[list(W.GEDI_ROWS)].sum() > 0
                else:
                    assert p.mask[list(W.GEDI_ROWS)].sum() == 0

    def test_gedi_footprint_counts(self, dataset):
        lo, hi = dataset.config.gedi_footprints
        for p in dataset.splits["train"]:
            if p.source == "G":
                count = int(p.mask[0].sum())
                assert lo <= count <= hi
                np.testing.assert_array_equal(p.mask[0], p.mask[1])

    def test_propensities_in_open_unit_interval(self, dataset):
        for p in dataset.splits["train"]:
            rows = p.true_propensity[p.true_propensity > 0]
            assert rows.size > 0
            assert rows.min() > 0.0 and rows.max() < 1.0

    def test_zero_steepness_is_mcar_limit(self):
        mnar = W.MnarConfig(steepness=0.0, observable_fraction=0.4)
        ds = W.generate_world(small_config(mnar=mnar))
        for p in ds.splits["train"]:
            if p.source == "P":
                row = p.true_propensity[2]
                np.testing.assert_allclose(row, 0.4 * 0.5)  # flat logistic at 0.5

    def test_mnar_signature_top_quintile_underobserved(self):
        ds = W.generate_world(W.WorldConfig(n_gedi=40, n_plot=24, seed=3))
        patches = [p for s in ds.splits.values() for p in s]
        rates = W.labelling_rate_by_quantile(patches, ds.config.K)
        assert rates[-1] < rates.mean()

    def test_nonignorable_underobserves_high_agb_beyond_middle(self):
        mnar = W.MnarConfig(ignorable=False, kappa=0.05, tau=100.0)
        ds = W.generate_world(W.WorldConfig(n_gedi=40, n_plot=24, seed=5, mnar=mnar))
        patches = [p for s in ds.splits.values() for p in s]
        rates = W.labelling_rate_by_quantile(patches, ds.config.K, n_quantiles=5)
        assert rates[4] < rates[2]

    def test_reapply_with_new_process(self, dataset):
        rng = np.random.default_rng(0)
        redone = W.apply_observation_process(dataset, W.MnarConfig(steepness=0.0), rng)
        for p in redone.splits["train"]:
            if p.source == "P":
                np.testing.assert_allclose(
                    p.true_propensity[2], W.MnarConfig().observable_fraction * 0.5
                )


class TestNormStats:
    def test_constant_shift_moves_mean_not_std(self, dataset):
        cfg = dataset.config
        base = W.compute_norm_stats(dataset.splits["train"], cfg)
        shifted = [
            W.Patch(p.covariates, p.targets + 5.0, p.mask, p.source, p.true_propensity)
            for p in dataset.splits["train"]
        ]
        stats = W.compute_norm_stats(shifted, cfg)
        np.testing.assert_allclose(stats.mean, base.mean + 5.0, rtol=1e-12)
        np.testing.assert_allclose(stats.std, base.std, rtol=1e-12)

    def test_round_trip(self, dataset):
        rng = np.random.default_rng(1)
        y = rng.uniform(1.0, 500.0, size=(dataset.config.K, 4, 4))
        back = dataset.norm.invert(dataset.norm.apply(y))
        assert np.abs(back - y).max() <= 1e-12 * 500

    def test_zscored_labelled_values_standardised(self, dataset):
        stats = dataset.norm
        for row in range(dataset.config.K):
            vals = np.concatenate(
                [p.targets[row][p.mask[row] > 0] for p in dataset.splits["train"]]
            )
            z = (vals - stats.mean[row]) / stats.std[row]
            assert abs(z.mean()) < 1e-9
            assert abs(z.std() - 1.0) < 1e-9

    def test_zero_variance_names_variable(self, dataset):
        broken = [
            W.Patch(p.covariates, np.where([[[True]]] * dataset.config.K, 7.0, p.targets),
                    p.mask, p.source, p.true_propensity)
            for p in dataset.splits["train"]
        ]
        with pytest.raises(W.WorldError, match="H"):
            W.compute_norm_stats(broken, dataset.config)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, dataset, tmp_path):
        W.save_dataset(dataset, tmp_path / "ds")
        loaded = W.load_dataset(tmp_path / "ds")
        assert loaded.config == dataset.config
        for split in dataset.splits:
            assert len(loaded.splits[split]) == len(dataset.splits[split])
            for a, b in zip(dataset.splits[split], loaded.splits[split]):
                assert a.source == b.source
                for attr in ("covariates", "targets", "mask", "true_propensity"):
                    av, bv = getattr(a, attr), getattr(b, attr)
                    assert av.tobytes() == bv.tobytes()
        np.testing.assert_array_equal(loaded.norm.mean, dataset.norm.mean)

    def test_save_twice_identical_bytes(self, dataset, tmp_path):
        d1 = W.save_dataset(dataset, tmp_path / "a")
        d2 = W.save_dataset(dataset, tmp_path / "b")
        assert W.dataset_hash(d1) == W.dataset_hash(d2)

    def test_manifest_variables_track_k(self, tmp_path):
        import json

        ds4 = W.generate_world(small_config(K=4))
        W.save_dataset(ds4, tmp_path / "k4")
        manifest = json.loads((tmp_path / "k4" / "manifest.json").read_text())
        assert manifest["variables"] == ["H", "C", "SD", "AGB"]

        ds5 = W.generate_world(small_config(K=5))
        W.save_dataset(ds5, tmp_path / "k5")
        manifest5 = json.loads((tmp_path / "k5" / "manifest.json").read_text())
        assert manifest5["variables"][-1] == "WD"

    def test_bad_magic_rejected(self, tmp_path):
        target = tmp_path / "ds"
        ds = W.generate_world(small_config())
        W.save_dataset(ds, target)
        victim = sorted(target.glob("patch_*.bin"))[0]
        victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
        with pytest.raises(W.WorldError, match="magic"):
            W.load_dataset(target)
