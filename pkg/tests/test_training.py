"""Dataset preparation, patch store, adversarial losses, training loops."""

import logging
import math

import numpy as np
import pytest

from hdrsr.errors import (
    DataError,
    FormatError,
    ParameterError,
    RangeError,
    TrainingError,
)
from hdrsr.image import luminance, write_hdr_image, write_ldr_image
from hdrsr.refnet import RefNetConfig, load_weights
from hdrsr.retinex import bound_reflectance, decompose
from hdrsr.training import (
    HR_PATCH,
    LR_PATCH,
    PatchStore,
    TrainConfig,
    apply_dihedral,
    invert_dihedral,
    load_patch_store,
    prepare_dataset,
    ragan_discriminator_loss,
    ragan_generator_loss,
    train,
    write_patch_store,
)
from hdrsr.training import _grid_positions, _index_stream


class TestDihedral:
    def test_identity_augmentation(self):
        rng = np.random.default_rng(70)
        patch = rng.standard_normal((8, 8))
        np.testing.assert_array_equal(apply_dihedral(patch, 0), patch)

    def test_eight_distinct_elements(self):
        patch = np.arange(16.0).reshape(4, 4)
        seen = {apply_dihedral(patch, a).tobytes() for a in range(8)}
        assert len(seen) == 8

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(71)
        patch = rng.standard_normal((6, 6))
        for aug in range(8):
            back = apply_dihedral(apply_dihedral(patch, aug), invert_dihedral(aug))
            np.testing.assert_array_equal(back, patch)

    def test_rotation_subgroup(self):
        patch = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(apply_dihedral(patch, 1), np.rot90(patch))

    def test_bad_id_rejected(self):
        with pytest.raises(ParameterError):
            apply_dihedral(np.zeros((2, 2)), 8)


def _random_store(rng, n=4):
    lr = rng.uniform(-0.9, 0.9, size=(n, LR_PATCH, LR_PATCH)).astype(np.float32)
    hr = rng.uniform(-0.9, 0.9, size=(n, HR_PATCH, HR_PATCH)).astype(np.float32)
    return PatchStore(
        lr,
        hr,
        rng.integers(0, 5, n).astype(np.uint32),
        (np.arange(n) % 8).astype(np.uint32),
    )


class TestPatchStoreFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        store = _random_store(np.random.default_rng(72))
        path = tmp_path / "p.hsrp"
        write_patch_store(path, store)
        back = load_patch_store(path)
        np.testing.assert_array_equal(back.lr, store.lr)
        np.testing.assert_array_equal(back.hr, store.hr)
        np.testing.assert_array_equal(back.source_ids, store.source_ids)
        np.testing.assert_array_equal(back.aug_ids, store.aug_ids)
        # second write reproduces the file byte for byte
        path2 = tmp_path / "p2.hsrp"
        write_patch_store(path2, back)
        assert path.read_bytes() == path2.read_bytes()

    def test_saturated_sample_rejected(self, tmp_path):
        store = _random_store(np.random.default_rng(73))
        store.lr[0, 0, 0] = 1.0
        with pytest.raises(RangeError):
            write_patch_store(tmp_path / "bad.hsrp", store)

    def test_truncated_file(self, tmp_path):
        store = _random_store(np.random.default_rng(74))
        path = tmp_path / "p.hsrp"
        write_patch_store(path, store)
        raw = path.read_bytes()
        (tmp_path / "cut.hsrp").write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            load_patch_store(tmp_path / "cut.hsrp")

    def test_trailing_garbage(self, tmp_path):
        store = _random_store(np.random.default_rng(75))
        path = tmp_path / "p.hsrp"
        write_patch_store(path, store)
        (tmp_path / "fat.hsrp").write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_patch_store(tmp_path / "fat.hsrp")

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.hsrp"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FormatError):
            load_patch_store(path)

    def test_batch_adds_channel_axis(self):
        store = _random_store(np.random.default_rng(76))
        x, y = store.batch(np.array([0, 2]))
        assert x.shape == (2, LR_PATCH, LR_PATCH, 1)
        assert y.shape == (2, HR_PATCH, HR_PATCH, 1)


class TestGridArithmetic:
    def test_minimum_size_single_position(self):
        assert _grid_positions(48, 48, 24) == [0]

    def test_two_by_two(self):
        assert _grid_positions(72, 48, 24) == [0, 24]

    def test_three_positions(self):
        assert _grid_positions(96, 48, 24) == [0, 24, 48]

    def test_undersized_is_empty(self):
        assert _grid_positions(47, 48, 24) == []


def _write_gray_png(path, plane):
    write_ldr_image(np.asarray(plane)[:, :, None], path)


def _ramp_image(size, seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0.1, 0.9, size)
    base = np.outer(t, t[::-1]) + 0.05 * rng.standard_normal((size, size))
    return np.clip(base, 0.0, 1.0)


class TestPrepareDataset:
    def test_pair_counts_and_provenance(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(96, 80)
        _write_gray_png(ldr / "a.png", plane)
        _write_gray_png(hdr / "a.png", plane)
        out = tmp_path / "set.hsrp"
        # 96x96 halves to 48x48: one grid position, eight augmentations
        assert prepare_dataset(ldr, hdr, out) == 8
        store = load_patch_store(out)
        assert len(store) == 8
        np.testing.assert_array_equal(store.aug_ids, np.arange(8))
        np.testing.assert_array_equal(store.source_ids, 0)
        assert np.all(np.abs(store.lr) < 1.0)
        assert np.all(np.abs(store.hr) < 1.0)

    def test_grid_scales_with_image(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(144, 81)
        _write_gray_png(ldr / "a.png", plane)
        _write_gray_png(hdr / "a.png", plane)
        # 144 halves to 72: positions {0, 24} per axis -> 4 crops x 8 augs
        assert prepare_dataset(ldr, hdr, tmp_path / "set.hsrp") == 32

    def test_hr_side_matches_direct_decomposition(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(96, 82)
        _write_gray_png(ldr / "a.png", plane)
        _write_gray_png(hdr / "a.png", plane)
        out = tmp_path / "set.hsrp"
        prepare_dataset(ldr, hdr, out)
        store = load_patch_store(out)
        # reconstruct the expected fine-grid patch from the written file
        quantized = np.floor(plane * 255.0 + 0.5) / 255.0
        y_lin = luminance(quantized[:, :, None]) ** 2.2
        expect = bound_reflectance(decompose(y_lin).reflectance)
        expect = np.clip(expect, -(1.0 - 1e-6), 1.0 - 1e-6).astype(np.float32)
        np.testing.assert_allclose(store.hr[0], expect, atol=1e-6)

    def test_footprint_alignment(self, tmp_path):
        # each coarse patch must pair with the 2x-scaled crop of the same field
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(144, 83)
        _write_gray_png(ldr / "a.png", plane)
        _write_gray_png(hdr / "a.png", plane)
        out = tmp_path / "set.hsrp"
        prepare_dataset(ldr, hdr, out)
        store = load_patch_store(out)
        quantized = np.floor(plane * 255.0 + 0.5) / 255.0
        y_lin = luminance(quantized[:, :, None]) ** 2.2
        r_hr = bound_reflectance(decompose(y_lin).reflectance)
        r_hr = np.clip(r_hr, -(1.0 - 1e-6), 1.0 - 1e-6).astype(np.float32)
        k = 0
        for top in (0, 24):
            for left in (0, 24):
                crop = r_hr[2 * top : 2 * top + 96, 2 * left : 2 * left + 96]
                np.testing.assert_allclose(store.hr[k], crop, atol=1e-6)
                k += 8  # skip the augmented variants of this crop

    def test_unpaired_files_warn_and_skip(self, tmp_path, caplog):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(96, 84)
        _write_gray_png(ldr / "a.png", plane)
        _write_gray_png(hdr / "a.png", plane)
        _write_gray_png(ldr / "orphan.png", plane)
        with caplog.at_level(logging.WARNING, logger="hdrsr.training"):
            count = prepare_dataset(ldr, hdr, tmp_path / "set.hsrp")
        assert count == 8
        assert any("orphan" in r.message for r in caplog.records)

    def test_size_mismatch_raises(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        _write_gray_png(ldr / "a.png", _ramp_image(96, 85))
        _write_gray_png(hdr / "a.png", _ramp_image(144, 85))
        with pytest.raises(DataError):
            prepare_dataset(ldr, hdr, tmp_path / "set.hsrp")

    def test_no_pairs_raises(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        _write_gray_png(ldr / "a.png", _ramp_image(96, 86))
        with pytest.raises(DataError):
            prepare_dataset(ldr, hdr, tmp_path / "set.hsrp")

    def test_all_undersized_raises(self, tmp_path):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        _write_gray_png(ldr / "a.png", _ramp_image(64, 87))
        _write_gray_png(hdr / "a.png", _ramp_image(64, 87))
        with pytest.raises(DataError):
            prepare_dataset(ldr, hdr, tmp_path / "set.hsrp")

    def test_linear_hdr_input_is_tonemapped(self, tmp_path, caplog):
        ldr = tmp_path / "ldr"
        hdr = tmp_path / "hdr"
        ldr.mkdir()
        hdr.mkdir()
        plane = _ramp_image(96, 88)
        _write_gray_png(ldr / "a.png", plane)
        linear = np.dstack([plane, plane, plane]) * 4.0 + 0.01
        write_hdr_image(linear, hdr / "a.hdr")
        with caplog.at_level(logging.WARNING, logger="hdrsr.training"):
            count = prepare_dataset(ldr, hdr, tmp_path / "set.hsrp")
        assert count == 8
        assert any("tonemap" in r.message for r in caplog.records)


class TestRaganLosses:
    def test_equal_logits_hit_double_log_two(self):
        for n in (1, 4, 33):
            logits = np.full(n, 0.73)
            loss_g, _, _ = ragan_generator_loss(logits, logits)
            loss_d, _, _ = ragan_discriminator_loss(logits, logits)
            assert abs(loss_g - 2.0 * math.log(2.0)) <= 1e-12
            assert abs(loss_d - 2.0 * math.log(2.0)) <= 1e-12

    def test_saturation_limit(self):
        real = np.full(8, 20.0)
        fake = np.full(8, -20.0)
        loss, _, _ = ragan_generator_loss(real, fake)
        assert loss <= 1e-12

    def test_matches_naive_float64_formula(self):
        rng = np.random.default_rng(90)
        for _ in range(50):
            a = rng.uniform(-8, 8, size=9)
            b = rng.uniform(-8, 8, size=9)
            sa = 1.0 / (1.0 + np.exp(-(a - b.mean())))
            sb = 1.0 / (1.0 + np.exp(-(b - a.mean())))
            naive = float(-np.mean(np.log(sa)) - np.mean(np.log1p(-sb)))
            loss, _, _ = ragan_generator_loss(a, b)
            assert abs(loss - naive) <= 1e-9

    def test_gradients_match_closed_form(self):
        # d/da_i: direct term (sigma(z_a_i) - 1)/Na minus the cross term that
        # enters through mean(a) in z_b; mirrored for b
        rng = np.random.default_rng(91)
        a = rng.uniform(-3, 3, size=7)
        b = rng.uniform(-3, 3, size=5)
        _, ga, gb = ragan_generator_loss(a, b)
        sa = 1.0 / (1.0 + np.exp(-(a - b.mean())))
        sb = 1.0 / (1.0 + np.exp(-(b - a.mean())))
        expect_a = ((sa - 1.0) - np.mean(sb)) / a.size
        expect_b = (sb + np.mean(1.0 - sa)) / b.size
        np.testing.assert_allclose(ga, expect_a, atol=1e-12)
        np.testing.assert_allclose(gb, expect_b, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(92)
        a = rng.uniform(-5, 5, size=12)
        b = rng.uniform(-5, 5, size=12)
        base, _, _ = ragan_generator_loss(a, b)
        for c in (-40.0, 3.25, 1e3):
            shifted, _, _ = ragan_generator_loss(a + c, b + c)
            assert abs(shifted - base) <= 1e-9

    def test_role_swap_identity(self):
        rng = np.random.default_rng(93)
        a = rng.uniform(-2, 2, size=6)
        b = rng.uniform(-2, 2, size=6)
        loss_g, _, _ = ragan_generator_loss(a, b)
        loss_d, _, _ = ragan_discriminator_loss(b, a)
        assert loss_g == loss_d

    def test_empty_batch_rejected(self):
        with pytest.raises(ParameterError):
            ragan_generator_loss(np.zeros(0), np.zeros(3))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig(total_steps=10)
        assert cfg.batch_size == 32
        assert cfg.lr_initial == 2e-4
        assert cfg.lr_after_halving == 1e-4
        assert cfg.mu == 1e-3
        assert cfg.halving_point == 0.5

    def test_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=0)
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, batch_size=0)
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, lr_initial=0.0)
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, mu=-0.1)
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, mode="fancy")
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, halving_point=1.5)
        with pytest.raises(ParameterError):
            TrainConfig(total_steps=1, halving_point=0.0)


def _smoke_config(steps, mode="basic", **kw):
    kw.setdefault("batch_size", 1)
    kw.setdefault("seed", 0)
    kw.setdefault(
        "net", RefNetConfig(base_channels=4, unet_depth=2, param_budget=None)
    )
    kw.setdefault("disc_base_channels", 4)
    return TrainConfig(total_steps=steps, mode=mode, **kw)


class TestTrainLoop:
    def test_learning_rate_schedule(self, single_pair_store, tmp_path):
        report = train(
            _smoke_config(10, halving_point=0.5),
            single_pair_store,
            tmp_path / "w.hsrw",
        )
        assert report.lr == [2e-4] * 5 + [1e-4] * 5

    def test_halving_point_extremes(self, single_pair_store, tmp_path):
        # floor(0.01 * 4) = 0 steps at the initial rate; 1.0 never halves
        report = train(
            _smoke_config(4, halving_point=0.01), single_pair_store, tmp_path / "a.hsrw"
        )
        assert report.lr == [1e-4] * 4
        report = train(
            _smoke_config(4, halving_point=1.0), single_pair_store, tmp_path / "b.hsrw"
        )
        assert report.lr == [2e-4] * 4

    def test_deterministic_runs(self, single_pair_store, tmp_path):
        r1 = train(_smoke_config(6), single_pair_store, tmp_path / "w1.hsrw")
        r2 = train(_smoke_config(6), single_pair_store, tmp_path / "w2.hsrw")
        assert r1.loss_recon == r2.loss_recon
        assert (tmp_path / "w1.hsrw").read_bytes() == (tmp_path / "w2.hsrw").read_bytes()

    def test_seed_changes_trajectory(self, patch_store_64, tmp_path):
        cfg_a = _smoke_config(4, batch_size=4, seed=0)
        cfg_b = _smoke_config(4, batch_size=4, seed=1)
        r1 = train(cfg_a, patch_store_64, tmp_path / "w1.hsrw")
        r2 = train(cfg_b, patch_store_64, tmp_path / "w2.hsrw")
        assert r1.loss_recon != r2.loss_recon

    def test_loss_decreases_quickly_on_one_pair(self, single_pair_store, tmp_path):
        report = train(_smoke_config(40), single_pair_store, tmp_path / "w.hsrw")
        assert report.loss_recon[-1] < report.loss_recon[0]

    def test_weights_file_written_and_loadable(self, single_pair_store, tmp_path):
        out = tmp_path / "w.hsrw"
        train(_smoke_config(3), single_pair_store, out)
        weights = load_weights(out)
        assert "stem/w" in weights

    def test_checkpoints_written(self, single_pair_store, tmp_path):
        out = tmp_path / "w.hsrw"
        train(_smoke_config(7, checkpoint_interval=3), single_pair_store, out)
        assert (tmp_path / "w.hsrw.step3").exists()
        assert (tmp_path / "w.hsrw.step6").exists()
        assert not (tmp_path / "w.hsrw.step7").exists()

    def test_empty_store_rejected(self, tmp_path):
        empty = PatchStore(
            np.zeros((0, LR_PATCH, LR_PATCH), np.float32),
            np.zeros((0, HR_PATCH, HR_PATCH), np.float32),
            np.zeros(0, np.uint32),
            np.zeros(0, np.uint32),
        )
        with pytest.raises(DataError):
            train(_smoke_config(1), empty, tmp_path / "w.hsrw")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_checkpoint_hint(self, single_pair_store, tmp_path):
        # an absurd rate overflows float32 activations within a few steps
        cfg = _smoke_config(
            50, lr_initial=1e12, lr_after_halving=1e12, checkpoint_interval=1
        )
        with pytest.raises(TrainingError, match="checkpoint"):
            train(cfg, single_pair_store, tmp_path / "w.hsrw")

    def test_report_csv_format(self, single_pair_store, tmp_path):
        report = train(_smoke_config(4), single_pair_store, tmp_path / "w.hsrw")
        out = tmp_path / "report.csv"
        report.write(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "step,loss_recon,loss_G,loss_D,lr"
        assert len(lines) == 5
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == report.loss_recon[0]

    def test_mu_zero_complex_matches_basic(self, single_pair_store, tmp_path):
        basic = train(
            _smoke_config(12, mode="basic"), single_pair_store, tmp_path / "b.hsrw"
        )
        complex_run = train(
            _smoke_config(12, mode="complex", mu=0.0),
            single_pair_store,
            tmp_path / "c.hsrw",
        )
        assert basic.loss_recon == complex_run.loss_recon
        assert (tmp_path / "b.hsrw").read_bytes() == (tmp_path / "c.hsrw").read_bytes()

    def test_complex_mode_reports_both_losses(self, single_pair_store, tmp_path):
        report = train(
            _smoke_config(6, mode="complex", mu=1e-3),
            single_pair_store,
            tmp_path / "w.hsrw",
        )
        assert all(math.isfinite(v) for v in report.loss_d)
        assert all(math.isfinite(v) for v in report.loss_g)
        assert all(v > 0 for v in report.loss_d)
        assert all(v > 0 for v in report.loss_g)

    def test_basic_mode_leaves_gan_losses_zero(self, single_pair_store, tmp_path):
        report = train(_smoke_config(3), single_pair_store, tmp_path / "w.hsrw")
        assert report.loss_g == [0.0] * 3
        assert report.loss_d == [0.0] * 3


class TestIndexStream:
    def test_epoch_partitions_indices(self):
        stream = _index_stream(np.random.default_rng(0), 8, 4)
        epoch = np.concatenate([next(stream), next(stream)])
        assert sorted(epoch.tolist()) == list(range(8))

    def test_deterministic_for_seed(self):
        a = _index_stream(np.random.default_rng(3), 10, 3)
        b = _index_stream(np.random.default_rng(3), 10, 3)
        for _ in range(7):
            np.testing.assert_array_equal(next(a), next(b))
