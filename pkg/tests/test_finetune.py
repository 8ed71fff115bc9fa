"""Loss, augmentation, optimizer, and training-loop behavior."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trackseg.core import BinaryMask, InstanceMaskSet, Point, point_cell
from trackseg.errors import (
    ConfigError,
    EmptyRegionError,
    InvalidArgumentError,
    ManifestError,
    NotFoundError,
)
from trackseg.finetune import (
    AdamW,
    LossReport,
    ToyPromptNet,
    TrainConfig,
    TrainSample,
    augment,
    cosine_lr,
    dataset_norm_stats,
    flip_sample,
    load_checkpoint,
    loss,
    loss_gradient,
    make_sample,
    normalize_image,
    read_dataset_manifest,
    samples_from_manifest,
    train,
)
from trackseg.synth import DiskSpec, Scene, SceneSpec

LN2 = 0.6931471805599453


def rect_mask(h, w, r0, r1, c0, c1):
    bits = np.zeros((h, w), dtype=bool)
    bits[r0:r1, c0:c1] = True
    return BinaryMask.from_bits(bits)


class TestLoss:
    def test_half_probability_hand_value(self):
        pred = np.full(4, 0.5)
        gt = np.array([True, True, False, False])
        report = loss(pred, gt)
        assert report.bce == pytest.approx(LN2, abs=1e-12)
        assert report.dice == pytest.approx(0.4, abs=1e-12)
        assert report.total == pytest.approx(1.0931471805599453, abs=1e-12)
        assert report.total == report.bce + report.dice

    def test_perfect_prediction_near_zero(self):
        gt = np.array([[True, False], [False, True]])
        report = loss(gt.astype(float), gt)
        assert report.bce < 1e-6
        assert abs(report.dice) < 1e-6
        assert report.total < 2e-6

    def test_empty_prediction_empty_gt(self):
        report = loss(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
        assert report.dice == 0.0
        assert report.bce < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            loss(np.zeros((2, 2)), np.zeros((3, 3), dtype=bool))

    def test_accepts_binary_mask(self):
        mask = rect_mask(4, 4, 0, 2, 0, 4)
        report = loss(np.full((4, 4), 0.5), mask)
        assert report.bce == pytest.approx(LN2, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        pred=hnp.arrays(
            np.float64,
            (4, 5),
            elements=st.floats(0.0, 1.0, allow_nan=False),
        ),
        gt=hnp.arrays(np.bool_, (4, 5)),
    )
    def test_total_nonnegative_dice_bounded(self, pred, gt):
        report = loss(pred, gt)
        assert report.total >= 0.0
        assert 0.0 <= report.dice <= 1.0

    def test_flip_invariance(self):
        rng = np.random.default_rng(11)
        pred = rng.random((6, 7))
        gt = rng.random((6, 7)) > 0.6
        a = loss(pred, gt)
        b = loss(np.flipud(pred), np.flipud(gt))
        c = loss(np.fliplr(pred), np.fliplr(gt))
        for other in (b, c):
            assert math.isclose(a.total, other.total, rel_tol=1e-12)


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(0.0, 1.5, (4, 4))
        gt = rng.random((4, 4)) > 0.5

        def total(z):
            return loss(1.0 / (1.0 + np.exp(-z)), gt).total

        prob = 1.0 / (1.0 + np.exp(-logits))
        analytic = loss_gradient(prob, gt) * prob * (1.0 - prob)
        h = 1e-6
        for i in range(4):
            for j in range(4):
                bumped = logits.copy()
                bumped[i, j] += h
                plus = total(bumped)
                bumped[i, j] -= 2 * h
                minus = total(bumped)
                numeric = (plus - minus) / (2 * h)
                assert abs(analytic[i, j] - numeric) <= 1e-4 * max(
                    abs(numeric), 1e-8
                )

    def test_bce_term_suppressed_where_clamped(self):
        pred = np.array([0.0, 0.5, 1.0])
        gt = np.array([True, False, False])
        grad = loss_gradient(pred, gt)
        assert np.all(np.isfinite(grad))
        # At p=0 the raw BCE derivative would be ~ -1/(3e-7); only the Dice
        # part may remain. D = 1.5+1+1, N = 1: d_dice[0] = -(2*D - N)/D^2.
        denom = 3.5
        assert grad[0] == pytest.approx(-(2 * denom - 1.0) / denom**2)
        assert grad[1] != 0.0


class TestNormalization:
    def test_constant_image_maps_to_zero(self):
        out = normalize_image(np.full((4, 4, 3), 77, dtype=np.uint8))
        assert np.all(out == 0.0)

    def test_per_image_standardization(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        out = normalize_image(img)
        assert np.allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-12)
        assert np.allclose(out.std(axis=(0, 1)), 1.0, atol=1e-12)

    def test_dataset_stats_center_the_pool(self):
        rng = np.random.default_rng(4)
        images = [rng.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(3)]
        stats = dataset_norm_stats(images)
        pooled = np.concatenate(
            [normalize_image(im, stats).reshape(-1, 3) for im in images]
        )
        assert np.allclose(pooled.mean(axis=0), 0.0, atol=1e-12)


class TestMakeSample:
    def three_instance_set(self):
        return InstanceMaskSet(
            frame_index=0,
            masks={
                0: rect_mask(96, 128, 10, 30, 10, 40),
                1: rect_mask(96, 128, 40, 70, 50, 90),
                2: rect_mask(96, 128, 75, 90, 100, 120),
            },
        )

    def test_one_sample_per_instance(self):
        image = np.zeros((96, 128, 3), dtype=np.uint8)
        image[..., 0] = 120
        samples = make_sample(
            image, self.three_instance_set(), "instance", seed=0, input_hw=(64, 64)
        )
        assert len(samples) == 3
        for sample in samples:
            assert sample.image.shape == (64, 64, 3)
            assert sample.gt_mask.bits.shape == (64, 64)
            assert len(sample.prompt_points) == 5
            for p in sample.prompt_points:
                r, c = point_cell(p)
                assert sample.gt_mask.bits[r, c]

    def test_binary_label_merges_instances(self):
        image = np.full((96, 128, 3), 50, dtype=np.uint8)
        samples = make_sample(
            image, self.three_instance_set(), "binary", seed=0, input_hw=(64, 64)
        )
        assert len(samples) == 1

    def test_tiny_region_samples_with_replacement(self):
        bits = np.zeros((16, 16), dtype=bool)
        bits[5, 5] = bits[5, 6] = True
        image = np.full((16, 16, 3), 10, dtype=np.uint8)
        [sample] = make_sample(
            image, BinaryMask.from_bits(bits), "binary", seed=1, input_hw=(16, 16)
        )
        assert len(sample.prompt_points) == 5
        assert {(p.x, p.y) for p in sample.prompt_points} <= {(5.5, 5.5), (6.5, 5.5)}

    def test_vanishing_region_skipped_with_warning(self, caplog):
        pin = np.zeros((96, 128), dtype=bool)
        pin[1, 1] = True
        masks = InstanceMaskSet(
            frame_index=0,
            masks={
                0: rect_mask(96, 128, 20, 70, 30, 110),
                1: BinaryMask.from_bits(pin),
            },
        )
        image = np.full((96, 128, 3), 99, dtype=np.uint8)
        with caplog.at_level("WARNING"):
            samples = make_sample(image, masks, "instance", seed=0, input_hw=(8, 8))
        assert len(samples) == 1
        assert any("skipped" in rec.message for rec in caplog.records)

    def test_all_empty_raises(self):
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        empty = BinaryMask.from_bits(np.zeros((16, 16), dtype=bool))
        with pytest.raises(EmptyRegionError):
            make_sample(image, empty, "binary", seed=0, input_hw=(16, 16))

    def test_unknown_label_kind(self):
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        with pytest.raises(InvalidArgumentError):
            make_sample(image, rect_mask(8, 8, 0, 4, 0, 4), "fuzzy", seed=0)


class TestAugment:
    def sample(self):
        rng = np.random.default_rng(5)
        image = rng.random((12, 16, 3))
        mask = rect_mask(12, 16, 2, 9, 3, 12)
        points = (Point(4.5, 3.5), Point(10.5, 8.5))
        return TrainSample(image, mask, points)

    def test_no_flip_is_identity(self):
        s = self.sample()
        out = flip_sample(s, False, False)
        assert np.array_equal(out.image, s.image)
        assert out.prompt_points == s.prompt_points

    def test_lr_flip_reflects_x(self):
        bits = np.ones((4, 1024), dtype=bool)
        s = TrainSample(np.zeros((4, 1024, 3)), BinaryMask.from_bits(bits), (Point(102.4, 2.0),))
        out = flip_sample(s, False, True)
        [p] = out.prompt_points
        assert p.x == pytest.approx(921.6)
        assert p.y == 2.0

    def test_flips_are_involutions(self):
        s = self.sample()
        for ud, lr in ((True, False), (False, True), (True, True)):
            twice = flip_sample(flip_sample(s, ud, lr), ud, lr)
            assert np.array_equal(twice.image, s.image)
            assert np.array_equal(twice.gt_mask.bits, s.gt_mask.bits)
            for a, b in zip(twice.prompt_points, s.prompt_points):
                assert a.x == pytest.approx(b.x) and a.y == pytest.approx(b.y)

    def test_membership_preserved_under_all_flips(self):
        s = self.sample()
        for ud in (False, True):
            for lr in (False, True):
                out = flip_sample(s, ud, lr)
                for p in out.prompt_points:
                    r, c = point_cell(p)
                    assert out.gt_mask.bits[r, c]

    def test_augment_deterministic_per_seed(self):
        s = self.sample()
        a = augment(s, 123)
        b = augment(s, 123)
        assert np.array_equal(a.image, b.image)
        assert a.prompt_points == b.prompt_points

    def test_membership_validated_at_construction(self):
        with pytest.raises(InvalidArgumentError):
            TrainSample(
                np.zeros((8, 8, 3)), rect_mask(8, 8, 0, 2, 0, 2), (Point(6.5, 6.5),)
            )


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-5) == 1e-5
        assert cosine_lr(100, 100, 1e-5) == 0.0
        assert cosine_lr(50, 100, 1e-5) == pytest.approx(0.5e-5)

    def test_monotone_decay(self):
        values = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_bad_arguments(self):
        with pytest.raises(InvalidArgumentError):
            cosine_lr(5, 0, 1e-5)
        with pytest.raises(InvalidArgumentError):
            cosine_lr(11, 10, 1e-5)


class TestAdamW:
    def test_single_step_matches_hand_update(self):
        p = np.array([1.0])
        opt = AdamW()
        opt.step({"p": p}, {"p": np.array([0.5])}, lr=0.1)
        m_hat, v_hat = 0.5, 0.25
        expected = 1.0 - 0.1 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.01 * 1.0)
        assert p[0] == pytest.approx(expected, rel=1e-12)

    def test_decoupled_decay_moves_params_without_gradient(self):
        p = np.array([2.0])
        opt = AdamW()
        opt.step({"p": p}, {"p": np.array([0.0])}, lr=0.5)
        # zero gradient -> pure weight decay: p - lr*wd*p
        assert p[0] == pytest.approx(2.0 - 0.5 * 0.01 * 2.0)


def disk_samples(count=8, input_hw=(64, 64)):
    samples = []
    for i in range(count):
        scene = Scene(
            SceneSpec(
                height=96,
                width=128,
                frame_count=1,
                disks=(
                    DiskSpec(
                        center=(24.5 + 10.0 * i, 30.5 + 4.0 * (i % 3)),
                        radius=11.0,
                    ),
                ),
                background_seed=i,
            )
        )
        samples.extend(
            make_sample(
                scene.frame(0).pixels,
                scene.gt_masks(0),
                "instance",
                seed=i,
                input_hw=input_hw,
            )
        )
    return samples


def toy_config(**overrides):
    defaults = dict(
        epochs=5, batch_size=4, lr_init=0.05, input_hw=(64, 64), seed=0
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestTrain:
    def test_smoke_loss_decreases(self, tmp_path):
        samples = disk_samples()
        model = ToyPromptNet(seed=0)
        result = train(model, samples, toy_config(), tmp_path)
        losses = result.epoch_losses
        assert len(losses) == 5
        increases = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
        assert increases <= 1
        assert losses[-1] < losses[0]

    def test_frozen_prompt_encoder_untouched(self, tmp_path):
        samples = disk_samples(count=4)
        model = ToyPromptNet(seed=0)
        before = model.parameter_groups()["prompt_encoder"]["gain"].copy()
        unfrozen_before = model.parameter_groups()["mask_decoder"]["alpha"].copy()
        train(model, samples, toy_config(epochs=2), tmp_path)
        after = model.parameter_groups()["prompt_encoder"]["gain"]
        assert np.array_equal(before, after)
        assert not np.array_equal(
            unfrozen_before, model.parameter_groups()["mask_decoder"]["alpha"]
        )

    def test_checkpoints_and_metrics_log(self, tmp_path):
        samples = disk_samples(count=4)
        result = train(
            ToyPromptNet(seed=1), samples, toy_config(epochs=3), tmp_path, run_id="t1"
        )
        for epoch in range(3):
            assert (tmp_path / f"t1-e{epoch}.ckpt").exists()
        with open(result.metrics_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert list(rows[0]) == [
            "epoch", "step", "lr", "bce", "dice", "total", "val_dice",
        ]
        val_dices = [float(r["val_dice"]) for r in rows]
        assert result.best_val_dice == max(val_dices)
        assert result.best_checkpoint.endswith(f"t1-e{result.best_epoch}.ckpt")

    def test_checkpoint_round_trip(self, tmp_path):
        samples = disk_samples(count=4)
        model = ToyPromptNet(seed=2)
        result = train(model, samples, toy_config(epochs=2), tmp_path)
        state = load_checkpoint(result.best_checkpoint)
        fresh = ToyPromptNet(seed=9)
        fresh.load_state_dict(state)
        model.load_state_dict(state)
        probe = samples[0]
        assert np.allclose(
            fresh.forward(probe.image, probe.prompt_points),
            model.forward(probe.image, probe.prompt_points),
        )

    def test_training_is_deterministic(self, tmp_path):
        samples = disk_samples(count=4)
        r1 = train(ToyPromptNet(seed=0), samples, toy_config(epochs=3), tmp_path / "a")
        r2 = train(ToyPromptNet(seed=0), samples, toy_config(epochs=3), tmp_path / "b")
        assert r1.epoch_losses == r2.epoch_losses

    def test_missing_group_rejected(self, tmp_path):
        class Headless(ToyPromptNet):
            def parameter_groups(self):
                groups = dict(super().parameter_groups())
                del groups["prompt_encoder"]
                return groups

        with pytest.raises(ConfigError):
            train(Headless(), disk_samples(count=2), toy_config(), tmp_path)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            train(ToyPromptNet(), [], toy_config(), tmp_path)

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(epochs=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(lr_init=0.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(freeze={"prompt_encoder": True})


class TestManifest:
    def write_dataset(self, tmp_path, label_kind="instance"):
        from PIL import Image

        from trackseg.maskio import save_instance_masks_png

        scene = Scene(
            SceneSpec(
                height=96,
                width=128,
                frame_count=1,
                disks=(DiskSpec(center=(40.5, 40.5), radius=12.0),),
            )
        )
        Image.fromarray(scene.frame(0).pixels).save(tmp_path / "img0.png")
        save_instance_masks_png(tmp_path / "mask0.png", scene.gt_masks(0))
        manifest = tmp_path / "data.jsonl"
        manifest.write_text(
            '{"image_path": "img0.png", "mask_path": "mask0.png", '
            f'"label_kind": "{label_kind}"}}\n'
        )
        return manifest

    def test_round_trip(self, tmp_path):
        manifest = self.write_dataset(tmp_path)
        samples = samples_from_manifest(manifest, input_hw=(64, 64))
        assert len(samples) == 1
        assert samples[0].image.shape == (64, 64, 3)

    def test_binary_label_kind(self, tmp_path):
        manifest = self.write_dataset(tmp_path, label_kind="binary")
        samples = samples_from_manifest(manifest, input_hw=(32, 32))
        assert len(samples) == 1

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(ManifestError):
            read_dataset_manifest(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_path": "a.png", "mask_path": "b.png"}\n')
        with pytest.raises(ManifestError):
            read_dataset_manifest(path)

    def test_unknown_label_kind(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"image_path": "a.png", "mask_path": "b.png", "label_kind": "soft"}\n'
        )
        with pytest.raises(ManifestError):
            read_dataset_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(NotFoundError):
            read_dataset_manifest(tmp_path / "nope.jsonl")

    def test_missing_image_file(self, tmp_path):
        manifest = tmp_path / "data.jsonl"
        manifest.write_text(
            '{"image_path": "ghost.png", "mask_path": "m.png", '
            '"label_kind": "binary"}\n'
        )
        with pytest.raises(NotFoundError):
            samples_from_manifest(manifest)
