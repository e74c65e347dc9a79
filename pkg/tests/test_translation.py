import numpy as np
import pytest
import torch

from histosynth import metrics
from histosynth.errors import EmptyRecords, EmptyValidationSet, VersionMismatch
from histosynth.losses import LossWeights
from histosynth.translation import (
    BundleArch,
    CycleValidationRecord,
    TrainConfig,
    TranslationTrainer,
    build_bundle,
    checkpoint_epoch,
    load_checkpoint,
    modules_changed,
    save_checkpoint,
    select_best_checkpoint,
    snapshot_parameters,
    train_step,
    translate,
    validate_cycle,
)

TINY = BundleArch(
    nd_width=8, nd_blocks=1, nd_disc_width=8, d_width=8, d_depth=2, d_disc_width=8, z_dim=16
)


def _batches(seed=0, n=4, size=16):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(n, 1, size, size, generator=g) * 2 - 1
    b = torch.rand(n, 1, size, size, generator=g) * 2 - 1
    return a, b


def test_train_step_touches_every_module():
    bundle = build_bundle(arch=TINY, seed=0)
    batch_A, batch_B = _batches()
    before = snapshot_parameters(bundle)
    train_step(bundle, batch_A, batch_B, torch.Generator().manual_seed(1))
    changed = modules_changed(before, bundle)
    assert all(changed.values()), f"unchanged modules: {[k for k, v in changed.items() if not v]}"


def test_train_step_deterministic():
    records = []
    for _ in range(2):
        bundle = build_bundle(arch=TINY, seed=3)
        batch_A, batch_B = _batches(seed=5)
        rng = torch.Generator().manual_seed(7)
        r1 = train_step(bundle, batch_A, batch_B, rng)
        r2 = train_step(bundle, batch_A, batch_B, rng)
        records.append((r1, r2))
    assert records[0] == records[1]


def test_train_step_zero_theta_weights_freeze_diffusive_generators():
    weights = LossWeights(lambda_1_theta=0.0, lambda_2_theta=0.0)
    bundle = build_bundle(arch=TINY, weights=weights, seed=0)
    batch_A, batch_B = _batches()
    before = snapshot_parameters(bundle)
    train_step(bundle, batch_A, batch_B, torch.Generator().manual_seed(1))
    changed = modules_changed(before, bundle)
    assert not changed["g_theta_A"]
    assert not changed["g_theta_B"]
    assert changed["g_phi_A"] and changed["g_phi_B"]


def test_train_step_loss_record_finite():
    bundle = build_bundle(arch=TINY, seed=2)
    batch_A, batch_B = _batches(seed=4)
    record = train_step(bundle, batch_A, batch_B, torch.Generator().manual_seed(6))
    expected_keys = {
        "g_total", "d_total", "cycle", "adv_phi_A", "adv_phi_B", "adv_theta_A",
        "adv_theta_B", "d_phi_A", "d_phi_B", "d_theta_A", "d_theta_B", "gp_A", "gp_B",
    }
    assert set(record) == expected_keys
    assert all(np.isfinite(v) for v in record.values())


class _IdentityDiffusive:
    """Stub diffusive generator returning the conditioning unchanged."""

    def __call__(self, x_t, y, t, z):
        return y


def _identity_bundle():
    bundle = build_bundle(arch=TINY, seed=0)
    bundle.g_theta_A = _IdentityDiffusive()
    bundle.g_theta_B = _IdentityDiffusive()
    return bundle


def test_validate_cycle_identity_bundle_is_perfect():
    bundle = _identity_bundle()
    imgs = [np.random.default_rng(i).random((16, 16)).astype(np.float32) for i in range(3)]
    record = validate_cycle(bundle, imgs, seed=1, epoch=5)
    assert record.epoch == 5
    # reconstruction exact up to float32 rounding of the [0,1] <-> [-1,1] maps
    assert record.ssim_mean == pytest.approx(1.0, abs=1e-6)
    assert record.l1_mean == pytest.approx(0.0, abs=1e-6)
    assert record.psnr_mean == pytest.approx(100.0)
    assert record.ssim_std == pytest.approx(0.0, abs=1e-9)


def test_validate_cycle_single_image_has_zero_std():
    bundle = _identity_bundle()
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    record = validate_cycle(bundle, [img], seed=0)
    assert record.ssim_std == 0.0
    assert record.psnr_std == 0.0
    assert record.l1_std == 0.0


def test_validate_cycle_agrees_with_metric_oracles():
    bundle = build_bundle(arch=TINY, seed=9)
    imgs = [np.random.default_rng(100 + i).random((16, 16)).astype(np.float32) for i in range(2)]
    record = validate_cycle(bundle, imgs, seed=3)
    ssims, psnrs, l1s = [], [], []
    for i, img in enumerate(imgs):
        there = translate(bundle, img, "A2B", seed=3 * 1009 + 2 * i)
        back = translate(bundle, there, "B2A", seed=3 * 1009 + 2 * i + 1)
        ssims.append(metrics.ssim(img, back))
        psnrs.append(metrics.psnr(img, back))
        l1s.append(metrics.l1(img, back))
    assert record.ssim_mean == pytest.approx(float(np.mean(ssims)), abs=1e-6)
    assert record.psnr_mean == pytest.approx(float(np.mean(psnrs)), abs=1e-6)
    assert record.l1_mean == pytest.approx(float(np.mean(l1s)), abs=1e-6)


def test_validate_cycle_empty_raises():
    with pytest.raises(EmptyValidationSet):
        validate_cycle(_identity_bundle(), [], seed=0)


def _record(epoch, ssim, l1=0.5):
    return CycleValidationRecord(
        epoch=epoch, ssim_mean=ssim, ssim_std=0.0, psnr_mean=20.0, psnr_std=0.0,
        l1_mean=l1, l1_std=0.0,
    )


def test_select_best_checkpoint_argmax():
    records = [_record(1, 0.5), _record(2, 0.9), _record(3, 0.7)]
    assert select_best_checkpoint(records) == 2


def test_select_best_checkpoint_tiebreak_l1_then_epoch():
    records = [_record(1, 0.8, l1=0.2), _record(2, 0.8, l1=0.1)]
    assert select_best_checkpoint(records) == 2
    records = [_record(4, 0.8, l1=0.1), _record(5, 0.8, l1=0.1)]
    assert select_best_checkpoint(records) == 4


def test_select_best_checkpoint_empty():
    with pytest.raises(EmptyRecords):
        select_best_checkpoint([])


def test_checkpoint_round_trip_bitwise(tmp_path):
    bundle = build_bundle(arch=TINY, seed=11)
    path = tmp_path / "bundle.ckpt"
    save_checkpoint(bundle, epoch=7, path=path)
    loaded = load_checkpoint(path)
    assert checkpoint_epoch(path) == 7
    assert loaded.arch == bundle.arch
    assert loaded.schedule == bundle.schedule
    assert loaded.weights == bundle.weights
    for name, mod in bundle.modules().items():
        for p0, p1 in zip(mod.state_dict().values(), loaded.modules()[name].state_dict().values()):
            assert torch.equal(p0, p1)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "bad.ckpt"
    torch.save({"format_version": 999}, path)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_checkpoint_preserves_validation_record(tmp_path):
    bundle = build_bundle(arch=TINY, seed=13)
    imgs = [np.random.default_rng(i).random((16, 16)).astype(np.float32) for i in range(2)]
    before = validate_cycle(bundle, imgs, seed=2)
    path = tmp_path / "b.ckpt"
    save_checkpoint(bundle, epoch=1, path=path)
    after = validate_cycle(load_checkpoint(path), imgs, seed=2)
    assert after.ssim_mean == pytest.approx(before.ssim_mean, abs=1e-6)
    assert after.l1_mean == pytest.approx(before.l1_mean, abs=1e-6)


def test_translate_contract():
    bundle = build_bundle(arch=TINY, seed=15)
    img = np.random.default_rng(3).random((16, 16)).astype(np.float32)
    out = translate(bundle, img, "A2B", seed=4)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    again = translate(bundle, img, "A2B", seed=4)
    assert np.array_equal(out, again)
    different = translate(bundle, img, "A2B", seed=5)
    assert not np.array_equal(out, different)
    with pytest.raises(ValueError):
        translate(bundle, img, "sideways", seed=0)


def test_trainer_fit_smoke(tmp_path):
    bundle = build_bundle(arch=TINY, seed=17)
    config = TrainConfig(
        epochs=2, batch_size=2, seed=17, val_every=1, checkpoint_dir=str(tmp_path / "ckpt")
    )
    rng = np.random.default_rng(0)
    imgs_A = [rng.random((16, 16)).astype(np.float32) for _ in range(4)]
    imgs_B = [rng.random((16, 16)).astype(np.float32) for _ in range(4)]
    trainer = TranslationTrainer(bundle, config)
    records, best_epoch = trainer.fit(imgs_A, imgs_B, imgs_A[:2], log_dir=tmp_path / "logs")
    assert len(records) == 2
    assert best_epoch in (1, 2)
    assert (tmp_path / "ckpt" / "best.ckpt").exists()
    assert (tmp_path / "ckpt" / "final.ckpt").exists()
    assert (tmp_path / "ckpt" / "selection.json").exists()
    training_log = (tmp_path / "logs" / "training_log.csv").read_text().splitlines()
    assert training_log[0] == "epoch,step,loss_name,value"
    assert len(training_log) > 1
    val_log = (tmp_path / "logs" / "validation_log.csv").read_text().splitlines()
    assert val_log[0] == "epoch,ssim_mean,ssim_std,psnr_mean,psnr_std,l1_mean,l1_std"
    assert len(val_log) == 3


def test_trainer_deterministic_reruns(tmp_path):
    def run(out):
        bundle = build_bundle(arch=TINY, seed=19)
        config = TrainConfig(epochs=1, batch_size=2, seed=19, checkpoint_dir=str(out))
        rng = np.random.default_rng(1)
        imgs_A = [rng.random((16, 16)).astype(np.float32) for _ in range(2)]
        imgs_B = [rng.random((16, 16)).astype(np.float32) for _ in range(2)]
        trainer = TranslationTrainer(bundle, config)
        records, _ = trainer.fit(imgs_A, imgs_B, imgs_A[:1])
        return records, trainer.loss_rows

    r1, losses1 = run(tmp_path / "a")
    r2, losses2 = run(tmp_path / "b")
    assert r1 == r2
    assert losses1 == losses2


def test_bundle_symmetric_hyperparameters():
    bundle = build_bundle(arch=TINY, seed=0)
    assert bundle.g_phi_A.hparams == bundle.g_phi_B.hparams
    assert bundle.g_theta_A.hparams == bundle.g_theta_B.hparams
    assert bundle.d_theta_A.hparams == bundle.d_theta_B.hparams


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
