"""End-to-end unpaired training of the translation bundle.

One training step runs, in order: the fast cross-translations and their
round trips, the diffusive reconstructions at a random step t, one
discriminator update (with penalty), and one generator update. Validation
translates each held-out image through a full there-and-back cycle with the
inference sampler and scores the reconstruction.

Images enter training in [0, 1] and are mapped to [-1, 1] at this boundary.
"""
import copy
import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .diffusion import (
    NoiseSchedule,
    generator_sources,
    make_schedule,
    posterior_sample,
    q_sample,
    reverse_translate,
)
from .errors import (
    EmptyRecords,
    EmptyValidationSet,
    IOFailure,
    NonFiniteLoss,
    VersionMismatch,
)
from .losses import (
    CycleBatch,
    LossWeights,
    cycle_loss,
    d_nonsat,
    g_nonsat,
    gradient_penalty,
    total_D,
    total_G,
)
from .networks import (
    DiffusiveDiscriminator,
    DiffusiveGenerator,
    NonDiffusiveDiscriminator,
    NonDiffusiveGenerator,
)

CHECKPOINT_VERSION = 1

MODULE_NAMES = (
    "g_phi_A", "d_phi_A", "g_phi_B", "d_phi_B",
    "g_theta_A", "d_theta_A", "g_theta_B", "d_theta_B",
)


@dataclass
class BundleArch:
    """Architecture hyperparameters shared by the A and B sides."""

    nd_width: int = 32
    nd_blocks: int = 6
    nd_disc_width: int = 32
    d_width: int = 32
    d_depth: int = 3
    d_disc_width: int = 32
    z_dim: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BundleArch":
        return cls(**d)


@dataclass
class TranslationBundle:
    """The eight trainable modules plus schedule and loss weights."""

    g_phi_A: NonDiffusiveGenerator
    d_phi_A: NonDiffusiveDiscriminator
    g_phi_B: NonDiffusiveGenerator
    d_phi_B: NonDiffusiveDiscriminator
    g_theta_A: DiffusiveGenerator
    d_theta_A: DiffusiveDiscriminator
    g_theta_B: DiffusiveGenerator
    d_theta_B: DiffusiveDiscriminator
    schedule: NoiseSchedule
    weights: LossWeights
    arch: BundleArch

    def modules(self) -> dict:
        return {name: getattr(self, name) for name in MODULE_NAMES}

    def generator_parameters(self):
        for name in ("g_phi_A", "g_phi_B", "g_theta_A", "g_theta_B"):
            yield from getattr(self, name).parameters()

    def discriminator_parameters(self):
        for name in ("d_phi_A", "d_phi_B", "d_theta_A", "d_theta_B"):
            yield from getattr(self, name).parameters()


def build_bundle(
    arch: BundleArch = None,
    schedule: NoiseSchedule = None,
    weights: LossWeights = None,
    seed: int = 0,
) -> TranslationBundle:
    """Constructs all eight modules with deterministic initialization."""
    arch = arch or BundleArch()
    schedule = schedule or make_schedule()
    weights = weights or LossWeights()
    torch.manual_seed(seed)

    def nd_gen():
        return NonDiffusiveGenerator(base_width=arch.nd_width, n_res_blocks=arch.nd_blocks)

    def nd_disc():
        return NonDiffusiveDiscriminator(base_width=arch.nd_disc_width)

    def d_gen():
        return DiffusiveGenerator(base_width=arch.d_width, depth=arch.d_depth, z_dim=arch.z_dim)

    def d_disc():
        return DiffusiveDiscriminator(base_width=arch.d_disc_width)

    return TranslationBundle(
        g_phi_A=nd_gen(), d_phi_A=nd_disc(), g_phi_B=nd_gen(), d_phi_B=nd_disc(),
        g_theta_A=d_gen(), d_theta_A=d_disc(), g_theta_B=d_gen(), d_theta_B=d_disc(),
        schedule=schedule, weights=weights, arch=arch,
    )


@dataclass
class TrainConfig:
    """Loop hyperparameters. ``warmup_epochs`` trains only the fast modules
    (theta weights zeroed) before the full objective kicks in, giving the
    diffusive generators clean conditioning estimates from the start."""

    epochs: int = 30
    batch_size: int = 4
    lr_g: float = 1.6e-4
    lr_d: float = 1.0e-4
    adam_betas: tuple = (0.5, 0.9)
    seed: int = 0
    val_every: int = 1
    warmup_epochs: int = 0
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (minibatch-std)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")


@dataclass
class CycleValidationRecord:
    epoch: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    l1_mean: float
    l1_std: float

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_t(batch: int, T: int, rng: torch.Generator) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch,), generator=rng)


def _diffusive_side(bundle, x0, y_cond, rng):
    """Noises x0 at a random step and predicts it back, per domain."""
    sched = bundle.schedule
    t = _sample_t(x0.shape[0], sched.T, rng)
    eps = torch.randn(x0.shape, generator=rng)
    x_t = q_sample(x0, t, eps, sched)
    z = torch.randn(x0.shape[0], bundle.arch.z_dim, generator=rng)
    return t, x_t, z


def train_step(
    bundle: TranslationBundle,
    batch_A: torch.Tensor,
    batch_B: torch.Tensor,
    rng: torch.Generator,
    opt_G: torch.optim.Optimizer = None,
    opt_D: torch.optim.Optimizer = None,
) -> dict:
    """One alternating D-then-G update over all eight modules.

    Batches are [-1, 1] tensors of shape (B, 1, H, W) from the two unpaired
    domains. Returns every loss component as floats.
    """
    w = bundle.weights
    sched = bundle.schedule
    if opt_D is None:
        opt_D = torch.optim.Adam(bundle.discriminator_parameters())
    if opt_G is None:
        opt_G = torch.optim.Adam(bundle.generator_parameters())
    # with both theta weights exactly 0 the diffusive terms contribute nothing;
    # skipping them is mathematically equivalent and much faster (warmup phases)
    run_theta = not (w.lambda_1_theta == 0.0 and w.lambda_2_theta == 0.0)
    zero = torch.zeros(())

    # fast cross-translations and their round trips
    y_tilde_A = bundle.g_phi_A(batch_B)
    y_tilde_B = bundle.g_phi_B(batch_A)
    x_dot_A = bundle.g_phi_A(y_tilde_B)
    x_dot_B = bundle.g_phi_B(y_tilde_A)

    if run_theta:
        # diffusive reconstructions conditioned on the (sampled) fast estimates
        t_A, x_t_A, z_A = _diffusive_side(bundle, batch_A, y_tilde_B, rng)
        t_B, x_t_B, z_B = _diffusive_side(bundle, batch_B, y_tilde_A, rng)
        x_tilde_A = bundle.g_theta_A(x_t_A, y_tilde_B.detach(), t_A, z_A)
        x_tilde_B = bundle.g_theta_B(x_t_B, y_tilde_A.detach(), t_B, z_B)
    else:
        x_tilde_A, x_tilde_B = batch_A, batch_B  # zero cycle contribution

    # --- discriminator update ---
    d_phi_A_loss = d_nonsat(bundle.d_phi_A(batch_A), bundle.d_phi_A(y_tilde_A.detach()))
    d_phi_B_loss = d_nonsat(bundle.d_phi_B(batch_B), bundle.d_phi_B(y_tilde_B.detach()))
    if run_theta:
        real_prev_A = posterior_sample(batch_A, x_t_A, t_A, sched, torch.randn(batch_A.shape, generator=rng))
        real_prev_B = posterior_sample(batch_B, x_t_B, t_B, sched, torch.randn(batch_B.shape, generator=rng))
        noise_A = torch.randn(batch_A.shape, generator=rng)
        noise_B = torch.randn(batch_B.shape, generator=rng)
        fake_prev_A = posterior_sample(x_tilde_A.detach(), x_t_A, t_A, sched, noise_A)
        fake_prev_B = posterior_sample(x_tilde_B.detach(), x_t_B, t_B, sched, noise_B)
        d_theta_A_loss = d_nonsat(
            bundle.d_theta_A(real_prev_A, x_t_A, t_A), bundle.d_theta_A(fake_prev_A, x_t_A, t_A)
        )
        d_theta_B_loss = d_nonsat(
            bundle.d_theta_B(real_prev_B, x_t_B, t_B), bundle.d_theta_B(fake_prev_B, x_t_B, t_B)
        )
        gp_A = gradient_penalty(bundle.d_theta_A, real_prev_A, x_t_A, t_A, kind=w.penalty_kind)
        gp_B = gradient_penalty(bundle.d_theta_B, real_prev_B, x_t_B, t_B, kind=w.penalty_kind)
    else:
        d_theta_A_loss = d_theta_B_loss = gp_A = gp_B = zero
    d_total = total_D(d_phi_A_loss, d_phi_B_loss, d_theta_A_loss, d_theta_B_loss, [gp_A, gp_B], w)
    if not torch.isfinite(d_total):
        raise NonFiniteLoss(
            f"discriminator loss not finite: d_phi=({d_phi_A_loss.item()}, {d_phi_B_loss.item()}), "
            f"d_theta=({d_theta_A_loss.item()}, {d_theta_B_loss.item()}), gp=({gp_A.item()}, {gp_B.item()})"
        )
    opt_D.zero_grad()
    d_total.backward()
    opt_D.step()

    # --- generator update ---
    adv_phi_A = g_nonsat(bundle.d_phi_A(y_tilde_A))
    adv_phi_B = g_nonsat(bundle.d_phi_B(y_tilde_B))
    if run_theta:
        fake_prev_A_g = posterior_sample(x_tilde_A, x_t_A, t_A, sched, noise_A)
        fake_prev_B_g = posterior_sample(x_tilde_B, x_t_B, t_B, sched, noise_B)
        adv_theta_A = g_nonsat(bundle.d_theta_A(fake_prev_A_g, x_t_A, t_A))
        adv_theta_B = g_nonsat(bundle.d_theta_B(fake_prev_B_g, x_t_B, t_B))
    else:
        adv_theta_A = adv_theta_B = zero
    cyc = cycle_loss(
        CycleBatch(
            x0_A=batch_A, x0_B=batch_B,
            y_tilde_A=y_tilde_A, y_tilde_B=y_tilde_B,
            x_dot_A=x_dot_A, x_dot_B=x_dot_B,
            x_tilde_A=x_tilde_A, x_tilde_B=x_tilde_B,
        ),
        w,
    )
    g_total = total_G(adv_phi_A, adv_phi_B, adv_theta_A, adv_theta_B, cyc, w)
    if not torch.isfinite(g_total):
        raise NonFiniteLoss(
            f"generator loss not finite: adv_phi=({adv_phi_A.item()}, {adv_phi_B.item()}), "
            f"adv_theta=({adv_theta_A.item()}, {adv_theta_B.item()}), cycle={cyc.item()}"
        )
    opt_G.zero_grad()
    g_total.backward()
    opt_G.step()

    return {
        "g_total": g_total.item(),
        "d_total": d_total.item(),
        "cycle": cyc.item(),
        "adv_phi_A": adv_phi_A.item(),
        "adv_phi_B": adv_phi_B.item(),
        "adv_theta_A": adv_theta_A.item(),
        "adv_theta_B": adv_theta_B.item(),
        "d_phi_A": d_phi_A_loss.item(),
        "d_phi_B": d_phi_B_loss.item(),
        "d_theta_A": d_theta_A_loss.item(),
        "d_theta_B": d_theta_B_loss.item(),
        "gp_A": gp_A.item(),
        "gp_B": gp_B.item(),
    }


def translate(bundle: TranslationBundle, img: np.ndarray, direction: str, seed: int) -> np.ndarray:
    """Translates one [0, 1] image with the inference sampler.

    The source image itself is the conditioning input; the fast modules are
    not used here. Direction "A2B" produces a B-domain image, "B2A" an
    A-domain image. Deterministic for a fixed seed.
    """
    if direction not in ("A2B", "B2A"):
        raise ValueError(f"direction must be 'A2B' or 'B2A', got {direction!r}")
    gen = bundle.g_theta_B if direction == "A2B" else bundle.g_theta_A
    y = torch.from_numpy(np.asarray(img, dtype=np.float32))[None, None] * 2.0 - 1.0
    z_source, noise_source = generator_sources(
        torch.Generator().manual_seed(seed), bundle.arch.z_dim
    )
    with torch.no_grad():
        out = reverse_translate(gen, y, bundle.schedule, z_source, noise_source)
    return ((out[0, 0].numpy() + 1.0) / 2.0).astype(np.float32)


def validate_cycle(
    bundle: TranslationBundle, val_A_images, seed: int = 0, epoch: int = 0
) -> CycleValidationRecord:
    """Scores full A->B->A reconstructions against the originals in [0, 1]."""
    val_A_images = list(val_A_images)
    if not val_A_images:
        raise EmptyValidationSet("cycle validation needs at least one image")
    ssims, psnrs, l1s = [], [], []
    for i, img in enumerate(val_A_images):
        img = np.asarray(img, dtype=np.float32)
        there = translate(bundle, img, "A2B", seed=seed * 1009 + 2 * i)
        back = translate(bundle, there, "B2A", seed=seed * 1009 + 2 * i + 1)
        ssims.append(metrics.ssim(img, back))
        psnrs.append(metrics.psnr(img, back))
        l1s.append(metrics.l1(img, back))
    ssim_m, ssim_s = metrics.aggregate(ssims)
    psnr_m, psnr_s = metrics.aggregate(psnrs)
    l1_m, l1_s = metrics.aggregate(l1s)
    return CycleValidationRecord(
        epoch=epoch, ssim_mean=ssim_m, ssim_std=ssim_s,
        psnr_mean=psnr_m, psnr_std=psnr_s, l1_mean=l1_m, l1_std=l1_s,
    )


def select_best_checkpoint(records, criterion: str = "ssim") -> int:
    """Best epoch by mean cycle SSIM; ties break to lower L1, then earlier epoch."""
    records = list(records)
    if not records:
        raise EmptyRecords("no validation records to select from")
    if criterion != "ssim":
        raise ValueError(f"unknown selection criterion {criterion!r}")
    best = min(records, key=lambda r: (-r.ssim_mean, r.l1_mean, r.epoch))
    return best.epoch


def save_checkpoint(bundle: TranslationBundle, epoch: int, path):
    """Single-file container: version, architecture, schedule, weights, states."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "arch": bundle.arch.to_dict(),
        "schedule": bundle.schedule.to_dict(),
        "loss_weights": bundle.weights.to_dict(),
        "state": {name: mod.state_dict() for name, mod in bundle.modules().items()},
    }
    try:
        torch.save(payload, path)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> TranslationBundle:
    try:
        payload = torch.load(path, weights_only=True)
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    bundle = build_bundle(
        arch=BundleArch.from_dict(payload["arch"]),
        schedule=NoiseSchedule.from_dict(payload["schedule"]),
        weights=LossWeights.from_dict(payload["loss_weights"]),
    )
    for name, mod in bundle.modules().items():
        mod.load_state_dict(payload["state"][name])
    return bundle


def checkpoint_epoch(path) -> int:
    payload = torch.load(path, weights_only=True)
    return int(payload.get("epoch", -1))


class TranslationTrainer:
    """Drives epochs of train_step over two unpaired image pools.

    Keeps one Adam optimizer per role (generators, discriminators), validates
    every ``val_every`` epochs on A-domain images, tracks the best checkpoint
    by cycle SSIM and writes CSV logs without timestamps so that reruns are
    bit-identical.
    """

    def __init__(self, bundle: TranslationBundle, config: TrainConfig):
        self.bundle = bundle
        self.config = config
        self.opt_G = torch.optim.Adam(
            list(bundle.generator_parameters()), lr=config.lr_g, betas=tuple(config.adam_betas)
        )
        self.opt_D = torch.optim.Adam(
            list(bundle.discriminator_parameters()), lr=config.lr_d, betas=tuple(config.adam_betas)
        )
        self.rng = torch.Generator().manual_seed(config.seed)
        self.records = []
        self.loss_rows = []

    def _epoch_batches(self, images_A: torch.Tensor, images_B: torch.Tensor):
        n = min(images_A.shape[0], images_B.shape[0])
        bs = self.config.batch_size
        if n < bs:
            raise ValueError(f"need at least {bs} images per domain, got {n}")
        order_A = torch.randperm(images_A.shape[0], generator=self.rng)[:n]
        order_B = torch.randperm(images_B.shape[0], generator=self.rng)[:n]
        for start in range(0, n - bs + 1, bs):
            yield images_A[order_A[start : start + bs]], images_B[order_B[start : start + bs]]

    def fit(self, images_A, images_B, val_A_images, log_dir=None):
        """Trains for the configured epochs; returns (records, best_epoch).

        ``images_*`` are [0, 1] arrays; conversion to [-1, 1] happens here.
        When ``checkpoint_dir`` is set the best-so-far bundle goes to
        best.ckpt and the final state to final.ckpt.
        """
        pool_A = torch.from_numpy(
            np.stack([np.asarray(i, dtype=np.float32) for i in images_A])
        )[:, None] * 2.0 - 1.0
        pool_B = torch.from_numpy(
            np.stack([np.asarray(i, dtype=np.float32) for i in images_B])
        )[:, None] * 2.0 - 1.0

        ckpt_dir = Path(self.config.checkpoint_dir) if self.config.checkpoint_dir else None
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)

        from dataclasses import replace as dc_replace

        full_weights = self.bundle.weights
        warm_weights = dc_replace(full_weights, lambda_1_theta=0.0, lambda_2_theta=0.0)

        best_key = None  # same ordering as select_best_checkpoint
        step = 0
        for epoch in range(1, self.config.epochs + 1):
            self.bundle.weights = (
                warm_weights if epoch <= self.config.warmup_epochs else full_weights
            )
            for batch_A, batch_B in self._epoch_batches(pool_A, pool_B):
                losses = train_step(self.bundle, batch_A, batch_B, self.rng, self.opt_G, self.opt_D)
                step += 1
                for name, value in losses.items():
                    self.loss_rows.append((epoch, step, name, value))
            if epoch % self.config.val_every == 0 or epoch == self.config.epochs:
                record = validate_cycle(self.bundle, val_A_images, seed=self.config.seed, epoch=epoch)
                self.records.append(record)
                key = (-record.ssim_mean, record.l1_mean, record.epoch)
                if best_key is None or key < best_key:
                    best_key = key
                    if ckpt_dir is not None:
                        self.bundle.weights = full_weights  # checkpoints carry the real weights
                        save_checkpoint(self.bundle, epoch, ckpt_dir / "best.ckpt")

        self.bundle.weights = full_weights
        best_epoch = select_best_checkpoint(self.records)
        if ckpt_dir is not None:
            save_checkpoint(self.bundle, self.config.epochs, ckpt_dir / "final.ckpt")
            with open(ckpt_dir / "selection.json", "w") as f:
                json.dump(
                    {"best_epoch": best_epoch, "criterion": "ssim",
                     "records": [r.to_dict() for r in self.records]},
                    f, indent=2, sort_keys=True,
                )
        if log_dir is not None:
            log_dir = Path(log_dir)
            log_dir.mkdir(parents=True, exist_ok=True)
            self.write_logs(log_dir)
        return self.records, best_epoch

    def write_logs(self, log_dir: Path):
        with open(log_dir / "training_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "step", "loss_name", "value"])
            for row in self.loss_rows:
                writer.writerow([row[0], row[1], row[2], f"{row[3]:.8f}"])
        with open(log_dir / "validation_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["epoch", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std", "l1_mean", "l1_std"]
            )
            for r in self.records:
                writer.writerow(
                    [r.epoch, f"{r.ssim_mean:.8f}", f"{r.ssim_std:.8f}", f"{r.psnr_mean:.8f}",
                     f"{r.psnr_std:.8f}", f"{r.l1_mean:.8f}", f"{r.l1_std:.8f}"]
                )


def snapshot_parameters(bundle: TranslationBundle) -> dict:
    """Deep copy of every module's parameters (for change-detection tests)."""
    return {
        name: copy.deepcopy([p.detach().clone() for p in mod.parameters()])
        for name, mod in bundle.modules().items()
    }


def modules_changed(before: dict, bundle: TranslationBundle) -> dict:
    """Which modules have at least one changed parameter since the snapshot."""
    changed = {}
    for name, mod in bundle.modules().items():
        changed[name] = any(
            not torch.equal(p0, p1.detach())
            for p0, p1 in zip(before[name], mod.parameters())
        )
    return changed
