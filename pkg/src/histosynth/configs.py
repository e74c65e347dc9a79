"""Experiment configuration: one JSON document drives every CLI command.

Three presets mirror a difficulty ladder of increasingly dissimilar domain
pairs: same-style (only a mild intensity shift), inverted-contrast (myelin
polarity flips), and inverted-resampled-blur (polarity flip plus a pixel-size
mismatch and heavier blur).
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .phantoms import PhantomSpec, RenderStyle
from .segmentation import SegConfig
from .translation import BundleArch, TrainConfig

PRESET_NAMES = ("same-style", "inverted-contrast", "inverted-resampled-blur")

# shared labeled-domain appearance (dark myelin, bright axon)
_L_STYLE = dict(
    name="labeled",
    background_intensity=0.75,
    axon_intensity=0.95,
    myelin_intensity=0.15,
    noise_sigma=0.02,
    blur_sigma=0.5,
    pixel_size_um=0.1,
)


@dataclass
class ExperimentConfig:
    """Full recipe: phantom data, translation training, segmentation, seeds."""

    name: str = "experiment"
    seed: int = 0
    spec_L: PhantomSpec = field(default_factory=PhantomSpec)
    styles_L: list = field(default_factory=list)
    spec_U: PhantomSpec = field(default_factory=PhantomSpec)
    styles_U: list = field(default_factory=list)
    counts: dict = field(default_factory=lambda: {"train": 16, "val": 4})
    arch: BundleArch = field(default_factory=BundleArch)
    schedule: dict = field(default_factory=lambda: {"T": 4, "beta_min": 0.1, "beta_max": 0.5})
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    n_grid_examples: int = 4

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "data": {
                "spec_L": self.spec_L.to_dict(),
                "styles_L": [s.to_dict() for s in self.styles_L],
                "spec_U": self.spec_U.to_dict(),
                "styles_U": [s.to_dict() for s in self.styles_U],
                "counts": self.counts,
            },
            "translation": {
                "arch": self.arch.to_dict(),
                "schedule": self.schedule,
                "loss_weights": self.loss_weights.to_dict(),
                "train": {
                    "epochs": self.train.epochs,
                    "batch_size": self.train.batch_size,
                    "lr_g": self.train.lr_g,
                    "lr_d": self.train.lr_d,
                    "adam_betas": list(self.train.adam_betas),
                    "val_every": self.train.val_every,
                },
            },
            "segmentation": self.segmentation.to_dict(),
            "n_grid_examples": self.n_grid_examples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        data = d["data"]
        tr = d["translation"]
        train = dict(tr["train"])
        train["adam_betas"] = tuple(train.get("adam_betas", (0.5, 0.9)))
        return cls(
            name=d.get("name", "experiment"),
            seed=d.get("seed", 0),
            spec_L=PhantomSpec.from_dict(data["spec_L"]),
            styles_L=[RenderStyle.from_dict(s) for s in data["styles_L"]],
            spec_U=PhantomSpec.from_dict(data["spec_U"]),
            styles_U=[RenderStyle.from_dict(s) for s in data["styles_U"]],
            counts={k: int(v) for k, v in data["counts"].items()},
            arch=BundleArch.from_dict(tr["arch"]),
            schedule=dict(tr["schedule"]),
            loss_weights=LossWeights.from_dict(tr["loss_weights"]),
            train=TrainConfig(seed=d.get("seed", 0), **train),
            segmentation=SegConfig.from_dict(d["segmentation"]),
            n_grid_examples=d.get("n_grid_examples", 4),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(Path(path)) as f:
            return cls.from_dict(json.load(f))


def _desk_arch() -> BundleArch:
    return BundleArch(
        nd_width=16, nd_blocks=4, nd_disc_width=16,
        d_width=16, d_depth=3, d_disc_width=16, z_dim=64,
    )


def _small_spec(seed: int = 0) -> PhantomSpec:
    return PhantomSpec(
        canvas_size=(32, 32),
        n_axons=2,
        axon_radius_range=(3.0, 4.5),
        myelin_thickness_ratio=0.5,
        min_separation=1.0,
        rng_seed=seed,
    )


def preset_experiment(name: str, seed: int = 0) -> ExperimentConfig:
    """Builds one rung of the difficulty ladder."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")

    style_l = RenderStyle(**_L_STYLE)
    seg = SegConfig(base_width=16, depth=3, epochs=40, batch_size=4,
                    learning_rate=1e-3, seed=seed, k_folds=5)

    if name == "same-style":
        # mild intensity shift only; a pre-trained segmenter should transfer
        style_u = RenderStyle(
            name="unlabeled-similar",
            background_intensity=0.70,
            axon_intensity=0.90,
            myelin_intensity=0.22,
            noise_sigma=0.03,
            blur_sigma=0.5,
            pixel_size_um=0.1,
        )
        return ExperimentConfig(
            name=name, seed=seed,
            spec_L=_small_spec(), styles_L=[style_l],
            spec_U=_small_spec(), styles_U=[style_u],
            counts={"train": 16, "val": 4},
            arch=_desk_arch(),
            train=TrainConfig(epochs=60, batch_size=4, seed=seed, val_every=5),
            segmentation=seg,
        )

    if name == "inverted-contrast":
        style_u = RenderStyle(
            name="unlabeled-inverted",
            background_intensity=0.20,
            axon_intensity=0.05,
            myelin_intensity=0.85,
            noise_sigma=0.02,
            blur_sigma=0.5,
            pixel_size_um=0.1,
        )
        return ExperimentConfig(
            name=name, seed=seed,
            spec_L=_small_spec(), styles_L=[style_l],
            spec_U=_small_spec(), styles_U=[style_u],
            counts={"train": 16, "val": 4},
            arch=_desk_arch(),
            train=TrainConfig(epochs=150, batch_size=4, seed=seed, val_every=5),
            segmentation=seg,
        )

    # inverted-resampled-blur: polarity flip + 2x pixel-size gap + extra blur.
    # The labeled pool renders at 0.1 um/px on a 64 px canvas and is resampled
    # to the unlabeled 0.2 um/px, landing on the same 32 px grid.
    style_l_hires = RenderStyle(**{**_L_STYLE, "pixel_size_um": 0.1})
    style_u = RenderStyle(
        name="unlabeled-blurry-inverted",
        background_intensity=0.25,
        axon_intensity=0.10,
        myelin_intensity=0.80,
        noise_sigma=0.03,
        blur_sigma=1.0,
        pixel_size_um=0.2,
    )
    spec_l_hires = PhantomSpec(
        canvas_size=(64, 64),
        n_axons=2,
        axon_radius_range=(6.0, 9.0),
        myelin_thickness_ratio=0.5,
        min_separation=2.0,
        rng_seed=0,
    )
    return ExperimentConfig(
        name=name, seed=seed,
        spec_L=spec_l_hires, styles_L=[style_l_hires],
        spec_U=_small_spec(), styles_U=[style_u],
        counts={"train": 16, "val": 4},
        arch=_desk_arch(),
        train=TrainConfig(epochs=150, batch_size=4, seed=seed, val_every=5),
        segmentation=seg,
    )
