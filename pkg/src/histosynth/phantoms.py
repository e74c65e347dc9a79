"""Procedural multi-contrast phantom datasets with exact ground truth.

Fibers are circular axon cores wrapped in annular myelin sheaths, placed by
rejection sampling so that no two fibers touch. Rendering assigns per-class
intensities, blurs, adds Gaussian noise and clips to [0, 1] — enough to
emulate same-contrast and inverted-contrast microscopy domains.
"""
import math
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (
    AXON,
    BACKGROUND,
    MYELIN,
    DatasetManifest,
    Image,
    ManifestEntry,
    resample_mask_to_pixel_size,
    resample_to_pixel_size,
    save_image_png,
    save_mask_png,
)
from .errors import PlacementFailure

PLACEMENT_ATTEMPTS = 1000  # rejection-sampling budget per fiber


@dataclass
class PhantomSpec:
    """Geometry parameters of a synthetic fiber field."""

    canvas_size: tuple = (64, 64)
    n_axons: int = 4
    axon_radius_range: tuple = (5.0, 9.0)
    myelin_thickness_ratio: float = 0.5
    min_separation: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_axons < 1:
            raise ValueError("n_axons must be >= 1")
        if self.axon_radius_range[0] > self.axon_radius_range[1]:
            raise ValueError("axon radius min must be <= max")
        if not 0.0 < self.myelin_thickness_ratio <= 1.0:
            raise ValueError("myelin_thickness_ratio must lie in (0, 1]")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas_size"] = list(self.canvas_size)
        d["axon_radius_range"] = list(self.axon_radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["canvas_size"] = tuple(d["canvas_size"])
        d["axon_radius_range"] = tuple(d["axon_radius_range"])
        return cls(**d)


@dataclass
class RenderStyle:
    """Appearance of one imaging domain: flat class intensities + blur + noise."""

    name: str
    background_intensity: float
    axon_intensity: float
    myelin_intensity: float
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    pixel_size_um: float = 0.1

    def __post_init__(self):
        for field_name in ("background_intensity", "axon_intensity", "myelin_intensity"):
            v = getattr(self, field_name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{field_name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.pixel_size_um <= 0:
            raise ValueError("pixel_size_um must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderStyle":
        return cls(**d)


def contrast_inverted(a: RenderStyle, b: RenderStyle) -> bool:
    """True when myelin-vs-background polarity flips between two styles."""
    sa = a.myelin_intensity - a.background_intensity
    sb = b.myelin_intensity - b.background_intensity
    return sa * sb < 0


@dataclass
class Fiber:
    cy: float
    cx: float
    radius: float
    outer_radius: float


@dataclass
class FiberGeometry:
    fibers: list
    canvas_size: tuple


def generate_phantom(spec: PhantomSpec):
    """Places non-overlapping fibers and rasterizes the 3-class mask.

    Returns (mask, geometry). Deterministic for a fixed rng_seed; raises
    PlacementFailure when a fiber cannot be placed within the retry budget.
    """
    h, w = spec.canvas_size
    rng = np.random.default_rng(spec.rng_seed)
    rmin, rmax = spec.axon_radius_range

    fibers = []
    for _ in range(spec.n_axons):
        for _ in range(PLACEMENT_ATTEMPTS):
            radius = float(rng.uniform(rmin, rmax))
            outer = radius * (1.0 + spec.myelin_thickness_ratio)
            if 2 * outer >= min(h, w):
                continue  # cannot fit inside the canvas at all
            cy = float(rng.uniform(outer, h - 1 - outer))
            cx = float(rng.uniform(outer, w - 1 - outer))
            ok = all(
                math.hypot(cy - f.cy, cx - f.cx) >= outer + f.outer_radius + spec.min_separation
                for f in fibers
            )
            if ok:
                fibers.append(Fiber(cy=cy, cx=cx, radius=radius, outer_radius=outer))
                break
        else:
            raise PlacementFailure(
                f"placed {len(fibers)}/{spec.n_axons} fibers within "
                f"{PLACEMENT_ATTEMPTS} attempts each on a {h}x{w} canvas"
            )

    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    for f in fibers:
        dist = np.hypot(yy - f.cy, xx - f.cx)
        mask[dist <= f.outer_radius] = MYELIN
        mask[dist <= f.radius] = AXON
    return mask, FiberGeometry(fibers=fibers, canvas_size=(h, w))


def render(mask: np.ndarray, style: RenderStyle, seed: int) -> Image:
    """Flat class intensities, then blur, then clipped additive Gaussian noise."""
    if not np.isin(mask, (BACKGROUND, AXON, MYELIN)).all():
        raise ValueError("mask contains classes outside {0, 1, 2}")
    lut = np.array(
        [style.background_intensity, style.axon_intensity, style.myelin_intensity],
        dtype=np.float32,
    )
    img = lut[mask]
    if style.blur_sigma > 0:
        img = gaussian_filter(img, sigma=style.blur_sigma)
    if style.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, style.noise_sigma, size=img.shape).astype(np.float32)
    return Image(data=np.clip(img, 0.0, 1.0), pixel_size_um=style.pixel_size_um)


def fiber_area_pixels(mask: np.ndarray, geometry: FiberGeometry, fiber: Fiber):
    """Pixel counts of one fiber's axon core and myelin annulus."""
    h, w = geometry.canvas_size
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - fiber.cy, xx - fiber.cx)
    axon_px = int(np.sum((dist <= fiber.radius) & (mask == AXON)))
    myelin_px = int(np.sum((dist <= fiber.outer_radius) & (dist > fiber.radius) & (mask == MYELIN)))
    return axon_px, myelin_px


def _style_for(styles, index: int) -> RenderStyle:
    return styles[index % len(styles)]


def build_experiment(
    spec_L: PhantomSpec,
    styles_L,
    spec_U: PhantomSpec,
    styles_U,
    counts: dict,
    seed: int,
    out_dir,
):
    """Generates the labeled pool, the unlabeled pool and its sequestered truth.

    Returns (manifest_L, manifest_U). The U manifest carries no mask entries;
    its ground truth goes into a separate manifest referenced by
    ``truth_path`` and is only meant for evaluation. When the pixel sizes
    differ, labeled images and masks are resampled to the unlabeled pixel
    size before being written.
    """
    if min(counts.values()) < 2:
        raise ValueError("need at least 2 images per split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    target_px = _style_for(styles_U, 0).pixel_size_um
    splits = [(split, counts[split]) for split in ("train", "val")]

    l_entries = []
    index = 0
    for split, n in splits:
        for k in range(n):
            image_seed = seed + index  # per-image stream keeps generation parallelizable
            mask, _ = generate_phantom(replace(spec_L, rng_seed=image_seed))
            style = _style_for(styles_L, k)
            img = render(mask, style, seed=image_seed + 100_000)
            if style.pixel_size_um != target_px:
                img = resample_to_pixel_size(img, target_px)
                mask = resample_mask_to_pixel_size(mask, style.pixel_size_um, target_px)
            img_name = f"L_{split}_{k:03d}.png"
            mask_name = f"L_{split}_{k:03d}_mask.png"
            save_image_png(img, out_dir / img_name)
            save_mask_png(mask, out_dir / mask_name)
            l_entries.append(ManifestEntry(image=img_name, mask=mask_name, split=split))
            index += 1

    u_entries = []
    truth_entries = []
    for split, n in splits:
        for k in range(n):
            image_seed = seed + 1_000_000 + index
            mask, _ = generate_phantom(replace(spec_U, rng_seed=image_seed))
            style = _style_for(styles_U, k)
            img = render(mask, style, seed=image_seed + 100_000)
            img_name = f"U_{split}_{k:03d}.png"
            mask_name = f"U_{split}_{k:03d}_truth.png"
            save_image_png(img, out_dir / img_name)
            save_mask_png(mask, out_dir / mask_name)
            u_entries.append(ManifestEntry(image=img_name, mask=None, split=split))
            truth_entries.append(ManifestEntry(image=img_name, mask=mask_name, split=split))
            index += 1

    manifest_L = DatasetManifest(
        entries=l_entries, pixel_size_um=target_px, domain_tag="L", root=out_dir
    )
    truth_U = DatasetManifest(
        entries=truth_entries, pixel_size_um=target_px, domain_tag="U", root=out_dir
    )
    truth_name = "u_truth.json"
    truth_U.save(out_dir / truth_name)
    manifest_U = DatasetManifest(
        entries=u_entries,
        pixel_size_um=target_px,
        domain_tag="U",
        truth_path=truth_name,
        root=out_dir,
    )
    manifest_L.save(out_dir / "l_manifest.json")
    manifest_U.save(out_dir / "u_manifest.json")
    return manifest_L, manifest_U
