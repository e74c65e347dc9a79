"""Image and mask containers, PNG/manifest serialization, resampling to a
target pixel size, and patch extraction.

Images are single-channel float arrays in [0, 1] with a pixel size in
micrometers per pixel. Masks are uint8 label maps over {0 background,
1 axon, 2 myelin}.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DegenerateSize, PatchTooLarge

MIN_RESAMPLED_DIM = 8

BACKGROUND, AXON, MYELIN = 0, 1, 2
MASK_CLASSES = (BACKGROUND, AXON, MYELIN)


@dataclass
class Image:
    """Single-channel intensity image in [0, 1] plus its physical pixel size."""

    data: np.ndarray
    pixel_size_um: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {self.data.shape}")
        if self.pixel_size_um <= 0:
            raise ValueError("pixel_size_um must be positive")

    @property
    def shape(self):
        return self.data.shape


def save_image_png(img: Image, path, bit_depth: int = 8):
    """Writes the image as 8- or 16-bit grayscale PNG."""
    path = Path(path)
    data = np.clip(img.data, 0.0, 1.0)
    if bit_depth == 8:
        arr = np.round(data * 255.0).astype(np.uint8)
        PILImage.fromarray(arr, mode="L").save(path)
    elif bit_depth == 16:
        arr = np.round(data * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


def load_image_png(path, pixel_size_um: float) -> Image:
    """Reads an 8- or 16-bit grayscale PNG back into [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        data = arr.astype(np.float32) / 65535.0
    else:
        raise ValueError(f"unsupported PNG dtype {arr.dtype}")
    return Image(data=data, pixel_size_um=pixel_size_um)


def save_mask_png(mask: np.ndarray, path):
    arr = np.asarray(mask)
    if not np.isin(arr, MASK_CLASSES).all():
        raise ValueError("mask contains classes outside {0, 1, 2}")
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(Path(path))


def load_mask_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im).astype(np.uint8)
    if not np.isin(arr, MASK_CLASSES).all():
        raise ValueError(f"mask file {path} contains classes outside {{0, 1, 2}}")
    return arr


@dataclass
class ManifestEntry:
    image: str
    mask: str = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """A list of image (and optional mask) files sharing one pixel size.

    ``split_tag`` is "all" for a combined manifest or "train"/"val" for a
    subset view. ``truth_path`` optionally points at the sequestered
    ground-truth manifest of an unlabeled pool.
    """

    entries: list
    pixel_size_um: float
    domain_tag: str
    split_tag: str = "all"
    truth_path: str = None
    root: Path = field(default=None, repr=False)

    def __post_init__(self):
        if self.root is not None:
            self.root = Path(self.root)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(
            entries=[e for e in self.entries if e.split == split],
            pixel_size_um=self.pixel_size_um,
            domain_tag=self.domain_tag,
            split_tag=split,
            truth_path=self.truth_path,
            root=self.root,
        )

    def image_path(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.image

    def mask_path(self, entry: ManifestEntry) -> Path:
        if entry.mask is None:
            return None
        return (self.root or Path(".")) / entry.mask

    def load_image(self, entry: ManifestEntry) -> Image:
        return load_image_png(self.image_path(entry), self.pixel_size_um)

    def load_mask(self, entry: ManifestEntry) -> np.ndarray:
        return load_mask_png(self.mask_path(entry))

    def has_masks(self) -> bool:
        return all(e.mask is not None for e in self.entries)

    def to_dict(self) -> dict:
        d = {
            "pixel_size_um": self.pixel_size_um,
            "domain_tag": self.domain_tag,
            "split_tag": self.split_tag,
            "entries": [
                {k: v for k, v in (("image", e.image), ("mask", e.mask), ("split", e.split)) if v is not None}
                for e in self.entries
            ],
        }
        if self.truth_path is not None:
            d["truth_path"] = self.truth_path
        return d

    def save(self, path):
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as f:
            d = json.load(f)
        entries = [
            ManifestEntry(image=e["image"], mask=e.get("mask"), split=e.get("split", "train"))
            for e in d["entries"]
        ]
        return cls(
            entries=entries,
            pixel_size_um=d["pixel_size_um"],
            domain_tag=d["domain_tag"],
            split_tag=d.get("split_tag", "all"),
            truth_path=d.get("truth_path"),
            root=path.parent,
        )


def _resampled_dims(shape, src: float, target: float):
    return tuple(int(round(dim * src / target)) for dim in shape)


def resample_to_pixel_size(img: Image, target_um_per_px: float) -> Image:
    """Bilinear resampling of an intensity image to a new pixel size."""
    if target_um_per_px <= 0:
        raise ValueError("target pixel size must be positive")
    new_h, new_w = _resampled_dims(img.shape, img.pixel_size_um, target_um_per_px)
    if new_h < MIN_RESAMPLED_DIM or new_w < MIN_RESAMPLED_DIM:
        raise DegenerateSize(
            f"resampling {img.shape} to {target_um_per_px} um/px gives {new_h}x{new_w}"
        )
    if (new_h, new_w) == img.shape:
        return Image(data=img.data.copy(), pixel_size_um=target_um_per_px)
    pil = PILImage.fromarray(img.data.astype(np.float32), mode="F")
    out = pil.resize((new_w, new_h), resample=PILImage.Resampling.BILINEAR)
    data = np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)
    return Image(data=data, pixel_size_um=target_um_per_px)


def resample_mask_to_pixel_size(mask: np.ndarray, src: float, target: float) -> np.ndarray:
    """Nearest-neighbor resampling of a label map (class set preserved)."""
    if target <= 0:
        raise ValueError("target pixel size must be positive")
    new_h, new_w = _resampled_dims(mask.shape, src, target)
    if new_h < MIN_RESAMPLED_DIM or new_w < MIN_RESAMPLED_DIM:
        raise DegenerateSize(
            f"resampling {mask.shape} to {target} um/px gives {new_h}x{new_w}"
        )
    if (new_h, new_w) == mask.shape:
        return mask.copy()
    pil = PILImage.fromarray(mask.astype(np.uint8), mode="L")
    out = pil.resize((new_w, new_h), resample=PILImage.Resampling.NEAREST)
    return np.asarray(out, dtype=np.uint8)


def _tile_starts(dim: int, size: int, stride: int):
    starts = list(range(0, dim - size + 1, stride))
    if starts[-1] != dim - size:
        starts.append(dim - size)  # edge-aligned final tile, no padding
    return starts


def extract_patches(img: Image, size: int, stride: int):
    """Row-major tiling with edge-aligned final row/column (full coverage)."""
    h, w = img.shape
    if size > h or size > w:
        raise PatchTooLarge(f"patch size {size} exceeds image dims {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    patches = []
    for i in _tile_starts(h, size, stride):
        for j in _tile_starts(w, size, stride):
            patches.append(
                Image(data=img.data[i : i + size, j : j + size].copy(), pixel_size_um=img.pixel_size_um)
            )
    return patches


def extract_mask_patches(mask: np.ndarray, size: int, stride: int):
    h, w = mask.shape
    if size > h or size > w:
        raise PatchTooLarge(f"patch size {size} exceeds mask dims {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [
        mask[i : i + size, j : j + size].copy()
        for i in _tile_starts(h, size, stride)
        for j in _tile_starts(w, size, stride)
    ]
