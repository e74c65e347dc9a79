"""Small U-Net segmenter trained under k-fold cross-validation.

Stands in for a full auto-configured segmentation pipeline at phantom scale:
fixed architecture, cross-entropy plus soft-Dice loss, per-fold best
checkpoints, and fold-ensembled predictions for pseudo-label emission.
"""
import copy
import csv
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .errors import EmptyEnsemble, NonFiniteLoss, TooFewItems

N_CLASSES = 3  # background / axon / myelin
FOREGROUND_CLASSES = (1, 2)


@dataclass
class SegConfig:
    base_width: int = 16
    depth: int = 3
    n_classes: int = N_CLASSES
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    k_folds: int = 5

    def __post_init__(self):
        if self.n_classes != N_CLASSES:
            raise ValueError("this segmenter is fixed to 3 classes")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")

    def to_dict(self) -> dict:
        return {
            "base_width": self.base_width,
            "depth": self.depth,
            "n_classes": self.n_classes,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "k_folds": self.k_folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        return cls(**d)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        groups = 8 if out_ch % 8 == 0 else 1
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNet(nn.Module):
    """Plain U-Net with ``depth`` resolution levels and 3-class output."""

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        w, depth = config.base_width, config.depth
        widths = [w * (2 ** i) for i in range(depth)]
        self.pad_factor = 2 ** depth

        self.enc = nn.ModuleList()
        for i, ch in enumerate(widths):
            in_ch = 1 if i == 0 else widths[i - 1]
            self.enc.append(_ConvBlock(in_ch, ch))
        self.dec = nn.ModuleList()
        for i in range(depth - 2, -1, -1):
            self.dec.append(_ConvBlock(widths[i + 1] + widths[i], widths[i]))
        self.out_conv = nn.Conv2d(widths[0], config.n_classes, 1)

    def forward(self, x):
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < len(self.enc) - 1:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for block in self.dec:
            skip = skips.pop()
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return self.out_conv(h)


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - mean per-class soft Dice between softmax scores and one-hot targets.

    ``logits`` is (B, C, H, W); ``target`` is (B, H, W) integer labels.
    """
    n_classes = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * onehot).sum(dim=dims)
    cardinality = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice_per_class = (2 * intersection + smooth) / (cardinality + smooth)
    return 1.0 - dice_per_class.mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Equally weighted cross-entropy + soft-Dice compound loss."""
    return F.cross_entropy(logits, target.long()) + soft_dice_loss(logits, target)


@dataclass
class FoldResult:
    """Best checkpoint of one cross-validation fold."""

    fold_index: int
    best_epoch: int
    val_dice_axon: float
    val_dice_myelin: float
    state: dict = field(repr=False)
    config: SegConfig = None
    class_metrics: dict = field(default_factory=dict)  # cls -> {dice, sensitivity, specificity}

    def build_model(self) -> UNet:
        model = UNet(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def split_folds(dataset, k: int, seed: int):
    """Deterministic partition into k near-equal disjoint validation folds.

    ``dataset`` is a manifest, a sized collection, or an item count. The
    remainder after division spreads over the first folds. Returns a list of
    (train_indices, val_indices) pairs covering every index exactly once.
    """
    if hasattr(dataset, "entries"):
        n = len(dataset.entries)
    elif isinstance(dataset, int):
        n = dataset
    else:
        n = len(dataset)
    if n < k:
        raise TooFewItems(f"{n} items cannot be split into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = sorted(int(v) for v in order[start : start + size])
        train = sorted(int(v) for v in np.concatenate([order[:start], order[start + size :]]))
        folds.append((train, val))
        start += size
    return folds


def _pad_to_factor(x: torch.Tensor, factor: int):
    h, w = x.shape[-2:]
    ph = (factor - h % factor) % factor
    pw = (factor - w % factor) % factor
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode="reflect"), (h, w)


def predict_scores(model: UNet, img: np.ndarray) -> np.ndarray:
    """Per-class softmax score maps, shape (C, H, W)."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(img, dtype=np.float32))[None, None]
        x, (h, w) = _pad_to_factor(x, model.pad_factor)
        logits = model(x)[:, :, :h, :w]
        return torch.softmax(logits, dim=1)[0].numpy()


def predict(model: UNet, img: np.ndarray) -> np.ndarray:
    """Argmax segmentation mask with the same shape as the input image."""
    return predict_scores(model, img).argmax(axis=0).astype(np.uint8)


def ensemble_predict(fold_results, img: np.ndarray) -> np.ndarray:
    """Averages per-class score maps over fold models, then takes the argmax."""
    fold_results = list(fold_results)
    if not fold_results:
        raise EmptyEnsemble("no folds to ensemble")
    scores = None
    for fr in fold_results:
        model = fr.build_model() if isinstance(fr, FoldResult) else fr
        s = predict_scores(model, img)
        scores = s if scores is None else scores + s
    return (scores / len(fold_results)).argmax(axis=0).astype(np.uint8)


def _stack_items(items):
    imgs = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i, _ in items]))[:, None]
    masks = torch.from_numpy(np.stack([np.asarray(m, dtype=np.int64) for _, m in items]))
    return imgs, masks


def _val_dice(model: UNet, val_items):
    scores = {cls: [] for cls in FOREGROUND_CLASSES}
    for img, gt in val_items:
        pred = predict(model, img)
        for cls in FOREGROUND_CLASSES:
            scores[cls].append(metrics.dice(metrics.confusion(pred, gt, cls)))
    return {cls: float(np.mean(v)) for cls, v in scores.items()}


def train_fold(config: SegConfig, train_items, val_items, fold_index: int = 0) -> FoldResult:
    """Trains one fold and returns its best (by mean foreground Dice) checkpoint."""
    if not train_items or not val_items:
        raise TooFewItems("train and validation splits must be non-empty")
    torch.manual_seed(config.seed + 1000 * fold_index)
    model = UNet(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    imgs, masks = _stack_items(train_items)
    n = imgs.shape[0]
    shuffler = torch.Generator().manual_seed(config.seed + 1000 * fold_index + 1)

    best = {"epoch": -1, "score": -1.0, "state": None, "dice": None}
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffler)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = model(imgs[idx])
            loss = seg_loss(logits, masks[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"fold {fold_index} epoch {epoch}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        val = _val_dice(model, val_items)
        score = float(np.mean(list(val.values())))
        if score > best["score"]:
            best = {
                "epoch": epoch,
                "score": score,
                "state": copy.deepcopy(model.state_dict()),
                "dice": val,
            }

    model.load_state_dict(best["state"])
    class_metrics = {}
    for cls in FOREGROUND_CLASSES:
        per_image = {"dice": [], "sensitivity": [], "specificity": []}
        for img, gt in val_items:
            c = metrics.confusion(predict(model, img), gt, cls)
            per_image["dice"].append(metrics.dice(c))
            per_image["sensitivity"].append(metrics.sensitivity(c))
            per_image["specificity"].append(metrics.specificity(c))
        class_metrics[cls] = {k: float(np.mean(v)) for k, v in per_image.items()}

    return FoldResult(
        fold_index=fold_index,
        best_epoch=best["epoch"],
        val_dice_axon=best["dice"][1],
        val_dice_myelin=best["dice"][2],
        state=best["state"],
        config=config,
        class_metrics=class_metrics,
    )


def cross_validate(config: SegConfig, items):
    """Runs train_fold over every fold; aggregates Dice with population std.

    ``items`` is a list of (image, mask) arrays or a labeled manifest.
    Returns (fold_results, aggregates) where aggregates maps metric name to
    (mean, std) over folds.
    """
    items = _as_items(items)
    folds = split_folds(len(items), config.k_folds, config.seed)
    results = []
    for i, (train_idx, val_idx) in enumerate(folds):
        results.append(
            train_fold(config, [items[j] for j in train_idx], [items[j] for j in val_idx], fold_index=i)
        )
    aggregates = {
        "dice_axon": metrics.aggregate([r.val_dice_axon for r in results]),
        "dice_myelin": metrics.aggregate([r.val_dice_myelin for r in results]),
    }
    return results, aggregates


def _as_items(items):
    if hasattr(items, "entries"):
        manifest = items
        loaded = []
        for e in manifest.entries:
            img = manifest.load_image(e)
            loaded.append((img.data, manifest.load_mask(e)))
        return loaded
    return list(items)


CLASS_NAMES = {1: "axon", 2: "myelin"}


def save_fold(fold: FoldResult, path):
    torch.save(
        {
            "config": fold.config.to_dict(),
            "fold_index": fold.fold_index,
            "best_epoch": fold.best_epoch,
            "val_dice_axon": fold.val_dice_axon,
            "val_dice_myelin": fold.val_dice_myelin,
            "class_metrics": fold.class_metrics,
            "state": fold.state,
        },
        path,
    )


def load_fold(path) -> FoldResult:
    d = torch.load(path, weights_only=True)
    return FoldResult(
        fold_index=d["fold_index"],
        best_epoch=d["best_epoch"],
        val_dice_axon=d["val_dice_axon"],
        val_dice_myelin=d["val_dice_myelin"],
        state=d["state"],
        config=SegConfig.from_dict(d["config"]),
        class_metrics=d["class_metrics"],
    )


def write_cv_report(fold_results, path):
    """CSV rows: fold, class, dice, sensitivity, specificity, best_epoch.

    Spread across folds uses the population standard deviation.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold", "class", "dice", "sensitivity", "specificity", "best_epoch"])
        for r in fold_results:
            for cls in FOREGROUND_CLASSES:
                m = r.class_metrics[cls]
                writer.writerow(
                    [r.fold_index, CLASS_NAMES[cls], f"{m['dice']:.6f}",
                     f"{m['sensitivity']:.6f}", f"{m['specificity']:.6f}", r.best_epoch]
                )
