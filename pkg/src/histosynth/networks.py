"""Network architectures for the translation bundle, scaled to desk size.

Four module families:

* ``NonDiffusiveGenerator`` / ``NonDiffusiveDiscriminator`` — a ResNet
  generator with instance normalization and a patch discriminator producing
  the fast initial translation estimates.
* ``DiffusiveGenerator`` — a conditional U-Net predicting the clean image
  from (x_t, conditioning, t, z), with sinusoidal time embeddings, a latent
  mapping network, adaptive group normalization and self-attention at the
  lowest resolution.
* ``DiffusiveDiscriminator`` — a time-conditioned convolutional ResNet with
  a minibatch standard-deviation layer, judging (x_{t-1}, x_t) transitions.

All generators bound their output to [-1, 1] with tanh.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, ShapeMismatch

Z_DIM = 64


def count_parameters(net: nn.Module) -> int:
    """Exact number of trainable parameters."""
    return sum(p.numel() for p in net.parameters())


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal positional embedding of step indices, entries in [-1, 1].

    ``t`` is a (B,) tensor of 1-based steps; returns (B, dim).
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device)
        / max(half - 1, 1)
    )
    args = t.reshape(-1, 1).float() * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _as_step_tensor(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.reshape(-1).to(device)
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def _norm_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else math.gcd(channels, 8)


class AdaptiveGroupNorm(nn.Module):
    """Group normalization with per-sample scale/shift from a conditioning vector.

    With the projection zeroed this reduces exactly to plain (affine-free)
    group normalization.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels, affine=False)
        self.to_scale_shift = nn.Linear(cond_dim, 2 * channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        scale, shift = self.to_scale_shift(cond).chunk(2, dim=1)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


class ZMapping(nn.Module):
    """Small mapping network for the latent z (two affine layers)."""

    def __init__(self, z_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(z_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class TimeMapping(nn.Module):
    """Sinusoidal embedding followed by a two-layer projection."""

    def __init__(self, emb_dim: int, out_dim: int):
        super().__init__()
        self.emb_dim = emb_dim
        self.net = nn.Sequential(
            nn.Linear(emb_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor, dtype) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.emb_dim).to(dtype)
        return self.net(emb)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class CondResBlock(nn.Module):
    """Residual block with adaptive group normalization."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = AdaptiveGroupNorm(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = AdaptiveGroupNorm(out_ch, cond_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x, cond)))
        h = self.conv2(F.silu(self.norm2(h, cond)))
        return h + self.skip(x)


class ResnetBlockIN(nn.Module):
    """Plain residual block with instance normalization (fast generator)."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class NonDiffusiveGenerator(nn.Module):
    """ResNet translator: two stride-2 downsamples, residual trunk, upsampling.

    Total downsampling factor 4; input and output are single-channel images
    of identical spatial size, output in [-1, 1].
    """

    DOWNSAMPLE_FACTOR = 4

    def __init__(self, base_width: int = 32, n_res_blocks: int = 6):
        super().__init__()
        self.hparams = {"base_width": base_width, "n_res_blocks": n_res_blocks}
        w = base_width
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        )
        self.trunk = nn.Sequential(*[ResnetBlockIN(4 * w) for _ in range(n_res_blocks)])
        self.tail = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, 1, 7),
            nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        if h % self.DOWNSAMPLE_FACTOR or w % self.DOWNSAMPLE_FACTOR:
            raise ShapeMismatch(
                f"spatial dims {h}x{w} must be divisible by {self.DOWNSAMPLE_FACTOR}"
            )
        return self.tail(self.trunk(self.head(x)))


class NonDiffusiveDiscriminator(nn.Module):
    """Patch discriminator: a grid of real/fake logits, 4x smaller than the input."""

    def __init__(self, base_width: int = 32, n_layers: int = 3):
        super().__init__()
        self.hparams = {"base_width": base_width, "n_layers": n_layers}
        w = base_width
        layers = [nn.Conv2d(1, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = w
        for i in range(1, n_layers):
            nxt = min(ch * 2, 8 * w)
            stride = 2 if i == 1 else 1
            kernel = 4 if stride == 2 else 3
            layers += [
                nn.Conv2d(ch, nxt, kernel, stride=stride, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class DiffusiveGenerator(nn.Module):
    """Conditional U-Net predicting the clean image x0 from (x_t, y, t, z).

    x_t and the conditioning image are concatenated channelwise; (t, z) drive
    every adaptive group normalization. Self-attention runs at the lowest
    resolution level.
    """

    def __init__(
        self,
        base_width: int = 32,
        depth: int = 3,
        z_dim: int = Z_DIM,
        attention_levels: tuple = None,
    ):
        super().__init__()
        if attention_levels is None:
            attention_levels = (depth - 1,)
        self.hparams = {
            "base_width": base_width,
            "depth": depth,
            "z_dim": z_dim,
            "attention_levels": tuple(attention_levels),
        }
        self.depth = depth
        self.z_dim = z_dim
        self.downsample_factor = 2 ** (depth - 1)

        w = base_width
        cond_dim = 4 * w
        self.time_map = TimeMapping(2 * w, cond_dim)
        self.z_map = ZMapping(z_dim, cond_dim)

        widths = [w * (2 ** i) for i in range(depth)]
        self.in_conv = nn.Conv2d(2, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        for i, ch in enumerate(widths):
            in_ch = widths[max(i - 1, 0)] if i > 0 else widths[0]
            self.enc_blocks.append(CondResBlock(in_ch, ch, cond_dim))
            self.enc_attn.append(SelfAttention2d(ch) if i in attention_levels else nn.Identity())
            if i < depth - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = CondResBlock(widths[-1], widths[-1], cond_dim)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(depth - 2, -1, -1):
            self.ups.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.dec_blocks.append(CondResBlock(2 * widths[i], widths[i], cond_dim))

        self.out_norm = AdaptiveGroupNorm(widths[0], cond_dim)
        self.out_conv = nn.Conv2d(widths[0], 1, 3, padding=1)

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        if x_t.shape != y.shape:
            raise ShapeMismatch(
                f"x_t shape {tuple(x_t.shape)} != conditioning shape {tuple(y.shape)}"
            )
        if z.shape[-1] != self.z_dim:
            raise ShapeMismatch(f"z has dim {z.shape[-1]}, expected {self.z_dim}")
        _, _, h, w = x_t.shape
        if h % self.downsample_factor or w % self.downsample_factor:
            raise ShapeMismatch(
                f"spatial dims {h}x{w} must be divisible by {self.downsample_factor}"
            )
        t = _as_step_tensor(t, x_t.shape[0], x_t.device)
        cond = self.time_map(t, x_t.dtype) + self.z_map(z)

        h_ = self.in_conv(torch.cat([x_t, y], dim=1))
        skips = []
        for i in range(self.depth):
            h_ = self.enc_blocks[i](h_, cond)
            h_ = self.enc_attn[i](h_)
            skips.append(h_)
            if i < self.depth - 1:
                h_ = self.downs[i](h_)

        h_ = self.mid(h_, cond)

        for j, i in enumerate(range(self.depth - 2, -1, -1)):
            h_ = F.interpolate(h_, scale_factor=2, mode="nearest")
            h_ = self.ups[j](h_)
            h_ = self.dec_blocks[j](torch.cat([h_, skips[i]], dim=1), cond)

        out = self.out_conv(F.silu(self.out_norm(h_, cond)))
        return torch.tanh(out)


class MinibatchStd(nn.Module):
    """Appends a constant channel holding the mean per-feature batch std.

    Uses the population standard deviation, so duplicating the batch leaves
    the feature unchanged. Needs at least two samples.
    """

    eps = 1e-8

    def feature(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] < 2:
            raise BatchTooSmall("minibatch-std needs a batch of at least 2")
        var = x.var(dim=0, unbiased=False)
        return torch.sqrt(var + self.eps).mean()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stat = self.feature(x)
        chan = stat.expand(x.shape[0], 1, x.shape[2], x.shape[3])
        return torch.cat([x, chan], dim=1)


class DiscResBlock(nn.Module):
    """Time-conditioned residual block with downsampling for the discriminator."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, down: bool = True):
        super().__init__()
        self.norm1 = AdaptiveGroupNorm(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = AdaptiveGroupNorm(out_ch, cond_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)
        self.down = down

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.leaky_relu(self.norm1(x, cond), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, cond), 0.2))
        h = h + self.skip(x)
        if self.down:
            h = F.avg_pool2d(h, 2)
        return h


class DiffusiveDiscriminator(nn.Module):
    """Scores denoising transitions: forward takes (x_{t-1}, x_t, t).

    The two images are concatenated channelwise, every block is conditioned
    on the sinusoidal time embedding, and a minibatch standard-deviation
    layer precedes the final projection. Returns one logit per sample.
    """

    def __init__(self, base_width: int = 32, n_blocks: int = 2, minibatch_std: bool = True):
        super().__init__()
        self.hparams = {
            "base_width": base_width,
            "n_blocks": n_blocks,
            "minibatch_std": minibatch_std,
        }
        w = base_width
        cond_dim = 4 * w
        self.time_map = TimeMapping(2 * w, cond_dim)
        self.in_conv = nn.Conv2d(2, w, 3, padding=1)
        self.blocks = nn.ModuleList(
            [DiscResBlock(w * (2 ** i), w * (2 ** (i + 1)), cond_dim) for i in range(n_blocks)]
        )
        top = w * (2 ** n_blocks)
        self.mb_std = MinibatchStd() if minibatch_std else None
        self.final_conv = nn.Conv2d(top + (1 if minibatch_std else 0), top, 3, padding=1)
        self.fc = nn.Linear(top, 1)

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        if x_prev.shape != x_t.shape:
            raise ShapeMismatch(
                f"x_prev shape {tuple(x_prev.shape)} != x_t shape {tuple(x_t.shape)}"
            )
        if self.mb_std is not None and x_prev.shape[0] < 2:
            raise BatchTooSmall("diffusive discriminator needs batch >= 2 with minibatch-std on")
        t = _as_step_tensor(t, x_prev.shape[0], x_prev.device)
        cond = self.time_map(t, x_prev.dtype)
        h = self.in_conv(torch.cat([x_prev, x_t], dim=1))
        for block in self.blocks:
            h = block(h, cond)
        if self.mb_std is not None:
            h = self.mb_std(h)
        h = F.leaky_relu(self.final_conv(h), 0.2)
        h = h.mean(dim=(2, 3))
        return self.fc(h).squeeze(1)
