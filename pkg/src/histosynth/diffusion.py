"""Few-step diffusion machinery: variance schedules, the forward noising
kernel, the DDPM Gaussian posterior, and the reverse sampler that predicts a
clean image and re-applies noise at every step.

All image tensors here live in [-1, 1]. Steps are 1-based: t runs over
1..T and alpha_bar_0 = 1, which makes the final reverse step (t=1)
deterministic.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidSchedule, ShapeMismatch, StepOutOfRange

MAX_TIMESTEPS = 7  # few-step regime: strictly fewer than 8 steps

DEFAULT_T = 4
DEFAULT_BETA_MIN = 0.1
DEFAULT_BETA_MAX = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha-bar sequences for T diffusion steps.

    ``alpha_bars`` has length T+1 and starts at alpha_bar_0 = 1 so that
    1-based step indices line up with the math.
    """

    T: int
    betas: tuple = field(repr=False)
    alphas: tuple = field(repr=False)
    alpha_bars: tuple = field(repr=False)

    def beta(self, t: int) -> float:
        return self.betas[t - 1]

    def alpha(self, t: int) -> float:
        return self.alphas[t - 1]

    def alpha_bar(self, t: int) -> float:
        return self.alpha_bars[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": list(self.betas)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return _build_schedule(int(d["T"]), [float(b) for b in d["betas"]])


def _build_schedule(T: int, betas) -> NoiseSchedule:
    betas = tuple(float(b) for b in betas)
    alphas = tuple(1.0 - b for b in betas)
    bars = [1.0]
    for a in alphas:
        bars.append(bars[-1] * a)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=tuple(bars))


def make_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
    kind: str = "linear",
) -> NoiseSchedule:
    """Linear beta schedule over T steps, restricted to the few-step regime."""
    if kind != "linear":
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")
    if not (1 <= T <= MAX_TIMESTEPS):
        raise InvalidSchedule(f"T must be in 1..{MAX_TIMESTEPS}, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, T)
    return _build_schedule(T, betas)


def _check_t(t, T: int):
    """Validates 1 <= t <= T for scalar or per-sample step indices."""
    if isinstance(t, torch.Tensor):
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > T:
            raise StepOutOfRange(f"steps must lie in 1..{T}, got {t.tolist()}")
    else:
        if not 1 <= int(t) <= T:
            raise StepOutOfRange(f"step must lie in 1..{T}, got {t}")


def _per_sample(values, t, like: torch.Tensor) -> torch.Tensor:
    """Looks up per-step scalars, broadcastable against an image batch.

    ``values`` is indexed by 1-based t when it has length T+1 (alpha-bars) or
    by t-1 when it has length T (betas/alphas); callers pass pre-offset
    sequences, so here we just gather with the given indices.
    """
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor):
        idx = t.long().reshape(-1)
        out = table[idx]
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t)]


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward kernel: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    _check_t(t, sched.T)
    abar = _per_sample(sched.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def posterior_params(x0: torch.Tensor, xt: torch.Tensor, t, sched: NoiseSchedule):
    """Gaussian posterior q(x_{t-1} | x_t, x0): returns (mean, variance).

    mean = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0
         + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
    var  = beta_t (1 - abar_{t-1}) / (1 - abar_t)

    At t=1 the variance is exactly 0 (alpha_bar_0 = 1), so the last reverse
    step is deterministic.
    """
    if x0.shape != xt.shape:
        raise ShapeMismatch(f"x0 shape {tuple(x0.shape)} != xt shape {tuple(xt.shape)}")
    _check_t(t, sched.T)
    if isinstance(t, torch.Tensor):
        beta_t = _per_sample(sched.betas, t - 1, x0)
        alpha_t = _per_sample(sched.alphas, t - 1, x0)
        abar_t = _per_sample(sched.alpha_bars, t, x0)
        abar_prev = _per_sample(sched.alpha_bars, t - 1, x0)
    else:
        t = int(t)
        beta_t = sched.beta(t)
        alpha_t = sched.alpha(t)
        abar_t = sched.alpha_bar(t)
        abar_prev = sched.alpha_bar(t - 1)
    coef_x0 = (abar_prev ** 0.5) * beta_t / (1.0 - abar_t)
    coef_xt = (alpha_t ** 0.5) * (1.0 - abar_prev) / (1.0 - abar_t)
    var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = coef_x0 * x0 + coef_xt * xt
    return mean, var


def posterior_sample(
    x0hat: torch.Tensor, xt: torch.Tensor, t, sched: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    """Draws x_{t-1} = mean + sqrt(var) * noise from the Gaussian posterior."""
    if noise.shape != xt.shape:
        raise ShapeMismatch(f"noise shape {tuple(noise.shape)} != xt shape {tuple(xt.shape)}")
    mean, var = posterior_params(x0hat, xt, t, sched)
    if isinstance(var, torch.Tensor):
        return mean + torch.sqrt(torch.clamp(var, min=0.0)) * noise
    return mean + (max(var, 0.0) ** 0.5) * noise


def reverse_translate(
    gen,
    y: torch.Tensor,
    sched: NoiseSchedule,
    z_source,
    noise_source,
) -> torch.Tensor:
    """Samples a translation by iterating predict-x0 / re-noise steps.

    ``gen(x_t, y, t, z)`` predicts the clean image from the noisy state and
    the conditioning image; ``z_source(batch_size)`` yields a fresh latent per
    step and ``noise_source(shape)`` yields standard-normal fields. Starts
    from pure noise and returns the final prediction clipped to [-1, 1].
    """
    batch = y.shape[0]
    x = noise_source(y.shape)
    for step in range(sched.T, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long, device=y.device)
        z = z_source(batch)
        x0hat = gen(x, y, t, z)
        noise = noise_source(y.shape)
        x = posterior_sample(x0hat, x, t, sched, noise)
    return torch.clamp(x, -1.0, 1.0)


def generator_sources(generator: torch.Generator, z_dim: int, dtype=torch.float32):
    """Builds (z_source, noise_source) closures over an explicit RNG."""

    def z_source(batch: int) -> torch.Tensor:
        return torch.randn(batch, z_dim, generator=generator, dtype=dtype)

    def noise_source(shape) -> torch.Tensor:
        return torch.randn(*shape, generator=generator, dtype=dtype)

    return z_source, noise_source
