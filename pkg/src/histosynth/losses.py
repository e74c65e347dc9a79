"""Adversarial and cycle-consistency training objectives.

Discriminators emit raw logits everywhere; the -log D terms are evaluated in
their numerically stable softplus forms:

    -log sigmoid(v)       = softplus(-v)
    -log(1 - sigmoid(v))  = softplus(v)

Patch-grid logits are averaged into scalars.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteInput, ShapeMismatch


@dataclass
class LossWeights:
    """Weights of the combined objectives (all >= 0).

    ``lambda_1_*`` scale the two cycle reconstruction terms, ``lambda_2_*``
    the two adversarial families, and ``lambda_gp`` the penalty applied to
    the diffusive discriminators. ``penalty_kind`` selects the R1 gradient
    penalty (default) or the squared-output penalty on real transitions.
    """

    lambda_1_phi: float = 10.0
    lambda_1_theta: float = 10.0
    lambda_2_phi: float = 1.0
    lambda_2_theta: float = 1.0
    lambda_gp: float = 0.5
    penalty_kind: str = "r1"

    def __post_init__(self):
        for name in ("lambda_1_phi", "lambda_1_theta", "lambda_2_phi", "lambda_2_theta", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.penalty_kind not in ("r1", "output_norm"):
            raise ValueError(f"penalty_kind must be 'r1' or 'output_norm', got {self.penalty_kind!r}")

    def to_dict(self) -> dict:
        return {
            "lambda_1_phi": self.lambda_1_phi,
            "lambda_1_theta": self.lambda_1_theta,
            "lambda_2_phi": self.lambda_2_phi,
            "lambda_2_theta": self.lambda_2_theta,
            "lambda_gp": self.lambda_gp,
            "penalty_kind": self.penalty_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class CycleBatch:
    """All tensors entering the cycle loss, one batch per domain.

    ``x_dot_*`` are the fast-generator round trips, ``x_tilde_*`` the
    diffusive reconstructions, ``y_tilde_*`` the cross-domain estimates that
    conditioned them.
    """

    x0_A: torch.Tensor
    x0_B: torch.Tensor
    y_tilde_A: torch.Tensor
    y_tilde_B: torch.Tensor
    x_dot_A: torch.Tensor
    x_dot_B: torch.Tensor
    x_tilde_A: torch.Tensor
    x_tilde_B: torch.Tensor

    def __post_init__(self):
        shape = self.x0_A.shape
        for name in ("x0_B", "y_tilde_A", "y_tilde_B", "x_dot_A", "x_dot_B", "x_tilde_A", "x_tilde_B"):
            t = getattr(self, name)
            if t.shape != shape:
                raise ShapeMismatch(f"{name} has shape {tuple(t.shape)}, expected {tuple(shape)}")


def _require_finite(name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise NonFiniteInput(f"{name} contains NaN or infinite values")


def g_nonsat(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: mean softplus(-logit) over the batch."""
    _require_finite("fake_logits", fake_logits)
    return F.softplus(-fake_logits).mean()


def d_nonsat(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: mean softplus(-real) + mean softplus(fake)."""
    _require_finite("real_logits", real_logits)
    _require_finite("fake_logits", fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def gradient_penalty(disc, real_prev: torch.Tensor, x_t: torch.Tensor, t, kind: str = "r1") -> torch.Tensor:
    """Penalty on the diffusive discriminator evaluated at real transitions.

    ``kind='r1'`` returns the mean squared L2 norm of d disc / d real_prev
    (gradients flow, so it can sit inside a training objective).
    ``kind='output_norm'`` returns the mean squared logit instead.
    """
    _require_finite("real_prev", real_prev)
    if kind == "output_norm":
        logits = disc(real_prev, x_t, t)
        return (logits ** 2).mean()
    if kind != "r1":
        raise ValueError(f"unknown penalty kind {kind!r}")
    x = real_prev.detach().requires_grad_(True)
    logits = disc(x, x_t, t)
    if not logits.requires_grad:  # output did not depend on the input
        return torch.zeros((), dtype=real_prev.dtype)
    grads = torch.autograd.grad(
        outputs=logits.sum(), inputs=x, create_graph=True, retain_graph=True,
        allow_unused=True,
    )[0]
    if grads is None:
        return torch.zeros((), dtype=real_prev.dtype)
    return grads.reshape(grads.shape[0], -1).pow(2).sum(dim=1).mean()


def cycle_loss(b: CycleBatch, w: LossWeights) -> torch.Tensor:
    """Weighted L1 reconstruction terms for both round trips and both domains."""
    phi_term = torch.mean(torch.abs(b.x0_A - b.x_dot_A)) + torch.mean(torch.abs(b.x0_B - b.x_dot_B))
    theta_term = torch.mean(torch.abs(b.x0_A - b.x_tilde_A)) + torch.mean(torch.abs(b.x0_B - b.x_tilde_B))
    return w.lambda_1_phi * phi_term + w.lambda_1_theta * theta_term


def _as_finite_tensor(name, value):
    t = torch.as_tensor(value, dtype=torch.float64) if not isinstance(value, torch.Tensor) else value
    _require_finite(name, t)
    return t


def total_G(adv_phi_A, adv_phi_B, adv_theta_A, adv_theta_B, cyc, w: LossWeights) -> torch.Tensor:
    """Full generator objective: cycle + weighted adversarial terms."""
    terms = [
        _as_finite_tensor(n, v)
        for n, v in [
            ("adv_phi_A", adv_phi_A),
            ("adv_phi_B", adv_phi_B),
            ("adv_theta_A", adv_theta_A),
            ("adv_theta_B", adv_theta_B),
            ("cyc", cyc),
        ]
    ]
    adv_phi_A, adv_phi_B, adv_theta_A, adv_theta_B, cyc = terms
    return (
        cyc
        + w.lambda_2_phi * (adv_phi_A + adv_phi_B)
        + w.lambda_2_theta * (adv_theta_A + adv_theta_B)
    )


def total_D(d_phi_A, d_phi_B, d_theta_A, d_theta_B, gp_terms, w: LossWeights) -> torch.Tensor:
    """Full discriminator objective; the penalty joins the diffusive block."""
    d_phi_A = _as_finite_tensor("d_phi_A", d_phi_A)
    d_phi_B = _as_finite_tensor("d_phi_B", d_phi_B)
    d_theta_A = _as_finite_tensor("d_theta_A", d_theta_A)
    d_theta_B = _as_finite_tensor("d_theta_B", d_theta_B)
    gp = sum(_as_finite_tensor("gp", g) for g in gp_terms) if gp_terms else 0.0
    return w.lambda_2_phi * (d_phi_A + d_phi_B) + w.lambda_2_theta * (
        d_theta_A + d_theta_B + w.lambda_gp * gp
    )
