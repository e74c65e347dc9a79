import math

import pytest
import torch

from histosynth.errors import NonFiniteInput, ShapeMismatch
from histosynth.losses import (
    CycleBatch,
    LossWeights,
    cycle_loss,
    d_nonsat,
    g_nonsat,
    gradient_penalty,
    total_D,
    total_G,
)


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function, element by element."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x).item()
        flat[i] = orig - eps
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_close_rel(a: torch.Tensor, b: torch.Tensor, rtol=1e-3, atol=1e-6):
    assert torch.allclose(a, b, rtol=rtol, atol=atol), f"max diff {(a - b).abs().max()}"


def test_g_nonsat_hand_values():
    assert g_nonsat(torch.zeros(4)).item() == pytest.approx(math.log(2), abs=1e-7)
    assert g_nonsat(torch.zeros(4)).item() == pytest.approx(0.6931, abs=1e-4)
    assert g_nonsat(torch.full((3,), 40.0)).item() == pytest.approx(0.0, abs=1e-6)
    assert g_nonsat(torch.tensor([-2.0])).item() == pytest.approx(math.log(1 + math.e ** 2), abs=1e-6)
    assert g_nonsat(torch.tensor([-2.0])).item() == pytest.approx(2.1269, abs=1e-4)


def test_d_nonsat_hand_values():
    assert d_nonsat(torch.zeros(2), torch.zeros(2)).item() == pytest.approx(2 * math.log(2), abs=1e-7)
    assert d_nonsat(torch.zeros(2), torch.zeros(2)).item() == pytest.approx(1.3863, abs=1e-4)
    perfect = d_nonsat(torch.full((2,), 40.0), torch.full((2,), -40.0))
    assert perfect.item() == pytest.approx(0.0, abs=1e-6)


def test_d_nonsat_symmetric_terms():
    # real = c, fake = -c: both softplus terms evaluate to softplus(-c)
    for c in (0.5, 1.0, 3.0):
        real = torch.tensor([c])
        fake = torch.tensor([-c])
        term_real = torch.nn.functional.softplus(-real).mean()
        term_fake = torch.nn.functional.softplus(fake).mean()
        assert term_real.item() == pytest.approx(term_fake.item(), abs=1e-12)
        assert d_nonsat(real, fake).item() == pytest.approx(2 * term_real.item(), abs=1e-12)


def test_nonsat_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        g_nonsat(torch.tensor([float("nan")]))
    with pytest.raises(NonFiniteInput):
        d_nonsat(torch.tensor([float("inf")]), torch.zeros(1))


def test_g_nonsat_monotone_decreasing_in_logit():
    grid = torch.linspace(-5, 5, 21)
    values = [g_nonsat(v.reshape(1)).item() for v in grid]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_d_nonsat_monotonicity():
    grid = torch.linspace(-5, 5, 21)
    ref = torch.zeros(1)
    in_fake = [d_nonsat(ref, v.reshape(1)).item() for v in grid]
    assert all(a < b for a, b in zip(in_fake, in_fake[1:]))
    in_real = [d_nonsat(v.reshape(1), ref).item() for v in grid]
    assert all(a > b for a, b in zip(in_real, in_real[1:]))


def test_gradient_penalty_constant_disc_is_zero():
    def disc(x, x_t, t):
        return torch.ones(x.shape[0], dtype=x.dtype)

    x = torch.randn(4, 1, 8, 8, dtype=torch.float64)
    gp = gradient_penalty(disc, x, x, 1)
    assert gp.item() == pytest.approx(0.0, abs=1e-12)


def test_gradient_penalty_linear_disc_is_weight_norm():
    w = torch.randn(1, 8, 8, dtype=torch.float64)

    def disc(x, x_t, t):
        return (x * w).sum(dim=(1, 2, 3))

    x = torch.randn(4, 1, 8, 8, dtype=torch.float64)
    gp = gradient_penalty(disc, x, x, 1)
    assert gp.item() == pytest.approx((w ** 2).sum().item(), abs=1e-6)


def test_gradient_penalty_nonnegative():
    def disc(x, x_t, t):
        return torch.sin(x).sum(dim=(1, 2, 3))

    x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    assert gradient_penalty(disc, x, x, 2).item() >= 0.0


def test_gradient_penalty_output_norm_kind():
    def disc(x, x_t, t):
        return x.sum(dim=(1, 2, 3))

    x = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    gp = gradient_penalty(disc, x, x, 1, kind="output_norm")
    assert gp.item() == pytest.approx(16.0, abs=1e-12)  # mean of 4^2 over batch


def _cycle_batch(x0_A, x0_B, x_dot_A, x_dot_B, x_tilde_A, x_tilde_B):
    return CycleBatch(
        x0_A=x0_A,
        x0_B=x0_B,
        y_tilde_A=torch.zeros_like(x0_A),
        y_tilde_B=torch.zeros_like(x0_A),
        x_dot_A=x_dot_A,
        x_dot_B=x_dot_B,
        x_tilde_A=x_tilde_A,
        x_tilde_B=x_tilde_B,
    )


def test_cycle_loss_perfect_reconstruction_is_zero():
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    b = _cycle_batch(x, x.clone(), x.clone(), x.clone(), x.clone(), x.clone())
    assert cycle_loss(b, LossWeights()).item() == 0.0


def test_cycle_loss_hand_example_exact():
    # x_dot = x0 + 0.1 in both domains, x_tilde = x0, weights 10/10 -> 2.0
    # power-of-two pixel count keeps the float arithmetic exact
    x0 = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    b = _cycle_batch(x0, x0.clone(), x0 + 0.1, x0 + 0.1, x0.clone(), x0.clone())
    w = LossWeights(lambda_1_phi=10.0, lambda_1_theta=10.0)
    assert cycle_loss(b, w).item() == 2.0


def test_cycle_loss_phi_weight_linearity():
    rng = torch.Generator().manual_seed(3)
    x0 = torch.rand(2, 1, 4, 4, generator=rng, dtype=torch.float64)
    b = _cycle_batch(
        x0,
        torch.rand(2, 1, 4, 4, generator=rng, dtype=torch.float64),
        x0 + 0.3,
        torch.rand(2, 1, 4, 4, generator=rng, dtype=torch.float64),
        x0 - 0.2,
        torch.rand(2, 1, 4, 4, generator=rng, dtype=torch.float64),
    )
    theta_only = cycle_loss(b, LossWeights(lambda_1_phi=0.0, lambda_1_theta=10.0)).item()
    base = cycle_loss(b, LossWeights(lambda_1_phi=10.0, lambda_1_theta=10.0)).item()
    doubled = cycle_loss(b, LossWeights(lambda_1_phi=20.0, lambda_1_theta=10.0)).item()
    assert doubled - theta_only == pytest.approx(2 * (base - theta_only), rel=1e-12)


def test_cycle_batch_shape_mismatch():
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ShapeMismatch):
        _cycle_batch(x, x, x, x, x, torch.zeros(2, 1, 4, 5))


def test_total_G_hand_values():
    w = LossWeights(lambda_2_phi=1.0, lambda_2_theta=1.0)
    assert total_G(0.0, 0.0, 0.0, 0.0, 0.0, w).item() == 0.0
    adv = math.log(2)
    out = total_G(adv, adv, adv, adv, 2.0, w).item()
    assert out == pytest.approx(2.0 + 4 * adv, abs=1e-12)
    assert out == pytest.approx(4.7724, abs=2e-4)


def test_total_G_theta_weight_zero_drops_diffusive_terms():
    w = LossWeights(lambda_2_phi=1.0, lambda_2_theta=0.0)
    with_theta = total_G(0.5, 0.25, 7.0, 9.0, 1.0, w).item()
    phi_only = total_G(0.5, 0.25, 0.0, 0.0, 1.0, w).item()
    assert with_theta == phi_only


def test_total_D_hand_values():
    w = LossWeights(lambda_2_phi=1.0, lambda_2_theta=1.0)
    assert total_D(0.0, 0.0, 0.0, 0.0, [], w).item() == 0.0
    term = 2 * math.log(2)
    out = total_D(term, term, term, term, [0.0, 0.0], w).item()
    assert out == pytest.approx(4 * term, abs=1e-12)
    assert out == pytest.approx(5.5452, abs=2e-4)


def test_total_D_ignores_gp_when_weight_zero():
    w = LossWeights(lambda_gp=0.0)
    a = total_D(1.0, 1.0, 1.0, 1.0, [123.0], w).item()
    b = total_D(1.0, 1.0, 1.0, 1.0, [0.0], w).item()
    assert a == b


def test_losses_nonnegative_and_finite_on_random_inputs():
    rng = torch.Generator().manual_seed(11)
    for _ in range(10):
        fake = torch.randn(6, generator=rng)
        real = torch.randn(6, generator=rng)
        for value in (g_nonsat(fake), d_nonsat(real, fake)):
            assert torch.isfinite(value)
            assert value.item() >= 0.0


def test_g_nonsat_gradient_matches_finite_differences():
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    xg = x.clone().requires_grad_(True)
    g_nonsat(xg).backward()
    fd = fd_gradient(lambda v: g_nonsat(v), x.clone())
    assert_close_rel(xg.grad, fd)


def test_d_nonsat_gradient_matches_finite_differences():
    real = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    fake = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    rg = real.clone().requires_grad_(True)
    fg = fake.clone().requires_grad_(True)
    d_nonsat(rg, fg).backward()
    fd_real = fd_gradient(lambda v: d_nonsat(v, fake), real.clone())
    fd_fake = fd_gradient(lambda v: d_nonsat(real, v), fake.clone())
    assert_close_rel(rg.grad, fd_real)
    assert_close_rel(fg.grad, fd_fake)


def test_cycle_loss_gradient_matches_finite_differences():
    x0 = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    recon = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    w = LossWeights()

    def loss_of(r):
        b = _cycle_batch(x0, x0.clone(), r, x0.clone(), x0.clone(), x0.clone())
        return cycle_loss(b, w)

    rg = recon.clone().requires_grad_(True)
    loss_of(rg).backward()
    fd = fd_gradient(loss_of, recon.clone())
    assert_close_rel(rg.grad, fd)


def test_gradient_penalty_gradient_matches_finite_differences():
    # smooth nonlinear disc so the R1 penalty has a nontrivial second derivative
    def disc(x, x_t, t):
        return torch.sin(x).sum(dim=(1, 2, 3)) + (x ** 3).sum(dim=(1, 2, 3))

    x = 0.3 * torch.randn(1, 1, 8, 8, dtype=torch.float64)

    def penalty_of(v):
        return gradient_penalty(disc, v, v.detach(), 1)

    xg = x.clone().requires_grad_(True)
    logits_x = disc(xg, xg.detach(), 1)
    grads = torch.autograd.grad(logits_x.sum(), xg, create_graph=True)[0]
    penalty = grads.reshape(1, -1).pow(2).sum(dim=1).mean()
    penalty.backward()
    fd = fd_gradient(penalty_of, x.clone())
    assert_close_rel(xg.grad, fd)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_gp=-1.0)
    with pytest.raises(ValueError):
        LossWeights(penalty_kind="wgan")
    w = LossWeights()
    assert LossWeights.from_dict(w.to_dict()) == w
