import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from tripletgen.diffusion import (Denoiser, DenoiserConfig, NoiseSchedule, build_schedule, denoise_loss,
                                  denoise_terms, estimate_z0, forward_diffuse, generate_triplet_latents,
                                  reverse_mean, sample_step, timestep_embedding)
from tripletgen.errors import ConfigError, ShapeError

from _tiny import COND_DIM, COND_LEN, LATENT, SCHEDULE, flat_params, fd_check, losses, tiny_batch, tiny_models


def test_linear_schedule_oracle():
    s = build_schedule("linear", 200, 1e-4, 0.02)
    beta = [1e-4 + (0.02 - 1e-4) * k / 199 for k in range(200)]
    ab, prod = [], 1.0
    for b in beta:
        prod *= 1 - b
        ab.append(prod)
    np.testing.assert_allclose(s.beta, beta, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bar, ab, rtol=1e-12)
    assert s.alpha_bar_at(0) == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_default_schedule_reaches_noise():
    assert build_schedule().alpha_bar[-1] < 0.01
    assert SCHEDULE.alpha_bar[-1] < 0.5
    assert build_schedule("linear", 50, 1e-3, 0.2).alpha_bar[-1] < 0.01


def test_cosine_schedule_is_valid():
    s = build_schedule("cosine", 100, 1e-4, 0.999 - 1e-9)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("kw", [dict(T_steps=0), dict(beta_min=0.0), dict(beta_min=0.1, beta_max=0.05),
                                dict(beta_max=1.0), dict(kind="sqrt"), dict(variance="learned")])
def test_schedule_errors(kw):
    with pytest.raises(ConfigError):
        build_schedule(**kw)


def test_schedule_rejects_bad_beta():
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array([0.1, 1.0]), np.zeros(2))


def test_timestep_bounds():
    z = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    with pytest.raises(ConfigError):
        forward_diffuse(z, SCHEDULE.T + 1, z, SCHEDULE)
    with pytest.raises(ConfigError):
        reverse_mean(z, z, 0, SCHEDULE)
    with pytest.raises(ShapeError):
        forward_diffuse(z, 1, torch.zeros(1, 3, 2, 1, dtype=torch.float64), SCHEDULE)


def _rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_forward_edge_cases():
    z0, eps = _rand((5, 6, 4, 4), 0), _rand((5, 6, 4, 4), 1)
    assert torch.equal(forward_diffuse(z0, 0, eps, SCHEDULE), z0)
    s = build_schedule("linear", 200, 1e-4, 0.05)
    zT = forward_diffuse(z0, s.T, eps, s)
    ab = s.alpha_bar[-1]
    assert (zT - eps).abs().max().item() <= math.sqrt(ab) * z0.abs().max().item() + (1 - math.sqrt(1 - ab)) * eps.abs().max().item() + 1e-12


def test_closed_form_identities():
    s = build_schedule("linear", 200, 1e-4, 0.05)
    z0, eps = _rand((8, 6, 4, 4), 2), _rand((8, 6, 4, 4), 3)
    for t in (1, 2, 50, 137, 200):
        zt = forward_diffuse(z0, t, eps, s)
        # one-step estimate with the true noise recovers z0
        assert (estimate_z0(zt, eps, t, s) - z0).abs().max().item() < 1e-9
        # reverse mean with the true noise equals the Gaussian posterior mean
        ab, ab_prev, a, b = s.alpha_bar_at(t), s.alpha_bar_at(t - 1), s.alpha[t - 1], s.beta[t - 1]
        post = (math.sqrt(ab_prev) * b / (1 - ab)) * z0 + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * zt
        assert (reverse_mean(zt, eps, t, s) - post).abs().max().item() < 1e-9
    # at t = 1 the posterior mean is exactly z0
    zt = forward_diffuse(z0, 1, eps, s)
    assert (reverse_mean(zt, eps, 1, s) - z0).abs().max().item() < 1e-9


def test_per_item_timesteps():
    z0, eps = _rand((3, 6, 2, 2), 4), _rand((3, 6, 2, 2), 5)
    t = torch.tensor([1, 5, 10])
    batched = forward_diffuse(z0, t, eps, SCHEDULE)
    for i in range(3):
        assert torch.allclose(batched[i], forward_diffuse(z0[i:i + 1], int(t[i]), eps[i:i + 1], SCHEDULE)[0])


class OracleDenoiser(nn.Module):
    """Recovers the exact noise from z_t given the clean latent."""

    def __init__(self, z0, schedule):
        super().__init__()
        self.z0, self.schedule = z0, schedule

    def forward(self, z_t, cond, pad, t):
        ab = self.schedule.coef("alpha_bar", t, z_t)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class ZeroDenoiser(nn.Module):
    def forward(self, z_t, cond, pad, t):
        return torch.zeros_like(z_t)


def test_oracle_denoiser_has_zero_loss():
    z0 = _rand((16, 3, 2, 2), 6)
    cond = torch.zeros(16, 1, 4, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    loss = denoise_loss(OracleDenoiser(z0, SCHEDULE), z0, cond, None, SCHEDULE, g)
    assert loss.item() < 1e-18


def test_zero_denoiser_loss_expectation():
    D = 3 * 2 * 2
    z0 = _rand((4096, 3, 2, 2), 7)
    cond = torch.zeros(4096, 1, 4, dtype=torch.float64)
    loss = denoise_loss(ZeroDenoiser(), z0, cond, None, SCHEDULE, torch.Generator().manual_seed(1)).item()
    # E||eps||^2 = D, sd of the batch mean = sqrt(2D / B)
    assert abs(loss - D) < 4 * math.sqrt(2 * D / 4096)


def test_loss_matches_manual_computation():
    den, _ = tiny_models()
    z0, cond, pad, t, eps = tiny_batch()
    terms = denoise_terms(den, z0, cond, pad, SCHEDULE, None, t=t, eps=eps)
    manual = 0.0
    for i in range(len(z0)):
        zt = forward_diffuse(z0[i:i + 1], int(t[i]), eps[i:i + 1], SCHEDULE)
        e = den(zt, cond[i:i + 1], pad[i:i + 1], t[i:i + 1])
        manual += ((e - eps[i:i + 1]) ** 2).sum().item()
    assert abs(terms.loss.item() - manual / len(z0)) < 1e-12


def test_empty_batch_is_config_error():
    den, _ = tiny_models()
    with pytest.raises(ConfigError):
        denoise_loss(den, torch.zeros(0, *LATENT, dtype=torch.float64),
                     torch.zeros(0, COND_LEN, COND_DIM, dtype=torch.float64), None, SCHEDULE, None)


def test_denoise_gradient_matches_finite_differences():
    den, adapters = tiny_models()
    params = flat_params([den])
    assert sum(p.numel() for p in params) + sum(p.numel() for p in adapters.parameters()) <= 500
    batch = tiny_batch()
    assert fd_check(lambda: losses(den, adapters, batch)[0], params, n_probes=30) < 1e-4


def test_denoiser_shapes_and_errors():
    den, _ = tiny_models()
    z0, cond, pad, t, _ = tiny_batch()
    assert den(z0, cond, pad, t).shape == z0.shape
    assert den(z0, cond[:, :2], pad[:, :2], 3).shape == z0.shape
    with pytest.raises(ShapeError):
        den(z0[:, :2], cond, pad, t)
    with pytest.raises(ShapeError):
        den(z0, torch.zeros(4, COND_LEN + 1, COND_DIM, dtype=torch.float64), None, t)
    with pytest.raises(ConfigError):
        Denoiser(LATENT, 4, 3, DenoiserConfig(width=6, heads=4))


def test_padding_is_ignored():
    den, _ = tiny_models()
    z0, cond, pad, t, _ = tiny_batch()
    pad = torch.zeros_like(pad)
    pad[:, -1] = True
    other = cond.clone()
    other[:, -1] = 100.0
    assert torch.allclose(den(z0, cond, pad, t), den(z0, other, pad, t), atol=1e-12)


def test_condition_order_matters_only_with_positions():
    torch.manual_seed(0)
    z0, cond, _, t, _ = tiny_batch()
    perm = torch.tensor([2, 0, 1])
    plain = Denoiser(LATENT, COND_DIM, COND_LEN, DenoiserConfig(4, 1, 2, 1, positional=False)).double()
    assert torch.allclose(plain(z0, cond, None, t), plain(z0, cond[:, perm], None, t), atol=1e-12)
    torch.manual_seed(0)
    pos = Denoiser(LATENT, COND_DIM, COND_LEN, DenoiserConfig(4, 1, 2, 1, positional=True)).double()
    with torch.no_grad():
        pos.cond_pos.normal_()
    assert not torch.allclose(pos(z0, cond, None, t), pos(z0, cond[:, perm], None, t), atol=1e-6)


def test_timestep_embedding():
    e = timestep_embedding(torch.tensor([0, 1, 50]), 9)
    assert e.shape == (3, 9)
    assert torch.all(e[:, -1] == 0)
    assert not torch.allclose(e[1], e[2])


def test_zero_variance_sampling_is_deterministic():
    den, _ = tiny_models()
    s = build_schedule("linear", 10, 1e-3, 0.2, variance="zero")
    _, cond, pad, _, _ = tiny_batch()
    zT = _rand((4, *LATENT), 9)
    a, _ = generate_triplet_latents(den, cond, pad, s, torch.Generator().manual_seed(0), z_T=zT)
    b, _ = generate_triplet_latents(den, cond, pad, s, torch.Generator().manual_seed(99), z_T=zT)
    assert torch.equal(a, b)


def test_sampling_reproducible_and_split():
    den, _ = tiny_models()
    _, cond, pad, _, _ = tiny_batch()
    a, parts = generate_triplet_latents(den, cond, pad, SCHEDULE, torch.Generator().manual_seed(3))
    b, _ = generate_triplet_latents(den, cond, pad, SCHEDULE, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    assert [p.shape[1] for p in parts] == [1, 1, 1]
    assert torch.equal(torch.cat(parts, 1), a)


def test_last_step_adds_no_noise():
    den, _ = tiny_models()
    _, cond, pad, _, _ = tiny_batch()
    z = _rand((4, *LATENT), 10)
    a = sample_step(den, z, cond, pad, 1, SCHEDULE, torch.Generator().manual_seed(0))
    b = sample_step(den, z, cond, pad, 1, SCHEDULE, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    with pytest.raises(ConfigError):
        sample_step(den, z, cond, pad, 0, SCHEDULE, None)


class ToyMLP(nn.Module):
    def __init__(self, dim=3, hidden=64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim + 16, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                                 nn.Linear(hidden, dim))
        self.latent_shape = (dim, 1, 1)

    def forward(self, z_t, cond, pad, t):
        t = torch.as_tensor(t).expand(z_t.shape[0])
        h = torch.cat([z_t.flatten(1), timestep_embedding(t, 16, z_t.dtype)], 1)
        return self.net(h).view_as(z_t)


def test_two_point_toy_recovers_modes():
    """A toy denoiser trained on the points {-1, +1}^3 (two atoms) samples both with equal mass."""
    torch.manual_seed(0)
    s = build_schedule("linear", 50, 1e-3, 0.2)
    model = ToyMLP()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(0)
    cond = torch.zeros(256, 1, 1)
    for _ in range(1500):
        sign = torch.randint(0, 2, (256, 1, 1, 1), generator=g).float() * 2 - 1
        z0 = sign.expand(256, 3, 1, 1)
        loss = denoise_loss(model, z0, cond, None, s, g)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        z, _ = generate_triplet_latents(model, torch.zeros(2000, 1, 1), None, s, torch.Generator().manual_seed(1))
    m = z.flatten(1).mean(1)
    near = ((m - 1).abs() < 0.3) | ((m + 1).abs() < 0.3)
    assert near.float().mean() > 0.9
    assert abs((m > 0).float().mean().item() - 0.5) <= 0.05
