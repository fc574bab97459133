"""Adversarial training in the latent code space (WGAN with gradient penalty)."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .autoencoder import ArchConfig
from .nn import (
    AdamState,
    ComponentParams,
    NonFiniteError,
    adam_update,
    grad,
    init_linear,
    init_residual_mlp,
    linear,
    residual_mlp,
)


@dataclass(frozen=True)
class GanPenaltyConfig:
    gp_lambda: float = 10.0
    n_critic: int = 5

    def __post_init__(self):
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be >= 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")


def init_code_generator(arch: ArchConfig, gen: torch.Generator, dtype=torch.float32) -> ComponentParams:
    t = init_linear("in.", arch.noise_dim, arch.hidden, gen, dtype)
    t.update(init_residual_mlp("mlp.", arch.hidden, arch.mlp_layers, gen, dtype))
    return ComponentParams("code_generator", t)


def init_code_discriminator(arch: ArchConfig, gen: torch.Generator, dtype=torch.float32) -> ComponentParams:
    t = init_residual_mlp("mlp.", arch.hidden, arch.mlp_layers, gen, dtype)
    t.update(init_linear("head.", arch.hidden, 1, gen, dtype))
    return ComponentParams("code_discriminator", t)


def _n_layers(params: ComponentParams) -> int:
    return sum(1 for name in params if name.startswith("mlp.W"))


def sample_noise(n: int, noise_dim: int, gen: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
    return torch.randn((n, noise_dim), generator=gen, dtype=dtype)


def generate_code(mu: torch.Tensor, theta: ComponentParams, slope: float = 0.2) -> torch.Tensor:
    """Synthetic codes: input projection of the noise, then the residual MLP."""
    return residual_mlp(linear(mu, theta, "in."), theta, "mlp.", _n_layers(theta), slope)


def critic(z: torch.Tensor, omega: ComponentParams, slope: float = 0.2) -> torch.Tensor:
    """Critic score per code, shape (N,)."""
    return linear(residual_mlp(z, omega, "mlp.", _n_layers(omega), slope), omega, "head.").squeeze(-1)


def interpolate(z: torch.Tensor, z_fake: torch.Tensor, t) -> torch.Tensor:
    """t * z_fake + (1 - t) * z, with t a scalar or one value per row."""
    if z.shape != z_fake.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_fake.shape)}")
    t = torch.as_tensor(t, dtype=z.dtype)
    if (t < 0).any() or (t > 1).any():
        raise ValueError("interpolation weight must lie in [0, 1]")
    if t.dim() == 1:
        t = t[:, None]
    return t * z_fake + (1.0 - t) * z


def gradient_penalty(
    z: torch.Tensor, z_fake: torch.Tensor, omega: ComponentParams, t: torch.Tensor, slope: float = 0.2
) -> torch.Tensor:
    """Per-sample (||grad_zhat D(zhat)|| - 1)^2, differentiable w.r.t. omega."""
    z_hat = interpolate(z.detach(), z_fake.detach(), t).requires_grad_(True)
    scores = critic(z_hat, omega, slope)
    (g,) = torch.autograd.grad(scores.sum(), z_hat, create_graph=True)
    return (g.norm(dim=1) - 1.0) ** 2


def disc_loss(
    z: torch.Tensor,
    z_fake: torch.Tensor,
    omega: ComponentParams,
    gp_lambda: float = 10.0,
    t: torch.Tensor | None = None,
    gen: torch.Generator | None = None,
    slope: float = 0.2,
) -> tuple[torch.Tensor, dict[str, float]]:
    """E[D(z_fake)] - E[D(z)] + lambda * E[(||grad D(z_hat)|| - 1)^2].

    One interpolation weight per sample, uniform on [0, 1] unless ``t`` is given.
    """
    if t is None:
        t = torch.rand(z.shape[0], generator=gen, dtype=z.dtype)
    fake_score = critic(z_fake.detach(), omega, slope).mean()
    real_score = critic(z.detach(), omega, slope).mean()
    penalty = gradient_penalty(z, z_fake, omega, t, slope).mean()
    loss = fake_score - real_score + gp_lambda * penalty
    if not torch.isfinite(loss):
        raise NonFiniteError("code_discriminator")
    return loss, {
        "critic_real": real_score.item(),
        "critic_fake": fake_score.item(),
        "penalty": penalty.item(),
    }


def gen_loss(z_fake: torch.Tensor, omega: ComponentParams, slope: float = 0.2) -> torch.Tensor:
    """-E[D(z_fake)]."""
    return -critic(z_fake, omega, slope).mean()


def code_gan_step(
    z_real: torch.Tensor,
    theta: ComponentParams,
    omega: ComponentParams,
    opt_theta: AdamState,
    opt_omega: AdamState,
    lr_theta: float,
    lr_omega: float,
    config: GanPenaltyConfig,
    gen: torch.Generator,
    slope: float = 0.2,
) -> dict[str, float]:
    """``n_critic`` critic updates, then one generator update.

    ``z_real`` are encoder codes; they are detached so the encoder is untouched.
    No gradient clipping here.
    """
    z_real = z_real.detach()
    n, noise_dim = z_real.shape[0], theta["in.W"].shape[0]
    stats: dict[str, float] = {}

    def critic_objective(w):
        loss, parts = disc_loss(z_real, z_fake, w, config.gp_lambda, t, slope=slope)
        stats.update(parts)
        return loss

    for _ in range(config.n_critic):
        with torch.no_grad():
            z_fake = generate_code(sample_noise(n, noise_dim, gen, z_real.dtype), theta, slope)
        t = torch.rand(n, generator=gen, dtype=z_real.dtype)
        loss, g = grad(critic_objective, omega)
        adam_update(omega, g, lr_omega, opt_omega)
    stats["L_omega"] = loss.item()

    mu = sample_noise(n, noise_dim, gen, z_real.dtype)
    loss_g, g = grad(lambda th: gen_loss(generate_code(mu, th, slope), omega, slope), theta)
    adam_update(theta, g, lr_theta, opt_theta)
    stats["L_theta"] = loss_g.item()
    return stats
