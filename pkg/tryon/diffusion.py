"""
Noise schedule, forward corruption, the epsilon-prediction loss and sampling.

Timesteps follow the 1-based convention t in [1, T]; schedule arrays are
0-based, so beta_t lives at `beta[t - 1]`.

"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Optional, Protocol, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("ancestral", "deterministic")

Timestep = Union[int, Tensor]


@dataclass
class DiffusionConfig:
    steps: int = 50
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "ancestral"

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("Diffusion needs at least one step")
        if self.sampler not in SAMPLING_MODES:
            raise ConfigError(f"Unknown sampler {self.sampler!r}")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed float64 noise arithmetic for T steps."""

    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor
    sigma: Tensor

    @property
    def T(self) -> int:  # noqa: N802
        return self.beta.shape[0]

    @classmethod
    def from_betas(cls, beta: Tensor) -> DiffusionSchedule:
        beta = beta.double()
        if beta.numel() < 1 or (beta <= 0).any() or (beta >= 1).any():
            raise ConfigError("Every beta must lie strictly within (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        # fixed (not learned) reverse variance sigma_t^2 = beta_t, none at t = 1
        sigma = beta.sqrt()
        sigma[0] = 0.0
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)

    def check(self, t: Union[int, Tensor]) -> None:
        t_min, t_max = (int(t.min()), int(t.max())) if isinstance(t, Tensor) else (t, t)
        if t_min < 1 or t_max > self.T:
            raise ConfigError(f"Timestep out of range [1, {self.T}]: {t_min}..{t_max}")

    def at(self, values: Tensor, t: Timestep, like: Tensor) -> Tensor:
        """Gather `values[t - 1]` and shape it to broadcast against `like` (batch first)."""
        self.check(t)
        if isinstance(t, Tensor) and t.dim() > 0:
            picked = values[t.long() - 1]
            return picked.reshape(-1, *([1] * (like.dim() - 1))).to(like)
        return values[int(t) - 1].to(like)


def make_schedule(
    T: int,  # noqa: N803
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    """Linear beta schedule from `beta_start` to `beta_end` across T steps."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if kind != "linear":
        raise ConfigError(f"Unknown schedule kind {kind!r}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return DiffusionSchedule.from_betas(beta)


def schedule_from_config(cfg: DiffusionConfig) -> DiffusionSchedule:
    cfg.validate()
    return make_schedule(cfg.steps, cfg.kind, cfg.beta_start, cfg.beta_end)


def q_step(z_prev: Tensor, t: Timestep, noise: Tensor, sched: DiffusionSchedule) -> Tensor:
    """One forward kernel step: sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise."""
    beta = sched.at(sched.beta, t, z_prev)
    return (1.0 - beta).sqrt() * z_prev + beta.sqrt() * noise


def q_sample(z0: Tensor, t: Timestep, noise: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Closed-form marginal: sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise."""
    alpha_bar = sched.at(sched.alpha_bar, t, z0)
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * noise


def predict_z0(z_t: Tensor, t: Timestep, eps: Tensor, sched: DiffusionSchedule) -> Tensor:
    """One-shot estimate of z0 from z_t and a noise prediction."""
    alpha_bar = sched.at(sched.alpha_bar, t, z_t)
    return (z_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()


class NoisePredictor(Protocol):
    def __call__(
        self, z_t: Tensor, t: Tensor, cond: Optional[Any] = None, garment: Optional[Any] = None
    ) -> Tensor:
        ...  # pragma: no cover


class NoiseOracle:
    """
    A perfect noise predictor for known clean latents `z0` (B, f, ...).

    Useful to check that the samplers and the long-video scheduler invert
    the forward process exactly.

    """

    def __init__(self, z0: Tensor, sched: DiffusionSchedule, codec: Any = None):
        self.z0 = z0
        self.sched = sched
        self.codec = codec

    def __call__(
        self, z_t: Tensor, t: Tensor, cond: Optional[Any] = None, garment: Optional[Any] = None
    ) -> Tensor:
        alpha_bar = self.sched.at(self.sched.alpha_bar, t, z_t)
        return (z_t - alpha_bar.sqrt() * self.z0.to(z_t)) / (1.0 - alpha_bar).sqrt()

    def windowed(self, frame_indices: Sequence[int]) -> NoiseOracle:
        return NoiseOracle(self.z0[:, list(frame_indices)], self.sched, self.codec)

    def prepare_garment(self, garment_latent: Tensor) -> Tensor:
        return garment_latent


def sample_timesteps(batch: int, sched: DiffusionSchedule, rng: torch.Generator) -> Tensor:
    return torch.randint(1, sched.T + 1, (batch,), generator=rng)


def training_loss(
    model: NoisePredictor,
    z0: Tensor,
    cond: Optional[Any],
    garment: Optional[Any],
    rng: torch.Generator,
    sched: DiffusionSchedule,
    t: Optional[Tensor] = None,
) -> Tensor:
    """
    Mean squared error between injected and predicted noise.

    t is drawn uniformly from [1, T] per batch element unless given; the noise
    is drawn from `rng`, so a fixed generator state gives a fixed loss.

    """
    if t is None:
        t = sample_timesteps(z0.shape[0], sched, rng)
    noise = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = q_sample(z0, t, noise, sched)
    return F.mse_loss(model(z_t, t, cond, garment), noise)


def p_step(
    z_t: Tensor,
    t: int,
    eps_pred: Tensor,
    sched: DiffusionSchedule,
    rng: Optional[torch.Generator] = None,
    deterministic: bool = False,
) -> Tensor:
    """
    One reverse step z_t -> z_{t-1}.

    mu = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(1 - beta_t); noise
    with std sigma_t is added unless `deterministic` or t = 1.

    """
    sched.check(t)
    beta = sched.at(sched.beta, t, z_t)
    alpha_bar = sched.at(sched.alpha_bar, t, z_t)
    mean = (z_t - beta / (1.0 - alpha_bar).sqrt() * eps_pred) / (1.0 - beta).sqrt()
    if deterministic or t == 1:
        return mean
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return mean + sched.at(sched.sigma, t, z_t) * noise


@torch.no_grad()
def sample_loop(
    model: NoisePredictor,
    shape: Tuple[int, ...],
    cond: Optional[Any],
    garment: Optional[Any],
    sched: DiffusionSchedule,
    rng: torch.Generator,
    mode: str = "ancestral",
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Run the T-step reverse process from pure noise and return the z0 estimate."""
    if mode not in SAMPLING_MODES:
        raise ConfigError(f"Unknown sampling mode {mode!r}")
    deterministic = mode == "deterministic"
    z = torch.randn(shape, generator=rng, dtype=dtype)
    for step in range(sched.T, 0, -1):
        t = torch.full((shape[0],), step, dtype=torch.long)
        eps = model(z, t, cond, garment)
        z = p_step(z, step, eps, sched, rng, deterministic=deterministic)
    return z
