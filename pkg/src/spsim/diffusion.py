"""Denoising-diffusion arithmetic shared by the reference and sharded paths.

A linear-beta schedule, the closed-form forward jump, the single reverse
step, and the noise-prediction training loss. All array code is plain
numpy in float64; schedules precompute the cumulative signal/noise split
once so every consumer sees identical constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise constants, indexed t=1..steps (position t-1).

    one_minus_alpha_bar is stored explicitly rather than recomputed as
    1 - alpha_bar: the subtraction is done once in full precision here so
    the signal-preservation identity alpha_bar + one_minus_alpha_bar == 1
    holds exactly in floating point for every consumer.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    one_minus_alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "one_minus_alpha_bars", 1.0 - alpha_bars)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing in t")

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def _idx(self, t: int) -> int:
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside 1..{self.steps}")
        return t - 1


def make_linear_schedule(
    steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Evenly spaced betas from beta_start to beta_end inclusive."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(betas)


def forward_step(x_prev: np.ndarray, beta_t: float, noise: np.ndarray) -> np.ndarray:
    """One forward noising step: x_t from x_{t-1} under variance beta_t."""
    if not 0.0 < beta_t < 1.0:
        raise ValueError(f"beta_t must lie in (0, 1), got {beta_t}")
    return np.sqrt(1.0 - beta_t) * x_prev + np.sqrt(beta_t) * noise


def q_sample(
    schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray
) -> np.ndarray:
    """Jump straight from clean data to x_t in closed form."""
    i = schedule._idx(t)
    ab = schedule.alpha_bars[i]
    omab = schedule.one_minus_alpha_bars[i]
    return np.sqrt(ab) * x0 + np.sqrt(omab) * noise


def exact_noise(
    schedule: NoiseSchedule, x0: np.ndarray, x_t: np.ndarray, t: int
) -> np.ndarray:
    """Invert q_sample: the unique noise that maps x0 to x_t at step t."""
    i = schedule._idx(t)
    ab = schedule.alpha_bars[i]
    omab = schedule.one_minus_alpha_bars[i]
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(omab)


def reverse_step(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    predicted_noise: np.ndarray,
    injected_noise: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral sampling step x_t -> x_{t-1}.

    Uses the beta_t * I posterior variance. At t == 1 the injected noise
    is suppressed so the chain terminates deterministically on its mean.
    """
    i = schedule._idx(t)
    beta = schedule.betas[i]
    alpha = schedule.alphas[i]
    omab = schedule.one_minus_alpha_bars[i]
    mean = (x_t - (beta / np.sqrt(omab)) * predicted_noise) / np.sqrt(alpha)
    if t == 1 or injected_noise is None:
        return mean
    return mean + np.sqrt(beta) * injected_noise


def ddpm_loss(predicted_noise: np.ndarray, true_noise: np.ndarray) -> float:
    """Mean squared error between predicted and actual noise, per element."""
    if predicted_noise.shape != true_noise.shape:
        raise ValueError(
            f"shape mismatch: {predicted_noise.shape} vs {true_noise.shape}"
        )
    diff = predicted_noise - true_noise
    return float(np.mean(diff * diff))


def sample_timestep(rng: SeededRng, steps: int) -> int:
    """Draw a training timestep uniformly from 1..steps."""
    return int(rng.integers(1, steps + 1)[()])
