"""Variance schedule, forward noising, and x0-prediction reverse process.

The diffusion runs over flat 88-dim body-parameter vectors in z-scored
(standardized) space. The forward process is the standard Gaussian chain
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`` with a linear per-step
variance schedule; the reverse process consumes a denoiser that predicts
the clean sample ``z_t ~ x_0`` directly. Ancestral (stochastic) stepping
and deterministic strided sampling are both provided.

All math here is float64 numpy; neural-network evaluation happens inside
the caller-supplied denoise function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_TIMESTEPS = 100
DEFAULT_BETA_START = 1e-4
# Per-step variances scale with 1000/T so the total noise budget matches the
# usual 1000-step linear schedule, capped to stay well inside (0, 1).
_BETA_END_CAP = 0.2


def default_beta_end(timesteps: int) -> float:
    return min(0.02 * 1000.0 / timesteps, _BETA_END_CAP)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed noise tables: alpha_t = 1 - sigma_t^2 and cumulative products."""

    timesteps: int
    alpha: np.ndarray      # (T,)
    alpha_bar: np.ndarray  # (T,) cumulative products
    sigma: np.ndarray      # (T,) per-step noise std

    def __post_init__(self):
        a, ab = self.alpha, self.alpha_bar
        if a.shape != (self.timesteps,) or ab.shape != (self.timesteps,):
            raise ValueError("schedule tables must have length T")
        if np.any(a <= 0) or np.any(a >= 1):
            raise ValueError("alpha_t must lie strictly in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(ab - np.cumprod(a))) > 1e-12:
            raise ValueError("alpha_bar must equal the cumulative product of alpha")


def make_schedule(
    timesteps: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float | None = None,
) -> DiffusionSchedule:
    """Linear schedule of per-step variances from beta_start to beta_end."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if beta_end is None:
        beta_end = default_beta_end(timesteps)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(
        timesteps=timesteps,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        sigma=np.sqrt(beta),
    )


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Noise x0 directly to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.timesteps:
        raise ValueError(f"t must be in [0, {sched.timesteps}), got {t}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def _posterior_coeffs(t: int, sched: DiffusionSchedule) -> tuple[float, float]:
    if t < 1:
        raise ValueError("posterior requires t >= 1 (no step precedes t = 0)")
    if t >= sched.timesteps:
        raise ValueError(f"t must be < {sched.timesteps}, got {t}")
    a_t = sched.alpha[t]
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    c_z = np.sqrt(ab_prev) * (1.0 - a_t) / (1.0 - ab_t)
    c_x = np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c_z, c_x


def posterior_mean(z_t: np.ndarray, x_t: np.ndarray, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Reverse-transition mean given the predicted clean sample z_t."""
    c_z, c_x = _posterior_coeffs(t, sched)
    return c_z * np.asarray(z_t) + c_x * np.asarray(x_t)


def posterior_std(t: int, sched: DiffusionSchedule) -> float:
    """Posterior noise std: sqrt((1 - abar_{t-1}) / (1 - abar_t) * (1 - alpha_t))."""
    _posterior_coeffs(t, sched)  # validates t
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - sched.alpha[t])))


def ddpm_step(z_t, x_t, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; the final step (t = 1) adds no noise."""
    mu = posterior_mean(z_t, x_t, t, sched)
    if t == 1:
        return mu
    return mu + posterior_std(t, sched) * np.asarray(eps)


def ddim_timesteps(timesteps: int, n_steps: int) -> list[int]:
    """Uniform-stride descending subsequence starting at T - 1.

    With T = 100 and 5 steps this visits (99, 79, 59, 39, 19).
    """
    if not 1 <= n_steps <= timesteps:
        raise ValueError(f"n_steps must be in [1, {timesteps}], got {n_steps}")
    stride = timesteps // n_steps
    return [timesteps - 1 - i * stride for i in range(n_steps)]


def ddim_sample(
    denoise_fn: Callable[[np.ndarray, int], np.ndarray],
    n_steps: int,
    sched: DiffusionSchedule,
    seed: int = 0,
    batch_size: int = 1,
    dim: int = 88,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) strided sampling from seeded Gaussian noise.

    ``denoise_fn(x_t, t)`` must return the predicted clean sample for a
    (batch_size, dim) latent; any conditioning is closed over by the caller.
    ``x_init`` supplies the starting noise directly (callers that seed it
    per sample); otherwise it is drawn from ``seed``. Returns the final
    clean-sample prediction (batch_size, dim).
    """
    ts = ddim_timesteps(sched.timesteps, n_steps)
    if x_init is not None:
        x = np.array(x_init, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("x_init must be (batch, dim)")
    else:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch_size, dim))
    z = None
    for i, t in enumerate(ts):
        z = np.asarray(denoise_fn(x, t))
        if i + 1 == len(ts):
            break
        ab_t = sched.alpha_bar[t]
        ab_prev = sched.alpha_bar[ts[i + 1]]
        eps_hat = (x - np.sqrt(ab_t) * z) / np.sqrt(1.0 - ab_t)
        x = np.sqrt(ab_prev) * z + np.sqrt(1.0 - ab_prev) * eps_hat
    return z


STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LatentStandardizer:
    """Elementwise z-scoring of raw parameter vectors (std floored at 1e-6)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std",
                           np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR))

    @staticmethod
    def fit(samples: np.ndarray) -> "LatentStandardizer":
        """Per-dimension population statistics of a (N, D) sample matrix."""
        samples = np.asarray(samples, dtype=np.float64)
        return LatentStandardizer(mean=samples.mean(axis=0), std=samples.std(axis=0))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean
