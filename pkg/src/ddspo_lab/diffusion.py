"""Discrete-time VP noise schedule, forward noising and the DDPM ancestral sampler.

Points are float64 arrays with a trailing axis of size 2.  Every function
accepts either a single point ``(2,)`` or a batch ``(n, 2)``; step indices may
be a scalar or one index per row.

Convention: ``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` with
``abar_0 = 1`` so that ``t = 0`` is clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EpsFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False, compare=False)
    alphas_bar: np.ndarray = field(repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.num_steps

    def _padded(self) -> tuple[np.ndarray, np.ndarray]:
        # index 0 holds the clean-data convention
        return (np.concatenate([[0.0], self.betas]),
                np.concatenate([[1.0], self.alphas_bar]))

    def alpha_bar(self, t):
        t = self.check_step(t, allow_zero=True)
        return self._padded()[1][t]

    def beta(self, t):
        t = self.check_step(t)
        return self._padded()[0][t]

    def check_step(self, t, allow_zero: bool = False):
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.mod(arr, 1) == 0):
                raise ValueError(f"step index must be integral, got {t!r}")
            arr = arr.astype(np.int64)
        lo = 0 if allow_zero else 1
        if np.any(arr < lo) or np.any(arr > self.num_steps):
            raise ValueError(f"step index out of range [{lo}, {self.num_steps}]: {t!r}")
        return arr

    def to_dict(self) -> dict:
        return {"T": self.num_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` inclusive, with running products."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alphas_bar.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), betas, alphas_bar)


def default_schedule() -> NoiseSchedule:
    return build_linear_schedule(100, 1e-4, 0.05)


def _col(v):
    # broadcast per-row coefficients against the trailing point axis
    v = np.asarray(v, dtype=np.float64)
    return v[..., None] if v.ndim else v


def forward_diffuse(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    ab = _col(schedule.alpha_bar(t))
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def predict_x0_from_eps(schedule: NoiseSchedule, x_t, t, eps_hat) -> np.ndarray:
    ab = _col(schedule.alpha_bar(t))
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(ab)


def posterior_std(schedule: NoiseSchedule, t) -> np.ndarray:
    t = schedule.check_step(t)
    beta = schedule.beta(t)
    var = beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))
    return np.sqrt(var)


def ancestral_step(schedule: NoiseSchedule, eps_fn: EpsFn, x_t, t: int, c, noise) -> np.ndarray:
    """One reverse transition x_t -> x_{t-1}.

    The caller supplies ``noise``; it is ignored at ``t == 1`` so the last
    step returns the posterior mean.
    """
    t = int(schedule.check_step(t))
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_fn(x_t, t, c), dtype=np.float64)
    beta = schedule.betas[t - 1]
    ab = schedule.alphas_bar[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + posterior_std(schedule, t) * np.asarray(noise, dtype=np.float64)


def sample(schedule: NoiseSchedule, eps_fn: EpsFn, c, n: int, rng_seed: int) -> np.ndarray:
    """Run the full reverse chain from ``x_T ~ N(0, I)`` for ``n`` points.

    ``c`` is a single class id or one id per point.  ``n == 0`` returns an
    empty ``(0, 2)`` array.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros((0, 2))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((n, 2))
    for t in range(schedule.num_steps, 0, -1):
        noise = rng.standard_normal((n, 2)) if t > 1 else np.zeros((n, 2))
        x = ancestral_step(schedule, eps_fn, x, t, c, noise)
    return x


def sample_conditions(schedule: NoiseSchedule, eps_fn: EpsFn, classes, n_per_class: int,
                      rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n_per_class`` points for each class in one batched chain."""
    labels = np.repeat(np.asarray(classes, dtype=np.int64), n_per_class)
    return sample(schedule, eps_fn, labels, len(labels), rng_seed), labels


def gaussian_optimal_eps(schedule: NoiseSchedule, mean, std: float) -> EpsFn:
    """Bayes-optimal noise predictor for isotropic Gaussian data N(mean, std^2 I)."""
    mean = np.asarray(mean, dtype=np.float64)

    def eps_fn(x_t, t, c=None):
        ab = _col(schedule.alpha_bar(t))
        return (x_t - np.sqrt(ab) * mean) * np.sqrt(1.0 - ab) / (ab * std**2 + 1.0 - ab)

    return eps_fn


def gaussian_bayes_mse(schedule: NoiseSchedule, std: float, dim: int = 2) -> float:
    """Irreducible noise-prediction MSE for Gaussian data, averaged over uniform t."""
    ab = schedule.alphas_bar
    # Var(eps | x_t) per axis = 1 - (1 - ab) / (ab s^2 + 1 - ab)
    per_axis = ab * std**2 / (ab * std**2 + 1.0 - ab)
    return float(dim * per_axis.mean())
