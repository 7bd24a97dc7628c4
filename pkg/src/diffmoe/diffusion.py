"""Forward noising process, denoising objectives, and DDPM/DDIM samplers.

Timesteps are 1-based integers in [1, T]. A mixture of per-interval experts
is sampled by dispatching each visited timestep to the expert whose interval
contains it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray        # beta_t, index t-1
    alpha: np.ndarray       # 1 - beta_t
    alpha_bar: np.ndarray   # cumulative product of alpha

    def abar(self, t):
        """alpha_bar at timestep t (array or scalar); t=0 maps to 1."""
        t = np.asarray(t, dtype=np.int64)
        ext = np.concatenate([[1.0], self.alpha_bar])
        return ext[t]


def make_schedule(timesteps: int, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule. Defaults are the 1000-step values scaled by 1000/T
    for the desk-scale T=100 so the terminal noise level stays comparable."""
    if timesteps < 2:
        raise ValueError("schedule needs at least 2 timesteps")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] >= 0.05:
        warnings.warn(
            f"terminal alpha_bar {alpha_bar[-1]:.4f} >= 0.05; "
            "samples will start far from pure noise",
            stacklevel=2,
        )
    return NoiseSchedule(T=timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class IntervalPartition:
    """Contiguous cover of [1, T] by closed integer intervals."""

    timesteps: int
    intervals: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ivs = tuple((int(lo), int(hi)) for lo, hi in self.intervals)
        object.__setattr__(self, "intervals", ivs)
        if not ivs:
            raise ValueError("partition needs at least one interval")
        if ivs[0][0] != 1 or ivs[-1][1] != self.timesteps:
            raise ValueError(f"intervals must cover [1, {self.timesteps}]: {ivs}")
        for (lo, hi), (lo2, _) in zip(ivs, ivs[1:]):
            if hi + 1 != lo2:
                raise ValueError(f"intervals must be contiguous and disjoint: {ivs}")
        for lo, hi in ivs:
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")

    @classmethod
    def from_cuts(cls, cuts, timesteps: int) -> "IntervalPartition":
        """Cut timesteps t_1 < ... < t_C; interval i ends at t_i (inclusive)."""
        bounds = [0] + [int(c) for c in cuts] + [timesteps]
        ivs = [(lo + 1, hi) for lo, hi in zip(bounds, bounds[1:])]
        return cls(timesteps=timesteps, intervals=tuple(ivs))

    @property
    def cuts(self) -> list[int]:
        return [hi for _, hi in self.intervals[:-1]]

    @property
    def sizes(self) -> list[int]:
        return [hi - lo + 1 for lo, hi in self.intervals]

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.sizes, dtype=np.float64) / self.timesteps

    def expert_for(self, t: int) -> int:
        for i, (lo, hi) in enumerate(self.intervals):
            if lo <= t <= hi:
                return i
        raise AssertionError(f"timestep {t} not covered by {self.intervals}")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise x0 to level t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t may be a scalar or a per-sample array aligned with the batch axis.
    """
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    if t.ndim > 0:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def denoise_loss(model, batch: np.ndarray, t: np.ndarray, eps: np.ndarray,
                 sched: NoiseSchedule, cond=None, masks=None) -> Tensor:
    """Mean over the batch of ||eps_hat(x_t, t) - eps||^2 at given (t, eps)."""
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    x_t = q_sample(batch, t, eps, sched)
    pred = model.forward(Tensor(x_t), t, cond=cond, masks=masks)
    diff = T.sub(pred, Tensor(eps))
    return T.scale(T.tsum(T.square(diff)), 1.0 / batch.shape[0])


def interval_loss(model, batch: np.ndarray, interval, sched: NoiseSchedule,
                  rng: Rng, cond=None, masks=None) -> Tensor:
    """Denoising objective restricted to t ~ Uniform[lo, hi]."""
    lo, hi = int(interval[0]), int(interval[1])
    if not (1 <= lo <= hi <= sched.T):
        raise ValueError(f"invalid interval [{lo}, {hi}] for T={sched.T}")
    B = batch.shape[0]
    t = rng.integers(lo, hi + 1, (B,))
    eps = rng.normal(batch.shape)
    return denoise_loss(model, batch, t, eps, sched, cond=cond, masks=masks)


def ddpm_loss(model, batch: np.ndarray, sched: NoiseSchedule, rng: Rng,
              cond=None, masks=None) -> Tensor:
    """Global objective: t ~ Uniform[1, T]."""
    return interval_loss(model, batch, (1, sched.T), sched, rng, cond=cond, masks=masks)


def _predict(model, x: np.ndarray, t: int, cond) -> np.ndarray:
    tvec = np.full(x.shape[0], t, dtype=np.int64)
    return model.predict(x, tvec, cond=cond)


def ddpm_step(model, x_t: np.ndarray, t: int, sched: NoiseSchedule,
              rng: Rng, cond=None) -> np.ndarray:
    """One ancestral step; sigma_t^2 = beta_t, no noise at t=1."""
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} out of range")
    eps_hat = _predict(model, x_t, t, cond)
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * rng.normal(x_t.shape)


def ddim_step(model, x_t: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule, cond=None) -> np.ndarray:
    """Deterministic (eta=0) update via the predicted x0."""
    if not (0 <= t_prev <= t <= sched.T) or t < 1:
        raise ValueError(f"invalid step ordering t={t}, t_prev={t_prev}")
    eps_hat = _predict(model, x_t, t, cond)
    ab_t = float(sched.abar(t))
    ab_p = float(sched.abar(t_prev))
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced (linear) visited subsequence, descending from T."""
    if not (1 <= steps <= timesteps):
        raise ValueError(f"steps must be in [1, {timesteps}]")
    stride = timesteps // steps
    return [timesteps - k * stride for k in range(steps)]


def sample_mixture(experts: list, partition: IntervalPartition, sampler: str,
                   steps: int, n: int, data_shape: tuple, sched: NoiseSchedule,
                   rng: Rng, cond=None):
    """Generate n samples, dispatching each visited timestep to its expert.

    Returns (samples, per-expert step counts).
    """
    if len(experts) != len(partition.intervals):
        raise ValueError("one expert per interval required")
    if partition.timesteps != sched.T:
        raise ValueError("partition and schedule disagree on T")
    x = rng.normal((n,) + tuple(data_shape))
    counts = [0] * len(experts)

    if sampler == "ddpm":
        if steps != sched.T:
            raise ValueError("ddpm sampler visits every timestep; set steps=T")
        for t in range(sched.T, 0, -1):
            i = partition.expert_for(t)
            counts[i] += 1
            x = ddpm_step(experts[i], x, t, sched, rng, cond=cond)
    elif sampler == "ddim":
        ts = ddim_timesteps(sched.T, steps)
        for t, t_prev in zip(ts, ts[1:] + [0]):
            i = partition.expert_for(t)
            counts[i] += 1
            x = ddim_step(experts[i], x, t, t_prev, sched, cond=cond)
    else:
        raise ValueError(f"unknown sampler '{sampler}'")
    return x, counts
