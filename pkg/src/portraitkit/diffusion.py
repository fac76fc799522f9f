"""Noise schedule, forward noising and reverse samplers.

Timesteps are 0-based: a schedule with ``T = 1000`` has indices 0..999, so the
"400 of 1000" operating point is index 399. Index ``-1`` denotes the clean
endpoint (alpha_bar = 1, sigma = 0) and is accepted as a DDIM target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .freqmaps import ControlSet


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); normals come from numpy's ziggurat."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-stage generators derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(int(seed)).spawn(n)]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alpha_bar[t])

    def sigma_at(self, t: int) -> float:
        return 0.0 if t < 0 else float(self.sigma[t])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if T < 2 or not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need T >= 2 and 0 < beta_start < beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    for a in (beta, alpha, alpha_bar, sigma):
        a.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, sigma)


@dataclass(frozen=True)
class Condition:
    """What the denoiser is conditioned on.

    ``concept`` names a condition in the model's table (``None`` means
    unconditional); ``controls`` carries light/HF maps for control-conditioned
    denoisers.
    """

    concept: str | None = None
    controls: ControlSet | None = None

    @property
    def is_unconditional(self) -> bool:
        return self.concept is None and self.controls is None


UNCONDITIONAL = Condition()


class Denoiser(Protocol):
    def predict(self, z: np.ndarray, t: int, c: Condition) -> np.ndarray:
        """Noise prediction with the same shape as ``z``; must be stateless."""
        ...


def _check_t(t: int, s: NoiseSchedule, allow_clean: bool = False) -> None:
    lo = -1 if allow_clean else 0
    if not lo <= t < s.T:
        raise ValueError(f"timestep {t} outside [{lo}, {s.T})")


def forward_diffuse(z0: np.ndarray, t: int, noise: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) noise.

    ``noise`` may carry extra leading batch axes; ``z0`` broadcasts against it.
    """
    _check_t(t, s)
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[noise.ndim - z0.ndim:] != z0.shape:
        raise ValueError(f"dimension mismatch: z0 {z0.shape} vs noise {noise.shape}")
    ab = s.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def ddpm_step(z: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule,
              rng: np.random.Generator | None) -> np.ndarray:
    """Ancestral update t -> t-1 with variance beta[t]; noise-free at t = 1.

    ``rng=None`` suppresses the stochastic term at every t.
    """
    if t < 1 or t >= s.T:
        raise ValueError(f"ddpm_step needs 1 <= t < {s.T}, got {t}")
    if np.shape(z) != np.shape(eps_hat):
        raise ValueError("dimension mismatch between z and eps_hat")
    mean = (z - (s.beta[t] / s.sigma[t]) * eps_hat) / np.sqrt(s.alpha[t])
    if t > 1 and rng is not None:
        mean = mean + np.sqrt(s.beta[t]) * rng.standard_normal(np.shape(z))
    return mean


def predict_x0(z: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    return (z - s.sigma[t] * eps_hat) / np.sqrt(s.alpha_bar[t])


def ddim_step(z: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) update from t to t_prev; ``t_prev = -1`` returns x0_hat."""
    _check_t(t, s)
    _check_t(t_prev, s, allow_clean=True)
    if not t_prev < t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    if np.shape(z) != np.shape(eps_hat):
        raise ValueError("dimension mismatch between z and eps_hat")
    x0 = predict_x0(z, eps_hat, t, s)
    if t_prev < 0:
        return x0
    return np.sqrt(s.alpha_bar[t_prev]) * x0 + s.sigma[t_prev] * eps_hat


def ddpm_timesteps(t_start: int) -> list[int]:
    """Every index from ``t_start`` down to 1 (the last ancestral step)."""
    return list(range(int(t_start), 0, -1))


def ddim_timesteps(t_start: int, n: int) -> list[int]:
    """``n`` evenly spaced, strictly decreasing indices from ``t_start`` to 0."""
    if n < 1:
        raise ValueError("need at least one step")
    ts = np.unique(np.round(np.linspace(0, t_start, n)).astype(int))[::-1]
    return [int(t) for t in ts]


@dataclass
class SampleTrace:
    """Per-step summary of a sampling run (used for trajectory reports)."""

    steps: list[int] = field(default_factory=list)
    z_rms: list[float] = field(default_factory=list)
    eps_rms: list[float] = field(default_factory=list)

    def record(self, t: int, z: np.ndarray, eps: np.ndarray) -> None:
        self.steps.append(int(t))
        self.z_rms.append(float(np.sqrt(np.mean(z * z))))
        self.eps_rms.append(float(np.sqrt(np.mean(eps * eps))))


def sample(d: Denoiser | None, g, s: NoiseSchedule, init: np.ndarray, steps: Sequence[int],
           rng: np.random.Generator | None, sampler: str = "ddpm",
           condition: Condition = UNCONDITIONAL, trace: SampleTrace | None = None) -> np.ndarray:
    """Run the reverse process from ``init`` over ``steps``.

    Each step asks the guided scorer ``g`` (anything with ``guided_eps(z, t)``)
    for the noise estimate; with ``g=None`` the bare denoiser is queried under
    ``condition``. ``sampler="ddpm"`` needs consecutive steps ending at 1 and
    the result is the ancestral sample at index 0; ``sampler="ddim"`` moves
    between the listed steps and finishes at the clean endpoint.
    """
    steps = [int(t) for t in steps]
    if not steps:
        raise ValueError("steps must be non-empty")
    if any(b >= a for a, b in zip(steps, steps[1:])) or steps[0] >= s.T or steps[-1] < 0:
        raise ValueError("steps must be strictly decreasing within [0, T)")
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if sampler == "ddpm" and (steps[-1] < 1 or any(a - b != 1 for a, b in zip(steps, steps[1:]))):
        raise ValueError("ddpm sampling needs consecutive steps ending at t >= 1")
    if g is None and d is None:
        raise ValueError("need a denoiser or a guided scorer")

    z = np.array(init, dtype=np.float64, copy=True)
    for i, t in enumerate(steps):
        eps = g.guided_eps(z, t) if g is not None else d.predict(z, t, condition)
        if trace is not None:
            trace.record(t, z, eps)
        if sampler == "ddpm":
            z = ddpm_step(z, eps, t, s, rng)
        else:
            t_prev = steps[i + 1] if i + 1 < len(steps) else -1
            z = ddim_step(z, eps, t, t_prev, s)
    return z
