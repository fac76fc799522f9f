"""Score composition: classifier and classifier-free guidance, concept /
negative-concept guidance, mask-restricted combination and momentum.

The concept branch is added inside the mask as a *delta*: by default the
concept-guided prediction minus the unconditional prediction, so that an
all-ones mask adds a calibrated edit rather than a second full noise
prediction. ``literal_eq4=True`` adds the concept-guided prediction itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import UNCONDITIONAL, Condition, Denoiser, NoiseSchedule

DECAY_MODES = ("none", "linear", "alpha_bar")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def cfg_score(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """(1 + w) * eps_cond - w * eps_uncond."""
    _same_shape(eps_cond, eps_uncond)
    return (1.0 + w) * np.asarray(eps_cond, dtype=np.float64) - w * np.asarray(eps_uncond, dtype=np.float64)


def concept_score(eps_s: np.ndarray, eps_sbar: np.ndarray, w: float) -> np.ndarray:
    """Concept guidance against its opposite: (1 + w) * eps_S - w * eps_Sbar."""
    _same_shape(eps_s, eps_sbar)
    return (1.0 + w) * np.asarray(eps_s, dtype=np.float64) - w * np.asarray(eps_sbar, dtype=np.float64)


def classifier_guidance(eps: np.ndarray, grad_log_p: np.ndarray, w: float, sigma_t: float) -> np.ndarray:
    """Shift ``eps`` along the classifier log-posterior gradient.

    Uses the standard form ``eps - w * sigma_t * grad log p(c | z)`` (the
    prior score is kept in ``eps``), which coincides with :func:`cfg_score`
    when the posterior gradient is exact.
    """
    _same_shape(eps, grad_log_p)
    if not sigma_t > 0:
        raise ValueError("sigma_t must be > 0")
    return np.asarray(eps, dtype=np.float64) - w * sigma_t * np.asarray(grad_log_p, dtype=np.float64)


def broadcast_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Align a mask with a latent: same trailing shape, or a (H, W) mask
    broadcast over the channel axis of an (..., H, W, C) latent."""
    m = np.asarray(mask, dtype=np.float64)
    # spatial reading first: with W == C a (H, W) mask also matches (W, C)
    if m.ndim == 2 and len(shape) >= 3 and tuple(shape[-3:-1]) == m.shape:
        return m[:, :, None]
    if m.shape == tuple(shape[len(shape) - m.ndim:]):
        return m
    raise ValueError(f"mask shape {m.shape} incompatible with latent {tuple(shape)}")


def masked_combine(eps_base: np.ndarray, eps_concept_delta: np.ndarray, m: np.ndarray) -> np.ndarray:
    """eps_base + m * delta; pixels with m == 0 keep eps_base bit-for-bit."""
    _same_shape(eps_base, eps_concept_delta)
    mm = broadcast_mask(m, np.shape(eps_base))
    out = eps_base + mm * eps_concept_delta
    return np.where(mm == 0.0, eps_base, out)


@dataclass(frozen=True)
class MomentumState:
    m: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, shape) -> "MomentumState":
        return cls(np.zeros(shape))


def decay_factor(t: int, decay: str, s: NoiseSchedule) -> float:
    if decay == "none":
        return 1.0
    if decay == "linear":
        return t / s.T
    if decay == "alpha_bar":
        return float(s.alpha_bar[t])
    raise ValueError(f"unknown decay mode {decay!r}")


def momentum_update(st: MomentumState, g: np.ndarray, beta: float, t: int, decay: str,
                    s: NoiseSchedule) -> tuple[MomentumState, np.ndarray]:
    """Exponential averaging of the guidance term; returns (new state, applied term)."""
    _same_shape(st.m, g)
    if not 0.0 <= beta < 1.0:
        raise ValueError("momentum beta must lie in [0, 1)")
    m = beta * st.m + (1.0 - beta) * np.asarray(g, dtype=np.float64)
    return MomentumState(m, st.steps + 1), decay_factor(t, decay, s) * m


@dataclass(frozen=True)
class GuidanceConfig:
    condition: str | None = None
    w_cfg: float = 0.0
    w_concept: float = 0.0
    concept_S: str | None = None
    concept_Sbar: str | None = None
    mask: np.ndarray | None = field(default=None, compare=False)
    momentum_beta: float = 0.9
    decay: str = "linear"
    literal_eq4: bool = False

    def __post_init__(self):
        for name in ("w_cfg", "w_concept"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if not 0.0 <= self.momentum_beta < 1.0:
            raise ValueError("momentum_beta must lie in [0, 1)")
        if self.decay not in DECAY_MODES:
            raise ValueError(f"decay must be one of {DECAY_MODES}")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=np.float64)
            if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
                raise ValueError("mask weights must lie in [0, 1]")
            object.__setattr__(self, "mask", m)
        if self.mask is not None and (self.concept_S is None or self.concept_Sbar is None):
            raise ValueError("a guidance mask needs both concept_S and concept_Sbar")

    @property
    def concept_active(self) -> bool:
        return self.mask is not None


class GuidedScorer:
    """Composes the guided noise estimate for one sampling run.

    Holds mutable momentum state, so use one instance per run.
    """

    def __init__(self, denoiser: Denoiser, config: GuidanceConfig, schedule: NoiseSchedule,
                 condition: Condition | None = None):
        self.denoiser = denoiser
        self.config = config
        self.schedule = schedule
        if condition is None:
            condition = Condition(concept=config.condition)
        self.condition = condition
        self.state: MomentumState | None = None

    def reset(self) -> None:
        self.state = None

    def guided_eps(self, z: np.ndarray, t: int) -> np.ndarray:
        cfg, d = self.config, self.denoiser
        eps_c = d.predict(z, t, self.condition)
        if self.condition.is_unconditional or (cfg.w_cfg == 0 and not cfg.concept_active):
            # the unconditional term carries zero weight here
            eps_u = eps_c
        else:
            eps_u = d.predict(z, t, UNCONDITIONAL)
        base = cfg_score(eps_c, eps_u, cfg.w_cfg)
        if not cfg.concept_active:
            return base

        eps_s = d.predict(z, t, replace(self.condition, concept=cfg.concept_S))
        eps_sbar = d.predict(z, t, replace(self.condition, concept=cfg.concept_Sbar))
        delta = concept_score(eps_s, eps_sbar, cfg.w_concept)
        if not cfg.literal_eq4:
            delta = delta - eps_u
        if self.state is None or self.state.m.shape != np.shape(z):
            self.state = MomentumState.zeros(np.shape(z))
        self.state, applied = momentum_update(self.state, delta, cfg.momentum_beta, t, cfg.decay, self.schedule)
        return masked_combine(base, applied, cfg.mask)


def guided_eps(scorer: GuidedScorer, z: np.ndarray, t: int) -> np.ndarray:
    return scorer.guided_eps(z, t)
