"""Diagonal Gaussian-mixture data model with closed-form diffused scores.

Every condition shares the component means and covariances and differs only in
its mixture weights, so ``p(z | c)``, ``p(z)`` and ``p(c | z)`` are all exact
under forward diffusion: component k at timestep t is
``N(sqrt(ab) mu_k, ab * var_k + (1 - ab))``.

Points are arrays of shape ``(..., D)``; leading axes are batch axes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import Condition, NoiseSchedule
from .images import encode, load_image


class ModelSpecError(ValueError):
    """Invalid model file; the message starts with the offending field path."""


class UnknownConditionError(KeyError):
    pass


@dataclass(frozen=True)
class GmmScoreModel:
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    weights: np.ndarray  # (K,) marginal weights
    conditions: dict[str, tuple[float, np.ndarray]] = field(default_factory=dict)  # name -> (prior, weights)
    shape: tuple[int, ...] | None = None  # grid shape for image-structured models

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        try:
            var = np.array(np.broadcast_to(np.asarray(self.variances, dtype=np.float64), means.shape))
        except ValueError:
            raise ModelSpecError(f"variances: cannot broadcast to {means.shape}") from None
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (means.shape[0],):
            raise ModelSpecError(f"weights: expected {means.shape[0]} entries, got {w.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ModelSpecError("weights: must be positive and sum to 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ModelSpecError("variances: must be finite and > 0")
        if not np.all(np.isfinite(means)):
            raise ModelSpecError("means: must be finite")
        conds = {}
        for name, (prior, cw) in self.conditions.items():
            cw = np.asarray(cw, dtype=np.float64)
            if cw.shape != w.shape or np.any(cw <= 0) or abs(cw.sum() - 1.0) > 1e-9:
                raise ModelSpecError(f"conditions.{name}.weights: must be {len(w)} positive values summing to 1")
            if not 0.0 < prior <= 1.0:
                raise ModelSpecError(f"conditions.{name}.prior: must lie in (0, 1]")
            conds[name] = (float(prior), cw)
        if conds:
            mixed = sum(p * cw for p, cw in conds.values())
            if abs(sum(p for p, _ in conds.values()) - 1.0) > 1e-9 or np.max(np.abs(mixed - w)) > 1e-9:
                raise ModelSpecError("conditions: priors must sum to 1 and mix to the marginal weights")
        if self.shape is not None and math.prod(self.shape) != means.shape[1]:
            raise ModelSpecError(f"shape: {self.shape} does not hold {means.shape[1]} values")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "conditions", conds)

    @property
    def dims(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def component_weights(self, c: str | None) -> np.ndarray:
        if c is None:
            return self.weights
        try:
            return self.conditions[c][1]
        except KeyError:
            raise UnknownConditionError(c) from None

    def prior(self, c: str) -> float:
        try:
            return self.conditions[c][0]
        except KeyError:
            raise UnknownConditionError(c) from None


def _as_points(m: GmmScoreModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1:] != (m.dims,):
        raise ValueError(f"dimension mismatch: model has {m.dims} dims, point has shape {z.shape}")
    return z


def _diffused(m: GmmScoreModel, t: int, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    ab = s.alpha_bar_at(t)
    return math.sqrt(ab) * m.means, ab * m.variances + (1.0 - ab)


def component_log_densities(m: GmmScoreModel, z, t: int, s: NoiseSchedule) -> np.ndarray:
    """log N_k(z) for every component, shape (..., K)."""
    z = _as_points(m, z)
    mean, var = _diffused(m, t, s)
    diff = z[..., None, :] - mean
    return -0.5 * (np.sum(np.log(2.0 * np.pi * var), axis=-1) + np.sum(diff * diff / var, axis=-1))


def _logsumexp(a: np.ndarray) -> np.ndarray:
    top = np.max(a, axis=-1, keepdims=True)
    return (top + np.log(np.sum(np.exp(a - top), axis=-1, keepdims=True)))[..., 0]


def gmm_log_density(m: GmmScoreModel, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
    """log p_t(z | c); ``c=None`` gives the marginal."""
    lw = np.log(m.component_weights(c))
    return _logsumexp(lw + component_log_densities(m, z, t, s))


def responsibilities(m: GmmScoreModel, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
    a = np.log(m.component_weights(c)) + component_log_densities(m, z, t, s)
    a = a - np.max(a, axis=-1, keepdims=True)
    r = np.exp(a)
    return r / r.sum(axis=-1, keepdims=True)


def component_scores(m: GmmScoreModel, z, t: int, s: NoiseSchedule) -> np.ndarray:
    """grad log N_k(z), shape (..., K, D)."""
    z = _as_points(m, z)
    mean, var = _diffused(m, t, s)
    return -(z[..., None, :] - mean) / var


def gmm_score(m: GmmScoreModel, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
    r = responsibilities(m, z, t, c, s)
    return np.einsum("...k,...kd->...d", r, component_scores(m, z, t, s))


def gmm_eps(m: GmmScoreModel, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction ``-sigma[t] * grad log p_t(z | c)``."""
    return -s.sigma_at(t) * gmm_score(m, z, t, c, s)


def gmm_posterior(m: GmmScoreModel, z, t: int, c: str, s: NoiseSchedule) -> np.ndarray:
    """p(c | z_t) by Bayes' rule over the condition table."""
    lp = math.log(m.prior(c)) + gmm_log_density(m, z, t, c, s) - gmm_log_density(m, z, t, None, s)
    return np.exp(lp)


def gmm_posterior_log_grad(m: GmmScoreModel, z, t: int, c: str, s: NoiseSchedule) -> np.ndarray:
    """grad log p(c | z_t), from the shift in component responsibilities."""
    m.prior(c)
    dr = responsibilities(m, z, t, c, s) - responsibilities(m, z, t, None, s)
    return np.einsum("...k,...kd->...d", dr, component_scores(m, z, t, s))


def sample_data(m: GmmScoreModel, n: int, rng: np.random.Generator, c: str | None = None) -> np.ndarray:
    """Draw ``n`` clean samples (t = -1) from the mixture."""
    k = rng.choice(m.n_components, size=n, p=m.component_weights(c))
    return m.means[k] + np.sqrt(m.variances[k]) * rng.standard_normal((n, m.dims))


class OracleDenoiser:
    """Adapts a :class:`GmmScoreModel` to the denoiser interface.

    Grids of the model's ``shape`` (optionally with leading batch axes) are
    flattened to vectors; plain ``(..., D)`` arrays pass straight through.
    """

    def __init__(self, model: GmmScoreModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def flatten(self, z: np.ndarray) -> np.ndarray:
        shape = self.model.shape
        if shape is not None and z.shape[z.ndim - len(shape):] == tuple(shape):
            return z.reshape(z.shape[: z.ndim - len(shape)] + (self.model.dims,))
        if z.shape[-1:] == (self.model.dims,):
            return z
        raise ValueError(f"latent of shape {z.shape} does not fit a {self.model.dims}-dim model")

    def predict(self, z: np.ndarray, t: int, c: Condition) -> np.ndarray:
        if c.controls is not None:
            raise UnknownConditionError("control-conditioned query on a plain oracle")
        z = np.asarray(z, dtype=np.float64)
        return gmm_eps(self.model, self.flatten(z), t, c.concept, self.schedule).reshape(z.shape)


def as_denoiser(m: GmmScoreModel, s: NoiseSchedule) -> OracleDenoiser:
    return OracleDenoiser(m, s)


# -- model files -------------------------------------------------------------

def _field(spec: dict, key: str, where: str):
    if key not in spec:
        raise ModelSpecError(f"{where}{key}: required field missing")
    return spec[key]


def model_from_dict(spec: dict, base_dir: str | os.PathLike = ".") -> GmmScoreModel:
    """Build a model from its JSON form.

    ``components`` is a list of ``{"mean": [...]} | {"image": path}`` each with a
    ``variance`` (scalar or per-dim). ``conditions`` maps names to
    ``{"prior": p, "weights": [...]}``; when present the marginal weights are
    the prior-weighted sum, otherwise ``weights`` (default uniform) is used.
    """
    if not isinstance(spec, dict):
        raise ModelSpecError("<root>: expected a JSON object")
    comps = _field(spec, "components", "")
    if not isinstance(comps, list) or not comps:
        raise ModelSpecError("components: expected a non-empty list")
    means, variances = [], []
    shape = tuple(spec["shape"]) if "shape" in spec else None
    for i, comp in enumerate(comps):
        where = f"components[{i}]."
        if not isinstance(comp, dict):
            raise ModelSpecError(f"components[{i}]: expected an object")
        if "image" in comp:
            try:
                img = load_image(Path(base_dir) / comp["image"])
            except Exception as exc:
                raise ModelSpecError(f"{where}image: {exc}") from exc
            if shape is None:
                shape = img.shape
            mean = encode(img).ravel()
        else:
            mean = np.asarray(_field(comp, "mean", where), dtype=np.float64).ravel()
        var = np.asarray(_field(comp, "variance", where), dtype=np.float64)
        if var.ndim == 0:
            var = np.full(mean.shape, float(var))
        if var.shape != mean.shape:
            raise ModelSpecError(f"{where}variance: expected scalar or {mean.size} values")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ModelSpecError(f"{where}variance: must be finite and > 0")
        if means and mean.shape != means[0].shape:
            raise ModelSpecError(f"{where}mean: dimension {mean.size} differs from components[0]")
        means.append(mean)
        variances.append(var)
    weights, conditions = _parse_mixture_weights(spec, len(means))
    return GmmScoreModel(np.stack(means), np.stack(variances), weights, conditions, shape)


def _parse_mixture_weights(spec: dict, k: int) -> tuple[np.ndarray, dict]:
    conditions = {}
    cond_spec = spec.get("conditions", {})
    if not isinstance(cond_spec, dict):
        raise ModelSpecError("conditions: expected an object")
    for name, cspec in cond_spec.items():
        where = f"conditions.{name}."
        if not isinstance(cspec, dict):
            raise ModelSpecError(f"conditions.{name}: expected an object")
        w = np.asarray(_field(cspec, "weights", where), dtype=np.float64)
        if w.shape != (k,):
            raise ModelSpecError(f"{where}weights: expected {k} values")
        conditions[name] = (float(_field(cspec, "prior", where)), w)
    if conditions:
        priors = sum(p for p, _ in conditions.values())
        if abs(priors - 1.0) > 1e-9:
            raise ModelSpecError(f"conditions: priors sum to {priors}, expected 1")
        weights = sum(p * w for p, w in conditions.values())
    else:
        weights = np.asarray(spec.get("weights", np.full(k, 1.0 / k)), dtype=np.float64)
        if weights.shape != (k,):
            raise ModelSpecError(f"weights: expected {k} values")
    return weights, conditions


def load_model(path: str | os.PathLike) -> GmmScoreModel:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"<root>: invalid JSON ({exc})") from exc
    return model_from_dict(spec, base_dir=path.parent)


def model_to_dict(m: GmmScoreModel) -> dict:
    out = {
        "components": [
            {"mean": mu.tolist(), "variance": var.tolist()} for mu, var in zip(m.means, m.variances)
        ],
    }
    if m.shape is not None:
        out["shape"] = list(m.shape)
    if m.conditions:
        out["conditions"] = {n: {"prior": p, "weights": w.tolist()} for n, (p, w) in m.conditions.items()}
    else:
        out["weights"] = m.weights.tolist()
    return out


def gaussian_at(center: np.ndarray, variance: float) -> GmmScoreModel:
    """Single-component model centered on ``center`` (any shape)."""
    center = np.asarray(center, dtype=np.float64)
    shape = center.shape if center.ndim > 1 else None
    return GmmScoreModel(center.reshape(1, -1), np.full((1, center.size), variance), np.ones(1), shape=shape)



def gaussian_spectrum(shape: tuple[int, int], variance: float, length: float, floor: float = 1e-4) -> np.ndarray:
    """Eigenvalues (H, W, 1) of a stationary covariance on an (H, W) periodic grid.

    Gaussian power spectrum with correlation length ``length`` pixels plus a
    white ``floor``, scaled so the per-pixel variance equals ``variance``.
    """
    if not variance > floor > 0 or not length >= 0:
        raise ModelSpecError("spectral prior needs variance > floor > 0 and length >= 0")
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    bump = np.exp(-2.0 * np.pi**2 * length**2 * (fx**2 + fy**2))
    return (floor + bump * (variance - floor) / bump.mean())[:, :, None]


@dataclass(frozen=True)
class SpectralMixtureModel:
    """Mixture of stationary Gaussian image priors sharing one covariance.

    Each component is ``N(mean_k, C)`` with ``C`` diagonal in the unitary 2-D
    Fourier basis (per channel), so it is the diagonal-Gaussian mixture above
    written in a rotated basis: scores, densities and condition posteriors
    stay exact. Samples are the component mean plus smooth deviations.
    """

    means: np.ndarray  # (K, H, W, C)
    spectrum: np.ndarray  # (H, W, 1)
    weights: np.ndarray
    conditions: dict[str, tuple[float, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 3:
            means = means[None]
        if means.ndim != 4:
            raise ModelSpecError("means: expected (K, H, W, C) latents")
        # reuse the weight/condition validation of the vector model
        table = GmmScoreModel(np.zeros((means.shape[0], 1)), 1.0, self.weights, self.conditions)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", table.weights)
        object.__setattr__(self, "conditions", table.conditions)
        object.__setattr__(self, "spectrum", np.asarray(self.spectrum, dtype=np.float64))
        if self.spectrum.shape != means.shape[1:3] + (1,) or np.any(self.spectrum <= 0):
            raise ModelSpecError("spectrum: expected positive (H, W, 1) eigenvalues")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    component_weights = GmmScoreModel.component_weights
    prior = GmmScoreModel.prior

    def _coeffs(self, z, t: int, s: NoiseSchedule):
        """Unitary Fourier coefficients of z - sqrt(ab) mu_k, shape (..., K, H, W, C)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[z.ndim - 3:] != self.shape:
            raise ValueError(f"latent of shape {z.shape} does not match prior {self.shape}")
        ab = s.alpha_bar_at(t)
        diff = z[..., None, :, :, :] - math.sqrt(ab) * self.means
        n = self.shape[0] * self.shape[1]
        lam = ab * self.spectrum + (1.0 - ab)
        return np.fft.fft2(diff, axes=(-3, -2)) / math.sqrt(n), lam

    def component_log_densities(self, z, t: int, s: NoiseSchedule) -> np.ndarray:
        coef, lam = self._coeffs(z, t, s)
        lam_full = np.broadcast_to(lam, self.shape)
        quad = np.sum(np.abs(coef) ** 2 / lam, axis=(-3, -2, -1))
        return -0.5 * (quad + np.sum(np.log(2.0 * np.pi * lam_full)))

    def log_density(self, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
        return _logsumexp(np.log(self.component_weights(c)) + self.component_log_densities(z, t, s))

    def responsibilities(self, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
        a = np.log(self.component_weights(c)) + self.component_log_densities(z, t, s)
        a = a - np.max(a, axis=-1, keepdims=True)
        r = np.exp(a)
        return r / r.sum(axis=-1, keepdims=True)

    def score(self, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
        coef, lam = self._coeffs(z, t, s)
        n = self.shape[0] * self.shape[1]
        comp = -np.fft.ifft2(coef / lam, axes=(-3, -2)).real * math.sqrt(n)  # (..., K, H, W, C)
        r = self.responsibilities(z, t, c, s)
        return np.einsum("...k,...khwc->...hwc", r, comp)

    def eps(self, z, t: int, c: str | None, s: NoiseSchedule) -> np.ndarray:
        return -s.sigma_at(t) * self.score(z, t, c, s)

    def posterior(self, z, t: int, c: str, s: NoiseSchedule) -> np.ndarray:
        return np.exp(math.log(self.prior(c)) + self.log_density(z, t, c, s) - self.log_density(z, t, None, s))


class SpectralDenoiser:
    """Denoiser interface over a :class:`SpectralMixtureModel`."""

    def __init__(self, model: SpectralMixtureModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def predict(self, z: np.ndarray, t: int, c: Condition) -> np.ndarray:
        if c.controls is not None:
            raise UnknownConditionError("control-conditioned query on a plain oracle")
        return self.model.eps(z, t, c.concept, self.schedule)


def spectral_prior(mean: np.ndarray, variance: float, length: float, floor: float = 1e-4) -> SpectralMixtureModel:
    """Single stationary Gaussian centered on the (H, W, C) latent ``mean``."""
    mean = np.asarray(mean, dtype=np.float64)
    return SpectralMixtureModel(mean[None], gaussian_spectrum(mean.shape[:2], variance, length, floor), np.ones(1))


def spectral_model_from_dict(spec: dict, base_dir: str | os.PathLike = ".") -> SpectralMixtureModel:
    """``{"type": "spectral", "components": [{"image": path} | {"mean": value}],
    "shape": [H, W, C], "variance": v, "length": l, "floor": f, "conditions": ...}``

    A scalar ``mean`` fills the whole latent; ``shape`` is needed when no
    component is given as an image.
    """
    comps = _field(spec, "components", "")
    if not isinstance(comps, list) or not comps:
        raise ModelSpecError("components: expected a non-empty list")
    shape = tuple(spec["shape"]) if "shape" in spec else None
    raw = []
    for i, comp in enumerate(comps):
        if not isinstance(comp, dict):
            raise ModelSpecError(f"components[{i}]: expected an object")
        if "image" in comp:
            try:
                mean = encode(load_image(Path(base_dir) / comp["image"]))
            except Exception as exc:
                raise ModelSpecError(f"components[{i}].image: {exc}") from exc
            shape = shape or mean.shape
        else:
            mean = np.asarray(_field(comp, "mean", f"components[{i}]."), dtype=np.float64)
        raw.append(mean)
    if shape is None or len(shape) != 3:
        raise ModelSpecError("shape: required as [H, W, C] when no component is an image")
    means = []
    for i, mean in enumerate(raw):
        try:
            means.append(np.broadcast_to(mean, shape).astype(np.float64))
        except ValueError:
            raise ModelSpecError(f"components[{i}].mean: does not fit shape {list(shape)}") from None
    try:
        spectrum = gaussian_spectrum(shape[:2], float(_field(spec, "variance", "")), float(_field(spec, "length", "")),
                                     float(spec.get("floor", 1e-4)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelSpecError):
            raise
        raise ModelSpecError(f"variance/length: {exc}") from exc
    weights, conditions = _parse_mixture_weights(spec, len(means))
    return SpectralMixtureModel(np.stack(means), spectrum, weights, conditions)


def load_any_model(path: str | os.PathLike) -> GmmScoreModel | SpectralMixtureModel:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"<root>: invalid JSON ({exc})") from exc
    if not isinstance(spec, dict):
        raise ModelSpecError("<root>: expected a JSON object")
    kind = spec.get("type", "gmm")
    if kind == "gmm":
        return model_from_dict(spec, base_dir=path.parent)
    if kind == "spectral":
        return spectral_model_from_dict(spec, base_dir=path.parent)
    raise ModelSpecError(f"type: unknown model type {kind!r}")


def load_denoiser(path: str | os.PathLike, s: NoiseSchedule) -> OracleDenoiser | SpectralDenoiser:
    model = load_any_model(path)
    if isinstance(model, SpectralMixtureModel):
        return SpectralDenoiser(model, s)
    return OracleDenoiser(model, s)
