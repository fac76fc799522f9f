"""Split-and-merge portrait pipeline.

identity stage  -> an image pair noised from the reference at two strengths
control extract -> light map of the reference-like image, HF map of the
                   source-like image
shading stage   -> sample from noise under the two controls
paste back      -> feathered face composite over the reference
harmonize       -> img2img pass over the composite
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import (Condition, Denoiser, NoiseSchedule, ddim_timesteps, ddpm_timesteps, forward_diffuse,
                        predict_x0, sample, spawn_rngs)
from .freqmaps import ControlSet, FilterParams, extract_controls, gaussian_blur, high_band, low_band
from .guidance import GuidanceConfig, GuidedScorer
from .images import check_image, check_mask, decode, encode, save_image
from .metrics import cosine_similarity, toy_embed

log = logging.getLogger(__name__)

STAGES = ("identity", "controls", "shading", "paste_back", "harmonize", "write")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline failed in stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    t_ref_like: int = 399
    t_src_like: int = 699
    filter: FilterParams = field(default_factory=FilterParams)
    feather_px: float = 6.0
    t_harmonize: int = 4
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    sampler: str = "ddpm"
    ddim_steps: int = 50
    lambda_light: float = 1.0
    lambda_hf: float = 1.0
    pull: float = 1.0
    T: int = 1000

    def __post_init__(self):
        if not 0 <= self.t_ref_like < self.t_src_like < self.T:
            raise ValueError("need 0 <= t_ref_like < t_src_like < T")
        if not 0 < self.t_harmonize < self.T:
            raise ValueError("t_harmonize must lie in (0, T)")
        if self.feather_px < 0:
            raise ValueError("feather_px must be >= 0")
        if self.sampler not in ("ddpm", "ddim"):
            raise ValueError("sampler must be 'ddpm' or 'ddim'")
        for name in ("lambda_light", "lambda_hf"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pull < 0:
            raise ValueError("pull must be >= 0")


class ToyConditionedDenoiser:
    """Control-conditioned wrapper around an inner denoiser.

    For a query carrying a :class:`ControlSet`, the inner prediction is
    corrected so that the implied clean image moves toward the controls:
    its low band toward the light map and its high band toward the HF map,
    by ``pull`` times the respective blend weight. Other queries pass through.
    """

    def __init__(self, inner: Denoiser, schedule: NoiseSchedule, params: FilterParams = FilterParams(),
                 lambda_light: float = 1.0, lambda_hf: float = 1.0, pull: float = 1.0):
        if not (np.isfinite(lambda_light) and np.isfinite(lambda_hf) and np.isfinite(pull)):
            raise ValueError("blend weights must be finite")
        self.inner = inner
        self.schedule = schedule
        self.params = params
        self.lambda_light = lambda_light
        self.lambda_hf = lambda_hf
        self.pull = pull

    def residuals(self, z: np.ndarray, eps: np.ndarray, t: int, controls: ControlSet):
        """(light residual, hf residual) in noise units at timestep t."""
        s = self.schedule
        x0 = predict_x0(z, eps, t, s)
        light_target = encode(controls.light_map)
        hf_target = 2.0 * (controls.hf_map - controls.hf_offset)
        k = self.pull * math.sqrt(s.alpha_bar[t]) / s.sigma[t]
        light_res = k * (light_target - low_band(x0, self.params))
        hf_res = k * (hf_target - high_band(x0, self.params.sigma_high))
        return light_res, hf_res

    def predict(self, z: np.ndarray, t: int, c: Condition) -> np.ndarray:
        eps = self.inner.predict(z, t, Condition(concept=c.concept))
        if c.controls is None:
            return eps
        if c.controls.light_map.shape != np.shape(z):
            raise ValueError("control maps must match the latent dimensions")
        light_res, hf_res = self.residuals(z, eps, t, c.controls)
        return eps - self.lambda_light * light_res - self.lambda_hf * hf_res


def _steps(t_start: int, cfg: PipelineConfig) -> list[int]:
    if cfg.sampler == "ddpm":
        return ddpm_timesteps(t_start)
    return ddim_timesteps(t_start, max(1, round(cfg.ddim_steps * (t_start + 1) / cfg.T)))


def img2img(img: np.ndarray, d: Denoiser, g: GuidanceConfig | None, s: NoiseSchedule, t: int,
            rng: np.random.Generator, cfg: PipelineConfig, condition: Condition | None = None) -> np.ndarray:
    """Encode, noise to ``t``, denoise back, decode."""
    z0 = encode(img)
    zt = forward_diffuse(z0, t, rng.standard_normal(z0.shape), s)
    scorer = GuidedScorer(d, g if g is not None else GuidanceConfig(), s, condition)
    return decode(sample(None, scorer, s, zt, _steps(t, cfg), rng, sampler=cfg.sampler))


def identity_stage(ref_img: np.ndarray, d: Denoiser, g: GuidanceConfig | None, s: NoiseSchedule,
                   cfg: PipelineConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (reference-like, source-like) images.

    Both start from the reference: the lower-noise start keeps more of its
    shading, the higher-noise start hands more over to the identity model.
    """
    ref_img = check_image(ref_img)
    out = []
    for t in (cfg.t_ref_like, cfg.t_src_like):
        sub = spawn_rngs(int(rng.integers(2**63)), 1)[0]
        if t == 0:
            out.append(ref_img.copy())
        else:
            out.append(img2img(ref_img, d, g, s, t, sub, cfg))
    return out[0], out[1]


def shading_stage(controls: ControlSet, d: ToyConditionedDenoiser, g: GuidanceConfig | None,
                  s: NoiseSchedule, rng: np.random.Generator, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Sample from pure noise under the light/HF controls."""
    shape = controls.light_map.shape
    if controls.hf_map.shape != shape:
        raise ValueError("light and HF maps differ in shape")
    scorer = GuidedScorer(d, g if g is not None else GuidanceConfig(), s, Condition(controls=controls))
    init = rng.standard_normal(shape)
    return decode(sample(None, scorer, s, init, _steps(s.T - 1, cfg), rng, sampler=cfg.sampler))


def feather_mask(face_mask: np.ndarray, feather_px: float) -> np.ndarray:
    m = np.clip(gaussian_blur(check_mask(face_mask), feather_px / 3.0), 0.0, 1.0)
    # kernel sums carry rounding error; keep fully inside/outside pixels exact
    m[m > 1.0 - 1e-12] = 1.0
    m[m < 1e-12] = 0.0
    return m


def paste_back(stylized: np.ndarray, reference: np.ndarray, face_mask: np.ndarray, feather_px: float) -> np.ndarray:
    stylized = check_image(stylized)
    reference = check_image(reference)
    if stylized.shape != reference.shape:
        raise ValueError(f"dimension mismatch: {stylized.shape} vs {reference.shape}")
    m = feather_mask(check_mask(face_mask, reference.shape), feather_px)[:, :, None]
    return m * stylized + (1.0 - m) * reference


def harmonize(composite: np.ndarray, d: Denoiser, g: GuidanceConfig | None, s: NoiseSchedule, t_h: int,
              rng: np.random.Generator, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """img2img at strength t_h / T."""
    if not 0 < t_h < s.T:
        raise ValueError("t_h must lie in (0, T)")
    return img2img(check_image(composite), d, g, s, t_h, rng, cfg)


@dataclass
class ModelSet:
    identity: Denoiser
    shading: Denoiser  # inner denoiser of the control-conditioned model
    harmonizer: Denoiser


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = asdict(cfg)
    g = out.pop("guidance")
    g.pop("mask", None)
    out["guidance"] = g
    return out


@dataclass
class PipelineResult:
    final: np.ndarray
    intermediates: dict[str, np.ndarray]
    record: dict


def run_pipeline(source: np.ndarray | None, reference: np.ndarray, face_mask: np.ndarray, cfg: PipelineConfig,
                 models: ModelSet, s: NoiseSchedule, out_dir: str | os.PathLike | None = None,
                 extra_record: dict | None = None) -> PipelineResult:
    """Run every stage; when ``out_dir`` is given write the run directory.

    On failure ``run.json`` records the failing stage and a
    :class:`PipelineError` is raised.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    record = {"config": config_to_dict(cfg), "seed": cfg.seed, **(extra_record or {})}
    rng_id, rng_shade, rng_harm = spawn_rngs(cfg.seed, 3)
    inter: dict[str, np.ndarray] = {}
    stage = STAGES[0]
    try:
        reference = check_image(reference)
        face_mask = check_mask(face_mask, reference.shape)
        inter["00_ref_like"], inter["01_src_like"] = identity_stage(reference, models.identity, cfg.guidance, s,
                                                                    cfg, rng_id)
        stage = "controls"
        controls = extract_controls(inter["00_ref_like"], inter["01_src_like"], cfg.filter)
        inter["02_light"], inter["03_hf"] = controls.light_map, controls.hf_map
        stage = "shading"
        shader = ToyConditionedDenoiser(models.shading, s, cfg.filter, cfg.lambda_light, cfg.lambda_hf, cfg.pull)
        inter["04_stylized"] = shading_stage(controls, shader, None, s, rng_shade, cfg)
        stage = "paste_back"
        inter["05_composite"] = paste_back(inter["04_stylized"], reference, face_mask, cfg.feather_px)
        stage = "harmonize"
        inter["06_final"] = harmonize(inter["05_composite"], models.harmonizer, None, s, cfg.t_harmonize,
                                      rng_harm, cfg)
        stage = "write"
        if source is not None:
            m = face_mask if face_mask.any() else np.ones(face_mask.shape)
            record["id_score"] = cosine_similarity(toy_embed(check_image(source), m),
                                                   toy_embed(inter["06_final"], m))
        if out is not None:
            hashes = {}
            for name, img in inter.items():
                path = out / f"{name}.png"
                save_image(img, path)
                hashes[path.name] = _sha256(path)
            record["hashes"] = hashes
            record["status"] = "ok"
            (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    except Exception as exc:
        log.error("pipeline stage %s failed: %s", stage, exc)
        if out is not None:
            record.update(status="failed", stage=stage, error=f"{type(exc).__name__}: {exc}")
            (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
        raise PipelineError(stage, exc) from exc
    return PipelineResult(inter["06_final"], inter, record)
