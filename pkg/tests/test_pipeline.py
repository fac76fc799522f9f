import json

import numpy as np
import pytest

from portraitkit import corpus
from portraitkit.diffusion import Condition, make_rng, sample, ddpm_timesteps
from portraitkit.freqmaps import ControlSet, FilterParams, extract_controls, extract_hf_map, extract_light_map
from portraitkit.guidance import GuidanceConfig
from portraitkit.images import encode
from portraitkit.oracle import GmmScoreModel, SpectralDenoiser, SpectralMixtureModel, as_denoiser, gaussian_at, \
    gaussian_spectrum, load_denoiser, spectral_prior
from portraitkit.cli import fixture_path
from portraitkit.pipeline import (ModelSet, PipelineConfig, PipelineError, ToyConditionedDenoiser, feather_mask,
                                  harmonize, identity_stage, paste_back, run_pipeline, shading_stage)

SIZE = 32


@pytest.fixture(scope="module")
def pair():
    return corpus.portrait_pair(3, SIZE)


def rms(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


def centered(img, variance=1e-4):
    return gaussian_at(encode(img), variance)


def test_config_validation():
    for kw in (dict(t_ref_like=700, t_src_like=400), dict(t_src_like=1000), dict(t_harmonize=0),
               dict(feather_px=-1), dict(sampler="euler"), dict(lambda_light=1.5), dict(pull=-1)):
        with pytest.raises(ValueError):
            PipelineConfig(**kw)
    assert PipelineConfig().t_ref_like == 399 and PipelineConfig().t_src_like == 699


def test_identity_stage_zero_noise_limit(pair, schedule):
    cfg = PipelineConfig(t_ref_like=0)
    d = as_denoiser(centered(pair["reference"]), schedule)
    ref_like, _ = identity_stage(pair["reference"], d, None, schedule, cfg, make_rng(0))
    assert np.array_equal(ref_like, pair["reference"])


def test_identity_stage_recovers_oracle_mean(pair, schedule):
    d = as_denoiser(centered(pair["reference"]), schedule)
    ref_like, src_like = identity_stage(pair["reference"], d, None, schedule, PipelineConfig(), make_rng(1))
    assert rms(ref_like, pair["reference"]) < 0.02
    assert rms(src_like, pair["reference"]) < 0.02


def test_identity_stage_deterministic(pair, schedule):
    d = SpectralDenoiser(spectral_prior(encode(pair["source"]), 0.02, 4.0), schedule)
    a = identity_stage(pair["reference"], d, None, schedule, PipelineConfig(), make_rng(5))
    b = identity_stage(pair["reference"], d, None, schedule, PipelineConfig(), make_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_toy_denoiser_passthrough_and_errors(schedule, rng):
    inner = SpectralDenoiser(spectral_prior(np.zeros((8, 8, 3)), 0.1, 2.0), schedule)
    toy = ToyConditionedDenoiser(inner, schedule)
    z = rng.standard_normal((8, 8, 3))
    assert np.array_equal(toy.predict(z, 100, Condition()), inner.predict(z, 100, Condition()))
    bad = ControlSet(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        toy.predict(z, 100, Condition(controls=bad))
    with pytest.raises(ValueError):
        ToyConditionedDenoiser(inner, schedule, lambda_light=float("inf"))


def test_shading_gates_closed_equals_unconditioned(pair, schedule):
    inner = SpectralDenoiser(spectral_prior(np.zeros((SIZE, SIZE, 3)), 0.05, 3.0), schedule)
    controls = extract_controls(pair["reference"], pair["source"])
    toy = ToyConditionedDenoiser(inner, schedule, lambda_light=0.0, lambda_hf=0.0)
    got = shading_stage(controls, toy, None, schedule, make_rng(9))
    rng = make_rng(9)
    init = rng.standard_normal((SIZE, SIZE, 3))
    plain = sample(inner, None, schedule, init, ddpm_timesteps(999), rng)
    assert np.array_equal(got, np.clip((plain + 1) / 2, 0, 1))


def test_shading_follows_controls(pair, schedule):
    inner = SpectralDenoiser(spectral_prior(np.zeros((SIZE, SIZE, 3)), 0.01, 3.0), schedule)
    p = FilterParams()
    controls = extract_controls(pair["reference"], pair["source"], p)
    light_only = shading_stage(controls, ToyConditionedDenoiser(inner, schedule, p, 1.0, 0.0), None, schedule,
                               make_rng(2))
    assert rms(extract_light_map(light_only, p), controls.light_map) < 0.05
    hf_only = shading_stage(controls, ToyConditionedDenoiser(inner, schedule, p, 0.0, 1.0), None, schedule,
                            make_rng(2))
    assert np.corrcoef(extract_hf_map(hf_only, p).ravel(), controls.hf_map.ravel())[0, 1] > 0.9


def test_paste_back_extremes(rng):
    a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    assert np.array_equal(paste_back(a, b, np.ones((10, 10)), 0), a)
    assert np.array_equal(paste_back(a, b, np.zeros((10, 10)), 6), b)
    with pytest.raises(ValueError):
        paste_back(a, b[:9], np.ones((10, 10)), 0)
    with pytest.raises(ValueError):
        paste_back(a, b, np.ones((9, 10)), 0)


def test_paste_back_half_plane_band(rng):
    h, w, feather = 16, 40, 6
    a, b = rng.random((h, w, 3)), rng.random((h, w, 3))
    mask = np.zeros((h, w))
    mask[:, w // 2:] = 1.0
    out = paste_back(a, b, mask, feather)
    radius = int(np.ceil(3 * feather / 3))  # kernel radius of blur(feather / 3)
    m = feather_mask(mask, feather)
    for j in range(w):
        col_a, col_b = a[:, j], b[:, j]
        if j < w // 2 - radius:
            assert np.array_equal(out[:, j], col_b)
        elif j >= w // 2 + radius:
            assert np.array_equal(out[:, j], col_a)
        else:
            assert np.all((m[:, j] > 0) & (m[:, j] < 1))
            expected = m[:, j, None] * col_a + (1 - m[:, j, None]) * col_b
            assert np.allclose(out[:, j], expected, atol=1e-15)
    band = np.flatnonzero((m[0] > 0) & (m[0] < 1))
    assert len(band) == 2 * radius
    assert abs(len(band) - 2 * feather) <= 2 * feather  # about feather pixels on each side of the edge


def test_paste_back_idempotent_binary(rng):
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    mask = (rng.random((12, 12)) > 0.5).astype(float)
    once = paste_back(a, b, mask, 0)
    assert np.array_equal(paste_back(once, b, mask, 0), once)


def test_harmonize_oracle_mean_reversion(pair, schedule):
    comp = paste_back(pair["source"], pair["reference"], pair["face_mask"], 6)
    d = as_denoiser(centered(comp), schedule)
    for t in (10, 300, 900):
        assert rms(harmonize(comp, d, None, schedule, t, make_rng(t)), comp) < 0.02
    with pytest.raises(ValueError):
        harmonize(comp, d, None, schedule, 0, make_rng(0))


def test_harmonize_reduces_seam_gradient(schedule):
    d = load_denoiser(fixture_path("models", "harmonize.json"), schedule)

    def seam_gradient(img, mask):
        gy, gx = np.gradient(img.mean(axis=2))
        my, mx = np.gradient(mask)
        return np.hypot(gx, gy)[(np.abs(my) + np.abs(mx)) > 0].max()

    for seed in range(4):
        p = corpus.portrait_pair(seed, 64)
        raw = paste_back(p["source"], p["reference"], p["face_mask"], 0)
        out = harmonize(raw, d, None, schedule, PipelineConfig().t_harmonize, make_rng(seed))
        assert seam_gradient(out, p["face_mask"]) <= seam_gradient(raw, p["face_mask"])


def small_models(ref, schedule):
    d = as_denoiser(centered(ref), schedule)
    return ModelSet(d, d, d)


def test_run_pipeline_oracle_returns_reference(pair, schedule, tmp_path):
    ref = pair["reference"]
    res = run_pipeline(None, ref, pair["face_mask"], PipelineConfig(t_harmonize=100), small_models(ref, schedule),
                       schedule, tmp_path)
    assert rms(res.final, ref) < 0.05
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["00_ref_like.png", "01_src_like.png", "02_light.png", "03_hf.png", "04_stylized.png",
                     "05_composite.png", "06_final.png", "run.json"]
    rec = json.loads((tmp_path / "run.json").read_text())
    assert rec["status"] == "ok" and rec["seed"] == 0 and len(rec["hashes"]) == 7


def test_run_pipeline_reproducible(pair, schedule, tmp_path):
    ref = pair["reference"]
    cfg = PipelineConfig(seed=17)
    a = run_pipeline(pair["source"], ref, pair["face_mask"], cfg, small_models(ref, schedule), schedule, tmp_path / "a")
    b = run_pipeline(pair["source"], ref, pair["face_mask"], cfg, small_models(ref, schedule), schedule, tmp_path / "b")
    assert a.record == b.record
    for name in a.record["hashes"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_swapping_identity_stays_inside_mask(pair, schedule):
    ref = pair["reference"]
    other = corpus.render(corpus.random_identity(make_rng(99)), corpus.Lighting(), SIZE)
    means = np.stack([encode(pair["source"]), encode(other)])
    ident = SpectralMixtureModel(means, gaussian_spectrum((SIZE, SIZE), 0.02, 4.0), np.array([0.5, 0.5]),
                                 {"A": (0.5, np.array([0.99, 0.01])), "B": (0.5, np.array([0.01, 0.99]))})
    # pixel-local harmonizer so the edit cannot leak through a shared covariance
    harm = as_denoiser(GmmScoreModel(encode(ref).ravel()[None], 0.05, np.ones(1), shape=ref.shape), schedule)
    shade = SpectralDenoiser(spectral_prior(np.zeros(ref.shape), 0.01, 3.0), schedule)
    models = ModelSet(SpectralDenoiser(ident, schedule), shade, harm)
    finals = []
    for who in ("A", "B"):
        cfg = PipelineConfig(guidance=GuidanceConfig(condition=who), t_harmonize=20)
        finals.append(run_pipeline(None, ref, pair["face_mask"], cfg, models, schedule).final)
    outside = feather_mask(pair["face_mask"], PipelineConfig().feather_px) == 0
    diff = np.abs(finals[0] - finals[1]).max(axis=2)
    assert diff[outside].max() <= 1e-6
    assert diff[~outside].max() > 1e-3


def test_run_pipeline_records_failing_stage(pair, schedule, tmp_path):
    ref = pair["reference"]
    wrong = as_denoiser(gaussian_at(np.zeros((8, 8, 3)), 0.1), schedule)
    with pytest.raises(PipelineError) as exc:
        run_pipeline(None, ref, pair["face_mask"], PipelineConfig(), ModelSet(wrong, wrong, wrong), schedule,
                     tmp_path)
    assert exc.value.stage == "identity"
    rec = json.loads((tmp_path / "run.json").read_text())
    assert rec["status"] == "failed" and rec["stage"] == "identity"

    good = as_denoiser(centered(ref), schedule)
    with pytest.raises(PipelineError) as exc:
        run_pipeline(None, ref, pair["face_mask"], PipelineConfig(), ModelSet(good, wrong, good), schedule)
    assert exc.value.stage == "shading"
