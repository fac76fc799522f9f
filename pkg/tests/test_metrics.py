import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portraitkit import corpus
from portraitkit.metrics import (EmptyMaskError, ZeroVectorError, aesthetic_score, cosine_similarity,
                                 id_score_report, report_to_jsonl, toy_embed)


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert abs(cosine_similarity([1, 2, 2], [2, 1, 2]) - 8 / 9) <= 1e-15
    assert cosine_similarity([1.0, 0.0], [-3.0, 0.0]) == -1.0


def test_cosine_errors():
    with pytest.raises(ZeroVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_cosine_symmetric_and_scale_invariant(seed, beta):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(64), rng.standard_normal(64)
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    # powers of two scale exactly in floating point
    assert cosine_similarity(beta * a, b) == cosine_similarity(a, b)


def test_cosine_scale_invariant_general(rng):
    a, b = rng.standard_normal(64), rng.standard_normal(64)
    for beta in (0.3, 7.0, 1e3):
        assert abs(cosine_similarity(beta * a, b) - cosine_similarity(a, b)) < 1e-15


def test_embed_shape_norm_and_identity():
    p = corpus.portrait_pair(0)
    e = toy_embed(p["reference"], p["face_mask"])
    assert e.shape == (64,) and abs(np.linalg.norm(e) - 1) < 1e-12
    assert np.array_equal(e, toy_embed(p["reference"].copy(), p["face_mask"]))
    assert cosine_similarity(e, e) == pytest.approx(1.0, abs=1e-15)


def test_embed_flat_region_is_zero():
    assert not toy_embed(np.full((16, 16, 3), 0.4), np.ones((16, 16))).any()


def test_embed_errors():
    with pytest.raises(EmptyMaskError):
        toy_embed(np.zeros((8, 8, 3)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        toy_embed(np.zeros((8, 8, 3)), np.ones((8, 9)))


def test_embed_brightness_robust():
    for seed in range(8):
        p = corpus.portrait_pair(seed)
        x, m = p["reference"], p["face_mask"]
        e = toy_embed(x, m)
        assert cosine_similarity(e, toy_embed(0.5 * x, m)) > 0.95
        offset = np.clip(x + 0.1, 0, 1)
        assert cosine_similarity(e, toy_embed(offset, m)) > 0.95


def test_embed_translation_sensitive():
    p = corpus.portrait_pair(1)
    x, m = p["reference"], p["face_mask"]
    shifted = np.roll(x, 6, axis=1)
    assert cosine_similarity(toy_embed(x, m), toy_embed(shifted, m)) < 0.99


def test_embed_noise_dissimilar():
    # corpus statistic: single pairs reach about 0.3 by chance in 64 dims
    sims = []
    for seed in range(8):
        p = corpus.portrait_pair(seed)
        e = toy_embed(p["reference"], p["face_mask"])
        for k in range(4):
            noise = corpus.noise_image(100 * seed + k)
            sims.append(abs(cosine_similarity(e, toy_embed(noise, p["face_mask"]))))
    assert np.mean(sims) < 0.3
    assert np.median(sims) < 0.15


def test_report_single_identical_pair():
    p = corpus.portrait_pair(2)
    rep = id_score_report([(p["reference"], p["reference"], p["face_mask"])])
    assert rep["summary"]["mean"] == pytest.approx(1.0, abs=1e-15)
    assert rep["summary"]["count"] == 1


def test_report_arithmetic():
    p = corpus.portrait_pair(4)
    x, m = p["reference"], p["face_mask"]
    rep = id_score_report([(x, x, m), (x, corpus.noise_image(7), m)], labels=["same", "noise"])
    sims = [r["similarity"] for r in rep["pairs"]]
    assert rep["summary"]["mean"] == (sims[0] + sims[1]) / 2
    assert rep["summary"]["min"] == min(sims) and rep["summary"]["max"] == max(sims)
    assert [r["label"] for r in rep["pairs"]] == ["same", "noise"]


def test_report_empty():
    with pytest.raises(ValueError):
        id_score_report([])


def test_report_jsonl_reproducible():
    def build():
        pairs = []
        for seed in range(5):
            p = corpus.portrait_pair(seed)
            pairs.append((p["source"], p["reference"], p["face_mask"]))
        return report_to_jsonl(id_score_report(pairs))

    a, b = build(), build()
    assert a == b
    lines = [json.loads(line) for line in a.splitlines()]
    assert len(lines) == 6 and [r["index"] for r in lines[:5]] == list(range(5))
    assert lines[-1]["summary"] is True and lines[-1]["count"] == 5


def test_aesthetic_stub():
    assert aesthetic_score(np.zeros((4, 4, 3)))["status"] == "unavailable"
