"""Identity-similarity metrics with a small hand-crafted embedder.

The embedder stands in for a face-recognition network: 16 masked block means
plus a 48-bin gradient-orientation histogram, each part mean-centered, the
whole vector L2-normalized (64 values).
"""

from __future__ import annotations

import json
import math
from typing import Iterable

import numpy as np

from .images import check_image, check_mask

EMBED_BLOCKS = 4
EMBED_ORIENT_BINS = 48


class ZeroVectorError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.array([0.299, 0.587, 0.114])


def toy_embed(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """64-dim embedding of the masked region (zeros for a flat region)."""
    img = check_image(img)
    m = check_mask(mask, img.shape)
    if not m.any():
        raise EmptyMaskError("mask selects no pixels")
    gray = _gray(img)

    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    g, w = gray[r0:r1, c0:c1], m[r0:r1, c0:c1]
    ry = np.array_split(np.arange(g.shape[0]), EMBED_BLOCKS)
    cx = np.array_split(np.arange(g.shape[1]), EMBED_BLOCKS)
    blocks = []
    for yi in ry:
        for xi in cx:
            bw = w[np.ix_(yi, xi)]
            total = bw.sum()
            blocks.append(float((g[np.ix_(yi, xi)] * bw).sum() / total) if total > 0 else 0.0)
    blocks = np.array(blocks)
    blocks -= blocks.mean()

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy) * m
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / np.pi * EMBED_ORIENT_BINS).astype(int), EMBED_ORIENT_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=EMBED_ORIENT_BINS)
    hist -= hist.mean()

    v = np.concatenate([blocks, hist])
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def id_score_report(pairs: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]], labels: list[str] | None = None) -> dict:
    """Per-pair identity similarity plus mean / min / max."""
    records = []
    for i, (src, gen, mask) in enumerate(pairs):
        rec = {"index": i, "similarity": cosine_similarity(toy_embed(src, mask), toy_embed(gen, mask))}
        if labels is not None:
            rec["label"] = labels[i]
        records.append(rec)
    if not records:
        raise ValueError("need at least one pair")
    sims = [r["similarity"] for r in records]
    summary = {"summary": True, "count": len(sims), "mean": float(np.mean(sims)), "min": min(sims), "max": max(sims)}
    return {"pairs": records, "summary": summary}


def report_to_jsonl(report: dict) -> str:
    lines = [json.dumps(r, sort_keys=True) for r in report["pairs"]]
    lines.append(json.dumps(report["summary"], sort_keys=True))
    return "\n".join(lines) + "\n"


def aesthetic_score(img: np.ndarray) -> dict:
    """Placeholder for a learned aesthetic predictor, which is not shipped."""
    return {"metric": "aesthetic", "status": "unavailable"}
