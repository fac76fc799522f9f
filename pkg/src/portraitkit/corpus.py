"""Procedural portrait-like test images.

A portrait is a shaded ellipsoidal face on a gradient background with eyes,
brows and a mouth. Identity parameters (face proportions, feature placement,
skin tone) are separate from lighting parameters (direction, ambient level,
tint) so tests can vary one while holding the other fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .freqmaps import gaussian_blur


@dataclass(frozen=True)
class Identity:
    face_w: float = 0.30
    face_h: float = 0.40
    eye_dx: float = 0.11
    eye_y: float = -0.06
    eye_r: float = 0.035
    mouth_y: float = 0.20
    mouth_w: float = 0.10
    skin: tuple[float, float, float] = (0.85, 0.65, 0.52)
    eyes_open: bool = True


@dataclass(frozen=True)
class Lighting:
    direction: tuple[float, float, float] = (-0.5, -0.4, 0.77)
    ambient: float = 0.35
    tint: tuple[float, float, float] = (1.0, 0.97, 0.92)
    background: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.30, 0.40, 0.55), (0.15, 0.20, 0.30))


def random_identity(rng: np.random.Generator) -> Identity:
    return Identity(
        face_w=rng.uniform(0.25, 0.34),
        face_h=rng.uniform(0.34, 0.44),
        eye_dx=rng.uniform(0.08, 0.13),
        eye_y=rng.uniform(-0.10, -0.03),
        eye_r=rng.uniform(0.025, 0.045),
        mouth_y=rng.uniform(0.15, 0.24),
        mouth_w=rng.uniform(0.06, 0.13),
        skin=tuple(rng.uniform([0.55, 0.38, 0.28], [0.95, 0.75, 0.62])),
    )


def random_lighting(rng: np.random.Generator) -> Lighting:
    d = rng.normal(size=3) * [0.6, 0.5, 0.3] + [0.0, -0.2, 0.8]
    d = d / np.linalg.norm(d)
    top = rng.uniform(0.1, 0.7, size=3)
    return Lighting(
        direction=tuple(d),
        ambient=rng.uniform(0.2, 0.5),
        tint=tuple(rng.uniform(0.8, 1.0, size=3)),
        background=(tuple(top), tuple(top * rng.uniform(0.3, 0.8))),
    )


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(c, c, indexing="ij")  # y, x in [-0.5, 0.5]


def face_mask(ident: Identity, size: int = 64, scale: float = 1.0) -> np.ndarray:
    """Binary ellipse covering the face (optionally enlarged by ``scale``)."""
    y, x = _grid(size)
    r = (x / (ident.face_w * scale)) ** 2 + (y / (ident.face_h * scale)) ** 2
    return (r <= 1.0).astype(np.float64)


def eye_mask(ident: Identity, size: int = 64, pad: float = 2.0) -> np.ndarray:
    y, x = _grid(size)
    m = np.zeros((size, size))
    for sx in (-1.0, 1.0):
        d = ((x - sx * ident.eye_dx) ** 2 + (y - ident.eye_y) ** 2) / (ident.eye_r * pad) ** 2
        m[d <= 1.0] = 1.0
    return m


def render(ident: Identity, light: Lighting, size: int = 64) -> np.ndarray:
    """Render an (size, size, 3) portrait in [0, 1]."""
    y, x = _grid(size)
    top, bottom = np.asarray(light.background[0]), np.asarray(light.background[1])
    img = top + (y[..., None] + 0.5) * (bottom - top)

    # ellipsoid normals for Lambertian shading
    u, v = x / ident.face_w, y / ident.face_h
    r2 = u**2 + v**2
    inside = r2 <= 1.0
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack([u, v, nz], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True) + 1e-12
    ldir = np.asarray(light.direction) / np.linalg.norm(light.direction)
    lamb = np.clip(n @ np.array([ldir[0], ldir[1], ldir[2]]), 0.0, None)
    shade = light.ambient + (1.0 - light.ambient) * lamb
    skin = np.asarray(ident.skin) * np.asarray(light.tint)
    face = skin * shade[..., None]

    # features are darkened albedo, so they pick up the same shading
    albedo = np.ones((size, size))
    for sx in (-1.0, 1.0):
        ex, ey = sx * ident.eye_dx, ident.eye_y
        if ident.eyes_open:
            d = ((x - ex) / ident.eye_r) ** 2 + ((y - ey) / (0.6 * ident.eye_r)) ** 2
            albedo[d <= 1.0] = 0.85
            albedo[d <= 0.3] = 0.15
        else:
            lid = (np.abs(x - ex) <= ident.eye_r) & (np.abs(y - ey) <= 0.12 * ident.eye_r + 0.5 / size)
            albedo[lid] = 0.3
        brow = (np.abs(x - ex) <= 1.2 * ident.eye_r) & (np.abs(y - (ey - 2.2 * ident.eye_r)) <= 0.6 / size + 0.006)
        albedo[brow] = 0.35
    mouth = (np.abs(x) <= ident.mouth_w / 2) & (np.abs(y - ident.mouth_y) <= 0.012)
    albedo[mouth] = 0.45
    face = face * albedo[..., None]

    img = np.where(inside[..., None], face, img)
    # slight anti-aliasing of the silhouette
    img = gaussian_blur(img, 0.5)
    return np.clip(img, 0.0, 1.0)


def portrait_pair(seed: int, size: int = 64) -> dict:
    """A reference (identity A, lighting L) and a source (identity B, neutral light)."""
    rng = np.random.Generator(np.random.Philox(seed))
    ref_id, src_id = random_identity(rng), random_identity(rng)
    light = random_lighting(rng)
    return {
        "reference": render(ref_id, light, size),
        "source": render(src_id, Lighting(), size),
        "reference_identity": ref_id,
        "source_identity": src_id,
        "lighting": light,
        "face_mask": face_mask(ref_id, size, scale=0.9),
        "eye_mask": eye_mask(ref_id, size),
    }


def noise_image(seed: int, size: int = 64, channels: int = 3) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.uniform(0.0, 1.0, size=(size, size, channels))
