"""Regenerate the shipped fixtures under src/portraitkit/fixtures/."""

import json
from dataclasses import replace
from pathlib import Path

from portraitkit import corpus
from portraitkit.images import save_image

ROOT = Path(__file__).resolve().parents[1] / "src" / "portraitkit" / "fixtures"
SEED = 1


def dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def main():
    pair = corpus.portrait_pair(SEED)
    img = ROOT / "images"
    img.mkdir(parents=True, exist_ok=True)
    save_image(pair["reference"], img / "reference.png")
    save_image(pair["source"], img / "source.png")
    closed = corpus.render(replace(pair["source_identity"], eyes_open=False), corpus.Lighting())
    save_image(closed, img / "source_closed.png")
    save_image(pair["face_mask"], img / "face_mask.pgm")
    save_image(corpus.eye_mask(pair["source_identity"]), img / "eye_mask.pgm")

    dump(ROOT / "oracle" / "gmm2d.json", {
        "components": [
            {"mean": [-2.0, 0.0], "variance": [0.5, 0.3]},
            {"mean": [2.0, 1.0], "variance": [0.4, 0.6]},
            {"mean": [0.0, -2.5], "variance": [0.3, 0.3]},
        ],
        "conditions": {
            "a": {"prior": 0.4, "weights": [0.7, 0.2, 0.1]},
            "b": {"prior": 0.6, "weights": [0.1, 0.3, 0.6]},
        },
    })
    dump(ROOT / "oracle" / "two_mode.json", {
        "components": [{"mean": [-2.0], "variance": 0.25}, {"mean": [2.0], "variance": 0.25}],
        "conditions": {
            "left": {"prior": 0.5, "weights": [0.9, 0.1]},
            "right": {"prior": 0.5, "weights": [0.1, 0.9]},
        },
    })
    dump(ROOT / "oracle" / "gaussian.json", {
        "components": [{"mean": [1.0, -0.5], "variance": [0.3, 0.3]}],
    })

    models = ROOT / "models"
    dump(models / "identity.json", {
        "type": "spectral",
        "components": [{"image": "../images/source.png"}, {"image": "../images/source_closed.png"}],
        "variance": 0.02,
        "length": 8.0,
        "conditions": {
            "eyes_open": {"prior": 0.5, "weights": [0.95, 0.05]},
            "eyes_closed": {"prior": 0.5, "weights": [0.05, 0.95]},
        },
    })
    dump(models / "shading.json", {
        "type": "spectral", "shape": [64, 64, 3], "components": [{"mean": 0.0}], "variance": 0.01, "length": 3.0,
    })
    dump(models / "harmonize.json", {
        "type": "spectral", "shape": [64, 64, 3], "components": [{"mean": 0.0}], "variance": 0.25, "length": 16.0, "floor": 1e-3,
    })

    dump(ROOT / "pipeline.json", {
        "reference": "images/reference.png",
        "source": "images/source.png",
        "face_mask": "images/face_mask.pgm",
        "identity_model": "models/identity.json",
        "shading_model": "models/shading.json",
        "harmonize_model": "models/harmonize.json",
        "mask_path": "images/eye_mask.pgm",
        "concept_S": "eyes_open",
        "concept_Sbar": "eyes_closed",
        "w_concept": 2.0,
        "seed": 0,
    })
    dump(ROOT / "sample.json", {"model": "oracle/two_mode.json", "n_samples": 10000, "seed": 0})


if __name__ == "__main__":
    main()
