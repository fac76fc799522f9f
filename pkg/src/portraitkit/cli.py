"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``); each config key
has a matching ``--flag`` that overrides it. Relative paths inside a config
file resolve against the file's directory. Exit codes: 0 success,
2 validation error, 3 numerical-tolerance failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import checks
from .diffusion import SampleTrace, ddim_timesteps, ddpm_timesteps, make_rng, make_schedule, sample
from .freqmaps import FilterParams, extract_controls
from .guidance import GuidanceConfig, GuidedScorer, broadcast_mask
from .images import ImageIOError, decode, load_image, load_mask, save_image
from .metrics import id_score_report, report_to_jsonl
from .oracle import ModelSpecError, SpectralDenoiser, UnknownConditionError, load_denoiser
from .pipeline import ModelSet, PipelineConfig, PipelineError, harmonize, run_pipeline

log = logging.getLogger("portraitkit")

EXIT_OK, EXIT_VALIDATION, EXIT_TOLERANCE, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass(frozen=True)
class Opt:
    name: str
    default: Any
    type: Callable | None
    help: str
    path: bool = False  # resolve relative to the config file


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v is None or v == "" else str(v)


def _int_list(v):
    if v is None:
        return None
    if isinstance(v, str):
        v = [x for x in v.replace(",", " ").split()]
    return [int(x) for x in v]


SCHEDULE_OPTS = [
    Opt("T", 1000, int, "number of diffusion timesteps"),
    Opt("beta_start", 1e-4, float, "first beta of the linear schedule"),
    Opt("beta_end", 0.02, float, "last beta of the linear schedule"),
]

FILTER_OPTS = [
    Opt("sigma_low", 8.0, float, "Gaussian std (px) of the light-map blur"),
    Opt("sample_stride", 4, int, "pixel-sampling stride of the light map"),
    Opt("sigma_high", 2.0, float, "Gaussian std (px) complemented by the HF map"),
    Opt("hf_offset", 0.5, float, "recentering constant added to the HF map"),
]

GUIDANCE_OPTS = [
    Opt("condition", None, _opt_str, "condition id for the guided branch (null = unconditional)"),
    Opt("w_cfg", 0.0, float, "classifier-free guidance weight"),
    Opt("w_concept", 0.0, float, "concept vs. negative-concept guidance weight"),
    Opt("concept_S", None, _opt_str, "concept id pushed toward inside the mask"),
    Opt("concept_Sbar", None, _opt_str, "opposite concept id (negative score)"),
    Opt("mask_path", None, _opt_str, "mask restricting the concept edit (PGM/PNG, or JSON list for vector models)", True),
    Opt("momentum_beta", 0.9, float, "exponential-averaging factor of the concept term"),
    Opt("decay", "linear", str, "decay of the concept term over timesteps: none | linear | alpha_bar"),
    Opt("literal_eq4", False, _bool, "add the full concept-guided prediction inside the mask instead of its "
                                     "difference to the unconditional prediction"),
]

SAMPLER_OPTS = [
    Opt("sampler", "ddpm", str, "ddpm (ancestral) or ddim (deterministic)"),
    Opt("ddim_steps", 50, int, "number of DDIM steps over the full schedule"),
]

COMMANDS: dict[str, list[Opt]] = {
    "extract-maps": [
        Opt("ref_like", None, _opt_str, "image the light map is taken from", True),
        Opt("src_like", None, _opt_str, "image the HF map is taken from", True),
        Opt("out_dir", "maps", str, "output directory", True),
        *FILTER_OPTS,
    ],
    "sample": [
        Opt("model", None, _opt_str, "oracle model JSON", True),
        Opt("out_dir", "sample_out", str, "output directory", True),
        Opt("seed", 0, int, "random seed"),
        Opt("n_samples", 1, int, "number of independent samples"),
        Opt("steps", None, _int_list, "explicit strictly decreasing timestep list (default: full schedule)"),
        *SAMPLER_OPTS, *GUIDANCE_OPTS, *SCHEDULE_OPTS,
    ],
    "pipeline": [
        Opt("reference", None, _opt_str, "reference portrait", True),
        Opt("source", None, _opt_str, "source identity image (only used for the ID score)", True),
        Opt("face_mask", None, _opt_str, "face mask (PGM/PNG) for paste-back", True),
        Opt("identity_model", None, _opt_str, "identity-stage model JSON", True),
        Opt("shading_model", None, _opt_str, "inner model of the control-conditioned shading stage", True),
        Opt("harmonize_model", None, _opt_str, "harmonization model JSON", True),
        Opt("out_dir", "run", str, "run directory", True),
        Opt("seed", 0, int, "random seed"),
        Opt("t_ref_like", 399, int, "start index of the reference-like image (0-based; 399 = step 400 of 1000)"),
        Opt("t_src_like", 699, int, "start index of the source-like image (0-based; 699 = step 700 of 1000)"),
        Opt("t_harmonize", 4, int, "img2img start index of the harmonization pass"),
        Opt("feather_px", 6.0, float, "feather width (px) of the paste-back mask"),
        Opt("lambda_light", 1.0, float, "shading-stage blend weight of the light-map control"),
        Opt("lambda_hf", 1.0, float, "shading-stage blend weight of the HF-map control"),
        Opt("pull", 1.0, float, "strength of the control pull on the predicted clean image"),
        *FILTER_OPTS, *SAMPLER_OPTS, *GUIDANCE_OPTS, *SCHEDULE_OPTS,
    ],
    "harmonize": [
        Opt("composite", None, _opt_str, "image to harmonize", True),
        Opt("model", None, _opt_str, "harmonization model JSON", True),
        Opt("out", "harmonized.png", str, "output image", True),
        Opt("t_harmonize", 4, int, "img2img start index"),
        Opt("seed", 0, int, "random seed"),
        *SAMPLER_OPTS, *SCHEDULE_OPTS,
    ],
    "metrics": [
        Opt("pairs", None, None, "list of [source, generated, mask] path triples", True),
        Opt("out", None, _opt_str, "JSONL report path (default: stdout)", True),
    ],
    "oracle-check": [
        Opt("model", None, _opt_str, "GMM model JSON (default: shipped 2-D fixture)", True),
        Opt("trials", 1000, int, "random (z, t) trials per check"),
        Opt("seed", 0, int, "random seed"),
        Opt("report", None, _opt_str, "write the JSON report here", True),
    ],
}


def fixture_path(*parts: str) -> Path:
    return Path(str(resources.files("portraitkit").joinpath("fixtures", *parts)))


def resolve_config(command: str, config_path: str | None, overrides: dict) -> dict:
    """Defaults <- config file <- command-line flags, with type coercion."""
    opts = {o.name: o for o in COMMANDS[command]}
    raw: dict[str, Any] = {}
    base = Path(".")
    if config_path is not None:
        path = Path(config_path)
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("<config>", "expected a JSON object")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        base = path.parent
        for k, v in loaded.items():
            if opts[k].path and isinstance(v, str) and not Path(v).is_absolute():
                v = str(base / v)
            if k == "pairs" and isinstance(v, list):
                v = [[str(base / p) if not Path(p).is_absolute() else p for p in triple] for triple in v]
            raw[k] = v
    raw.update(overrides)
    out = {}
    for name, opt in opts.items():
        v = raw.get(name, opt.default)
        if v is not None and opt.type is not None:
            try:
                v = opt.type(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(name, str(exc)) from exc
        out[name] = v
    return out


def _require(cfg: dict, *names: str) -> None:
    for n in names:
        if cfg.get(n) is None:
            raise ConfigError(n, "required")


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _schedule(cfg: dict):
    try:
        return make_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])
    except ValueError as exc:
        raise ConfigError("T/beta_start/beta_end", str(exc)) from exc


def _filter(cfg: dict) -> FilterParams:
    try:
        return FilterParams(cfg["sigma_low"], cfg["sample_stride"], cfg["sigma_high"], cfg["hf_offset"])
    except ValueError as exc:
        raise ConfigError("sigma_low/sample_stride/sigma_high", str(exc)) from exc


def _load_guidance_mask(path: str | None, shape):
    if path is None:
        return None
    if path.endswith(".json"):
        m = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    else:
        m = load_mask(path)
    if shape is not None:
        try:
            broadcast_mask(m, tuple(shape))
        except ValueError as exc:
            raise ConfigError("mask_path", str(exc)) from exc
    return m


def _guidance(cfg: dict, shape=None) -> GuidanceConfig:
    mask = _load_guidance_mask(cfg["mask_path"], shape)
    try:
        return GuidanceConfig(cfg["condition"], cfg["w_cfg"], cfg["w_concept"], cfg["concept_S"], cfg["concept_Sbar"],
                              mask, cfg["momentum_beta"], cfg["decay"], cfg["literal_eq4"])
    except ValueError as exc:
        raise ConfigError("guidance", str(exc)) from exc


def _model_shape(d) -> tuple[int, ...]:
    if isinstance(d, SpectralDenoiser):
        return d.model.shape
    m = d.model
    return tuple(m.shape) if m.shape is not None else (m.dims,)


# -- commands ----------------------------------------------------------------

def cmd_extract_maps(cfg: dict) -> int:
    """Write the light map and HF map of a ref-like / src-like image pair."""
    _require(cfg, "ref_like", "src_like")
    p = _filter(cfg)
    ref, src = load_image(cfg["ref_like"]), load_image(cfg["src_like"])
    if ref.shape != src.shape:
        raise ConfigError("src_like", f"dimension mismatch {src.shape} vs {ref.shape}")
    controls = extract_controls(ref, src, p)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_image(controls.light_map, out / "light.png")
    save_image(controls.hf_map, out / "hf.png")
    manifest = {k: cfg[k] for k in ("sigma_low", "sample_stride", "sigma_high", "hf_offset")}
    manifest["inputs"] = {k: _sha256(Path(cfg[k]).read_bytes()) for k in ("ref_like", "src_like")}
    manifest["outputs"] = {n: _sha256((out / n).read_bytes()) for n in ("light.png", "hf.png")}
    (out / "maps.json").write_text(canonical_json(manifest))
    print(f"wrote {out / 'light.png'} and {out / 'hf.png'}")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    """Run (guided) DDPM or DDIM sampling from an oracle model."""
    _require(cfg, "model")
    s = _schedule(cfg)
    if cfg["steps"] is not None and len(cfg["steps"]) == 0:
        raise ConfigError("steps", "must contain at least one timestep")
    if cfg["n_samples"] < 1:
        raise ConfigError("n_samples", "must be >= 1")
    if cfg["sampler"] not in ("ddpm", "ddim"):
        raise ConfigError("sampler", "must be ddpm or ddim")
    d = load_denoiser(cfg["model"], s)
    shape = _model_shape(d)
    g = _guidance(cfg, shape)
    steps = cfg["steps"]
    if steps is None:
        steps = ddpm_timesteps(s.T - 1) if cfg["sampler"] == "ddpm" else ddim_timesteps(s.T - 1, cfg["ddim_steps"])
    rng = make_rng(cfg["seed"])
    init = rng.standard_normal((cfg["n_samples"],) + tuple(shape))
    scorer = GuidedScorer(d, g, s)
    trace = SampleTrace()
    try:
        z = sample(None, scorer, s, init, steps, rng, sampler=cfg["sampler"], trace=trace)
    except UnknownConditionError as exc:
        raise ConfigError("condition", f"unknown condition {exc}") from exc
    except ValueError as exc:
        raise ConfigError("steps", str(exc)) from exc

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", z)
    files = {"samples.npy": _sha256((out / "samples.npy").read_bytes())}
    if len(shape) == 3:
        save_image(decode(z[0]), out / "sample.png")
        files["sample.png"] = _sha256((out / "sample.png").read_bytes())
    flat = z.reshape(len(z), -1)
    summary = {
        "config": {k: v for k, v in cfg.items() if k != "out_dir"},
        "n_samples": int(len(z)),
        "mean": flat.mean(axis=0).tolist() if flat.shape[1] <= 16 else float(flat.mean()),
        "std": flat.std(axis=0).tolist() if flat.shape[1] <= 16 else float(flat.std()),
        "hashes": files,
    }
    trajectory = {"steps": trace.steps, "z_rms": trace.z_rms, "eps_rms": trace.eps_rms}
    (out / "trajectory.json").write_text(canonical_json(trajectory))
    (out / "summary.json").write_text(canonical_json(summary))
    print(f"wrote {len(z)} samples to {out}")
    return EXIT_OK


def pipeline_config(cfg: dict, guidance: GuidanceConfig) -> PipelineConfig:
    try:
        return PipelineConfig(
            t_ref_like=cfg["t_ref_like"], t_src_like=cfg["t_src_like"], filter=_filter(cfg),
            feather_px=cfg["feather_px"], t_harmonize=cfg["t_harmonize"], guidance=guidance, seed=cfg["seed"],
            sampler=cfg["sampler"], ddim_steps=cfg["ddim_steps"], lambda_light=cfg["lambda_light"],
            lambda_hf=cfg["lambda_hf"], pull=cfg["pull"], T=cfg["T"],
        )
    except ValueError as exc:
        raise ConfigError("pipeline", str(exc)) from exc


def cmd_pipeline(cfg: dict) -> int:
    """Run the full identity / shading / paste-back / harmonize pipeline."""
    _require(cfg, "reference", "face_mask", "identity_model", "shading_model", "harmonize_model")
    s = _schedule(cfg)
    reference = load_image(cfg["reference"])
    face_mask = load_mask(cfg["face_mask"], reference.shape)
    source = load_image(cfg["source"]) if cfg["source"] else None
    models = ModelSet(load_denoiser(cfg["identity_model"], s), load_denoiser(cfg["shading_model"], s),
                      load_denoiser(cfg["harmonize_model"], s))
    pcfg = pipeline_config(cfg, _guidance(cfg, reference.shape))
    out = Path(cfg["out_dir"])
    # the run directory itself is not part of the record, so identical runs
    # into different directories produce identical files
    record_cfg = {k: v for k, v in cfg.items() if k != "out_dir"}
    try:
        result = run_pipeline(source, reference, face_mask, pcfg, models, s, out, {"resolved": record_cfg})
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, (ImageIOError, OSError)):
            return EXIT_IO
        if isinstance(cause, (ValueError, KeyError)):
            return EXIT_VALIDATION
        return 1
    print(f"run directory {out} (final hash {result.record['hashes']['06_final.png'][:12]})")
    return EXIT_OK


def cmd_harmonize(cfg: dict) -> int:
    """Run one img2img harmonization pass on an image."""
    _require(cfg, "composite", "model")
    s = _schedule(cfg)
    if not 0 < cfg["t_harmonize"] < s.T:
        raise ConfigError("t_harmonize", f"must lie in (0, {s.T})")
    img = load_image(cfg["composite"])
    d = load_denoiser(cfg["model"], s)
    pcfg = PipelineConfig(t_harmonize=cfg["t_harmonize"], sampler=cfg["sampler"], ddim_steps=cfg["ddim_steps"], T=s.T)
    out = harmonize(img, d, None, s, cfg["t_harmonize"], make_rng(cfg["seed"]), pcfg)
    save_image(out, cfg["out"])
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_metrics(cfg: dict) -> int:
    """Write the identity-similarity JSONL report for image pairs."""
    pairs = cfg["pairs"]
    if not pairs:
        raise ConfigError("pairs", "need at least one [source, generated, mask] triple")
    loaded, labels = [], []
    for i, triple in enumerate(pairs):
        if len(triple) != 3:
            raise ConfigError(f"pairs[{i}]", "expected [source, generated, mask]")
        src, gen = load_image(triple[0]), load_image(triple[1])
        loaded.append((src, gen, load_mask(triple[2], src.shape)))
        labels.append(f"{Path(triple[0]).name}|{Path(triple[1]).name}")
    text = report_to_jsonl(id_score_report(loaded, labels))
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle_check(cfg: dict) -> int:
    """Check oracle scores and guidance identities against their tolerances."""
    path = cfg["model"] or str(fixture_path("oracle", "gmm2d.json"))
    report = checks.run_oracle_checks(path, trials=cfg["trials"], seed=cfg["seed"])
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status}  {c['name']}: achieved {c['achieved']:.3e} (required {c['op']} {c['required']:.1e})")
    if cfg["report"]:
        Path(cfg["report"]).write_text(canonical_json(report))
    return EXIT_OK if report["passed"] else EXIT_TOLERANCE


HANDLERS = {
    "extract-maps": cmd_extract_maps,
    "sample": cmd_sample,
    "pipeline": cmd_pipeline,
    "harmonize": cmd_harmonize,
    "metrics": cmd_metrics,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portraitkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__ or name.replace("-", " "),
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.add_argument("--config", default=None, help="JSON config file; keys match the flags below")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.name == "pairs":
                sp.add_argument("--pair", dest="pairs", nargs=3, action="append", default=argparse.SUPPRESS,
                                metavar=("SOURCE", "GENERATED", "MASK"),
                                help=f"config key 'pairs': {o.help}; repeatable (default: {o.default})")
                continue
            sp.add_argument(flag, dest=o.name, default=argparse.SUPPRESS,
                            help=f"[{o.name}] {o.help} (default: {json.dumps(o.default)})")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        return HANDLERS[args.command](cfg)
    except (ConfigError, ModelSpecError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ImageIOError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
