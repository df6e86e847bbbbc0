"""End-to-end runs: anatomy -> tensor field -> prior -> Gibbs chain -> PPM."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .glm import Chain, GlmDataset, Schedule, gibbs_fit
from .graph import (PixelIndexMap, PriorSpec, build_prior, n_components, read_matrix_market,
                    write_matrix_market)
from .io import downsample, load_image, load_mask, render_map, save_mask, save_raw
from .ppm import compute_ppm, detection_scores, effect_threshold, threshold_ppm
from .synth import SynthSpec, load_dataset, synth_dataset
from .tensorfield import ImageGrid, TensorField, estimate_structure_tensor

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    prior: str = "anydir"
    alpha: float = 12.0             # ANYDIR angular exponent
    beta: float = 5.0               # ANYDIR distance exponent
    grad_sigma: float = 1.0
    smooth_sigma: float = 2.0
    ugl_fallback: bool = False
    aniso_threshold: float = 0.01
    ar_order: int = 1
    iters: int = 10_000
    warmup: int = 1_000
    thin: int = 5
    seed: int = 0
    contrast: list = field(default_factory=lambda: [0.0, 1.0])
    effect_fraction: float = 0.002
    ppm_threshold: float = 0.8
    data: str | None = None         # dataset directory; synthesised when absent
    anat: str | None = None         # anatomical image (defaults to <data>/anat.f32)
    anat_downsample: int | None = None
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prior = self.prior.lower()
        if self.prior not in ("ugl", "4dir", "anydir"):
            raise ValueError(f"unknown prior {self.prior!r}")
        self.schedule  # validates divisibility
        if not 0 <= self.ppm_threshold <= 1:
            raise ValueError("ppm_threshold must be in [0, 1]")
        if self.effect_fraction <= 0:
            raise ValueError("effect_fraction must be positive")
        if self.ar_order < 0:
            raise ValueError("ar_order must be non-negative")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.iters, self.warmup, self.thin)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        # relative paths are relative to the config file
        for key in ("data", "anat"):
            val = getattr(cfg, key)
            if val is not None and not Path(val).is_absolute():
                setattr(cfg, key, str(path.parent / val))
        cfg.check_files()
        return cfg

    def check_files(self) -> None:
        for key in ("data", "anat"):
            val = getattr(self, key)
            if val is not None and not Path(val).exists():
                raise FileNotFoundError(f"config {key!r} refers to missing path {val}")

    def to_dict(self) -> dict:
        return asdict(self)


def bundled_config() -> RunConfig:
    text = resources.files("anatprior").joinpath("data/synthetic.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def infer_factor(anat_shape, func_shape) -> int:
    """Integer ratio between anatomical and functional grids (1 if none)."""
    fh, fw = anat_shape[0] // func_shape[0], anat_shape[1] // func_shape[1]
    return fh if fh == fw and fh >= 1 else 1


# -- stages ----------------------------------------------------------------

def tensor_stage(anat: ImageGrid, out_dir, grad_sigma=1.0, smooth_sigma=2.0, factor: int = 1) -> TensorField:
    """Optionally downsample the anatomy, estimate tensors, write
    ``tensor.f32`` and an orientation overlay."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if factor > 1:
        anat = downsample(anat, factor)
    save_raw(out / "anat_func.f32", anat.values)
    field = estimate_structure_tensor(anat, grad_sigma, smooth_sigma)
    field.save(out / "tensor.f32")
    render_map(field, out / "tensor_overlay.png", style="orientation", background=anat.values,
               mask=anat.mask)
    return field


def prior_stage(scheme, mask, field: TensorField | None, out_dir, alpha=12.0, beta=5.0,
                ugl_fallback=False, aniso_threshold=0.01) -> PriorSpec:
    prior = build_prior(scheme, mask, field, alpha, beta, ugl_fallback, aniso_threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_market(out / "prior.mtx", prior.D, comment=f"scheme: {prior.scheme}")
    return prior


def load_prior(path, mask) -> PriorSpec:
    """Rebuild a :class:`PriorSpec` from a Matrix Market file and its mask."""
    D = read_matrix_market(path)
    pix = PixelIndexMap(mask)
    if D.shape[0] != pix.n:
        raise ValueError(f"{path}: matrix dimension {D.shape[0]} does not match {pix.n} masked pixels")
    scheme = "custom"
    with open(path) as fh:
        for line in fh:
            if not line.startswith("%"):
                break
            if "scheme:" in line:
                scheme = line.split("scheme:", 1)[1].strip()
    off = D.copy()
    off.setdiag(0)
    off.eliminate_zeros()
    return PriorSpec(scheme, D, pix, n_components(off))


def fit_stage(data: GlmDataset, prior: PriorSpec, out_dir, schedule: Schedule, seed: int) -> Chain:
    chain = gibbs_fit(data, prior, schedule, seed)
    chain.save(Path(out_dir) / "chain")
    return chain


def ppm_stage(chain: Chain, data: GlmDataset, out_dir, contrast, effect_fraction=0.002,
              level=0.8) -> dict:
    """Write posterior mean, PPM and thresholded PPM maps; returns a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pix = data.pixels or PixelIndexMap(np.ones((1, data.N), bool))
    gamma = effect_threshold(data.Y, effect_fraction)
    ppm = compute_ppm(chain, contrast, gamma)
    active = threshold_ppm(ppm, level)
    mean_c = np.einsum("k,kn->n", np.asarray(contrast, float), chain.mean("W"))
    mean_grid = pix.to_grid(mean_c)
    ppm_grid = pix.to_grid(ppm.prob)
    active_grid = pix.to_grid(active.astype(np.float64)) > 0
    info = {"gamma": gamma, "contrast": list(map(float, contrast)), "ppm_threshold": level,
            "effect_fraction": effect_fraction}
    save_raw(out / "posterior_mean.f32", mean_grid, extra={"contrast": info["contrast"]})
    save_raw(out / "ppm.f32", ppm_grid, extra=info)
    save_mask(out / "ppm_active.pgm", active_grid)
    render_map(mean_grid, out / "posterior_mean.png", mask=pix.mask)
    render_map(ppm_grid, out / "ppm.png", mask=pix.mask)
    return {**info, "n_active": int(active.sum())}


def run_pipeline(cfg: RunConfig, out_dir) -> dict:
    """Run every stage and write ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = None
    if cfg.data is None:
        ds = synth_dataset(SynthSpec.from_dict(cfg.synth))
        data_dir = ds.save(out / "dataset")
        truth = ds.active
    else:
        data_dir = Path(cfg.data)
        if (data_dir / "truth_active.pgm").exists():
            truth = load_mask(data_dir / "truth_active.pgm")
    data = load_dataset(data_dir, cfg.ar_order)
    anat_path = Path(cfg.anat) if cfg.anat else data_dir / "anat.f32"
    anat = load_image(anat_path)
    factor = cfg.anat_downsample or infer_factor(anat.shape, data.pixels.shape)

    field = tensor_stage(anat, out, cfg.grad_sigma, cfg.smooth_sigma, factor)
    if field.shape != data.pixels.shape:
        raise ValueError(f"anatomy at {field.shape} does not match the functional grid {data.pixels.shape}; "
                         "set anat_downsample")
    prior = prior_stage(cfg.prior, data.pixels.mask, field, out, cfg.alpha, cfg.beta,
                        cfg.ugl_fallback, cfg.aniso_threshold)
    logger.info("prior %s: n=%d, components=%d", prior.scheme, prior.n, prior.n_components)
    chain = fit_stage(data, prior, out, cfg.schedule, cfg.seed)
    summary = ppm_stage(chain, data, out, cfg.contrast, cfg.effect_fraction, cfg.ppm_threshold)
    if truth is not None:
        active = load_mask(out / "ppm_active.pgm")
        scores = detection_scores(active[data.pixels.mask], truth[data.pixels.mask])
        summary["detection"] = {k: float(v) for k, v in scores.items()}

    hashed = ["anat_func.f32", "tensor.f32", "prior.mtx", "chain/chain.json", "chain/W.f32",
              "posterior_mean.f32", "ppm.f32", "ppm_active.pgm"]
    manifest = {
        "config": cfg.to_dict(),
        "inputs": {
            "bold": sha256(data_dir / "bold.f32"),
            "design": sha256(data_dir / "design.f32"),
            "anat": sha256(anat_path),
        },
        "outputs": {name: sha256(out / name) for name in hashed},
        "prior": {"scheme": prior.scheme, "n": prior.n, "components": prior.n_components,
                  "nnz": int(prior.D.nnz)},
        "chain": {"n_draws": chain.n_draws, **chain.meta},
        "ppm": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
