"""Synthetic anatomical images and fMRI time series with known truth.

The anatomy is a field of sinusoidal stripes whose intensity gradient points
along ``theta``; the activation is a strip of constant amplitude lying on one
bright stripe, so activation edges coincide with anatomical edges.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .glm import GlmDataset
from .graph import PixelIndexMap
from .io import downsample, load_mask, load_raw, save_image, save_mask, save_raw
from .tensorfield import ImageGrid


@dataclass
class SynthSpec:
    height: int = 32
    width: int = 32
    theta_deg: float = 45.0        # gradient direction of the anatomical stripes
    wavelength: float = 8.0        # stripe period, functional pixels
    anat_factor: int = 2           # anatomical oversampling relative to functional grid
    uniform_box: tuple | None = None  # (row0, row1, col0, col1) of a flat anatomical region
    strip_width: float = 4.0       # activation strip width, functional pixels
    strip_offset: float = 0.0      # strip centre offset along theta from the grid centre
    amplitude: float = 3.0
    noise_sd: float = 1.0          # marginal SD of the AR(1) noise
    ar_coef: float = 0.3
    T: int = 200
    baseline: float = 100.0
    block_length: int = 10         # boxcar half-period, volumes
    seed: int = 0

    def __post_init__(self):
        if self.height < 5 or self.width < 5:
            raise ValueError("grid must be at least 5x5")
        if self.wavelength <= 0 or self.strip_width < 0:
            raise ValueError("wavelength must be positive and strip width non-negative")
        if int(self.anat_factor) != self.anat_factor or self.anat_factor < 1:
            raise ValueError("anat_factor must be a positive integer")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if not -1 < self.ar_coef < 1:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if self.block_length < 1 or self.T < 4:
            raise ValueError("need block_length >= 1 and T >= 4")
        if self.uniform_box is not None:
            self.uniform_box = tuple(int(v) for v in self.uniform_box)
            if len(self.uniform_box) != 4:
                raise ValueError("uniform_box must be (row0, row1, col0, col1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthDataset:
    spec: SynthSpec
    anat: ImageGrid            # at anatomical resolution
    mask: np.ndarray           # functional grid
    Y: np.ndarray              # (T, H, W)
    X: np.ndarray              # (T, K): intercept, task boxcar
    W_true: np.ndarray         # (K, H, W)
    active: np.ndarray         # (H, W) bool

    def glm_data(self, p: int = 1) -> GlmDataset:
        pix = PixelIndexMap(self.mask)
        return GlmDataset(pix.from_grid(self.Y), self.X, p, pix)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_image(d / "anat.f32", self.anat)
        save_mask(d / "mask.pgm", self.mask)
        save_raw(d / "bold.f32", np.moveaxis(self.Y, 0, -1))
        save_raw(d / "design.f32", self.X)
        save_raw(d / "truth_W.f32", np.moveaxis(self.W_true, 0, -1))
        save_mask(d / "truth_active.pgm", self.active)
        (d / "synth.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")
        return d


def load_dataset(directory, p: int = 1) -> GlmDataset:
    """Functional data from a dataset directory (``bold.f32``, ``design.f32``,
    ``mask.pgm``)."""
    d = Path(directory)
    bold = load_raw(d / "bold.f32")
    if bold.ndim == 2:
        bold = bold[:, :, None]
    X = load_raw(d / "design.f32")
    X = X[:, None] if X.ndim == 1 else X
    mask = load_mask(d / "mask.pgm") if (d / "mask.pgm").exists() else np.ones(bold.shape[:2], bool)
    if mask.shape != bold.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match functional grid {bold.shape[:2]}")
    if X.shape[0] != bold.shape[2]:
        raise ValueError(f"design has {X.shape[0]} rows, data have {bold.shape[2]} volumes")
    pix = PixelIndexMap(mask)
    return GlmDataset(pix.from_grid(np.moveaxis(bold, -1, 0)), X, p, pix)


def boxcar(T: int, block_length: int) -> np.ndarray:
    return ((np.arange(T) // block_length) % 2).astype(np.float64)


def ar1_noise(rng, T: int, n: int, coef: float, sd: float) -> np.ndarray:
    """Stationary AR(1) series (T x n) with marginal standard deviation ``sd``."""
    e = np.empty((T, n))
    e[0] = rng.standard_normal(n) * sd
    innov = rng.standard_normal((T, n)) * sd * np.sqrt(1 - coef**2)
    for t in range(1, T):
        e[t] = coef * e[t - 1] + innov[t]
    return e


def _along(spec: SynthSpec, y, x):
    th = np.deg2rad(spec.theta_deg)
    cy, cx = (spec.height - 1) / 2, (spec.width - 1) / 2
    return (x - cx) * np.cos(th) + (y - cy) * np.sin(th) - spec.strip_offset


def synth_dataset(spec: SynthSpec | dict | None = None) -> SynthDataset:
    if spec is None:
        spec = SynthSpec()
    elif isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    H, Wd, f = spec.height, spec.width, int(spec.anat_factor)

    # anatomical centres in functional-pixel coordinates
    yy, xx = np.mgrid[0:H * f, 0:Wd * f].astype(np.float64)
    u = _along(spec, (yy + 0.5) / f - 0.5, (xx + 0.5) / f - 0.5)
    anat = 100.0 + 50.0 * np.cos(2 * np.pi * u / spec.wavelength)
    if spec.uniform_box is not None:
        r0, r1, c0, c1 = spec.uniform_box
        anat[r0 * f:r1 * f, c0 * f:c1 * f] = 100.0

    fy, fx = np.mgrid[0:H, 0:Wd].astype(np.float64)
    active = np.abs(_along(spec, fy, fx)) < spec.strip_width / 2
    X = np.column_stack([np.ones(spec.T), boxcar(spec.T, spec.block_length)])
    W_true = np.stack([np.full((H, Wd), spec.baseline), spec.amplitude * active])
    noise = ar1_noise(rng, spec.T, H * Wd, spec.ar_coef, spec.noise_sd).reshape(spec.T, H, Wd)
    Y = np.einsum("tk,khw->thw", X, W_true) + noise
    return SynthDataset(spec, ImageGrid(anat), np.ones((H, Wd), bool), Y, X, W_true, active)


def functional_anatomy(ds: SynthDataset) -> ImageGrid:
    """Anatomical image downsampled to the functional grid."""
    low = downsample(ds.anat, ds.spec.anat_factor)
    return ImageGrid(low.values, low.mask & ds.mask)
