"""Structure-tensor estimation and orientation queries for 2D images.

Coordinates follow image convention throughout the package: ``x`` is the
column index, ``y`` is the row index (increasing downwards) and angles are
measured from the +x axis towards +y.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage


class ImageGrid:
    """A 2D scalar image with an analysis mask.

    Parameters
    ----------
    values : array_like, shape (height, width)
        Pixel values, row-major.
    mask : array_like of bool, optional
        ``True`` marks pixels inside the analysis region. Defaults to all
        pixels.
    """

    def __init__(self, values, mask=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ValueError(f"image must be a non-empty 2D array, got shape {values.shape}")
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} does not match image shape {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("image has non-finite values inside the mask")
        self.values = values
        self.mask = mask

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __repr__(self):
        return f"ImageGrid({self.height}x{self.width}, {int(self.mask.sum())} masked)"


class StructureTensor(NamedTuple):
    """Components of a symmetric 2x2 tensor ``[[t11, t12], [t12, t22]]``.

    Fields may be scalars or equally shaped arrays.
    """
    t11: np.ndarray
    t12: np.ndarray
    t22: np.ndarray

    @classmethod
    def from_matrix(cls, m) -> "StructureTensor":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1])

    def as_matrix(self) -> np.ndarray:
        t11, t12, t22 = np.broadcast_arrays(*map(np.asarray, self))
        return np.stack([np.stack([t11, t12], -1), np.stack([t12, t22], -1)], -2)

    def scaled(self, c: float) -> "StructureTensor":
        return StructureTensor(c * np.asarray(self.t11), c * np.asarray(self.t12), c * np.asarray(self.t22))


class OrientationEstimate(NamedTuple):
    angle: np.ndarray       # radians in [0, pi)
    anisotropy: np.ndarray  # lambda1 - lambda2
    energy: np.ndarray      # lambda1 + lambda2


@dataclass
class TensorField:
    """Per-pixel structure tensors, stored as three ``(height, width)`` arrays."""
    t11: np.ndarray
    t12: np.ndarray
    t22: np.ndarray
    grad_sigma: float | None = None
    smooth_sigma: float | None = None
    _orientation: OrientationEstimate | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.t11 = np.asarray(self.t11, dtype=np.float64)
        self.t12 = np.asarray(self.t12, dtype=np.float64)
        self.t22 = np.asarray(self.t22, dtype=np.float64)
        if not (self.t11.shape == self.t12.shape == self.t22.shape) or self.t11.ndim != 2:
            raise ValueError("tensor components must be 2D arrays of identical shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.t11.shape

    @property
    def tensor(self) -> StructureTensor:
        return StructureTensor(self.t11, self.t12, self.t22)

    def orientation(self) -> OrientationEstimate:
        if self._orientation is None:
            self._orientation = principal_orientation(self.tensor)
        return self._orientation

    def unoriented(self, rel_threshold: float = 0.01, mask=None) -> np.ndarray:
        """Boolean map of pixels whose anisotropy is below
        ``rel_threshold`` times the median energy (over ``mask`` if given)."""
        est = self.orientation()
        energy = est.energy if mask is None else est.energy[np.asarray(mask, bool)]
        tau = rel_threshold * (np.median(energy) if energy.size else 0.0)
        return est.anisotropy <= tau

    def check_psd(self, rtol: float = 1e-9) -> bool:
        scale = max(float(np.max(np.abs(self.t11), initial=0)), float(np.max(np.abs(self.t22), initial=0)))
        tol = rtol * scale**2
        det = self.t11 * self.t22 - self.t12**2
        return bool(np.all(self.t11 >= 0) and np.all(self.t22 >= 0) and np.all(det >= -tol))

    def save(self, path) -> None:
        """Write interleaved ``(t11, t12, t22)`` float32 triples plus JSON sidecar."""
        from .io import save_raw
        save_raw(path, np.stack([self.t11, self.t12, self.t22], axis=-1))

    @classmethod
    def load(cls, path) -> "TensorField":
        from .io import load_raw
        arr = load_raw(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"{path}: expected 3 channels, got array of shape {arr.shape}")
        return cls(arr[..., 0], arr[..., 1], arr[..., 2])


def _as_tensor(t) -> StructureTensor:
    if isinstance(t, (StructureTensor, TensorField)):
        return StructureTensor(*(np.asarray(c, dtype=np.float64) for c in (t.t11, t.t12, t.t22)))
    return StructureTensor.from_matrix(t)


def estimate_structure_tensor(image: ImageGrid | np.ndarray, grad_sigma: float = 1.0,
                              smooth_sigma: float = 2.0) -> TensorField:
    """Gradient outer-product structure tensor.

    Gradients are Gaussian derivatives at scale ``grad_sigma``; the three
    products ``gx*gx, gx*gy, gy*gy`` are then smoothed with a Gaussian of
    width ``smooth_sigma`` (0 disables smoothing). Borders are mirror padded.
    """
    if not isinstance(image, ImageGrid):
        image = ImageGrid(image)
    if grad_sigma <= 0:
        raise ValueError("grad_sigma must be positive")
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma must be non-negative")
    if image.height < 5 or image.width < 5:
        raise ValueError(f"image too small for tensor estimation: {image.shape}, need at least 5x5")
    img = image.values
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")

    gx = ndimage.gaussian_filter(img, grad_sigma, order=(0, 1), mode="mirror")
    gy = ndimage.gaussian_filter(img, grad_sigma, order=(1, 0), mode="mirror")
    comps = [gx * gx, gx * gy, gy * gy]
    if smooth_sigma > 0:
        comps = [ndimage.gaussian_filter(c, smooth_sigma, mode="mirror") for c in comps]
    return TensorField(*comps, grad_sigma=grad_sigma, smooth_sigma=smooth_sigma)


def principal_orientation(t) -> OrientationEstimate:
    """Closed-form eigen-analysis of a 2x2 symmetric tensor (vectorised)."""
    t11, t12, t22 = _as_tensor(t)
    diff = t11 - t22
    aniso = np.hypot(diff, 2.0 * t12)
    angle = 0.5 * np.arctan2(2.0 * t12, diff)
    angle = np.where(aniso > 0, np.mod(angle, np.pi), 0.0)
    # mod can round up to exactly pi for tiny negative angles
    angle = np.where(angle >= np.pi, 0.0, angle)
    return OrientationEstimate(angle, aniso, t11 + t22)


# unit orientation vectors d_x, d_y, d_xy, d_-xy as (x, y)
ORIENTATION_VECTORS = np.array([
    [1.0, 0.0],
    [0.0, 1.0],
    [1.0, 1.0],
    [-1.0, 1.0],
]) / np.array([1.0, 1.0, np.sqrt(2.0), np.sqrt(2.0)])[:, None]
ORIENTATION_NAMES = ("x", "y", "xy", "-xy")
ORIENTATION_TENSORS = np.einsum("ki,kj->kij", ORIENTATION_VECTORS, ORIENTATION_VECTORS)


def project_onto_orientation_tensors(t) -> np.ndarray:
    """Frobenius inner products of ``t`` with the tensors of ``d_x, d_y,
    d_xy, d_-xy``; returns an array with a trailing axis of length 4."""
    t11, t12, t22 = np.broadcast_arrays(*_as_tensor(t))
    T = ORIENTATION_TENSORS
    return np.stack([T[k, 0, 0] * t11 + 2.0 * T[k, 0, 1] * t12 + T[k, 1, 1] * t22
                     for k in range(4)], axis=-1)


def stripe_image(height: int, width: int, theta: float, wavelength: float,
                 phase: float = 0.0) -> np.ndarray:
    """Sinusoidal stripes ``sin(2*pi*(x cos(theta) + y sin(theta))/wavelength)``;
    the intensity gradient points along ``theta``."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / wavelength + phase)


def angle_difference(a, b, period: float = np.pi):
    """Signed smallest difference ``a - b`` modulo ``period``."""
    d = np.mod(np.asarray(a) - np.asarray(b) + period / 2, period) - period / 2
    return d
