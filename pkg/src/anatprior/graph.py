"""Sparse adjacency and graph-Laplacian precision matrices over masked pixels.

Three neighbourhood schemes are supported:

``ugl``
    unweighted 4-connected graph (isotropic);
``4dir``
    each pixel links to the two neighbours of one of four directional
    stencils, chosen perpendicular to the local structure-tensor orientation;
``anydir``
    each pixel weights its 8 neighbours by ``|sin(phi_pix - phi_tensor)|**alpha / r**beta``.

Directed adjacencies are made symmetric with ``(A + A.T) / 2`` and turned into
precision matrices with ``L = B - A``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .tensorfield import TensorField, project_onto_orientation_tensors

SCHEMES = ("ugl", "4dir", "anydir")

# (dy, dx) offsets
CARDINAL_OFFSETS = ((-1, 0), (0, -1), (0, 1), (1, 0))
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class Neighborhood(IntEnum):
    NX = 0      # horizontal pair
    NY = 1      # vertical pair
    NXY = 2     # (1, 1) diagonal pair
    NMXY = 3    # (-1, 1) diagonal pair
    UGL = 4     # fallback: 4 cardinal neighbours


STENCILS = {
    Neighborhood.NX: ((0, -1), (0, 1)),
    Neighborhood.NY: ((-1, 0), (1, 0)),
    Neighborhood.NXY: ((-1, -1), (1, 1)),
    Neighborhood.NMXY: ((-1, 1), (1, -1)),
    Neighborhood.UGL: CARDINAL_OFFSETS,
}

# orientation index (x, y, xy, -xy) -> perpendicular stencil
PERPENDICULAR = np.array([Neighborhood.NY, Neighborhood.NX, Neighborhood.NMXY, Neighborhood.NXY])


class PixelIndexMap:
    """Row-major bijection between masked pixels and matrix indices ``0..n-1``."""

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("mask must be 2D")
        self.mask = mask
        self.rows, self.cols = np.nonzero(mask)
        self.n = self.rows.size
        self.forward = np.full(mask.shape, -1, dtype=np.int64)
        self.forward[self.rows, self.cols] = np.arange(self.n)

    @property
    def shape(self):
        return self.mask.shape

    def inverse(self, i):
        return self.rows[i], self.cols[i]

    def to_grid(self, values, fill=0.0) -> np.ndarray:
        """Scatter a length-``n`` vector (or ``(..., n)`` array) back onto the grid."""
        values = np.asarray(values)
        out = np.full(values.shape[:-1] + self.mask.shape, fill, dtype=np.result_type(values, type(fill)))
        out[..., self.rows, self.cols] = values
        return out

    def from_grid(self, grid) -> np.ndarray:
        grid = np.asarray(grid)
        return grid[..., self.rows, self.cols]


def _check_mask(mask) -> PixelIndexMap:
    pix = mask if isinstance(mask, PixelIndexMap) else PixelIndexMap(mask)
    if pix.n == 0:
        raise ValueError("mask is empty")
    return pix


def _directed(pix: PixelIndexMap, src, offsets, weights) -> sp.csr_matrix:
    """Directed adjacency with ``a[src, nbr] = weight`` for each in-mask
    neighbour at ``offsets``; ``weights`` has shape ``(len(src), len(offsets))``."""
    h, w = pix.shape
    r, c = pix.rows[src], pix.cols[src]
    I, J, V = [], [], []
    for k, (dy, dx) in enumerate(offsets):
        rr, cc = r + dy, c + dx
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        tgt = np.full(src.shape, -1)
        tgt[inside] = pix.forward[rr[inside], cc[inside]]
        keep = (tgt >= 0) & (weights[:, k] != 0)
        I.append(src[keep])
        J.append(tgt[keep])
        V.append(weights[keep, k])
    I, J, V = (np.concatenate(a) for a in (I, J, V))
    A = sp.csr_matrix((V, (I, J)), shape=(pix.n, pix.n))
    A.sum_duplicates()
    return A


def symmetrize(A) -> sp.csr_matrix:
    """``(A + A.T) / 2`` with explicit zeros removed; exactly symmetric."""
    A = sp.csr_matrix(A, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    S = ((A + A.T) * 0.5).tocsr()
    S.eliminate_zeros()
    S.sort_indices()
    return S


def build_ugl_adjacency(mask) -> sp.csr_matrix:
    """``a_ij = 1`` iff masked pixels ``i`` and ``j`` are 4-connected."""
    pix = _check_mask(mask)
    src = np.arange(pix.n)
    A = _directed(pix, src, CARDINAL_OFFSETS, np.ones((pix.n, 4)))
    A.sort_indices()
    return A


def laplacian(A) -> sp.csr_matrix:
    """Graph Laplacian ``B - A`` where ``B`` holds the row sums of ``A``."""
    A = sp.csr_matrix(A, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if A.nnz and A.data.min() < 0:
        raise ValueError("adjacency has negative weights")
    if np.any(A.diagonal() != 0):
        raise ValueError("adjacency has a non-zero diagonal")
    deg = np.asarray(A.sum(axis=1)).ravel()
    L = (sp.diags(deg) - A).tocsr()
    L.eliminate_zeros()
    L.sort_indices()
    return L


def assign_4dir_neighborhoods(field: TensorField, mask, ugl_fallback: bool = False,
                              aniso_threshold: float = 0.01) -> np.ndarray:
    """Per-masked-pixel stencil (``Neighborhood`` codes), perpendicular to the
    orientation tensor with the largest projection. Ties go to the first of
    ``(x, y, xy, -xy)``.

    With ``ugl_fallback`` pixels whose anisotropy is below ``aniso_threshold``
    times the median in-mask energy get the 4-neighbour stencil instead.
    """
    pix = _check_mask(mask)
    if field.shape != pix.shape:
        raise ValueError(f"tensor field shape {field.shape} does not match mask {pix.shape}")
    proj = project_onto_orientation_tensors(field)[pix.rows, pix.cols]
    assign = PERPENDICULAR[np.argmax(proj, axis=1)].astype(np.int8)
    if ugl_fallback:
        flat = field.unoriented(aniso_threshold, pix.mask)[pix.rows, pix.cols]
        assign[flat] = Neighborhood.UGL
    return assign


def build_adjacency_4dir(assignment, mask) -> sp.csr_matrix:
    """Symmetrised adjacency from a per-pixel stencil assignment."""
    pix = _check_mask(mask)
    assignment = np.asarray(assignment)
    if assignment.shape != (pix.n,):
        raise ValueError(f"assignment has shape {assignment.shape}, expected ({pix.n},)")
    parts = []
    for code, offsets in STENCILS.items():
        src = np.nonzero(assignment == code)[0]
        if src.size:
            parts.append(_directed(pix, src, offsets, np.ones((src.size, len(offsets)))))
    A = sum(parts[1:], parts[0]) if parts else sp.csr_matrix((pix.n, pix.n))
    return symmetrize(A)


def anydir_weight(phi_pix, phi_tensor, r, alpha: float = 12.0, beta: float = 5.0):
    """``|sin(phi_pix - phi_tensor)|**alpha / r**beta`` (vectorised)."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("distance r must be positive")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    return np.abs(np.sin(np.asarray(phi_pix) - np.asarray(phi_tensor))) ** alpha / r**beta


def anydir_neighbor_weights(phi_tensor, alpha: float = 12.0, beta: float = 5.0) -> np.ndarray:
    """Weights towards the 8 ``NEIGHBOR_OFFSETS`` for each angle in ``phi_tensor``.

    Same values as :func:`anydir_weight`, but the sine of the angle difference
    is taken as a cross product with the integer offsets, so neighbours lying
    exactly along the tensor direction get an exact zero.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    offs = np.array(NEIGHBOR_OFFSETS, dtype=np.float64)
    r = np.hypot(offs[:, 0], offs[:, 1])
    phi = np.asarray(phi_tensor, dtype=np.float64)[..., None]
    s = np.abs(offs[:, 0] * np.cos(phi) - offs[:, 1] * np.sin(phi)) / r
    s[s <= 4 * np.finfo(float).eps] = 0.0  # cos(pi/2) etc. are not exactly zero
    return s**alpha / r**beta


def build_adjacency_anydir(field: TensorField, mask, alpha: float = 12.0, beta: float = 5.0,
                           ugl_fallback: bool = False, aniso_threshold: float = 0.01) -> sp.csr_matrix:
    """Symmetrised 8-neighbour adjacency weighted by :func:`anydir_weight`."""
    pix = _check_mask(mask)
    if field.shape != pix.shape:
        raise ValueError(f"tensor field shape {field.shape} does not match mask {pix.shape}")
    phi = field.orientation().angle[pix.rows, pix.cols]
    W = anydir_neighbor_weights(phi, alpha, beta)
    W[W < 1e-300] = 0.0
    # pixels with no usable weight, or flagged unoriented, get the UGL row
    ugl_row = np.array([float(o in CARDINAL_OFFSETS) for o in NEIGHBOR_OFFSETS])
    fallback = ~np.any(W > 0, axis=1)
    if ugl_fallback:
        fallback |= field.unoriented(aniso_threshold, pix.mask)[pix.rows, pix.cols]
    W[fallback] = ugl_row
    A = _directed(pix, np.arange(pix.n), NEIGHBOR_OFFSETS, W)
    return symmetrize(A)


@dataclass
class PriorSpec:
    """A spatial precision matrix together with its graph bookkeeping."""
    scheme: str
    D: sp.csr_matrix
    pixels: PixelIndexMap
    n_components: int
    ridge: float = 0.0

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def rank(self) -> int:
        return self.n - self.n_components


def n_components(L) -> int:
    return connected_components(sp.csr_matrix(L), directed=False)[0]


def build_prior(scheme: str, mask, field: TensorField | None = None, alpha: float = 12.0,
                beta: float = 5.0, ugl_fallback: bool = False, aniso_threshold: float = 0.01,
                ridge: float = 0.0) -> PriorSpec:
    """Build the Laplacian precision for one of ``SCHEMES``."""
    scheme = scheme.lower()
    pix = _check_mask(mask)
    if scheme == "ugl":
        A = build_ugl_adjacency(pix)
    elif scheme in ("4dir", "anydir"):
        if field is None:
            raise ValueError(f"scheme {scheme!r} needs a tensor field")
        if scheme == "4dir":
            assign = assign_4dir_neighborhoods(field, pix, ugl_fallback, aniso_threshold)
            A = build_adjacency_4dir(assign, pix)
        else:
            A = build_adjacency_anydir(field, pix, alpha, beta, ugl_fallback, aniso_threshold)
    else:
        raise ValueError(f"unknown prior scheme {scheme!r}; expected one of {SCHEMES}")
    L = laplacian(A)
    return PriorSpec(scheme, L, pix, n_components(A), ridge)


def check_laplacian(L, rtol: float = 1e-12) -> None:
    """Raise ``ValueError`` if ``L`` violates the Laplacian contract."""
    L = sp.csr_matrix(L)
    if (L != L.T).nnz:
        raise ValueError("matrix is not exactly symmetric")
    if L.nnz == 0:
        return
    scale = np.abs(L.data).max()
    rows = np.abs(np.asarray(L.sum(axis=1)).ravel())
    if rows.max() > rtol * scale:
        raise ValueError(f"row sums deviate from zero by {rows.max():.3g}")
    off = L - sp.diags(L.diagonal())
    if off.nnz and off.data.max() > 0:
        raise ValueError("positive off-diagonal entry")
    if L.diagonal().min() < 0:
        raise ValueError("negative diagonal entry")


def write_matrix_market(path, L, comment: str = "") -> None:
    """Write a symmetric matrix in coordinate format (lower triangle, 1-based)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(L), comment=comment, field="real",
                     precision=17, symmetry="symmetric")


def read_matrix_market(path) -> sp.csr_matrix:
    M = sp.csr_matrix(scipy.io.mmread(str(path)), dtype=np.float64)
    M.sort_indices()
    return M
