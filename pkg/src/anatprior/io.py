"""File formats, resampling and rendering.

Grids are stored as raw little-endian float32 (row-major, channels
interleaved per pixel) next to a JSON sidecar with the same stem::

    anat.f32   anat.json   {"width": .., "height": .., "channels": 1,
                            "dtype": "f32", "order": "row-major",
                            "endianness": "little"}

Binary masks and thresholded maps use 8-bit binary PGM (P5).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensorfield import ImageGrid, TensorField


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_raw(path, arr, extra: dict | None = None) -> None:
    """Write a (H, W) or (H, W, C) array as float32 with its sidecar."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"grid must be 2D or 3D, got shape {arr.shape}")
    h, w, c = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)
    header = {"width": w, "height": h, "channels": c, "dtype": "f32",
              "order": "row-major", "endianness": "little"}
    if extra:
        header.update(extra)
    sidecar_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_header(path) -> dict:
    side = sidecar_path(path)
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: missing sidecar {side.name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: malformed header ({exc})") from None
    for key in ("width", "height", "channels"):
        if not isinstance(header.get(key), int) or header[key] <= 0:
            raise FormatError(f"{side}: missing or invalid {key!r}")
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"{side}: unsupported dtype {header['dtype']!r}")
    if header.get("endianness", "little") != "little" or header.get("order", "row-major") != "row-major":
        raise FormatError(f"{side}: only little-endian row-major grids are supported")
    return header


def load_raw(path) -> np.ndarray:
    """Read a float32 grid; returns (H, W) for one channel, else (H, W, C)."""
    header = read_header(path)
    h, w, c = header["height"], header["width"], header["channels"]
    payload = Path(path).read_bytes()
    expected = h * w * c * 4
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    if len(payload) > expected:
        raise FormatError(f"{path}: payload of {len(payload)} bytes does not match {h}x{w}x{c} header")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5), 8 or 16 bit; returns raw sample values as float64."""
    data = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    raster = data[pos:pos + n]
    if len(raster) < n:
        raise FormatError(f"{path}: truncated PGM raster ({len(raster)} of {n} bytes)")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64)


def write_pgm(path, arr, maxval: int = 255) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM output must be 2D")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    raster = np.clip(np.rint(arr), 0, maxval).astype(dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P5\n%d %d\n%d\n" % (arr.shape[1], arr.shape[0], maxval) + raster.tobytes())


def load_mask(path) -> np.ndarray:
    """Mask from PGM (non-zero = inside) or raw grid."""
    arr = read_pgm(path) if Path(path).suffix.lower() == ".pgm" else load_raw(path)
    return np.asarray(arr) != 0


def save_mask(path, mask) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool) * 255)


def load_image(path, mask=None) -> ImageGrid:
    """Load an anatomical/functional image (PGM or raw float32).

    ``mask`` may be an array or a path; for raw grids a ``"mask"`` entry in the
    sidecar (path relative to the grid) is used when no mask is given.
    """
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        values = read_pgm(path)
    else:
        values = load_raw(path)
        if values.ndim != 2:
            raise FormatError(f"{path}: expected a single-channel image")
        if mask is None:
            ref = read_header(path).get("mask")
            if ref:
                mask = path.parent / ref
    if isinstance(mask, (str, Path)):
        mask = load_mask(mask)
    if mask is not None and np.shape(mask) != values.shape:
        raise FormatError(f"mask shape {np.shape(mask)} does not match image shape {values.shape}")
    return ImageGrid(values, mask)


def save_image(path, image: ImageGrid) -> None:
    """Raw float32 grid plus ``<stem>_mask.pgm`` referenced from the sidecar."""
    path = Path(path)
    mask_name = f"{path.stem}_mask.pgm"
    save_raw(path, image.values, extra={"mask": mask_name})
    save_mask(path.parent / mask_name, image.mask)


def downsample(image: ImageGrid, factor: int) -> ImageGrid:
    """Block-average by an integer ``factor``.

    Dimensions that are not multiples of ``factor`` are cropped at the
    bottom/right. The mask keeps a block when at least half its pixels are
    masked.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsampling factor must be an integer >= 1, got {factor}")
    f = int(factor)
    if f == 1:
        return ImageGrid(image.values.copy(), image.mask.copy())
    h, w = image.height // f, image.width // f
    if h == 0 or w == 0:
        raise ValueError(f"image {image.shape} is smaller than the factor {f}")

    def blocks(a):
        return a[: h * f, : w * f].reshape(h, f, w, f).mean(axis=(1, 3))

    return ImageGrid(blocks(image.values), blocks(image.mask.astype(np.float64)) >= 0.5)


# -- rendering -------------------------------------------------------------

RENDER_STYLES = ("gray", "binary", "orientation")


def scale_to_uint8(arr, mask=None) -> np.ndarray:
    """Min-max scale to 0..255 over ``mask``; a constant map becomes 128."""
    arr = np.asarray(arr, dtype=np.float64)
    sel = arr if mask is None else arr[np.asarray(mask, bool)]
    lo, hi = (float(sel.min()), float(sel.max())) if sel.size else (0.0, 0.0)
    if hi <= lo:
        out = np.full(arr.shape, 128.0)
    else:
        out = (arr - lo) / (hi - lo) * 255.0
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _draw_segment(img, x0, y0, x1, y1, color) -> None:
    # nearest-pixel sampling along the exact segment (no endpoint snapping)
    n = int(np.ceil(2 * max(abs(x1 - x0), abs(y1 - y0)))) + 1
    t = np.linspace(0.0, 1.0, n)
    xs = np.rint(x0 + t * (x1 - x0)).astype(int)
    ys = np.rint(y0 + t * (y1 - y0)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def orientation_overlay(field: TensorField, cell: int = 9, background=None, mask=None,
                        min_rel_anisotropy: float = 0.0) -> np.ndarray:
    """RGB raster with one segment per pixel along the principal eigenvector,
    length proportional to anisotropy (normalised to the field maximum)."""
    h, w = field.shape
    if background is None:
        base = np.zeros((h, w), np.uint8)
    else:
        base = scale_to_uint8(background, mask) // 2
    img = np.repeat(np.repeat(base, cell, axis=0), cell, axis=1)
    img = np.repeat(img[:, :, None], 3, axis=2)
    est = field.orientation()
    amax = float(est.anisotropy.max())
    if amax <= 0:
        return img
    rel = est.anisotropy / amax
    for r in range(h):
        for c in range(w):
            if (mask is not None and not mask[r, c]) or rel[r, c] <= min_rel_anisotropy:
                continue
            half = 0.45 * cell * rel[r, c]
            dx, dy = half * np.cos(est.angle[r, c]), half * np.sin(est.angle[r, c])
            cx, cy = (c + 0.5) * cell - 0.5, (r + 0.5) * cell - 0.5
            _draw_segment(img, cx - dx, cy - dy, cx + dx, cy + dy, (255, 40, 40))
    return img


def render_map(data, path, style: str = "gray", mask=None, **kwargs) -> np.ndarray:
    """Render a map to ``path`` (``.pgm`` or ``.png``) and return the raster.

    ``gray`` min-max scales a float map; ``binary`` draws non-zero as white;
    ``orientation`` expects a :class:`TensorField` and draws line segments
    (keyword arguments go to :func:`orientation_overlay`).
    """
    from PIL import Image

    if style not in RENDER_STYLES:
        raise ValueError(f"unsupported render style {style!r}; expected one of {RENDER_STYLES}")
    if style == "orientation":
        if not isinstance(data, TensorField):
            raise ValueError("orientation rendering needs a TensorField")
        raster = orientation_overlay(data, mask=mask, **kwargs)
    elif style == "binary":
        raster = (np.asarray(data) != 0).astype(np.uint8) * 255
    else:
        raster = scale_to_uint8(data, mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        if raster.ndim == 3:
            raster = np.asarray(Image.fromarray(raster).convert("L"))
        write_pgm(path, raster)
    elif path.suffix.lower() == ".png":
        Image.fromarray(raster).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported output format {path.suffix!r}; use .pgm or .png")
    return raster
