"""Masked-image loading.

Images are expected pre-masked: background pixels pure black. Everything
decodes to float32 (H, W, 3) in [0, 1]. Built-in support covers .npy and
binary .ppm/.pgm; other formats go through Pillow when it is installed.
"""

import re
from pathlib import Path

import numpy as np

from .errors import BridgeError

try:
    from PIL import Image as _PILImage
except ImportError:  # optional dependency
    _PILImage = None

BUILTIN_EXTS = (".npy", ".ppm", ".pgm")
PIL_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def supported_extensions() -> tuple:
    return BUILTIN_EXTS + (PIL_EXTS if _PILImage is not None else ())


def _to_unit_rgb(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise BridgeError(f"unsupported image shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    arr = arr[:, :, :3]  # drop alpha
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise BridgeError("non-finite pixel values")
    return np.clip(arr, 0.0, 1.0)


_PNM_TOKEN = re.compile(rb"(?:^|\s)(?:#[^\n]*\n\s*)*([0-9]+)")


def _read_pnm(data: bytes) -> np.ndarray:
    # binary P5 (gray) / P6 (rgb); comments allowed between header tokens
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise BridgeError(f"unsupported PNM magic {magic!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise BridgeError("malformed PNM header")
        tokens.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = tokens
    if maxval <= 0 or maxval > 65535:
        raise BridgeError(f"bad PNM maxval {maxval}")
    pos += 1  # single whitespace byte separates header from raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raster.size != count:
        raise BridgeError("PNM raster truncated")
    arr = raster.reshape(h, w, channels).astype(np.float32) / maxval
    return _to_unit_rgb(arr)


def load_image(path) -> np.ndarray:
    """Decode one file; raises BridgeError on anything unreadable."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".npy":
            return _to_unit_rgb(np.load(path, allow_pickle=False))
        if suffix in (".ppm", ".pgm"):
            return _read_pnm(path.read_bytes())
        if suffix in PIL_EXTS:
            if _PILImage is None:
                raise BridgeError(
                    f"{path.name}: {suffix} needs Pillow (pip install Pillow)"
                )
            with _PILImage.open(path) as img:
                return _to_unit_rgb(np.asarray(img.convert("RGB")))
    except BridgeError:
        raise
    except Exception as exc:
        raise BridgeError(f"{path.name}: decode failed ({exc})") from exc
    raise BridgeError(f"{path.name}: unsupported extension {suffix}")


def collect_images(images_dir) -> list:
    """Recognized image files in name order; order fixes the view indexing."""
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise BridgeError(f"image directory not found: {images_dir}")
    exts = supported_extensions()
    files = sorted(
        p for p in images_dir.iterdir()
        if p.is_file() and p.suffix.lower() in exts
    )
    if not files:
        raise BridgeError(
            f"no images with extensions {', '.join(exts)} in {images_dir}"
        )
    return files
