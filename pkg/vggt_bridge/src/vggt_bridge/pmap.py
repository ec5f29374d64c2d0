"""PMAP interchange writer/reader.

The layout is fixed so files are consumable without this package:

    header  "<4sIII" + "d"*14   magic b"PMAP", version 1, width, height,
                                3x4 world-to-camera extrinsic (row-major),
                                fov_y_deg, noise_sigma
    pixels  width*height packed records, row-major:
                                x, y, z, conf as <f4 and a u1 valid flag

Invalid pixels are canonically zeroed in every field.
"""

import struct

import numpy as np

from .errors import BridgeError

MAGIC = b"PMAP"
VERSION = 1
HEADER_FMT = "<4sIII" + "d" * 14
PIXEL_DTYPE = np.dtype(
    {"names": ["x", "y", "z", "conf", "valid"],
     "formats": ["<f4", "<f4", "<f4", "<f4", "u1"]}
)


def write_pmap(path, points, confidence, valid, extrinsic, fov_y_deg,
               noise_sigma=0.0) -> None:
    """Serialize one view.

    points (H, W, 3), confidence (H, W) in (0, 1] on valid pixels,
    valid (H, W) bool, extrinsic (3, 4) with orthonormal rotation.
    """
    points = np.asarray(points, dtype=np.float32)
    confidence = np.asarray(confidence, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    extrinsic = np.asarray(extrinsic, dtype=np.float64)
    if points.ndim != 3 or points.shape[2] != 3:
        raise BridgeError(f"points must be (H, W, 3), got {points.shape}")
    h, w = points.shape[:2]
    if confidence.shape != (h, w) or valid.shape != (h, w):
        raise BridgeError("confidence/valid grids do not match points")
    if h < 8 or w < 8:
        raise BridgeError(f"resolution {w}x{h} below the 8x8 format minimum")
    if extrinsic.shape != (3, 4):
        raise BridgeError(f"extrinsic must be (3, 4), got {extrinsic.shape}")
    rot = extrinsic[:, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
        raise BridgeError("extrinsic rotation is not orthonormal")
    if not (0.0 < fov_y_deg < 180.0):
        raise BridgeError(f"fov_y_deg {fov_y_deg} out of (0, 180)")
    if not np.isfinite(points[valid]).all():
        raise BridgeError("non-finite points on valid pixels")
    cv = confidence[valid]
    if cv.size and not ((cv > 0.0) & (cv <= 1.0)).all():
        raise BridgeError("valid confidences must lie in (0, 1]")

    header = struct.pack(
        HEADER_FMT, MAGIC, VERSION, w, h,
        *extrinsic.reshape(-1).tolist(),
        float(fov_y_deg), float(noise_sigma),
    )
    rec = np.zeros(h * w, dtype=PIXEL_DTYPE)
    mask = valid.reshape(-1)
    pts = points.reshape(-1, 3)
    rec["x"][mask] = pts[mask, 0]
    rec["y"][mask] = pts[mask, 1]
    rec["z"][mask] = pts[mask, 2]
    rec["conf"][mask] = confidence.reshape(-1)[mask]
    rec["valid"][mask] = 1
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_pmap(path) -> dict:
    """Parse a PMAP file into arrays; float payloads stay float32."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header_size = struct.calcsize(HEADER_FMT)
    if len(raw) < header_size:
        raise BridgeError(f"{path}: shorter than the header")
    fields = struct.unpack_from(HEADER_FMT, raw)
    magic, version, w, h = fields[:4]
    if magic != MAGIC:
        raise BridgeError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BridgeError(f"{path}: unsupported version {version}")
    if len(raw) != header_size + w * h * PIXEL_DTYPE.itemsize:
        raise BridgeError(f"{path}: truncated pixel payload")
    rec = np.frombuffer(raw[header_size:], dtype=PIXEL_DTYPE).reshape(h, w)
    return {
        "width": w,
        "height": h,
        "extrinsic": np.array(fields[4:16], dtype=np.float64).reshape(3, 4),
        "fov_y_deg": fields[16],
        "noise_sigma": fields[17],
        "points": np.stack([rec["x"], rec["y"], rec["z"]], axis=-1),
        "confidence": rec["conf"].copy(),
        "valid": rec["valid"] != 0,
    }
