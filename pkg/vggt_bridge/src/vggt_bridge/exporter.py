"""Batch export of model point maps into PMAP files.

View order is the name-sorted image order; the first image anchors the
world frame (its extrinsic is the identity). The model's confidence
scale is unnormalized, so `confidence_floor` is compared in raw units;
kept scores are then squashed monotonically by c / (1 + c) to fit the
format's (0, 1] confidence range without reordering pixels.
"""

import warnings
from pathlib import Path

import numpy as np

from .backends import SyntheticBackend
from .errors import BridgeError
from .images import collect_images, load_image


def _squash(raw: np.ndarray) -> np.ndarray:
    return raw / (1.0 + raw)


def export(images_dir, output_dir, confidence_floor: float = 0.0,
           backend=None) -> list:
    """Run the backend on every readable image; one .pmap per view.

    Pixels the model marks as background, and pixels whose raw
    confidence falls below `confidence_floor`, are flagged invalid.
    Unreadable images are skipped with a warning. Returns the written
    paths in view order. Without an explicit backend a deterministic
    synthetic stand-in is used; pass a VGGTBackend to run the real
    model.
    """
    if confidence_floor < 0.0:
        raise BridgeError(f"confidence_floor must be >= 0, got {confidence_floor}")
    if backend is None:
        backend = SyntheticBackend()

    files = collect_images(images_dir)
    views, names = [], []
    for path in files:
        try:
            views.append(load_image(path))
        except BridgeError as exc:
            warnings.warn(f"skipping {path.name}: {exc}", RuntimeWarning,
                          stacklevel=2)
            continue
        names.append(path.stem)
    if not views:
        raise BridgeError(f"no readable images in {images_dir}")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise BridgeError(
            f"duplicate output stems {dupes}: rename the inputs so each "
            "view maps to a distinct .pmap file"
        )

    preds = backend.infer(views)
    if len(preds) != len(views):
        raise BridgeError(
            f"backend returned {len(preds)} views for {len(views)} images"
        )

    from . import pmap

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, pred in zip(names, preds):
        raw = np.asarray(pred.confidence, dtype=np.float32)
        # zero / non-finite scores carry no usable signal regardless of floor
        valid = (
            np.asarray(pred.valid, dtype=bool)
            & np.isfinite(raw) & (raw > 0.0) & (raw >= confidence_floor)
        )
        conf = np.where(valid, _squash(raw.astype(np.float64)), 0.0)
        out_path = output_dir / f"{name}.pmap"
        pmap.write_pmap(
            out_path,
            points=pred.points,
            confidence=conf.astype(np.float32),
            valid=valid,
            extrinsic=pred.extrinsic,
            fov_y_deg=pred.fov_y_deg,
            noise_sigma=0.0,  # simulation-only field; real captures write 0
        )
        written.append(out_path)
    return written
