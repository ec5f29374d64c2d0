"""Inference backends.

A backend maps an ordered list of masked RGB images to per-view dense
point maps with raw confidence scores. All geometry is expressed in the
first view's camera frame — view 0 always carries the identity extrinsic
and later views carry their pose relative to it.
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BridgeError


@dataclass
class ViewPrediction:
    points: np.ndarray  # (H, W, 3) float32, first-view frame
    confidence: np.ndarray  # (H, W) float32, raw model units
    valid: np.ndarray  # (H, W) bool, False where the model saw background
    extrinsic: np.ndarray  # (3, 4) world-to-camera, world = first view
    fov_y_deg: float


class Backend(Protocol):
    def infer(self, images: list) -> list: ...


def _look_at(position, target, up):
    """World-to-camera [R|t]: x right, y down, z forward."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ position


class SyntheticBackend:
    """Checkpoint-free stand-in with the same output contract.

    Per-view surfaces are unprojected from an intensity-derived depth
    field, so output is a pure function of (seed, image bytes, view
    order) — re-running on identical inputs is bit-identical. Raw
    confidences stay strictly inside (0, 1).
    """

    def __init__(self, seed: int = 0, fov_y_deg: float = 40.0):
        if not (0.0 < fov_y_deg < 180.0):
            raise BridgeError(f"fov_y_deg {fov_y_deg} out of (0, 180)")
        self.seed = seed
        self.fov_y_deg = float(fov_y_deg)

    def _rng(self, view_idx: int, image: np.ndarray):
        h = hashlib.blake2b(digest_size=8)
        h.update(str((self.seed, view_idx)).encode())
        h.update(np.ascontiguousarray(image, dtype=np.float32).tobytes())
        return np.random.default_rng(int.from_bytes(h.digest(), "little"))

    def _poses(self, n: int):
        """Ring of look-at cameras, re-based so view 0 is the identity."""
        up = np.array([0.0, 0.0, 1.0])
        center = np.zeros(3)
        raw = []
        for i in range(n):
            az = 2.0 * math.pi * i / n
            pos = 2.0 * np.array(
                [math.cos(0.3) * math.cos(az), math.cos(0.3) * math.sin(az),
                 math.sin(0.3)]
            )
            raw.append(_look_at(pos, center, up))
        r0, t0 = raw[0]
        rebased = []
        for r, t in raw:
            rr = r @ r0.T
            rebased.append(np.hstack([rr, (t - rr @ t0)[:, None]]))
        return rebased

    def infer(self, images: list) -> list:
        if not images:
            raise BridgeError("backend received no images")
        extrinsics = self._poses(len(images))
        out = []
        for idx, img in enumerate(images):
            img = np.asarray(img, dtype=np.float32)
            h, w = img.shape[:2]
            intensity = img.mean(axis=2)
            valid = (img > 0).any(axis=2)
            rng = self._rng(idx, img)

            # pinhole unprojection of a smooth depth field, camera frame
            focal = (h / 2.0) / math.tan(math.radians(self.fov_y_deg) / 2.0)
            u = (np.arange(w) + 0.5 - w / 2.0) / focal
            v = (np.arange(h) + 0.5 - h / 2.0) / focal
            uu, vv = np.meshgrid(u, v)
            depth = 1.6 + 0.8 * intensity + 0.2 * np.cos(3.0 * uu) * np.sin(2.0 * vv)
            cam = np.stack([uu * depth, vv * depth, depth], axis=-1)
            ext = extrinsics[idx]
            world = (cam - ext[:, 3]) @ ext[:, :3]  # rot.T applied rowwise

            conf = 0.05 + 0.85 * intensity + rng.uniform(-0.02, 0.02, size=(h, w))
            out.append(
                ViewPrediction(
                    points=world.astype(np.float32),
                    confidence=np.clip(conf, 0.01, 0.97).astype(np.float32),
                    valid=valid,
                    extrinsic=ext,
                    fov_y_deg=self.fov_y_deg,
                )
            )
        return out


class VGGTBackend:
    """Adapter around an exported TorchScript pointmap module.

    The module is called with a (N, 3, H, W) float batch and must return
    a dict holding "points" (N, H, W, 3) and "conf" (N, H, W), both in
    the first view's frame; optional "extrinsics" (N, 3, 4) carries the
    camera branch when the export bundles it. Confidences pass through
    in raw model units.
    """

    def __init__(self, checkpoint, device: str = "cpu",
                 fov_y_deg: float = 50.0):
        self.checkpoint = Path(checkpoint)
        self.device = device
        self.fov_y_deg = float(fov_y_deg)
        self._model = None

    def _load(self):
        if self._model is not None:
            return self._model
        try:
            import torch
        except ImportError as exc:
            raise BridgeError(
                "the VGGT backend needs PyTorch (pip install torch), or use "
                "--backend synthetic"
            ) from exc
        if not self.checkpoint.is_file():
            raise BridgeError(
                f"model checkpoint not found at {self.checkpoint}; export "
                "the pretrained pointmap branch with torch.jit.save and "
                "pass its path via --checkpoint"
            )
        try:
            self._model = torch.jit.load(str(self.checkpoint),
                                         map_location=self.device)
        except Exception as exc:
            raise BridgeError(
                f"could not load {self.checkpoint}: {exc}"
            ) from exc
        self._model.eval()
        return self._model

    def infer(self, images: list) -> list:
        import torch

        if not images:
            raise BridgeError("backend received no images")
        shapes = {img.shape for img in images}
        if len(shapes) > 1:
            raise BridgeError(
                f"all views must share one resolution, got {sorted(shapes)}"
            )
        model = self._load()
        batch = torch.from_numpy(
            np.stack([np.moveaxis(img, 2, 0) for img in images])
        ).to(self.device)
        with torch.no_grad():
            result = model(batch)
        if not isinstance(result, dict) or "points" not in result or "conf" not in result:
            raise BridgeError(
                'model output must be a dict with "points" and "conf"'
            )
        pts = result["points"].cpu().numpy()
        conf = result["conf"].cpu().numpy()
        n, h, w = conf.shape
        if pts.shape != (n, h, w, 3) or n != len(images):
            raise BridgeError(
                f"model output shapes {pts.shape}/{conf.shape} do not match "
                f"{len(images)} views"
            )
        if "extrinsics" in result:
            exts = result["extrinsics"].cpu().numpy().astype(np.float64)
        else:
            exts = np.tile(np.eye(3, 4), (n, 1, 1))
        out = []
        for i, img in enumerate(images):
            valid = (img > 0).any(axis=2) & np.isfinite(pts[i]).all(axis=2)
            out.append(
                ViewPrediction(
                    points=pts[i].astype(np.float32),
                    confidence=conf[i].astype(np.float32),
                    valid=valid,
                    extrinsic=exts[i],
                    fov_y_deg=self.fov_y_deg,
                )
            )
        return out
