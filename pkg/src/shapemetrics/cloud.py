"""Fusion of per-view point maps into 4-D feature clouds.

The regressor consumes (x, y, z, confidence) rows. The pipeline order
is fixed — merge -> select_top_confidence -> subsample — and each cloud
carries a stage marker so out-of-order composition fails loudly instead
of silently reordering the statistics.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, EmptyCloudError
from .seeding import derive_seed

_MAGIC = b"FCLD"
_VERSION = 1
_HEADER_FMT = "<4sIQQ"

# stage ordering; each op names the stages it accepts
_STAGES = ("merged", "selected", "subsampled")


@dataclass
class FeatureCloud:
    """Point set with per-point confidence and source-view provenance."""

    points: np.ndarray  # (N, 3) float64
    confidence: np.ndarray  # (N,) float64 in (0, 1]
    provenance: np.ndarray  # (N,) int64 view index, -1 if unknown
    shape_id: str = ""
    stage: str = "merged"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must be (N, 3), got {self.points.shape}")
        n = len(self.points)
        if len(self.confidence) != n or len(self.provenance) != n:
            raise DataError("points/confidence/provenance lengths disagree")
        if n == 0:
            raise EmptyCloudError(f"cloud '{self.shape_id}' has no points")
        if not np.isfinite(self.points).all():
            raise DataError("non-finite point coordinates")
        if not ((self.confidence > 0.0) & (self.confidence <= 1.0)).all():
            raise DataError("confidence must lie in (0, 1]")
        if self.stage not in _STAGES:
            raise DataError(f"unknown pipeline stage '{self.stage}'")

    @property
    def n_points(self) -> int:
        return len(self.points)

    def features(self) -> np.ndarray:
        """The regressor input layout, exactly (x, y, z, confidence)."""
        return np.concatenate([self.points, self.confidence[:, None]], axis=1)

    def take(self, indices: np.ndarray, stage: str) -> "FeatureCloud":
        return FeatureCloud(
            points=self.points[indices],
            confidence=self.confidence[indices],
            provenance=self.provenance[indices],
            shape_id=self.shape_id,
            stage=stage,
        )


def _require_stage(cloud: FeatureCloud, allowed: tuple, op: str) -> None:
    if cloud.stage not in allowed:
        raise DataError(
            f"{op} expects a cloud in stage {allowed}, got '{cloud.stage}' "
            "(pipeline order is merge -> select -> subsample)"
        )


def merge_pointmaps(maps, shape_id: str = "") -> FeatureCloud:
    """Concatenate valid pixels of all views, in (view, row-major) order."""
    maps = list(maps)
    if not maps:
        raise DataError("merge_pointmaps needs at least one map")
    pts, conf, prov = [], [], []
    for view_idx, pm in enumerate(maps):
        mask = pm.valid
        if not mask.any():
            continue
        pts.append(pm.points[mask])
        conf.append(pm.confidence[mask])
        prov.append(np.full(int(mask.sum()), view_idx, dtype=np.int64))
    if not pts:
        raise EmptyCloudError("all pixels invalid across every view")
    return FeatureCloud(
        points=np.concatenate(pts),
        confidence=np.concatenate(conf),
        provenance=np.concatenate(prov),
        shape_id=shape_id,
        stage="merged",
    )


def select_top_confidence(cloud: FeatureCloud, fraction: float) -> FeatureCloud:
    """Keep the ceil(fraction*N) highest-confidence points.

    Ties break by original order; the survivors keep their original
    relative order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    _require_stage(cloud, ("merged",), "select_top_confidence")
    keep = math.ceil(fraction * cloud.n_points)
    order = np.argsort(-cloud.confidence, kind="stable")  # stable = tie by order
    chosen = np.sort(order[:keep])
    return cloud.take(chosen, stage="selected")


def subsample(cloud: FeatureCloud, n: int, seed: int) -> FeatureCloud:
    """Exactly n points: without replacement when N >= n, else keep all
    points and top up with replacement (static tensor shapes downstream).
    """
    if n < 1:
        raise ConfigError("subsample size must be >= 1")
    _require_stage(cloud, ("merged", "selected"), "subsample")
    rng = np.random.default_rng(seed)
    big_n = cloud.n_points
    if big_n >= n:
        idx = rng.choice(big_n, size=n, replace=False)
    else:
        extra = rng.choice(big_n, size=n - big_n, replace=True)
        idx = np.concatenate([np.arange(big_n), extra])
    return cloud.take(idx, stage="subsampled")


def epoch_resample(
    cloud: FeatureCloud, n: int, epoch: int, base_seed: int, augment: bool = True
) -> FeatureCloud:
    """Per-epoch training subsample.

    Augmented mode derives the seed from (base_seed, shape_id, epoch) so
    every epoch sees a fresh subset; non-augmented mode ignores the
    epoch and reproduces one fixed subset.
    """
    if augment:
        seed = derive_seed(base_seed, "resample", cloud.shape_id, epoch)
    else:
        seed = derive_seed(base_seed, "resample", cloud.shape_id)
    return subsample(cloud, n, seed)


def build_cloud(
    maps, top_fraction: float, n: int, seed: int, shape_id: str = ""
) -> FeatureCloud:
    """The one supported composition: merge -> select -> subsample."""
    cloud = merge_pointmaps(maps, shape_id=shape_id)
    cloud = select_top_confidence(cloud, top_fraction)
    return subsample(cloud, n, seed)


# ---------------------------------------------------------------------------
# FCLD cache format
# ---------------------------------------------------------------------------
#
# little-endian: magic "FCLD", version u32, N u64, shape-id hash u64
# (first 8 bytes of sha256(shape_id), little-endian), then N rows of
# (x, y, z, confidence) float32. Provenance and stage are not persisted:
# caches act as merge-stage inputs downstream.


def _shape_id_hash(shape_id: str) -> int:
    return int.from_bytes(hashlib.sha256(shape_id.encode("utf-8")).digest()[:8], "little")


def save_fcld(cloud: FeatureCloud, path) -> None:
    header = struct.pack(
        _HEADER_FMT, _MAGIC, _VERSION, cloud.n_points, _shape_id_hash(cloud.shape_id)
    )
    payload = cloud.features().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_fcld(path, expected_shape_id: str = None) -> FeatureCloud:
    header_size = struct.calcsize(_HEADER_FMT)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < header_size:
        raise DataError(f"{path}: shorter than the FCLD header")
    magic, version, n, id_hash = struct.unpack_from(_HEADER_FMT, raw)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected_len = header_size + n * 16
    if len(raw) != expected_len:
        raise DataError(f"{path}: payload size {len(raw)} != expected {expected_len}")
    if expected_shape_id is not None and _shape_id_hash(expected_shape_id) != id_hash:
        raise DataError(f"{path}: shape-id hash mismatch for '{expected_shape_id}'")
    feats = np.frombuffer(raw[header_size:], dtype="<f4").reshape(n, 4).astype(np.float64)
    shape_id = expected_shape_id if expected_shape_id is not None else f"{id_hash:016x}"
    return FeatureCloud(
        points=feats[:, :3],
        confidence=feats[:, 3],
        provenance=np.full(n, -1, dtype=np.int64),
        shape_id=shape_id,
        stage="merged",
    )
