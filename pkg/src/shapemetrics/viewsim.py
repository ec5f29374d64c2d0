"""Camera simulation: pose sampling and geometric point-map synthesis.

Stands in for a learned multi-view reconstruction front-end: each view
ray-casts the mesh (nearest hit), adds optional along-ray Gaussian
noise, and scores every point with a confidence that falls off for
grazing incidence and noisy captures. Output point maps share one world
frame, so downstream fusion needs no registration.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import TriMesh
from .seeding import derive_seed

# confidence = |n.r| * exp(-sigma/SIGMA0): grazing surfaces and noisy
# captures are penalized; SIGMA0 sets how fast noise erodes trust
SIGMA0 = 0.01
_CONF_FLOOR = 1e-9  # keeps confidence strictly positive

_MAGIC = b"PMAP"
_VERSION = 1
# per-pixel record: x, y, z, confidence (float32) + valid flag (uint8)
_PIXEL_DTYPE = np.dtype(
    {"names": ["x", "y", "z", "conf", "valid"],
     "formats": ["<f4", "<f4", "<f4", "<f4", "u1"]}
)
_TILE = 16
_RAY_EPS = 1e-9

_WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class CameraPose:
    """Pinhole camera: x right, y down, z forward; square pixels.

    Defined either by (position, look_at, up) or restored from a stored
    3x4 world-to-camera extrinsic. The raw extrinsic is cached on load
    so a loaded pose re-serializes bit-exactly.
    """

    position: np.ndarray
    look_at: np.ndarray
    fov_y_deg: float
    width: int
    height: int
    up: np.ndarray = field(default_factory=lambda: _WORLD_UP.copy())
    _extrinsic: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if self.width < 8 or self.height < 8:
            raise ConfigError("resolution must be at least 8x8")
        if not (0.0 < self.fov_y_deg < 180.0):
            raise ConfigError("fov_y_deg must lie in (0, 180)")
        if self._extrinsic is None and np.allclose(self.position, self.look_at):
            raise ConfigError("position and look_at coincide")

    def extrinsic(self) -> np.ndarray:
        """World-to-camera [R|t], shape (3, 4); x_cam = R @ x_world + t."""
        if self._extrinsic is not None:
            return self._extrinsic
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:  # looking straight along up: pick any right
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            nr = np.linalg.norm(right)
        right = right / nr
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        t = -rot @ self.position
        return np.hstack([rot, t[:, None]])

    @staticmethod
    def from_extrinsic(ext, fov_y_deg, width, height) -> "CameraPose":
        ext = np.asarray(ext, dtype=np.float64).reshape(3, 4)
        rot, t = ext[:, :3], ext[:, 3]
        position = -rot.T @ t
        forward = rot[2]
        up = -rot[1]
        return CameraPose(
            position=position,
            look_at=position + forward,
            fov_y_deg=float(fov_y_deg),
            width=int(width),
            height=int(height),
            up=up,
            _extrinsic=ext,
        )

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.fov_y_deg) / 2.0)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """(origin (3,), unit directions (H, W, 3)) in world coordinates."""
        ext = self.extrinsic()
        rot = ext[:, :3]
        u = np.arange(self.width) + 0.5 - self.width / 2.0
        v = np.arange(self.height) + 0.5 - self.height / 2.0
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([uu / self.focal_px, vv / self.focal_px, np.ones_like(uu)], axis=-1)
        d_world = d_cam @ rot  # == (rot.T @ d_cam.T).T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origin = -rot.T @ ext[:, 3]
        return origin, d_world

    def project(self, points_world: np.ndarray):
        """Continuous pixel coordinates (u, v) and camera depth z."""
        ext = self.extrinsic()
        cam = points_world @ ext[:, :3].T + ext[:, 3]
        z = cam[:, 2]
        f = self.focal_px
        u = cam[:, 0] / z * f + self.width / 2.0 - 0.5
        v = cam[:, 1] / z * f + self.height / 2.0 - 0.5
        return u, v, z


@dataclass
class PointMap:
    """Per-view grid of world-space surface points with confidences."""

    points: np.ndarray  # (H, W, 3) float64, world frame
    confidence: np.ndarray  # (H, W) float64 in (0, 1], zero where invalid
    valid: np.ndarray  # (H, W) bool
    pose: CameraPose
    noise_sigma: float

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


# ---------------------------------------------------------------------------
# pose samplers
# ---------------------------------------------------------------------------

_UNIT_BBOX_CIRCUMRADIUS = math.sqrt(3.0) / 2.0


def _pose_at(azimuth, elevation, radius, fov, width, height, center, jitter, rng):
    pos = center + radius * np.array(
        [
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ]
    )
    look = np.array(center, dtype=np.float64)
    if jitter > 0.0:
        pos = pos + rng.uniform(-jitter, jitter, size=3)
        look = look + rng.uniform(-jitter, jitter, size=3)
    return CameraPose(
        position=pos, look_at=look, fov_y_deg=fov, width=width, height=height
    )


def sample_ring_poses(
    n: int,
    radius: float = 2.2,
    jitter: float = 0.0,
    fov_range=(22.0, 40.0),
    seed: int = 0,
    width: int = 160,
    height: int = 120,
) -> list[CameraPose]:
    """n poses on a horizontal ring: even 360-degree azimuth coverage.

    Elevation is 0 up to the positional jitter; fov is drawn uniformly
    per view from fov_range. Radius must clear the unit bounding box.
    """
    if n < 1:
        raise ConfigError("need n >= 1 poses")
    if radius <= _UNIT_BBOX_CIRCUMRADIUS:
        raise ConfigError(
            f"camera radius {radius} is inside the unit-bbox circumradius"
        )
    rng = np.random.default_rng(derive_seed(seed, "ring", n))
    center = np.zeros(3)
    poses = []
    for i in range(n):
        azimuth = 2.0 * math.pi * i / n
        fov = float(rng.uniform(*fov_range))
        poses.append(
            _pose_at(azimuth, 0.0, radius, fov, width, height, center, jitter, rng)
        )
    return poses


# 2D low-discrepancy lattice (plastic-constant recurrence)
_PLASTIC = 1.3247179572447460259609088
_G1 = 1.0 / _PLASTIC
_G2 = 1.0 / _PLASTIC**2


def sample_sector_poses(
    n: int,
    sector_deg: float = 80.0,
    radius: float = 2.2,
    jitter: float = 0.0,
    fov_range=(22.0, 40.0),
    seed: int = 0,
    width: int = 160,
    height: int = 120,
) -> list[CameraPose]:
    """n poses quasi-uniform over a sector_deg x sector_deg angular window.

    Azimuth and elevation each span [-sector/2, +sector/2], filled by a
    low-discrepancy lattice with a seeded toroidal shift.
    """
    if n < 1:
        raise ConfigError("need n >= 1 poses")
    if not 0.0 < sector_deg <= 360.0:
        raise ConfigError("sector_deg must lie in (0, 360]")
    if radius <= _UNIT_BBOX_CIRCUMRADIUS:
        raise ConfigError(
            f"camera radius {radius} is inside the unit-bbox circumradius"
        )
    rng = np.random.default_rng(derive_seed(seed, "sector", n))
    shift = rng.random(2)
    half = math.radians(sector_deg) / 2.0
    # elevation window is clamped so poses stay off the poles
    elev_half = min(half, math.radians(80.0) / 2.0) if sector_deg > 160 else half
    center = np.zeros(3)
    poses = []
    for i in range(n):
        qx = (shift[0] + (i + 1) * _G1) % 1.0
        qy = (shift[1] + (i + 1) * _G2) % 1.0
        azimuth = (qx * 2.0 - 1.0) * half
        elevation = (qy * 2.0 - 1.0) * elev_half
        fov = float(rng.uniform(*fov_range))
        poses.append(
            _pose_at(azimuth, elevation, radius, fov, width, height, center, jitter, rng)
        )
    return poses


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _ray_cast_tiled(mesh: TriMesh, pose: CameraPose):
    """Nearest-hit ray cast for every pixel.

    Returns (t_hit (H,W), tri_index (H,W), origin, dirs). tri_index is
    -1 where the ray misses. Triangles are binned into screen tiles by
    their projected bounding boxes, then intersected per tile
    (Moller-Trumbore, vectorized over pixel x candidate pairs).
    """
    h, w = pose.height, pose.width
    origin, dirs = pose.pixel_rays()
    tri = mesh.triangles()

    u, v, z = pose.project(mesh.vertices)
    behind = (z <= 1e-9)[mesh.faces]  # (F, 3)
    fully_behind = behind.all(axis=1)
    straddling = behind.any(axis=1) & ~fully_behind
    tu, tv = u[mesh.faces], v[mesh.faces]  # (F, 3)
    lo_u = np.clip(np.floor(tu.min(axis=1)), 0, w - 1).astype(np.int64)
    hi_u = np.clip(np.ceil(tu.max(axis=1)), 0, w - 1).astype(np.int64)
    lo_v = np.clip(np.floor(tv.min(axis=1)), 0, h - 1).astype(np.int64)
    hi_v = np.clip(np.ceil(tv.max(axis=1)), 0, h - 1).astype(np.int64)
    on_screen = (tu.max(axis=1) >= 0) & (tu.min(axis=1) <= w - 1) & (
        tv.max(axis=1) >= 0
    ) & (tv.min(axis=1) <= h - 1)
    # triangles crossing the camera plane have no usable projected bbox:
    # bin them everywhere (rare); fully-behind ones can never be hit
    on_screen = (on_screen | straddling) & ~fully_behind
    lo_u[straddling], hi_u[straddling] = 0, w - 1
    lo_v[straddling], hi_v[straddling] = 0, h - 1

    tiles_x = (w + _TILE - 1) // _TILE
    tiles_y = (h + _TILE - 1) // _TILE
    bins: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for f in np.flatnonzero(on_screen):
        for ty in range(lo_v[f] // _TILE, hi_v[f] // _TILE + 1):
            row = ty * tiles_x
            for tx in range(lo_u[f] // _TILE, hi_u[f] // _TILE + 1):
                bins[row + tx].append(f)

    v0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]

    t_hit = np.full((h, w), np.inf)
    tri_idx = np.full((h, w), -1, dtype=np.int64)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            cand = bins[ty * tiles_x + tx]
            if not cand:
                continue
            cand = np.asarray(cand, dtype=np.int64)
            ys = slice(ty * _TILE, min((ty + 1) * _TILE, h))
            xs = slice(tx * _TILE, min((tx + 1) * _TILE, w))
            d = dirs[ys, xs].reshape(-1, 3)  # (P, 3)
            # Moller-Trumbore, broadcast P rays x T triangles
            pvec = np.cross(d[:, None, :], e2[None, cand])  # (P, T, 3)
            det = np.einsum("ptk,tk->pt", pvec, e1[cand])
            near_parallel = np.abs(det) < 1e-14
            det = np.where(near_parallel, 1.0, det)
            tvec = origin - v0[cand]  # (T, 3)
            bu = np.einsum("ptk,tk->pt", pvec, tvec) / det
            qvec = np.cross(tvec[None, :, :], e1[None, cand])
            bv = np.einsum("ptk,pk->pt", qvec, d) / det
            t = np.einsum("ptk,tk->pt", qvec, e2[cand]) / det
            ok = (
                ~near_parallel
                & (bu >= -1e-12)
                & (bv >= -1e-12)
                & (bu + bv <= 1.0 + 1e-12)
                & (t > _RAY_EPS)
            )
            t = np.where(ok, t, np.inf)
            best = t.argmin(axis=1)
            rows = np.arange(len(d))
            best_t = t[rows, best]
            hit = np.isfinite(best_t)
            block_t = t_hit[ys, xs].reshape(-1)
            block_i = tri_idx[ys, xs].reshape(-1)
            take = hit & (best_t < block_t)
            block_t[take] = best_t[take]
            block_i[take] = cand[best[take]]
            t_hit[ys, xs] = block_t.reshape(t_hit[ys, xs].shape)
            tri_idx[ys, xs] = block_i.reshape(tri_idx[ys, xs].shape)
    return t_hit, tri_idx, origin, dirs


def render_pointmap(
    mesh: TriMesh, pose: CameraPose, noise_sigma: float = 0.0, seed: int = 0
) -> PointMap:
    """Ray-cast one view into a PointMap.

    Valid pixels carry the nearest surface intersection plus Gaussian
    noise of scale noise_sigma along the view ray; their confidence is
    |cos(incidence)| * exp(-noise_sigma / SIGMA0), clamped into (0, 1].
    Missed rays are invalid with zeroed point and confidence.
    """
    if noise_sigma < 0.0:
        raise ConfigError("noise_sigma must be >= 0")
    t_hit, tri_idx, origin, dirs = _ray_cast_tiled(mesh, pose)
    valid = tri_idx >= 0
    h, w = valid.shape

    points = np.zeros((h, w, 3))
    confidence = np.zeros((h, w))
    if valid.any():
        vy, vx = np.nonzero(valid)
        d = dirs[vy, vx]
        t = t_hit[vy, vx]
        hits = origin + d * t[:, None]
        if noise_sigma > 0.0:
            rng = np.random.default_rng(derive_seed(seed, "render-noise"))
            hits = hits + d * rng.normal(0.0, noise_sigma, size=len(d))[:, None]
        tri = mesh.triangles()[tri_idx[vy, vx]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        cos_inc = np.abs(np.einsum("ij,ij->i", n, d))
        conf = np.clip(cos_inc * math.exp(-noise_sigma / SIGMA0), _CONF_FLOOR, 1.0)
        points[vy, vx] = hits
        confidence[vy, vx] = conf
    return PointMap(
        points=points,
        confidence=confidence,
        valid=valid,
        pose=pose,
        noise_sigma=float(noise_sigma),
    )


# ---------------------------------------------------------------------------
# PMAP interchange format
# ---------------------------------------------------------------------------
#
# layout, little-endian throughout:
#   magic   4 bytes  "PMAP"
#   version u32
#   width   u32
#   height  u32
#   extrinsic 12 x f64   world-to-camera [R|t], row-major
#   fov_y_deg  f64
#   noise_sigma f64
#   payload   width*height records, row-major:
#             x, y, z, confidence (f32), valid (u8)   -- 17 bytes
# invalid pixels are canonically zeroed.

_HEADER_FMT = "<4sIII" + "d" * 14


def save_pmap(pmap: PointMap, path) -> None:
    h, w = pmap.valid.shape
    if (w, h) != (pmap.pose.width, pmap.pose.height):
        raise DataError("point-map grid does not match the pose resolution")
    header = struct.pack(
        _HEADER_FMT,
        _MAGIC,
        _VERSION,
        w,
        h,
        *pmap.pose.extrinsic().reshape(-1).tolist(),
        float(pmap.pose.fov_y_deg),
        float(pmap.noise_sigma),
    )
    rec = np.zeros(h * w, dtype=_PIXEL_DTYPE)
    mask = pmap.valid.reshape(-1)
    pts = pmap.points.reshape(-1, 3).astype(np.float32)
    conf = pmap.confidence.reshape(-1).astype(np.float32)
    # canonical zeroing: invalid pixels carry no data
    rec["x"][mask] = pts[mask, 0]
    rec["y"][mask] = pts[mask, 1]
    rec["z"][mask] = pts[mask, 2]
    rec["conf"][mask] = conf[mask]
    rec["valid"][mask] = 1
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_pmap(path) -> PointMap:
    issues = validate_pmap(path)
    if issues:
        raise DataError(f"{path}: " + "; ".join(issues))
    with open(path, "rb") as fh:
        raw_header = fh.read(struct.calcsize(_HEADER_FMT))
        fields = struct.unpack(_HEADER_FMT, raw_header)
        _, _, w, h = fields[:4]
        ext = np.array(fields[4:16], dtype=np.float64).reshape(3, 4)
        fov, noise_sigma = fields[16], fields[17]
        rec = np.frombuffer(fh.read(), dtype=_PIXEL_DTYPE).reshape(h, w)
    pose = CameraPose.from_extrinsic(ext, fov, w, h)
    points = np.stack(
        [rec["x"], rec["y"], rec["z"]], axis=-1
    ).astype(np.float64)
    return PointMap(
        points=points,
        confidence=rec["conf"].astype(np.float64),
        valid=rec["valid"] != 0,
        pose=pose,
        noise_sigma=float(noise_sigma),
    )


def validate_pmap(path) -> list[str]:
    """Structural conformance check; returns a list of issues (empty = ok)."""
    issues = []
    header_size = struct.calcsize(_HEADER_FMT)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < header_size:
        return ["file shorter than header"]
    fields = struct.unpack_from(_HEADER_FMT, raw)
    magic, version, w, h = fields[:4]
    if magic != _MAGIC:
        return [f"bad magic {magic!r}"]
    if version != _VERSION:
        issues.append(f"unsupported version {version}")
    if w < 8 or h < 8:
        issues.append(f"implausible resolution {w}x{h}")
    expected = header_size + w * h * _PIXEL_DTYPE.itemsize
    if len(raw) != expected:
        issues.append(f"payload size {len(raw)} != expected {expected}")
        return issues
    ext = np.array(fields[4:16]).reshape(3, 4)
    rot = ext[:, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
        issues.append("extrinsic rotation is not orthonormal")
    fov = fields[16]
    if not (0.0 < fov < 180.0):
        issues.append(f"fov {fov} out of range")
    rec = np.frombuffer(raw[header_size:], dtype=_PIXEL_DTYPE)
    valid = rec["valid"]
    if not np.isin(valid, (0, 1)).all():
        issues.append("valid flags must be 0 or 1")
    vm = valid == 1
    for name in ("x", "y", "z", "conf"):
        col = rec[name]
        if not np.isfinite(col[vm]).all():
            issues.append(f"non-finite {name} on valid pixels")
        if col[~vm].any():
            issues.append(f"invalid pixels carry nonzero {name}")
    conf = rec["conf"][vm]
    if len(conf) and not ((conf > 0.0) & (conf <= 1.0)).all():
        issues.append("valid confidences must lie in (0, 1]")
    return issues
