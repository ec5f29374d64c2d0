"""Pose sampling, ray-cast point maps, confidence model, PMAP format."""

import math
import struct

import numpy as np
import pytest
from scipy.spatial import cKDTree

from shapemetrics.errors import ConfigError, DataError
from shapemetrics.geometry import TriMesh
from shapemetrics.synth import icosphere
from shapemetrics.viewsim import (
    SIGMA0,
    CameraPose,
    load_pmap,
    render_pointmap,
    sample_ring_poses,
    sample_sector_poses,
    save_pmap,
    validate_pmap,
)

from helpers import translated, unit_cube


def centered_cube() -> TriMesh:
    return translated(unit_cube(), (-0.5, -0.5, -0.5))


def _azimuth(pose: CameraPose) -> float:
    return math.degrees(math.atan2(pose.position[1], pose.position[0]))


# ---------------------------------------------------------------------------
# pose samplers
# ---------------------------------------------------------------------------


def test_ring_spacing_exact_without_jitter():
    poses = sample_ring_poses(30, radius=2.2, jitter=0.0, seed=1)
    az = np.sort([(_azimuth(p)) % 360.0 for p in poses])
    gaps = np.diff(az)
    assert np.allclose(gaps, 12.0, atol=1e-9)
    assert all(abs(p.position[2]) < 1e-12 for p in poses)  # elevation 0


def test_ring_single_pose_at_azimuth_zero():
    (pose,) = sample_ring_poses(1, radius=2.0, jitter=0.0, seed=3)
    assert pose.position == pytest.approx([2.0, 0.0, 0.0])


def test_ring_deterministic_and_fov_in_range():
    a = sample_ring_poses(8, radius=2.0, jitter=0.1, fov_range=(22, 40), seed=9)
    b = sample_ring_poses(8, radius=2.0, jitter=0.1, fov_range=(22, 40), seed=9)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.position, pb.position)
        assert pa.fov_y_deg == pb.fov_y_deg
        assert 22.0 <= pa.fov_y_deg <= 40.0


def test_ring_rejects_radius_inside_bbox():
    with pytest.raises(ConfigError):
        sample_ring_poses(4, radius=0.5)
    with pytest.raises(ConfigError):
        sample_ring_poses(0, radius=2.0)


def test_sector_poses_stay_in_window():
    poses = sample_sector_poses(16, sector_deg=80.0, radius=2.2, seed=5)
    assert len(poses) == 16
    for p in poses:
        az = _azimuth(p)
        elev = math.degrees(math.asin(p.position[2] / np.linalg.norm(p.position)))
        assert -40.0 - 1e-9 <= az <= 40.0 + 1e-9
        assert -40.0 - 1e-9 <= elev <= 40.0 + 1e-9


def test_sector_full_circle_covers_ring_span():
    poses = sample_sector_poses(64, sector_deg=360.0, radius=2.2, seed=2)
    az = np.array([(_azimuth(p)) % 360.0 for p in poses])
    assert az.max() - az.min() > 300.0


def test_sector_pairwise_separation_positive():
    poses = sample_sector_poses(4, sector_deg=80.0, radius=2.2, seed=7)
    pts = np.array([p.position for p in poses])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(pts[i] - pts[j]) > 1e-6


def test_sector_rejects_bad_sector():
    with pytest.raises(ConfigError):
        sample_sector_poses(4, sector_deg=0.0)
    with pytest.raises(ConfigError):
        sample_sector_poses(4, sector_deg=361.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _cube_surface_distance(points: np.ndarray) -> np.ndarray:
    """Exact distance from points to the centered unit cube's surface."""
    best = np.full(len(points), np.inf)
    for axis in range(3):
        for side in (-0.5, 0.5):
            plane_d = np.abs(points[:, axis] - side)
            others = [a for a in range(3) if a != axis]
            inside = np.all(
                (points[:, others] >= -0.5 - 1e-9) & (points[:, others] <= 0.5 + 1e-9),
                axis=1,
            )
            cand = np.where(inside, plane_d, np.inf)
            best = np.minimum(best, cand)
    return best


def test_noiseless_points_lie_on_surface():
    pose = sample_ring_poses(1, radius=2.5, jitter=0.0, seed=0, width=64, height=48)[0]
    pm = render_pointmap(centered_cube(), pose, noise_sigma=0.0, seed=0)
    assert pm.n_valid > 100
    pts = pm.points[pm.valid]
    assert _cube_surface_distance(pts).max() <= 1e-9


def test_backprojection_lands_in_own_pixel():
    pose = sample_ring_poses(1, radius=2.5, jitter=0.0, seed=0, width=64, height=48)[0]
    pm = render_pointmap(centered_cube(), pose, noise_sigma=0.0, seed=0)
    vy, vx = np.nonzero(pm.valid)
    u, v, z = pose.project(pm.points[vy, vx])
    assert np.all(z > 0)
    assert np.array_equal(np.rint(u).astype(int), vx)
    assert np.array_equal(np.rint(v).astype(int), vy)


def test_confidence_drops_toward_silhouette():
    pose = CameraPose(
        position=(2.2, 0.0, 0.0), look_at=(0.0, 0.0, 0.0),
        fov_y_deg=32.0, width=96, height=96,
    )
    pm = render_pointmap(icosphere(3), pose, noise_sigma=0.0, seed=0)
    assert pm.n_valid > 1000
    # center pixel sees the sphere head-on: confidence near 1
    cy, cx = pm.valid.shape[0] // 2, pm.valid.shape[1] // 2
    assert pm.confidence[cy, cx] > 0.95
    # silhouette-adjacent pixels graze the surface: lower mean confidence
    v = pm.valid
    padded = np.pad(v, 1, constant_values=False)
    has_invalid_nbr = ~(
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    edge = v & has_invalid_nbr
    interior = v & ~has_invalid_nbr
    assert pm.confidence[edge].mean() < pm.confidence[interior].mean()


def test_noise_displaces_along_ray_and_scales_confidence():
    pose = sample_ring_poses(1, radius=2.5, jitter=0.0, seed=0, width=64, height=48)[0]
    sigma = 0.01
    pm = render_pointmap(centered_cube(), pose, noise_sigma=sigma, seed=4)
    pts = pm.points[pm.valid]
    dist = _cube_surface_distance(pts)
    assert dist.max() > 1e-6  # actually displaced
    assert np.percentile(dist, 99) < 5 * sigma
    assert pm.confidence[pm.valid].max() <= math.exp(-sigma / SIGMA0) + 1e-12
    assert pm.confidence[pm.valid].min() > 0.0


def test_render_deterministic():
    pose = sample_ring_poses(1, radius=2.2, seed=0, width=32, height=24)[0]
    a = render_pointmap(icosphere(2), pose, noise_sigma=0.005, seed=11)
    b = render_pointmap(icosphere(2), pose, noise_sigma=0.005, seed=11)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.confidence, b.confidence)
    assert np.array_equal(a.valid, b.valid)


def test_empty_view_all_invalid():
    pose = CameraPose(
        position=(3.0, 0.0, 0.0), look_at=(6.0, 0.0, 0.0),  # looking away
        fov_y_deg=30.0, width=32, height=24,
    )
    pm = render_pointmap(icosphere(1), pose, noise_sigma=0.0, seed=0)
    assert pm.n_valid == 0
    assert not pm.points.any()


def test_render_rejects_negative_sigma():
    pose = sample_ring_poses(1, radius=2.2, seed=0, width=32, height=24)[0]
    with pytest.raises(ConfigError):
        render_pointmap(icosphere(1), pose, noise_sigma=-0.1, seed=0)


def test_camera_pose_validation():
    with pytest.raises(ConfigError):
        CameraPose(position=(1, 0, 0), look_at=(1, 0, 0), fov_y_deg=30, width=32, height=24)
    with pytest.raises(ConfigError):
        CameraPose(position=(1, 0, 0), look_at=(0, 0, 0), fov_y_deg=30, width=4, height=24)
    with pytest.raises(ConfigError):
        CameraPose(position=(1, 0, 0), look_at=(0, 0, 0), fov_y_deg=0.0, width=32, height=24)


def _coverage_fraction(mesh, pointmaps, seed=0, tau=0.05, n_surface=2000):
    """Fraction of area-weighted surface samples within tau of a map point."""
    rng = np.random.default_rng(seed)
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    idx = rng.choice(len(tri), size=n_surface, p=areas / areas.sum())
    r1, r2 = rng.random(n_surface), rng.random(n_surface)
    swap = r1 + r2 > 1.0
    r1[swap], r2[swap] = 1.0 - r1[swap], 1.0 - r2[swap]
    samples = (
        tri[idx, 0]
        + r1[:, None] * (tri[idx, 1] - tri[idx, 0])
        + r2[:, None] * (tri[idx, 2] - tri[idx, 0])
    )
    cloud = np.concatenate([pm.points[pm.valid] for pm in pointmaps])
    d, _ = cKDTree(cloud).query(samples, k=1)
    return float((d < tau).mean())


def test_ring_covers_at_least_as_much_as_sector():
    mesh = icosphere(2)
    ring = [
        render_pointmap(mesh, p, 0.0, seed=0)
        for p in sample_ring_poses(30, radius=2.4, seed=1, width=48, height=36)
    ]
    sector = [
        render_pointmap(mesh, p, 0.0, seed=0)
        for p in sample_sector_poses(16, 80.0, radius=2.4, seed=1, width=48, height=36)
    ]
    assert _coverage_fraction(mesh, ring) >= _coverage_fraction(mesh, sector)


# ---------------------------------------------------------------------------
# PMAP format
# ---------------------------------------------------------------------------


def test_pmap_roundtrip_bit_exact(tmp_path):
    pose = sample_ring_poses(1, radius=2.2, jitter=0.05, seed=6, width=40, height=32)[0]
    pm = render_pointmap(icosphere(2), pose, noise_sigma=0.004, seed=2)
    path = tmp_path / "view.pmap"
    save_pmap(pm, path)
    assert validate_pmap(path) == []
    back = load_pmap(path)
    assert np.array_equal(back.valid, pm.valid)
    assert np.array_equal(
        back.points.astype(np.float32), pm.points.astype(np.float32)
    )
    assert np.array_equal(
        back.confidence.astype(np.float32),
        np.where(pm.valid, pm.confidence, 0.0).astype(np.float32),
    )
    assert back.noise_sigma == pm.noise_sigma
    assert back.pose.fov_y_deg == pose.fov_y_deg
    assert np.array_equal(back.pose.extrinsic(), pose.extrinsic())

    # a second serialization of the loaded map is byte-identical
    path2 = tmp_path / "again.pmap"
    save_pmap(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_pmap_empty_view_roundtrip(tmp_path):
    pose = CameraPose(
        position=(3.0, 0.0, 0.0), look_at=(6.0, 0.0, 0.0),
        fov_y_deg=30.0, width=32, height=24,
    )
    pm = render_pointmap(icosphere(1), pose, noise_sigma=0.0, seed=0)
    path = tmp_path / "empty.pmap"
    save_pmap(pm, path)
    assert validate_pmap(path) == []
    assert load_pmap(path).n_valid == 0


def test_pmap_validator_catches_corruption(tmp_path):
    pose = CameraPose(
        position=(3.0, 0.0, 0.0), look_at=(0.0, 0.0, 0.0),
        fov_y_deg=40.0, width=32, height=24,
    )
    pm = render_pointmap(icosphere(1), pose, noise_sigma=0.0, seed=0)
    assert 0 < pm.n_valid < pm.valid.size  # need both kinds of pixels
    path = tmp_path / "v.pmap"
    save_pmap(pm, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.pmap"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    assert any("magic" in s for s in validate_pmap(bad_magic))

    truncated = tmp_path / "trunc.pmap"
    truncated.write_bytes(bytes(raw[:-10]))
    assert any("size" in s for s in validate_pmap(truncated))

    # nonzero payload on an invalid pixel
    header = struct.calcsize("<4sIII" + "d" * 14)
    rec_size = 17
    flat_valid = pm.valid.reshape(-1)
    first_invalid = int(np.flatnonzero(~flat_valid)[0])
    off = header + first_invalid * rec_size
    dirty = bytearray(raw)
    dirty[off : off + 4] = struct.pack("<f", 1.0)
    dirty_path = tmp_path / "dirty.pmap"
    dirty_path.write_bytes(bytes(dirty))
    assert any("invalid pixels carry nonzero" in s for s in validate_pmap(dirty_path))

    with pytest.raises(DataError):
        load_pmap(dirty_path)


def test_pmap_rejects_bad_confidence(tmp_path):
    pose = sample_ring_poses(1, radius=2.2, seed=0, width=32, height=24)[0]
    pm = render_pointmap(icosphere(1), pose, noise_sigma=0.0, seed=0)
    pm.confidence[pm.valid] = 1.5  # out of range
    path = tmp_path / "conf.pmap"
    save_pmap(pm, path)
    assert any("(0, 1]" in s for s in validate_pmap(path))
