"""Procedural generation of watertight test shapes and dataset manifests.

Three families span the geometry the regressor must cope with:
superquadrics (convex to pinched), noise-displaced icospheres (bumpy,
concave), and marching-cubes capsule trees (branching topology). All
generators are deterministic under (params, seed) and emit meshes that
pass the watertightness census.
"""

import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from . import __version__
from .errors import ConfigError, DataError
from .geometry import TriMesh, measure, normalize_to_unit_bbox, validate_watertight
from .seeding import derive_seed

FAMILIES = ("superquadric", "displaced_icosphere", "branching_tubes")

_MAX_GEN_RETRIES = 5


# ---------------------------------------------------------------------------
# Icosphere base mesh
# ---------------------------------------------------------------------------


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere; outward CCW faces."""
    if subdivisions < 0:
        raise ConfigError("subdivisions must be >= 0")
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    vlist = [v for v in verts]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                m = vlist[a] + vlist[b]
                m /= np.linalg.norm(m)
                idx = len(vlist)
                vlist.append(m)
                midpoint[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.asarray(new_faces, dtype=np.int64)
    v = np.asarray(vlist) * radius
    return TriMesh(v, faces, name=f"icosphere{subdivisions}")


# ---------------------------------------------------------------------------
# Seeded lattice value noise (deterministic across platforms)
# ---------------------------------------------------------------------------


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    """Integer-mix hash of lattice coordinates -> uniform floats in [-1, 1)."""
    h = (
        ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        ^ iz.astype(np.int64).astype(np.uint64) * np.uint64(0x94D049BB133111EB)
        ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / 2.0**63 - 1.0


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)  # C2-continuous ramp


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Trilinearly interpolated lattice noise, range [-1, 1], C2 smooth."""
    p = np.asarray(points, dtype=np.float64)
    base = np.floor(p)
    frac = p - base
    u = _fade(frac)
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = u[:, 0] if dx else 1.0 - u[:, 0]
        for dy in (0, 1):
            wy = u[:, 1] if dy else 1.0 - u[:, 1]
            for dz in (0, 1):
                wz = u[:, 2] if dz else 1.0 - u[:, 2]
                corner = _hash_lattice(
                    base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz, seed
                )
                out += wx * wy * wz * corner
    return out


# ---------------------------------------------------------------------------
# Shape parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeParams:
    """Flat parameter record; only the active family's fields are read."""

    family: str
    subdivision: int = 3
    # superquadric: shape exponents and semi-axes
    eps1: float = 1.0
    eps2: float = 1.0
    ax: float = 1.0
    ay: float = 1.0
    az: float = 1.0
    # displaced_icosphere: radial noise field
    amplitude: float = 0.2
    frequency: float = 2.0
    octaves: int = 2
    # branching_tubes: capsule-tree and voxelization controls
    branch_depth: int = 2
    branches_per_node: int = 3
    branch_radius: float = 0.14
    grid_res: int = 56

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}'")
        if self.subdivision < 2:
            raise ConfigError("subdivision must be >= 2")
        if self.family == "superquadric":
            if not (0.3 <= self.eps1 <= 2.5 and 0.3 <= self.eps2 <= 2.5):
                raise ConfigError("superquadric exponents must lie in [0.3, 2.5]")
            if min(self.ax, self.ay, self.az) <= 0.0:
                raise ConfigError("semi-axes must be positive")
        elif self.family == "displaced_icosphere":
            if not (0.0 <= self.amplitude <= 0.4):
                raise ConfigError("displacement amplitude must lie in [0, 0.4]")
            if self.frequency <= 0.0 or self.octaves < 1:
                raise ConfigError("frequency must be > 0 and octaves >= 1")
        else:
            if not (1 <= self.branch_depth <= 4):
                raise ConfigError("branch_depth must lie in [1, 4]")
            if not (1 <= self.branches_per_node <= 4):
                raise ConfigError("branches_per_node must lie in [1, 4]")
            if not (0.05 <= self.branch_radius <= 0.3):
                raise ConfigError("branch_radius must lie in [0.05, 0.3]")
            if self.grid_res < 24:
                raise ConfigError("grid_res must be >= 24")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ShapeParams":
        return ShapeParams(**d)


# ---------------------------------------------------------------------------
# Family generators
# ---------------------------------------------------------------------------


def _gen_superquadric(p: ShapeParams) -> TriMesh:
    # Radial form: the implicit f(x) = (|x/ax|^(2/e2) + |y/ay|^(2/e2))^(e2/e1)
    # + |z/az|^(2/e1) is homogeneous of degree 2/e1 in the radial scale, so a
    # unit direction d lands on the surface at s = f(d)^(-e1/2) exactly.
    base = icosphere(p.subdivision)
    d = base.vertices
    two_e2 = 2.0 / p.eps2
    two_e1 = 2.0 / p.eps1
    fxy = (np.abs(d[:, 0] / p.ax) ** two_e2 + np.abs(d[:, 1] / p.ay) ** two_e2) ** (
        p.eps2 / p.eps1
    )
    f = fxy + np.abs(d[:, 2] / p.az) ** two_e1
    s = f ** (-p.eps1 / 2.0)
    return TriMesh(d * s[:, None], base.faces, name="superquadric")


def _gen_displaced(p: ShapeParams, seed: int) -> TriMesh:
    base = icosphere(p.subdivision)
    d = base.vertices
    total = np.zeros(len(d))
    norm = 0.0
    for o in range(p.octaves):
        amp_o = 0.5**o
        # offset keeps octaves from sampling the same lattice cells
        total += amp_o * value_noise(d * p.frequency * 2.0**o + 17.17 * o, seed + o)
        norm += amp_o
    radial = 1.0 + p.amplitude * (total / norm)
    return TriMesh(d * radial[:, None], base.faces, name="displaced_icosphere")


def _capsule_tree(p: ShapeParams, seed: int) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Segments (start, end, radius) of a recursively branching trunk."""
    rng = np.random.default_rng(seed)
    segments = []

    def grow(start, direction, length, radius, depth):
        end = start + direction * length
        segments.append((start, end, radius))
        if depth >= p.branch_depth:
            return
        for _ in range(p.branches_per_node):
            polar = math.radians(rng.uniform(22.0, 55.0))
            azimuth = rng.uniform(0.0, 2.0 * math.pi)
            # rotate `direction` by polar angle around a random azimuth
            ref = np.array([1.0, 0.0, 0.0])
            if abs(direction @ ref) > 0.9:
                ref = np.array([0.0, 1.0, 0.0])
            t1 = np.cross(direction, ref)
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(direction, t1)
            new_dir = (
                math.cos(polar) * direction
                + math.sin(polar) * (math.cos(azimuth) * t1 + math.sin(azimuth) * t2)
            )
            new_dir /= np.linalg.norm(new_dir)
            grow(end, new_dir, length * 0.72, max(radius * 0.68, 0.05), depth + 1)

    grow(
        np.array([0.0, 0.0, -0.55]),
        np.array([0.0, 0.0, 1.0]),
        0.55,
        p.branch_radius,
        0,
    )
    return segments


def _capsule_sdf(points: np.ndarray, segments) -> np.ndarray:
    """Min distance-to-capsule over all segments (negative inside)."""
    d = np.full(len(points), np.inf)
    for a, b, r in segments:
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        d = np.minimum(d, np.linalg.norm(points - closest, axis=1) - r)
    return d


def _gen_branching(p: ShapeParams, seed: int) -> TriMesh:
    segments = _capsule_tree(p, seed)
    ends = np.array([s[0] for s in segments] + [s[1] for s in segments])
    radii = max(s[2] for s in segments)
    lo = ends.min(axis=0) - radii
    hi = ends.max(axis=0) + radii
    pad = 0.08 * float((hi - lo).max())
    lo -= pad
    hi += pad
    n = p.grid_res
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vol = _capsule_sdf(pts, segments).reshape(n, n, n)
    spacing = tuple((hi - lo) / (n - 1))
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=spacing)
    verts = verts.astype(np.float64) + lo
    faces = faces.astype(np.int64)
    # weld exact duplicates, drop index-degenerate faces
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    keep = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    faces = faces[keep]
    # orient outward: flip everything if the divergence sum is negative
    tri = uniq[faces]
    vol6 = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol6 < 0:
        faces = faces[:, [0, 2, 1]]
    return TriMesh(uniq, faces, name="branching_tubes")


def gen_shape(params: ShapeParams, seed: int) -> TriMesh:
    """Generate one watertight mesh; deterministic under (params, seed).

    Raises ConfigError for out-of-range parameters before any generation
    work, DataError if the mesh fails the watertightness census (only
    possible for the voxelized family; callers may retry with a derived
    seed).
    """
    params.validate()
    if params.family == "superquadric":
        mesh = _gen_superquadric(params)
    elif params.family == "displaced_icosphere":
        mesh = _gen_displaced(params, seed)
    else:
        mesh = _gen_branching(params, seed)
    report = validate_watertight(mesh)
    if not report.is_watertight:
        raise DataError(f"generated mesh failed watertight census: {report}")
    return mesh


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    shape_id: str
    seed: int
    params: ShapeParams
    mesh_path: str
    volume: float
    surface_area: float
    split: str
    retries: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = self.params.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "ManifestEntry":
        d = dict(d)
        d["params"] = ShapeParams.from_dict(d["params"])
        return ManifestEntry(**d)


@dataclass
class DatasetManifest:
    entries: list
    global_seed: int
    generator_version: str = __version__

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def by_id(self, shape_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.shape_id == shape_id:
                return e
        raise KeyError(shape_id)


@dataclass(frozen=True)
class GenConfig:
    """Counts per split plus uniform parameter ranges for random draws."""

    n_train: int
    n_val: int
    families: tuple = FAMILIES
    subdivision: int = 3
    grid_res: int = 48
    eps_range: tuple = (0.4, 2.2)
    axis_range: tuple = (0.45, 1.0)
    amplitude_range: tuple = (0.05, 0.35)
    frequency_range: tuple = (1.0, 3.0)
    branch_depth_range: tuple = (1, 3)

    def validate(self) -> None:
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("split counts must be >= 1")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigError(f"unknown family '{f}'")
        if not self.families:
            raise ConfigError("at least one family required")


def random_params(config: GenConfig, rng: np.random.Generator) -> ShapeParams:
    """Draw one ShapeParams uniformly within the config ranges."""
    family = config.families[int(rng.integers(len(config.families)))]
    if family == "superquadric":
        return ShapeParams(
            family=family,
            subdivision=config.subdivision,
            eps1=float(rng.uniform(*config.eps_range)),
            eps2=float(rng.uniform(*config.eps_range)),
            ax=float(rng.uniform(*config.axis_range)),
            ay=float(rng.uniform(*config.axis_range)),
            az=float(rng.uniform(*config.axis_range)),
        )
    if family == "displaced_icosphere":
        return ShapeParams(
            family=family,
            subdivision=config.subdivision,
            amplitude=float(rng.uniform(*config.amplitude_range)),
            frequency=float(rng.uniform(*config.frequency_range)),
        )
    lo, hi = config.branch_depth_range
    return ShapeParams(
        family=family,
        subdivision=config.subdivision,
        branch_depth=int(rng.integers(lo, hi + 1)),
        branches_per_node=int(rng.integers(2, 4)),
        branch_radius=float(rng.uniform(0.10, 0.18)),
        grid_res=config.grid_res,
    )


def gen_dataset(config: GenConfig, seed: int, out_dir) -> DatasetManifest:
    """Generate meshes + manifest; meshes land in a content-addressed dir.

    Each entry is normalized to the unit bbox before ground truth is
    computed and before saving. Generation failures retry with a derived
    seed; the retry count is recorded.
    """
    config.validate()
    out = Path(out_dir)
    mesh_dir = out / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    total = config.n_train + config.n_val
    for i in range(total):
        split = "train" if i < config.n_train else "val"
        shape_id = f"s{i:04d}"
        entry_seed = derive_seed(seed, "shape", i)
        rng = np.random.default_rng(entry_seed)
        params = random_params(config, rng)
        mesh = None
        retries = 0
        cur_seed = entry_seed
        while True:
            try:
                mesh = gen_shape(params, cur_seed)
                break
            except DataError:
                retries += 1
                if retries > _MAX_GEN_RETRIES:
                    raise
                cur_seed = derive_seed(entry_seed, "retry", retries)
        mesh, _ = normalize_to_unit_bbox(mesh)
        mesh.name = shape_id
        metrics = measure(mesh)
        if not (0.0 < metrics.volume <= 1.0 + 1e-12):
            raise DataError(f"{shape_id}: normalized volume {metrics.volume} out of (0,1]")

        # content-addressed file name: hash of the serialized bytes
        buf = io.StringIO()
        _write_obj_to(mesh, buf)
        payload = buf.getvalue().encode("ascii")
        digest = hashlib.sha256(payload).hexdigest()[:16]
        rel_path = f"meshes/{digest}.obj"
        (out / rel_path).write_bytes(payload)

        entries.append(
            ManifestEntry(
                shape_id=shape_id,
                seed=cur_seed,
                params=params,
                mesh_path=rel_path,
                volume=metrics.volume,
                surface_area=metrics.surface_area,
                split=split,
                retries=retries,
            )
        )
    manifest = DatasetManifest(entries=entries, global_seed=seed)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def _write_obj_to(mesh: TriMesh, fh) -> None:
    if mesh.name:
        fh.write(f"o {mesh.name}\n")
    for v in mesh.vertices:
        fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    for f in mesh.faces + 1:
        fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def save_manifest(manifest: DatasetManifest, path) -> None:
    """JSON-lines: header object first, then one entry per line."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "global_seed": manifest.global_seed,
            "generator_version": manifest.generator_version,
            "n_entries": len(manifest.entries),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    entries = [ManifestEntry.from_dict(json.loads(ln)) for ln in lines[1:]]
    if len(entries) != header.get("n_entries"):
        raise DataError(
            f"{path}: header claims {header.get('n_entries')} entries, found {len(entries)}"
        )
    return DatasetManifest(
        entries=entries,
        global_seed=header["global_seed"],
        generator_version=header.get("generator_version", "unknown"),
    )


# ---------------------------------------------------------------------------
# Worst-prediction filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterOutcome:
    kept_ids: tuple
    rejected_ids: tuple
    criterion: str
    fraction: float


def filter_worst(records, fraction: float, criterion: str = "either") -> FilterOutcome:
    """Reject the worst ceil(fraction*N) records by prediction error.

    `records` is a sequence of (id, gt, pred) triples or dicts with those
    keys. Criteria: 'abs' ranks by |gt-pred|, 'rel' by |gt-pred|/gt,
    'either' rejects the union of both per-criterion worst sets. Ties
    break by id ascending.
    """
    if criterion not in ("abs", "rel", "either"):
        raise ConfigError(f"unknown criterion '{criterion}'")
    if not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must lie in (0, 1)")
    recs = []
    for r in records:
        if isinstance(r, dict):
            recs.append((r["id"], float(r["gt"]), float(r["pred"])))
        else:
            rid, gt, pred = r
            recs.append((rid, float(gt), float(pred)))
    if not recs:
        raise DataError("no records to filter")
    if any(gt <= 0 for _, gt, _ in recs):
        raise DataError("ground truth must be positive")

    n_rej = math.ceil(fraction * len(recs))

    def worst(err_fn):
        ranked = sorted(recs, key=lambda r: (-err_fn(r), r[0]))
        return {r[0] for r in ranked[:n_rej]}

    abs_err = lambda r: abs(r[1] - r[2])  # noqa: E731
    rel_err = lambda r: abs(r[1] - r[2]) / r[1]  # noqa: E731
    if criterion == "abs":
        rejected = worst(abs_err)
    elif criterion == "rel":
        rejected = worst(rel_err)
    else:
        rejected = worst(abs_err) | worst(rel_err)
    kept = tuple(r[0] for r in recs if r[0] not in rejected)
    return FilterOutcome(
        kept_ids=kept,
        rejected_ids=tuple(sorted(rejected)),
        criterion=criterion,
        fraction=fraction,
    )
