"""Exact geometry on watertight triangle meshes.

Ground truth for the whole pipeline: divergence-theorem volume, summed
triangle area, unit-bounding-box normalization, and an independent
Monte Carlo volume estimator used to cross-check the closed forms.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshFormatError, NotWatertightError, NumericError

# Re-jitter scale (relative to bbox diagonal) for rays that graze an edge.
_JITTER_REL = 1e-9
_MAX_RETRIES = 8


@dataclass
class TriMesh:
    """Triangle mesh: float64 vertices (V, 3) and int64 face indices (F, 3)."""

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshFormatError(f"faces must be (F, 3), got {self.faces.shape}")
        if not np.isfinite(self.vertices).all():
            raise MeshFormatError("vertices contain non-finite values")
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise MeshFormatError("face indices out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """(min_corner, max_corner), each shape (3,)."""
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangles(self) -> np.ndarray:
        """Corner coordinates, shape (F, 3, 3)."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class WatertightReport:
    """Edge-census result. is_watertight iff every count is zero."""

    boundary_edge_count: int
    non_manifold_edge_count: int
    flipped_pair_count: int
    degenerate_face_count: int

    @property
    def is_watertight(self) -> bool:
        return (
            self.boundary_edge_count == 0
            and self.non_manifold_edge_count == 0
            and self.flipped_pair_count == 0
            and self.degenerate_face_count == 0
        )


@dataclass(frozen=True)
class GeoMetrics:
    """Exact per-shape measurements used as regression targets."""

    volume: float
    surface_area: float
    bbox_min: tuple = field(default=(0.0, 0.0, 0.0))
    bbox_max: tuple = field(default=(0.0, 0.0, 0.0))


def _degenerate_face_mask(mesh: TriMesh) -> np.ndarray:
    """Faces with a repeated vertex index or exactly zero area."""
    f = mesh.faces
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    zero_area = (cross == 0.0).all(axis=1)
    return repeated | zero_area


def validate_watertight(mesh: TriMesh) -> WatertightReport:
    """Census of directed edges.

    Each undirected edge of a closed orientable 2-manifold is used by
    exactly two faces, once in each direction. Deviations are counted:

    - boundary_edge_count:     undirected edges used once
    - non_manifold_edge_count: undirected edges used three or more times
    - flipped_pair_count:      edges used twice in the SAME direction
                               (adjacent faces with inconsistent winding)
    - degenerate_face_count:   faces with repeated indices or zero area

    Degenerate faces are excluded from the edge census so each defect is
    reported once. Structural defects (bad indices, non-finite vertices)
    raise MeshFormatError at TriMesh construction instead.
    """
    if mesh.n_vertices < 4 or mesh.n_faces < 4:
        raise MeshFormatError(
            f"mesh too small to enclose volume: {mesh.n_vertices} vertices, "
            f"{mesh.n_faces} faces (need >= 4 of each)"
        )

    degen = _degenerate_face_mask(mesh)
    faces = mesh.faces[~degen]
    if len(faces) == 0:
        return WatertightReport(0, 0, 0, int(degen.sum()))

    # Directed edges (a, b) for each face (a, b, c): ab, bc, ca.
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    lo = e.min(axis=1)
    hi = e.max(axis=1)
    forward = e[:, 0] < e[:, 1]  # canonical (lo, hi) orientation
    key = lo * np.int64(mesh.n_vertices) + hi
    uniq, inv = np.unique(key, return_inverse=True)
    n_fwd = np.bincount(inv[forward], minlength=len(uniq))
    n_bwd = np.bincount(inv[~forward], minlength=len(uniq))
    total = n_fwd + n_bwd

    boundary = int((total == 1).sum())
    non_manifold = int((total > 2).sum())
    flipped = int(((total == 2) & ((n_fwd == 2) | (n_bwd == 2))).sum())
    return WatertightReport(boundary, non_manifold, flipped, int(degen.sum()))


def signed_volume(mesh: TriMesh) -> float:
    """Divergence-theorem volume: sum of v0 . (v1 x v2) / 6 over faces.

    Positive for outward-oriented (counter-clockwise from outside)
    watertight meshes. Raises NotWatertightError otherwise; the report
    rides on the exception.
    """
    report = validate_watertight(mesh)
    if not report.is_watertight:
        raise NotWatertightError(
            f"mesh {mesh.name or '<unnamed>'} is not watertight: {report}", report
        )
    # anchor at the centroid: the sum is translation-invariant analytically,
    # anchoring keeps coordinates O(mesh size) so far-from-origin meshes do
    # not lose the volume to cancellation
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    tri = centered[mesh.faces]
    contrib = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    return float(contrib.sum() / 6.0)


def surface_area(mesh: TriMesh) -> float:
    """Total triangle area; defined for any structurally valid mesh."""
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return float(0.5 * np.linalg.norm(cross, axis=1).sum())


def normalize_to_unit_bbox(mesh: TriMesh) -> tuple[TriMesh, float]:
    """Recenter to the bbox midpoint and scale the longest side to 1.

    Returns (normalized_mesh, scale) with scale = 1 / longest_extent, so
    volume_out = scale**3 * volume_in and area_out = scale**2 * area_in.
    """
    lo, hi = mesh.bbox()
    extent = float((hi - lo).max())
    if not extent > 0.0:
        raise MeshFormatError("degenerate bounding box: zero longest extent")
    scale = 1.0 / extent
    center = (lo + hi) / 2.0
    verts = (mesh.vertices - center) * scale
    return TriMesh(verts, mesh.faces.copy(), name=mesh.name), scale


def measure(mesh: TriMesh) -> GeoMetrics:
    """Exact volume, area, and bbox in one pass (volume checks watertightness)."""
    vol = signed_volume(mesh)
    area = surface_area(mesh)
    lo, hi = mesh.bbox()
    return GeoMetrics(vol, area, tuple(lo.tolist()), tuple(hi.tolist()))


# ---------------------------------------------------------------------------
# Monte Carlo volume oracle
# ---------------------------------------------------------------------------


def _build_xy_grid(tri: np.ndarray, lo, hi, n_cells: int):
    """Bin triangle xy-bboxes into an n_cells x n_cells grid over [lo, hi]."""
    span = np.maximum(hi - lo, 1e-300)
    t_lo = tri[:, :, :2].min(axis=1)
    t_hi = tri[:, :, :2].max(axis=1)
    c_lo = np.clip(((t_lo - lo) / span * n_cells).astype(np.int64), 0, n_cells - 1)
    c_hi = np.clip(((t_hi - lo) / span * n_cells).astype(np.int64), 0, n_cells - 1)
    cells: list[list[int]] = [[] for _ in range(n_cells * n_cells)]
    for t in range(len(tri)):
        for cx in range(c_lo[t, 0], c_hi[t, 0] + 1):
            base = cx * n_cells
            for cy in range(c_lo[t, 1], c_hi[t, 1] + 1):
                cells[base + cy].append(t)
    return [np.asarray(c, dtype=np.int64) for c in cells]


def _count_crossings(pts: np.ndarray, tri: np.ndarray, eps: float):
    """Per-point +z ray crossing counts against candidate triangles.

    Returns (crossings, ambiguous) where ambiguous marks points whose ray
    passes within eps of a triangle edge/vertex or exactly through the
    supporting plane along z — those need a re-jitter, parity is unsafe.
    """
    p0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    denom = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]  # (T,)
    flat = np.abs(denom)[None, :] < 1e-300  # xy-degenerate triangle
    safe_denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    d = pts[:, None, :2] - p0[None, :, :2]  # (P, T, 2)
    u_num = d[:, :, 0] * e2[None, :, 1] - d[:, :, 1] * e2[None, :, 0]
    v_num = e1[None, :, 0] * d[:, :, 1] - e1[None, :, 1] * d[:, :, 0]
    u = u_num / safe_denom[None, :]
    v = v_num / safe_denom[None, :]
    w = 1.0 - u - v
    inside = (u > eps) & (v > eps) & (w > eps) & ~flat
    near_edge = (
        (np.abs(u) <= eps) | (np.abs(v) <= eps) | (np.abs(w) <= eps)
    ) & (u > -eps) & (v > -eps) & (w > -eps) & ~flat
    z_hit = p0[None, :, 2] + u * e1[None, :, 2] + v * e2[None, :, 2]
    dz = z_hit - pts[:, None, 2]
    crossings = (inside & (dz > eps)).sum(axis=1)
    ambiguous = (near_edge & (dz > -eps)).any(axis=1) | (
        inside & (np.abs(dz) <= eps)
    ).any(axis=1)
    return crossings, ambiguous


def mc_volume_oracle(
    mesh: TriMesh, n_samples: int = 200_000, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo volume & standard error, independent of signed_volume.

    Samples points uniformly in the axis-aligned bbox and tests
    containment by +z ray-crossing parity. Triangles are binned into an
    xy grid so each sample is tested only against nearby candidates.
    Rays that graze an edge or vertex are re-jittered (bounded retries).

    Args:
        mesh: watertight mesh (validated here; raises otherwise).
        n_samples: number of uniform samples, at least 1000.
        seed: RNG seed.

    Returns:
        (estimate, stderr) with stderr = bbox_vol * sqrt(p*(1-p)/n).
    """
    if n_samples < 1000:
        raise ValueError(f"n_samples must be >= 1000, got {n_samples}")
    report = validate_watertight(mesh)
    if not report.is_watertight:
        raise NotWatertightError("mc_volume_oracle needs a watertight mesh", report)

    lo, hi = mesh.bbox()
    bbox_vol = float(np.prod(hi - lo))
    tri = mesh.triangles()
    diag = float(np.linalg.norm(hi - lo))
    eps = 1e-12 * max(diag, 1.0)

    n_cells = int(np.clip(int(np.sqrt(mesh.n_faces)), 4, 64))
    grid = _build_xy_grid(tri, lo[:2], hi[:2], n_cells)
    span = np.maximum(hi[:2] - lo[:2], 1e-300)

    rng = np.random.default_rng(seed)
    pts = lo + rng.random((n_samples, 3)) * (hi - lo)
    jit_rng = np.random.default_rng(seed ^ 0x9E3779B97F4A7C15)

    def _cell_of(xy):
        c = np.clip(((xy - lo[:2]) / span * n_cells).astype(np.int64), 0, n_cells - 1)
        return int(c[0]) * n_cells + int(c[1])

    inside_total = 0
    chunk = 65536
    for start in range(0, n_samples, chunk):
        p = pts[start : start + chunk]
        cid = np.clip(
            ((p[:, :2] - lo[:2]) / span * n_cells).astype(np.int64), 0, n_cells - 1
        )
        cid = cid[:, 0] * n_cells + cid[:, 1]
        order = np.argsort(cid, kind="stable")
        sorted_cid = cid[order]
        bounds = np.flatnonzero(np.diff(sorted_cid)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(sorted_cid)]])
        parity = np.zeros(len(p), dtype=bool)
        for s, e in zip(starts, ends):
            cell = int(sorted_cid[s])
            cand = grid[cell]
            idx = order[s:e]
            if len(cand) == 0:
                continue  # no triangles above or below: outside
            sub = p[idx]
            cross, ambig = _count_crossings(sub, tri[cand], eps)
            if ambig.any():
                for j in np.flatnonzero(ambig):
                    q = sub[j].copy()
                    for _ in range(_MAX_RETRIES):
                        q = q + jit_rng.normal(0.0, _JITTER_REL * diag, size=3)
                        c2 = grid[_cell_of(q[:2])]  # jitter may change the cell
                        if len(c2) == 0:
                            cross[j] = 0
                            break
                        n2, a2 = _count_crossings(q[None], tri[c2], eps)
                        if not a2[0]:
                            cross[j] = n2[0]
                            break
                    else:
                        raise NumericError("ray re-jitter failed to resolve parity")
            parity[idx] = (cross % 2) == 1
        inside_total += int(parity.sum())

    p_hat = inside_total / n_samples
    estimate = bbox_vol * p_hat
    stderr = bbox_vol * float(np.sqrt(p_hat * (1.0 - p_hat) / n_samples))
    return estimate, stderr


# ---------------------------------------------------------------------------
# OBJ subset I/O
# ---------------------------------------------------------------------------


def save_obj(mesh: TriMesh, path) -> None:
    """Write the supported OBJ subset: 'v x y z' and 1-based 'f i j k' lines.

    Coordinates use repr-faithful %.17g so load(save(m)) round-trips
    float64 exactly.
    """
    with open(path, "w", encoding="ascii") as fh:
        if mesh.name:
            fh.write(f"o {mesh.name}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_obj(path) -> TriMesh:
    """Read the OBJ subset written by save_obj.

    Accepts 'v'/'f'/'o' records plus blank and '#' comment lines; face
    entries may carry '/...' suffixes (only the vertex index is used).
    Anything else — polygons with != 3 vertices, negative or zero
    indices, unknown record types — raises MeshFormatError.
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    name = ""
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            kind = tok[0]
            if kind == "o":
                name = " ".join(tok[1:])
            elif kind == "v":
                if len(tok) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coords")
                try:
                    verts.append([float(t) for t in tok[1:]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad float") from exc
            elif kind == "f":
                if len(tok) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangles are supported"
                    )
                idx = []
                for t in tok[1:]:
                    head = t.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: bad index") from exc
                    if i <= 0:
                        raise MeshFormatError(
                            f"{path}:{lineno}: indices must be positive and 1-based"
                        )
                    idx.append(i - 1)
                faces.append(idx)
            else:
                raise MeshFormatError(f"{path}:{lineno}: unsupported record '{kind}'")
    if not verts:
        raise MeshFormatError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and f.max() >= len(v):
        raise MeshFormatError(f"{path}: face index beyond vertex count")
    return TriMesh(v, f, name=name)
