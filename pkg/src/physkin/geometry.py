"""Triangle-mesh loading, sampling, and volumetric cubature.

The pipeline works in normalized coordinates: meshes are recentred and
scaled so the longest axis spans [-1, 1] (the affine record is kept so
results can be mapped back).  Cubature points are drawn from the surface
(area-weighted, carrying a thin-shell volume weight) and from interior
voxel centers classified by parity ray casting against a BVH.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RAY_EPS_T = 1e-9          # hits closer than this don't count as crossings
NEAR_SURFACE_T = 1e-6     # a nearest hit this close marks the point ambiguous
SHELL_TAU = 0.02          # default surface shell thickness (normalized units)


@dataclass
class Mesh:
    vertices: np.ndarray          # [V,3] float64
    faces: np.ndarray             # [F,3] int64
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        self._face_normals = None
        self._face_areas = None
        self._vertex_normals = None

    @property
    def face_normals(self):
        if self._face_normals is None:
            self._compute_face_data()
        return self._face_normals

    @property
    def face_areas(self):
        if self._face_areas is None:
            self._compute_face_data()
        return self._face_areas

    def _compute_face_data(self):
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        cross = np.cross(b - a, c - a)
        norm = np.linalg.norm(cross, axis=1)
        self._face_areas = 0.5 * norm
        degenerate = norm < 1e-14
        if degenerate.any():
            self.warnings.append(f"{int(degenerate.sum())} degenerate faces, normal set to +z")
        safe = np.where(degenerate[:, None], [[0.0, 0.0, 1.0]], cross)
        self._face_normals = safe / np.maximum(np.linalg.norm(safe, axis=1), 1e-30)[:, None]

    @property
    def vertex_normals(self):
        """Area-weighted vertex normals (weights come from the raw cross products)."""
        if self._vertex_normals is None:
            v = self.vertices
            a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
            cross = np.cross(b - a, c - a)
            acc = np.zeros_like(v)
            for k in range(3):
                np.add.at(acc, self.faces[:, k], cross)
            n = np.linalg.norm(acc, axis=1)
            fallback = np.where(n[:, None] < 1e-14, [[0.0, 0.0, 1.0]], acc)
            self._vertex_normals = fallback / np.maximum(
                np.linalg.norm(fallback, axis=1), 1e-30)[:, None]
        return self._vertex_normals

    @property
    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def total_area(self):
        return float(self.face_areas.sum())


def load_obj(path) -> Mesh:
    """Wavefront OBJ loader: v and f records, polygon fan triangulation.

    Texture/normal indices after '/' are ignored; negative (relative)
    vertex references are resolved.  Malformed records raise with their
    line number; a mesh with no faces is rejected.
    """
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as e:
                    raise ValueError(f"{path}:{lineno}: bad vertex coordinate: {e}") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: bad face index {tok!r}") from None
                    if i < 0:
                        i = len(vertices) + i
                    else:
                        i = i - 1
                    if i < 0 or i >= len(vertices):
                        raise ValueError(f"{path}:{lineno}: face references vertex {tok} "
                                         f"but only {len(vertices)} are defined")
                    idx.append(i)
                for k in range(1, len(idx) - 1):   # fan triangulation
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # vn/vt/o/g/s/usemtl/mtllib are irrelevant here
    if not faces:
        raise ValueError(f"{path}: no faces found")
    return Mesh(np.array(vertices), np.array(faces))


@dataclass(frozen=True)
class UnitCubeTransform:
    """Affine X' = (X - center) / scale mapping the longest axis to [-1,1]."""
    center: tuple
    scale: float

    def apply(self, X):
        return (np.asarray(X) - np.asarray(self.center)) / self.scale

    def invert(self, X):
        return np.asarray(X) * self.scale + np.asarray(self.center)

    def to_dict(self):
        return {"center": list(self.center), "scale": self.scale}

    @staticmethod
    def from_dict(d):
        return UnitCubeTransform(tuple(float(c) for c in d["center"]), float(d["scale"]))


def normalize_unit_cube(mesh: Mesh):
    lo, hi = mesh.aabb
    center = 0.5 * (lo + hi)
    scale = float((hi - lo).max()) / 2.0
    if scale <= 0:
        raise ValueError("mesh is degenerate: zero extent")
    t = UnitCubeTransform(tuple(center.tolist()), scale)
    return Mesh(t.apply(mesh.vertices), mesh.faces.copy(), list(mesh.warnings)), t


def is_watertight(mesh: Mesh) -> bool:
    """Every directed edge appears exactly once and is matched by its reverse."""
    edges = {}
    for f in mesh.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (int(a), int(b))
            edges[key] = edges.get(key, 0) + 1
    for (a, b), count in edges.items():
        if count != 1 or edges.get((b, a), 0) != 1:
            return False
    return True


class BVH:
    """Median-split bounding volume hierarchy over triangles.

    Built once per mesh; ray queries are batched (many rays, one shared
    direction) which fits the axis-aligned parity casts used for interior
    classification.
    """

    LEAF_SIZE = 8

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        self.tri_a = v[f[:, 0]]
        self.tri_b = v[f[:, 1]]
        self.tri_c = v[f[:, 2]]
        lo = np.minimum(np.minimum(self.tri_a, self.tri_b), self.tri_c)
        hi = np.maximum(np.maximum(self.tri_a, self.tri_b), self.tri_c)
        centroids = (self.tri_a + self.tri_b + self.tri_c) / 3.0
        order = np.arange(len(f))

        nodes_lo, nodes_hi, nodes_left, nodes_right = [], [], [], []
        nodes_start, nodes_count = [], []
        self.tri_order = np.empty(len(f), dtype=np.int64)
        cursor = [0]

        def build(idx):
            nid = len(nodes_lo)
            nodes_lo.append(lo[idx].min(axis=0))
            nodes_hi.append(hi[idx].max(axis=0))
            nodes_left.append(-1)
            nodes_right.append(-1)
            nodes_start.append(-1)
            nodes_count.append(0)
            if len(idx) <= self.LEAF_SIZE:
                start = cursor[0]
                self.tri_order[start:start + len(idx)] = idx
                nodes_start[nid] = start
                nodes_count[nid] = len(idx)
                cursor[0] += len(idx)
                return nid
            extent = nodes_hi[nid] - nodes_lo[nid]
            axis = int(np.argmax(extent))
            mid = len(idx) // 2
            part = idx[np.argsort(centroids[idx, axis], kind="stable")]
            left, right = part[:mid], part[mid:]
            nodes_left[nid] = build(left)
            nodes_right[nid] = build(right)
            return nid

        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            build(order)
        finally:
            sys.setrecursionlimit(old)
        self.node_lo = np.array(nodes_lo)
        self.node_hi = np.array(nodes_hi)
        self.node_left = np.array(nodes_left)
        self.node_right = np.array(nodes_right)
        self.node_start = np.array(nodes_start)
        self.node_count = np.array(nodes_count)

    def cast(self, origins, direction):
        """Parity data for a ray batch sharing one direction.

        Returns (crossings, nearest_t, nearest_tri): per-ray crossing count
        (hits with t > RAY_EPS_T), the nearest hit distance (inf when
        nothing is hit) and its triangle index (-1 when none).  Hits at
        numerically identical distances collapse to one crossing so a ray
        through a shared edge or diagonal is not double counted.
        """
        origins = np.asarray(origins, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        n = len(origins)
        crossings = np.zeros(n, dtype=np.int64)
        nearest_t = np.full(n, np.inf)
        nearest_tri = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return crossings, nearest_t, nearest_tri

        d_safe = np.where(np.abs(d) < 1e-30, 1e-30, d)
        inv_d = 1.0 / d_safe
        hit_rays, hit_ts, hit_tris = [], [], []

        stack = [(0, np.arange(n))]
        while stack:
            nid, idx = stack.pop()
            o = origins[idx]
            t0 = (self.node_lo[nid] - o) * inv_d
            t1 = (self.node_hi[nid] - o) * inv_d
            tmin = np.minimum(t0, t1).max(axis=1)
            tmax = np.maximum(t0, t1).min(axis=1)
            live = (tmax >= np.maximum(tmin, 0.0) - 1e-12)
            idx = idx[live]
            if idx.size == 0:
                continue
            if self.node_count[nid] > 0:
                s, c = self.node_start[nid], self.node_count[nid]
                tris = self.tri_order[s:s + c]
                self._leaf_hits(origins, d, idx, tris, hit_rays, hit_ts, hit_tris)
            else:
                stack.append((self.node_left[nid], idx))
                stack.append((self.node_right[nid], idx))

        if hit_rays:
            rays = np.concatenate(hit_rays)
            ts = np.concatenate(hit_ts)
            tids = np.concatenate(hit_tris)
            order = np.lexsort((ts, rays))
            rays, ts, tids = rays[order], ts[order], tids[order]
            first_of_ray = np.empty(len(rays), dtype=bool)
            first_of_ray[0] = True
            first_of_ray[1:] = rays[1:] != rays[:-1]
            # a hit is a new crossing if it starts a ray's list or sits
            # further than the dedupe tolerance from its predecessor
            new_cross = first_of_ray | (ts - np.concatenate([[0.0], ts[:-1]]) > RAY_EPS_T)
            np.add.at(crossings, rays, new_cross.astype(np.int64))
            nearest_t[rays[first_of_ray]] = ts[first_of_ray]
            nearest_tri[rays[first_of_ray]] = tids[first_of_ray]
        return crossings, nearest_t, nearest_tri

    def _leaf_hits(self, origins, d, idx, tris, hit_rays, hit_ts, hit_tris):
        # Moller-Trumbore, rays x leaf triangles
        A = self.tri_a[tris]
        e1 = self.tri_b[tris] - A
        e2 = self.tri_c[tris] - A
        h = np.cross(d[None, :], e2)                        # [T,3]
        det = (e1 * h).sum(axis=1)                          # [T]
        ok = np.abs(det) > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = origins[idx][:, None, :] - A[None, :, :]    # [R,T,3]
            u = (s * h[None, :, :]).sum(axis=2) * f[None, :]
            q = np.cross(s, e1[None, :, :])
            v = (q * d[None, None, :]).sum(axis=2) * f[None, :]
            t = (q * e2[None, :, :]).sum(axis=2) * f[None, :]
        hit = (ok[None, :] & (u >= -1e-12) & (v >= -1e-12)
               & (u + v <= 1.0 + 1e-12) & (t > RAY_EPS_T))
        r, c = np.nonzero(hit)
        if r.size:
            hit_rays.append(idx[r])
            hit_ts.append(t[r, c])
            hit_tris.append(tris[c])


def sample_surface(mesh: Mesh, count: int, rng):
    """Area-weighted surface samples.

    Returns (points, normals, face_ids, barycentric) where normals are the
    flat face normals and points reconstruct exactly as the barycentric
    combination of their triangle's vertices.
    """
    if count <= 0:
        raise ValueError("sample count must be positive")
    areas = mesh.face_areas
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    fids = rng.choice(len(areas), size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    su = np.sqrt(r1)
    bary = np.stack([1.0 - su, su * (1.0 - r2), su * r2], axis=1)
    tri = mesh.vertices[mesh.faces[fids]]                   # [count,3,3]
    points = (bary[:, :, None] * tri).sum(axis=1)
    return points, mesh.face_normals[fids], fids, bary


@dataclass
class ClassifyStats:
    rays_cast: np.ndarray      # per point
    near_surface: np.ndarray   # per point bool


def classify_interior(mesh: Mesh, points, bvh: BVH | None = None):
    """Parity test with a 3-ray vote along the coordinate axes.

    A point is interior when at least 2 of 3 rays report an odd crossing
    count with the nearest surface facing away (normal . dir > 0).  Points
    outside the mesh AABB are rejected without casting; points whose
    nearest hit is closer than NEAR_SURFACE_T are flagged near-surface and
    classified outside (conservative for cubature use).
    """
    points = np.asarray(points, dtype=np.float64)
    if bvh is None:
        bvh = BVH(mesh)
    n = len(points)
    rays_cast = np.zeros(n, dtype=np.int64)
    near = np.zeros(n, dtype=bool)
    inside = np.zeros(n, dtype=bool)
    lo, hi = mesh.aabb
    in_box = np.all((points >= lo) & (points <= hi), axis=1)
    cand = np.nonzero(in_box)[0]
    if cand.size == 0:
        return inside, ClassifyStats(rays_cast, near)
    votes = np.zeros(cand.size, dtype=np.int64)
    for axis in range(3):
        d = np.zeros(3)
        d[axis] = 1.0
        crossings, t_near, tri_near = bvh.cast(points[cand], d)
        rays_cast[cand] += 1
        near[cand] |= t_near < NEAR_SURFACE_T
        has_hit = tri_near >= 0
        faces_away = np.zeros(cand.size, dtype=bool)
        faces_away[has_hit] = mesh.face_normals[tri_near[has_hit]][:, axis] > 0
        votes += ((crossings % 2 == 1) & faces_away).astype(np.int64)
    inside[cand] = (votes >= 2) & ~near[cand]
    return inside, ClassifyStats(rays_cast, near)


def interior_voxel_centers(mesh: Mesh, grid_res: int, bvh: BVH | None = None):
    """Voxel-center lattice over [-1,1]^3 filtered to the mesh interior."""
    if grid_res < 2:
        raise ValueError("grid_res must be at least 2")
    axis = -1.0 + (np.arange(grid_res) + 0.5) * (2.0 / grid_res)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    centers = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    inside, stats = classify_interior(mesh, centers, bvh)
    return centers[inside], stats


@dataclass
class CubatureSet:
    """Quadrature points with volume weights.

    kind 0 marks surface samples (thin-shell weight area/count * tau),
    kind 1 marks interior voxel centers (weight = voxel volume).
    """
    points: np.ndarray          # [n,3]
    kind: np.ndarray            # [n] int8, 0 surface / 1 interior
    volume_weight: np.ndarray   # [n]
    normals: np.ndarray         # [n,3], zeros for interior points
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.points)
        if not (len(self.kind) == len(self.volume_weight) == len(self.normals) == n):
            raise ValueError("cubature arrays disagree in length")
        if np.any(self.volume_weight <= 0):
            raise ValueError("volume weights must be positive")

    def subsample(self, count: int, rng):
        """Uniform subsample without replacement (count >= n returns everything)."""
        n = len(self.points)
        if count >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=count, replace=False)
        return idx

    def to_dict(self):
        kind_names = np.where(self.kind == 0, "surface", "interior")
        return {
            "points": self.points.tolist(),
            "kind": kind_names.tolist(),
            "volume_weight": self.volume_weight.tolist(),
            "normals": self.normals.tolist(),
        }

    @staticmethod
    def from_dict(d):
        kind = np.array([0 if k == "surface" else 1 for k in d["kind"]], dtype=np.int8)
        return CubatureSet(
            points=np.array(d["points"], dtype=np.float64),
            kind=kind,
            volume_weight=np.array(d["volume_weight"], dtype=np.float64),
            normals=np.array(d["normals"], dtype=np.float64),
        )


def build_cubature(mesh: Mesh, surface_count=4096, grid_res=32, tau=SHELL_TAU,
                   seed=0, surface_only=None) -> CubatureSet:
    """Combined surface + interior cubature over a normalized mesh.

    surface_only=None decides automatically: non-watertight meshes fall
    back to surface-only with a warning.  A watertight mesh that still
    yields zero interior voxels (e.g. a thin shell thinner than the grid)
    is an error advising surface-only mode.
    """
    warnings = list(mesh.warnings)
    rng = np.random.default_rng(seed)
    pts, nrm, _, _ = sample_surface(mesh, surface_count, rng)
    w_surface = np.full(surface_count, mesh.total_area() / surface_count * tau)

    watertight = is_watertight(mesh)
    if surface_only is None:
        surface_only = not watertight
        if not watertight:
            warnings.append("open_shell_surface_only: mesh is not watertight, "
                            "interior sampling skipped")
    elif not surface_only and not watertight:
        raise ValueError("mesh is not watertight; rerun with surface-only cubature")

    if surface_only:
        points = pts
        kind = np.zeros(surface_count, dtype=np.int8)
        weights = w_surface
        normals = nrm
    else:
        centers, _ = interior_voxel_centers(mesh, grid_res)
        if len(centers) == 0:
            raise ValueError("no interior voxel centers found; the mesh may be a thin "
                             "shell, rerun with surface-only cubature")
        w_vox = (2.0 / grid_res) ** 3
        points = np.concatenate([pts, centers], axis=0)
        kind = np.concatenate([np.zeros(surface_count, dtype=np.int8),
                               np.ones(len(centers), dtype=np.int8)])
        weights = np.concatenate([w_surface, np.full(len(centers), w_vox)])
        normals = np.concatenate([nrm, np.zeros((len(centers), 3))], axis=0)
    return CubatureSet(points, kind, weights, normals, warnings)
