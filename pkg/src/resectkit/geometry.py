"""Core 3-D types, rigid transforms and distance queries.

Conventions used across the toolkit: all lengths are millimeters, all
timestamps are milliseconds. Coordinates are opaque right-handed Cartesian
mm; no anatomical axis convention is assumed. Every type is an immutable
value after construction and every operation is a pure function, so
everything here is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

QUAT_TOL = 1e-9
# Consecutive polyline points closer than this are considered coincident.
MIN_POINT_SEPARATION = 1e-6
# Triangles with less area than this are degenerate.
MIN_FACE_AREA = 1e-12

__all__ = [
    "GeometryError",
    "RigidTransform",
    "Polyline3",
    "TriangleMesh",
    "MeshDistanceIndex",
    "as_point3",
    "as_points",
    "transform_point",
    "compose",
    "invert",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "quat_from_matrix",
    "quat_from_axis_angle",
    "rotation_angle_between",
    "point_to_polyline_distance",
    "nearest_point_on_polyline",
    "polyline_point_distances",
    "point_to_mesh_distance",
    "resample_polyline",
    "interpolate_at_arc_lengths",
    "closest_points_on_triangles",
    "best_fit_plane_normal",
    "subdivide_long_edges",
]


class GeometryError(ValueError):
    """Invalid geometric input: non-finite values, bad indices, bad topology."""


def as_point3(p) -> np.ndarray:
    """Coerce to a finite (3,) float64 point."""
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite coordinates: {a}")
    return a


def as_points(ps) -> np.ndarray:
    """Coerce to a finite (N, 3) float64 array."""
    a = np.asarray(ps, dtype=np.float64)
    if a.ndim == 1 and a.shape == (3,):
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("non-finite coordinates in point array")
    return a


# ---------------------------------------------------------------------------
# Quaternions, stored (w, x, y, z).

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise GeometryError("zero-norm quaternion")
    q = q / n
    # Canonical sign: w >= 0 keeps representations unique for comparisons.
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Unit quaternion for a proper rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = as_point3(axis)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise GeometryError("zero-length rotation axis")
    axis = axis / n
    half = 0.5 * angle_rad
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def rotation_angle_between(qa, qb) -> float:
    """Angle in radians of the relative rotation between two unit quaternions."""
    d = quat_multiply(quat_conjugate(qa), qb)
    w = min(1.0, abs(float(d[0])))
    return 2.0 * np.arccos(w)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: unit quaternion rotation plus translation in mm."""

    rotation: np.ndarray      # unit quaternion (w, x, y, z)
    translation: np.ndarray   # (3,) mm

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = as_point3(self.translation)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise GeometryError("rotation must be a finite (w, x, y, z) quaternion")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise GeometryError("quaternion is far from unit norm")
        q = quat_normalize(q)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rotation_translation(matrix, translation) -> "RigidTransform":
        return RigidTransform(quat_from_matrix(matrix), as_point3(translation))

    @cached_property
    def matrix(self) -> np.ndarray:
        m = quat_to_matrix(self.rotation)
        m.setflags(write=False)
        return m

    def apply(self, points) -> np.ndarray:
        """Apply to a point or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        out = as_points(pts) @ self.matrix.T + self.translation
        return out[0] if single else out


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.apply(as_point3(p))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying ``b`` first, then ``a``."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.apply(b.translation)
    return RigidTransform(q, t)


def invert(t: RigidTransform) -> RigidTransform:
    q = quat_conjugate(t.rotation)
    return RigidTransform(q, -(quat_to_matrix(q) @ t.translation))


# ---------------------------------------------------------------------------
# Polylines.

@dataclass(frozen=True)
class Polyline3:
    """Ordered 3-D point chain, optionally closed.

    At least 2 points (3 if closed); consecutive points (including the
    closing pair) must be separated by more than MIN_POINT_SEPARATION.
    """

    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = as_points(self.points)
        n = len(pts)
        if n < (3 if self.closed else 2):
            raise GeometryError(
                f"polyline needs at least {3 if self.closed else 2} points, got {n}")
        d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if self.closed:
            d = np.append(d, np.linalg.norm(pts[0] - pts[-1]))
        if np.any(d <= MIN_POINT_SEPARATION):
            i = int(np.argmax(d <= MIN_POINT_SEPARATION))
            raise GeometryError(f"coincident consecutive points at index {i}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @cached_property
    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """(starts, ends) arrays, including the closing segment when closed."""
        pts = self.points
        if self.closed:
            return pts, np.roll(pts, -1, axis=0)
        return pts[:-1], pts[1:]

    @cached_property
    def segment_lengths(self) -> np.ndarray:
        a, b = self.segments
        return np.linalg.norm(b - a, axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    def transformed(self, t: RigidTransform) -> "Polyline3":
        return Polyline3(t.apply(self.points), self.closed)


def polyline_point_distances(points, line: Polyline3) -> np.ndarray:
    """Distance from each query point to the nearest point of the polyline.

    Vectorized over both query points and segments; ties between equidistant
    segments resolve identically to the scalar scan (value is the minimum).
    """
    p = as_points(points)
    a, b = line.segments
    ab = b - a                                     # (S, 3)
    denom = np.einsum("ij,ij->i", ab, ab)          # (S,)
    # t parameter of the projection of each point onto each segment
    ap = p[:, None, :] - a[None, :, :]             # (N, S, 3)
    t = np.einsum("nsj,sj->ns", ap, ab) / denom
    np.clip(t, 0.0, 1.0, out=t)
    diff = ap - t[:, :, None] * ab[None, :, :]
    d2 = np.einsum("nsj,nsj->ns", diff, diff)
    return np.sqrt(d2.min(axis=1))


def nearest_point_on_polyline(p, line: Polyline3) -> tuple[float, np.ndarray, int]:
    """(distance, nearest point, segment index); ties go to the lowest index."""
    p = as_point3(p)
    a, b = line.segments
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p[None, :] - a, ab) / denom
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[:, None] * ab
    d = np.linalg.norm(p[None, :] - foot, axis=1)
    i = int(np.argmin(d))  # argmin takes the first (lowest index) on ties
    return float(d[i]), foot[i], i


def point_to_polyline_distance(p, line: Polyline3) -> float:
    """Minimum Euclidean distance from a point to any segment of the line."""
    return nearest_point_on_polyline(p, line)[0]


def resample_polyline(line: Polyline3, spacing: float) -> Polyline3:
    """Subdivide each segment into equal pieces no longer than ``spacing``.

    Original vertices are kept, so the output lies exactly on the input and
    preserves total arc length; endpoints (or closure) are preserved.
    """
    if spacing <= 0:
        raise GeometryError(f"spacing must be positive, got {spacing}")
    a, b = line.segments
    lengths = line.segment_lengths
    pieces = np.maximum(1, np.ceil(lengths / spacing - 1e-12).astype(np.int64))
    seg = np.repeat(np.arange(len(pieces)), pieces)
    run_starts = np.concatenate([[0], np.cumsum(pieces)[:-1]])
    within = np.arange(int(pieces.sum())) - run_starts[seg]
    frac = (within / pieces[seg])[:, None]
    pts = a[seg] * (1 - frac) + b[seg] * frac
    if not line.closed:
        pts = np.vstack([pts, line.points[-1]])
    return Polyline3(pts, line.closed)


def interpolate_at_arc_lengths(line: Polyline3, arcs) -> np.ndarray:
    """Points of the polyline at the given arc-length positions.

    Positions are clamped to [0, length]; for closed lines the full length
    maps back onto the closing point.
    """
    arcs = np.asarray(arcs, dtype=np.float64)
    seg_len = line.segment_lengths
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s = np.clip(arcs, 0.0, total)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    a, b = line.segments
    return a[idx] + frac[:, None] * (b[idx] - a[idx])


def best_fit_plane_normal(points, winding: bool = True) -> np.ndarray:
    """Unit normal of the least-squares plane through the points.

    With ``winding`` the sign follows the right-hand rule of the point
    order (positive loop area), otherwise the sign is arbitrary.
    """
    pts = as_points(points)
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    n = vt[-1]
    if winding:
        q = pts - c
        area2 = np.cross(q, np.roll(q, -1, axis=0)).sum(axis=0)
        if np.dot(area2, n) < 0:
            n = -n
    return n / np.linalg.norm(n)


# ---------------------------------------------------------------------------
# Triangle meshes.

@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh: (N, 3) vertices in mm, (M, 3) vertex indices.

    Face indices must be in range and faces non-degenerate (area above
    MIN_FACE_AREA). Loaders drop degenerate faces before construction.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = as_points(self.vertices)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (M, 3) indices, got shape {f.shape}")
        if len(f) == 0:
            raise GeometryError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise GeometryError(
                f"face index out of range (vertices: {len(v)}, indices span "
                f"{f.min()}..{f.max()})")
        areas = 0.5 * np.linalg.norm(
            np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
        if np.any(areas <= MIN_FACE_AREA):
            raise GeometryError(
                f"{int((areas <= MIN_FACE_AREA).sum())} degenerate (zero-area) faces")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def triangles(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    @cached_property
    def face_normals(self) -> np.ndarray:
        a, b, c = self.triangles
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        n.setflags(write=False)
        return n

    @cached_property
    def face_areas(self) -> np.ndarray:
        a, b, c = self.triangles
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Angle-weighted vertex normals."""
        v, f = self.vertices, self.faces
        out = np.zeros_like(v)
        tri = [v[f[:, k]] for k in range(3)]
        for k in range(3):
            e1 = tri[(k + 1) % 3] - tri[k]
            e2 = tri[(k + 2) % 3] - tri[k]
            e1n = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
            e2n = e2 / np.linalg.norm(e2, axis=1, keepdims=True)
            ang = np.arccos(np.clip(np.einsum("ij,ij->i", e1n, e2n), -1.0, 1.0))
            np.add.at(out, f[:, k], self.face_normals * ang[:, None])
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise GeometryError("vertex with degenerate normal (isolated or flat fan)")
        out /= norms
        out.setflags(write=False)
        return out

    @cached_property
    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        a, b, c = self.triangles
        w = self.face_areas
        return ((a + b + c) / 3.0 * w[:, None]).sum(axis=0) / w.sum()

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two faces."""
        f = self.faces
        edges = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.faces)


def _dedup_mesh(vertices: np.ndarray, faces: np.ndarray, weld_tol: float):
    """Weld vertices within weld_tol and drop degenerate faces.

    Returns (vertices, faces, dropped_face_count).
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if weld_tol > 0 and len(v):
        keys = np.round(v / weld_tol).astype(np.int64)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        v = v[first]
        f = inverse[f]
    # drop faces with repeated vertices or ~zero area
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = distinct & (areas > MIN_FACE_AREA)
    return v, f[keep], int(len(f) - keep.sum())


def closest_points_on_triangles(points, a, b, c) -> np.ndarray:
    """Closest point on triangle (a_i, b_i, c_i) to points_i, all (N, 3).

    Region classification per the standard barycentric-clamp algorithm;
    triangles must be non-degenerate.
    """
    p = np.asarray(points, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value):
        nonlocal done
        m = mask & ~done
        if np.any(m):
            out[m] = value[m]
        done = done | m

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)                                   # vertex a
        take((d3 >= 0) & (d4 <= d3), b)                                  # vertex b
        v = (d1 / (d1 - d3))[:, None]
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v * ab)              # edge ab
        take((d6 >= 0) & (d5 <= d6), c)                                  # vertex c
        w = (d2 / (d2 - d6))[:, None]
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w * ac)              # edge ac
        u = ((d4 - d3) / ((d4 - d3) + (d5 - d6)))[:, None]
        take((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + u * (c - b))  # edge bc
        denom = va + vb + vc
        v2 = (vb / denom)[:, None]
        w2 = (vc / denom)[:, None]
        take(~done, a + v2 * ab + w2 * ac)                               # interior
    return out


def point_to_mesh_distance(p, mesh: TriangleMesh) -> float:
    """Exact minimum distance from a point to any face of the mesh."""
    if mesh is None or mesh.n_faces == 0:
        raise GeometryError("empty mesh")
    p = as_point3(p)
    a, b, c = mesh.triangles
    pts = np.broadcast_to(p, a.shape)
    closest = closest_points_on_triangles(pts, a, b, c)
    return float(np.linalg.norm(closest - p, axis=1).min())


class MeshDistanceIndex:
    """KD-tree accelerated exact point-to-mesh distance queries.

    Exactness: candidate faces are those with a vertex inside a radius that
    provably contains the closest face (every point of a face lies within
    longest_edge/sqrt(3) of one of its vertices).
    """

    def __init__(self, mesh: TriangleMesh):
        from scipy.spatial import cKDTree

        self.mesh = mesh
        self._tree = cKDTree(mesh.vertices)
        a, b, c = mesh.triangles
        e1 = np.linalg.norm(b - a, axis=1)
        e2 = np.linalg.norm(c - b, axis=1)
        e3 = np.linalg.norm(a - c, axis=1)
        longest = np.maximum(np.maximum(e1, e2), e3)
        self._slack = float(longest.max()) / np.sqrt(3.0)
        # a face whose vertices all sit at >= r from a query point cannot
        # come closer than sqrt(r^2 - rho^2): rho is the circumradius for
        # acute faces (interior minimum) or half the longest edge for obtuse
        # ones (edge minimum)
        circum = e1 * e2 * e3 / (4.0 * mesh.face_areas)
        sq = np.sort(np.stack([e1, e2, e3], axis=1) ** 2, axis=1)
        acute = sq[:, 2] < sq[:, 0] + sq[:, 1]
        self._rho = float(np.where(acute, circum, longest / 2.0).max())
        # CSR-style vertex -> incident faces map
        f = mesh.faces
        vert_ids = f.reshape(-1)
        face_ids = np.repeat(np.arange(len(f)), 3)
        order = np.argsort(vert_ids, kind="stable")
        self._incident_faces = face_ids[order]
        counts = np.bincount(vert_ids, minlength=mesh.n_vertices)
        self._incident_start = np.concatenate([[0], np.cumsum(counts)])

    @property
    def tree(self):
        return self._tree

    def _faces_of_vertices(self, vert_idx: np.ndarray) -> np.ndarray:
        starts = self._incident_start[vert_idx]
        ends = self._incident_start[vert_idx + 1]
        return np.unique(np.concatenate(
            [self._incident_faces[s:e] for s, e in zip(starts, ends)]))

    def _gather_incident(self, vert_ids: np.ndarray, owner_ids: np.ndarray):
        """(owner, face) pairs for all faces incident to the given vertices."""
        starts = self._incident_start[vert_ids]
        counts = self._incident_start[vert_ids + 1] - starts
        total = int(counts.sum())
        if total == 0:
            return (np.empty(0, dtype=np.int64),) * 2
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        idx = np.repeat(starts - offsets, counts) + np.arange(total)
        fid = self._incident_faces[idx]
        pid = np.repeat(owner_ids, counts)
        # dedupe (owner, face) pairs
        key = np.unique(pid * np.int64(self.mesh.n_faces) + fid)
        return key // self.mesh.n_faces, key % self.mesh.n_faces

    def _exact_pairs(self, points: np.ndarray, point_ids: np.ndarray,
                     face_ids: np.ndarray) -> np.ndarray:
        a, b, c = self.mesh.triangles
        closest = closest_points_on_triangles(
            points[point_ids], a[face_ids], b[face_ids], c[face_ids])
        diff = points[point_ids] - closest
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def _first_pass(self, p: np.ndarray, nn: np.ndarray) -> np.ndarray:
        """Exact distances to faces incident to each point's nearest vertex."""
        pid, fid = self._gather_incident(nn, np.arange(len(p)))
        best = np.full(len(p), np.inf)
        np.minimum.at(best, pid, self._exact_pairs(p, pid, fid))
        return best

    def _ball_pass(self, p: np.ndarray, best: np.ndarray,
                   radii: np.ndarray) -> np.ndarray:
        """Tighten ``best`` with every face having a vertex within radius."""
        balls = self._tree.query_ball_point(p, radii)
        lens = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(p))
        if lens.sum() == 0:
            return best
        vert_ids = np.fromiter((v for b in balls for v in b), dtype=np.int64,
                               count=int(lens.sum()))
        owner = np.repeat(np.arange(len(p)), lens)
        pid, fid = self._gather_incident(vert_ids, owner)
        np.minimum.at(best, pid, self._exact_pairs(p, pid, fid))
        return best

    def distances(self, points) -> np.ndarray:
        """Exact distance from each query point to the mesh."""
        p = as_points(points)
        d_nn, nn = self._tree.query(p)
        best = self._first_pass(p, nn)
        # widen to every face that could possibly be closer
        return self._ball_pass(p, best, best + self._slack + 1e-12)

    def min_distance(self, points, k: int = 8) -> float:
        """Exact minimum over the query points of the distance to the mesh."""
        p = as_points(points)
        d_nn, nn = self._tree.query(p)
        upper = float(d_nn.min())
        # only points this close to a vertex can beat the best vertex bound
        cand = np.flatnonzero(d_nn <= upper + self._slack)
        pc = p[cand]
        best = self._first_pass(pc, nn[cand])
        u = float(best.min())
        again = np.flatnonzero(d_nn[cand] - self._slack < u)
        pa = pc[again]
        vals = best[again]
        # k-NN pass with a circumradius certificate; faces whose vertices all
        # lie beyond the k-th neighbor cannot beat sqrt(r^2 - rho^2)
        k = min(k, self.mesh.n_vertices)
        dk, idx = self._tree.query(pa, k=k)
        if k == 1:
            dk, idx = dk.reshape(-1, 1), idx.reshape(-1, 1)
        owner = np.repeat(np.arange(len(pa)), k)
        pid, fid = self._gather_incident(idx.reshape(-1), owner)
        np.minimum.at(vals, pid, self._exact_pairs(pa, pid, fid))
        cert = vals <= np.sqrt(np.maximum(0.0, dk[:, -1] ** 2
                                          - self._rho ** 2)) + 1e-12
        todo = np.flatnonzero(~cert)
        if len(todo):
            radii = np.minimum(vals[todo], u) + self._slack + 1e-12
            vals[todo] = self._ball_pass(pa[todo], vals[todo], radii)
        return min(u, float(vals.min())) if len(vals) else u


def subdivide_long_edges(mesh: TriangleMesh, max_edge: float) -> TriangleMesh:
    """Split faces at their longest edge until no edge exceeds ``max_edge``.

    The surface is unchanged as a point set (split points lie on existing
    edges; T-junctions are left in place), so distance queries against the
    result equal queries against the input. Intended to tame high-aspect
    faces before building a MeshDistanceIndex.
    """
    if max_edge <= 0:
        raise GeometryError("max_edge must be positive")
    v_chunks = [mesh.vertices]
    n_verts = mesh.n_vertices
    finished = []
    work = mesh.faces
    v_all = mesh.vertices
    while len(work):
        a, b, c = v_all[work[:, 0]], v_all[work[:, 1]], v_all[work[:, 2]]
        e = np.stack([
            np.linalg.norm(b - a, axis=1),
            np.linalg.norm(c - b, axis=1),
            np.linalg.norm(a - c, axis=1),
        ], axis=1)
        longest = e.argmax(axis=1)
        split = e[np.arange(len(work)), longest] > max_edge
        finished.append(work[~split])
        if not split.any():
            break
        fs = work[split]
        which = longest[split]
        # vertices of the longest edge (i, j) and the opposite vertex k
        rows = np.arange(len(fs))
        i = fs[rows, which]
        j = fs[rows, (which + 1) % 3]
        k = fs[rows, (which + 2) % 3]
        mid = 0.5 * (v_all[i] + v_all[j])
        mid_idx = n_verts + np.arange(len(mid))
        n_verts += len(mid)
        v_chunks.append(mid)
        v_all = np.vstack(v_chunks)
        work = np.concatenate([
            np.stack([i, mid_idx, k], axis=1),
            np.stack([mid_idx, j, k], axis=1),
        ])
    return TriangleMesh(v_all, np.vstack(finished))
