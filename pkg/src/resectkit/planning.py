"""Resection planning: margin offset surface, capsule intersection path.

The cutting surface is built by displacing each tumor vertex along its
angle-weighted normal by the target margin. That is an approximation of a
true constant-distance offset; the plan contract bounds the error to
+/- 1 mm, which holds for convex-ish tumors at the 10 mm scale. Highly
concave shapes can self-intersect after offsetting and are reported via a
warning.

The planned path is the closed intersection curve of the cutting surface
with the organ capsule, extracted as triangle-triangle intersection
segments chained into loops.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (GeometryError, MeshDistanceIndex, Polyline3,
                       RigidTransform, TriangleMesh, best_fit_plane_normal)
from . import meshio

CHAIN_TOL = 1e-4
ON_SURFACE_TOL = 0.5
OFFSET_TOL = 1.0
MIN_PATH_POINTS = 16

__all__ = [
    "PlanningError",
    "EmptyIntersectionError",
    "TopologyError",
    "OffsetWarning",
    "ResectionPlan",
    "ValidationCheck",
    "ValidationReport",
    "offset_surface",
    "surface_intersection_curve",
    "intersection_segments",
    "meshes_intersect",
    "build_plan",
    "validate_plan",
    "save_plan",
    "load_plan",
]


class PlanningError(GeometryError):
    pass


class EmptyIntersectionError(PlanningError):
    """The meshes do not intersect."""


class TopologyError(PlanningError):
    """Intersection segments do not chain into closed loops."""

    def __init__(self, message: str, gap_endpoints=None):
        super().__init__(message)
        self.gap_endpoints = gap_endpoints


class OffsetWarning(UserWarning):
    pass


def offset_surface(tumor: TriangleMesh, margin: float) -> TriangleMesh:
    """Displace every vertex outward by ``margin`` along its vertex normal.

    The tumor mesh must be watertight. Offset validity is checked by
    measuring every output vertex back to the tumor: distances below
    margin - 1 indicate a self-intersecting offset and raise OffsetWarning
    with the violation count.
    """
    if margin <= 0:
        raise PlanningError(f"margin must be positive, got {margin}")
    if not tumor.is_watertight():
        raise PlanningError("tumor mesh is not watertight; offset undefined")
    out = TriangleMesh(tumor.vertices + margin * tumor.vertex_normals, tumor.faces)
    back = MeshDistanceIndex(tumor).distances(out.vertices)
    violations = int((back < margin - OFFSET_TOL).sum())
    if violations:
        warnings.warn(
            f"offset surface self-intersects: {violations} vertices closer than "
            f"{margin - OFFSET_TOL:.2f} mm to the source mesh", OffsetWarning)
    return out


# ---------------------------------------------------------------------------
# Triangle-triangle intersection.

def _candidate_face_pairs(a: TriangleMesh, b: TriangleMesh,
                          chunk: int = 4_000_000) -> np.ndarray:
    """(i, j) face-index pairs whose AABBs overlap, sorted lexicographically."""
    av, af = a.vertices, a.faces
    bv, bf = b.vertices, b.faces
    a_lo = np.minimum.reduce([av[af[:, k]] for k in range(3)])
    a_hi = np.maximum.reduce([av[af[:, k]] for k in range(3)])
    b_lo = np.minimum.reduce([bv[bf[:, k]] for k in range(3)])
    b_hi = np.maximum.reduce([bv[bf[:, k]] for k in range(3)])
    # global cull both ways
    keep_a = np.flatnonzero(np.all(a_hi >= b_lo.min(axis=0), axis=1)
                            & np.all(a_lo <= b_hi.max(axis=0), axis=1))
    keep_b = np.flatnonzero(np.all(b_hi >= a_lo.min(axis=0), axis=1)
                            & np.all(b_lo <= a_hi.max(axis=0), axis=1))
    if len(keep_a) == 0 or len(keep_b) == 0:
        return np.empty((0, 2), dtype=np.int64)
    pairs = []
    rows_per_chunk = max(1, chunk // max(1, len(keep_b)))
    for s in range(0, len(keep_a), rows_per_chunk):
        ia = keep_a[s:s + rows_per_chunk]
        overlap = np.all(
            (a_hi[ia][:, None, :] >= b_lo[keep_b][None, :, :])
            & (a_lo[ia][:, None, :] <= b_hi[keep_b][None, :, :]), axis=2)
        ii, jj = np.nonzero(overlap)
        if len(ii):
            pairs.append(np.column_stack([ia[ii], keep_b[jj]]))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    out = np.vstack(pairs)
    order = np.lexsort((out[:, 1], out[:, 0]))
    return out[order]


def _plane_filter(a: TriangleMesh, b: TriangleMesh, pairs: np.ndarray) -> np.ndarray:
    """Keep pairs where each triangle straddles the other's plane."""
    if len(pairs) == 0:
        return pairs
    ta = [t[pairs[:, 0]] for t in a.triangles]
    tb = [t[pairs[:, 1]] for t in b.triangles]
    na = a.face_normals[pairs[:, 0]]
    nb = b.face_normals[pairs[:, 1]]

    def straddles(tri, n_other, p_other):
        d = [np.einsum("ij,ij->i", v - p_other, n_other) for v in tri]
        d = np.stack(d, axis=1)
        return (d.max(axis=1) > 0) & (d.min(axis=1) < 0)

    keep = straddles(ta, nb, tb[0]) & straddles(tb, na, ta[0])
    return pairs[keep]


def _triangle_plane_crossings(tri, n, p0):
    """The two points where a triangle's edges cross the plane (n, p0)."""
    d = [float(np.dot(v - p0, n)) for v in tri]
    pts = []
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        da, db = d[k], d[(k + 1) % 3]
        if da == 0.0 and db == 0.0:
            continue
        if da == 0.0:
            pts.append(a)
        elif (da > 0) != (db > 0):
            pts.append(a + (da / (da - db)) * (b - a))
    # dedupe (vertex-on-plane cases can produce duplicates)
    uniq = []
    for p in pts:
        if not any(np.linalg.norm(p - q) < 1e-12 for q in uniq):
            uniq.append(p)
    return uniq


def intersection_segments(a: TriangleMesh, b: TriangleMesh) -> list[tuple[np.ndarray, np.ndarray]]:
    """3-D segments of the surface-surface intersection, in sorted pair order."""
    pairs = _plane_filter(a, b, _candidate_face_pairs(a, b))
    segs = []
    for i, j in pairs:
        tri_a = [a.vertices[v] for v in a.faces[i]]
        tri_b = [b.vertices[v] for v in b.faces[j]]
        na, nb = a.face_normals[i], b.face_normals[j]
        direction = np.cross(na, nb)
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            continue  # coplanar contact carries no crossing segment
        direction = direction / norm
        ca = _triangle_plane_crossings(tri_a, nb, tri_b[0])
        cb = _triangle_plane_crossings(tri_b, na, tri_a[0])
        if len(ca) < 2 or len(cb) < 2:
            continue
        ta = sorted((float(np.dot(p, direction)), p) for p in ca[:2])
        tb = sorted((float(np.dot(p, direction)), p) for p in cb[:2])
        lo = max(ta[0], tb[0], key=lambda x: x[0])
        hi = min(ta[1], tb[1], key=lambda x: x[0])
        if hi[0] - lo[0] > 1e-12:
            segs.append((lo[1], hi[1]))
    return segs


def meshes_intersect(a: TriangleMesh, b: TriangleMesh) -> bool:
    return len(intersection_segments(a, b)) > 0


def _chain_loops(segs) -> list[np.ndarray]:
    """Chain segments into closed loops by endpoint proximity (CHAIN_TOL)."""
    n = len(segs)
    ends = np.array([[s[0], s[1]] for s in segs])  # (n, 2, 3)
    flat = ends.reshape(-1, 3)
    keys = np.round(flat / CHAIN_TOL).astype(np.int64)
    node_of: dict[tuple, int] = {}
    node_ids = np.empty(len(flat), dtype=np.int64)
    for idx, k in enumerate(map(tuple, keys)):
        node_ids[idx] = node_of.setdefault(k, len(node_of))
    node_ids = node_ids.reshape(n, 2)

    adjacency: dict[int, list[tuple[int, int]]] = {}
    for si in range(n):
        for e in range(2):
            adjacency.setdefault(int(node_ids[si, e]), []).append((si, e))

    used = np.zeros(n, dtype=bool)
    loops = []
    for start in range(n):
        if used[start]:
            continue
        chain_pts = [segs[start][0], segs[start][1]]
        used[start] = True
        start_node = int(node_ids[start, 0])
        node = int(node_ids[start, 1])
        closed = False
        while True:
            if node == start_node:
                closed = True
                break
            options = [(si, e) for si, e in adjacency.get(node, ()) if not used[si]]
            # at non-manifold junctions skip segments that loop back in place
            options = ([o for o in options if node_ids[o[0], 1 - o[1]] != node]
                       or options)
            if not options:
                break
            si, e = options[0]
            used[si] = True
            nxt = segs[si][1 - e]
            chain_pts.append(nxt)
            node = int(node_ids[si, 1 - e])
        if not closed:
            raise TopologyError(
                "intersection does not close into a loop "
                f"(gap between {chain_pts[0]} and {chain_pts[-1]})",
                gap_endpoints=(chain_pts[0], chain_pts[-1]))
        loops.append(np.asarray(chain_pts[:-1]))  # last point repeats the first
    return loops


def _dedupe_loop(points: np.ndarray) -> np.ndarray:
    keep = [points[0]]
    for p in points[1:]:
        if np.linalg.norm(p - keep[-1]) > 1e-6:
            keep.append(p)
    while len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= 1e-6:
        keep.pop()
    return np.asarray(keep)


def surface_intersection_curve(liver: TriangleMesh, cutting: TriangleMesh) -> Polyline3:
    """Closed intersection loop of the two surfaces, oriented counter-clockwise.

    Multiple loops trigger a warning (offset self-intersection artifacts) and
    the longest loop is returned. Orientation is counter-clockwise about the
    average outward normal of the liver faces along the loop (right-hand rule).
    """
    segs = intersection_segments(liver, cutting)
    if not segs:
        raise EmptyIntersectionError("the surfaces do not intersect")
    loops = _chain_loops(segs)
    loops = [_dedupe_loop(lp) for lp in loops]
    loops = [lp for lp in loops if len(lp) >= 3]
    if not loops:
        raise TopologyError("intersection degenerates to isolated contacts")
    if len(loops) > 1:
        warnings.warn(f"intersection produced {len(loops)} loops; returning the "
                      "longest (extra loops usually mean the offset surface "
                      "self-intersects)", OffsetWarning)

    def loop_length(lp):
        return float(np.linalg.norm(np.diff(np.vstack([lp, lp[:1]]), axis=0),
                                    axis=1).sum())

    loop = max(loops, key=loop_length)

    # outward normal of the liver near the loop: average liver face normal
    # weighted by proximity is overkill; the mean normal of faces whose
    # centroid is near the loop is stable for capsule-scale curvature.
    index = MeshDistanceIndex(liver)
    _, nearest_vert = index.tree.query(loop)
    face_ids = index._faces_of_vertices(np.unique(nearest_vert))
    avg_normal = liver.face_normals[face_ids].mean(axis=0)
    avg_normal /= np.linalg.norm(avg_normal)

    centered = loop - loop.mean(axis=0)
    area_vec = 0.5 * np.cross(centered, np.roll(centered, -1, axis=0)).sum(axis=0)
    if float(np.dot(area_vec, avg_normal)) < 0:
        loop = loop[::-1].copy()
    return Polyline3(loop, closed=True)


# ---------------------------------------------------------------------------
# Plans.

@dataclass(frozen=True)
class ResectionPlan:
    """Planned resection: surface path, cutting surface, tumor, margin."""

    path: Polyline3
    cutting_surface: TriangleMesh
    tumor: TriangleMesh
    target_margin: float = 10.0

    def __post_init__(self):
        if not self.path.closed:
            raise PlanningError("resection path must be a closed loop")
        if len(self.path.points) < MIN_PATH_POINTS:
            raise PlanningError(
                f"path has {len(self.path.points)} points, "
                f"needs at least {MIN_PATH_POINTS}")
        if self.target_margin <= 0:
            raise PlanningError("target margin must be positive")

    @property
    def outward_loop_normal(self) -> np.ndarray:
        """Unit normal of the path's best-fit plane, by path winding."""
        return best_fit_plane_normal(self.path.points, winding=True)

    def transformed(self, t: RigidTransform) -> "ResectionPlan":
        return ResectionPlan(self.path.transformed(t),
                             self.cutting_surface.transformed(t),
                             self.tumor.transformed(t),
                             self.target_margin)


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[ValidationCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self) -> str:
        return "\n".join(
            f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}"
            for c in self.checks)


def build_plan(liver: TriangleMesh, tumor: TriangleMesh,
               margin: float = 10.0) -> ResectionPlan:
    """Margin offset around the tumor, intersected with the organ capsule."""
    cutting = offset_surface(tumor, margin)
    path = surface_intersection_curve(liver, cutting)
    return ResectionPlan(path=path, cutting_surface=cutting, tumor=tumor,
                         target_margin=margin)


def _point_in_polygon_2d(pt, polygon) -> bool:
    x, y = pt
    inside = False
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
            if x_cross > x:
                inside = not inside
    return inside


def validate_plan(plan: ResectionPlan, liver: TriangleMesh) -> ValidationReport:
    """Check the plan invariants; failures are report entries, not errors."""
    checks = []
    pts = plan.path.points

    closed_ok = plan.path.closed and len(pts) >= MIN_PATH_POINTS
    checks.append(ValidationCheck(
        "path_closed", closed_ok,
        f"closed loop with {len(pts)} points (needs >= {MIN_PATH_POINTS})"))

    surf_d = MeshDistanceIndex(liver).distances(pts)
    worst = int(np.argmax(surf_d))
    checks.append(ValidationCheck(
        "on_surface", bool(surf_d.max() <= ON_SURFACE_TOL),
        f"max distance to capsule {surf_d.max():.4f} mm at point {worst} "
        f"(tolerance {ON_SURFACE_TOL} mm)"))

    tumor_d = MeshDistanceIndex(plan.tumor).distances(pts)
    worst_t = int(np.argmin(tumor_d))
    required = plan.target_margin - OFFSET_TOL
    checks.append(ValidationCheck(
        "margin_clearance", bool(tumor_d.min() >= required),
        f"min path-to-tumor distance {tumor_d.min():.4f} mm at point {worst_t} "
        f"(needs >= {required:.2f} mm)"))

    # tumor centroid must project inside the loop
    normal = plan.outward_loop_normal
    origin = pts.mean(axis=0)
    basis_u = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(basis_u) < 1e-6:
        basis_u = np.cross(normal, [0.0, 1.0, 0.0])
    basis_u /= np.linalg.norm(basis_u)
    basis_v = np.cross(normal, basis_u)
    poly2 = [(float(np.dot(p - origin, basis_u)), float(np.dot(p - origin, basis_v)))
             for p in pts]
    c2 = (float(np.dot(plan.tumor.centroid - origin, basis_u)),
          float(np.dot(plan.tumor.centroid - origin, basis_v)))
    inside = _point_in_polygon_2d(c2, poly2)
    checks.append(ValidationCheck(
        "tumor_containment", inside,
        "tumor centroid projects inside the path loop" if inside
        else "tumor centroid projects OUTSIDE the path loop"))

    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# Plan serialization: path file + cutting surface mesh + manifest.

def _files_checksum(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def save_plan(plan: ResectionPlan, out_dir, liver_mesh_file: str = "liver.stl") -> Path:
    """Write path/cutting-surface/tumor files plus the manifest; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meshio.save_polyline(plan.path, out / "path.txt")
    meshio.save_mesh(plan.cutting_surface, out / "cutting_surface.stl")
    meshio.save_mesh(plan.tumor, out / "tumor.stl")
    checksum = _files_checksum(
        [out / "path.txt", out / "cutting_surface.stl", out / "tumor.stl"])
    manifest = out / "plan.manifest"
    manifest.write_text(
        "# resection plan manifest\n"
        f"margin_mm = {plan.target_margin:.6f}\n"
        "path = path.txt\n"
        "cutting_surface = cutting_surface.stl\n"
        "tumor_mesh = tumor.stl\n"
        f"liver_mesh = {liver_mesh_file}\n"
        f"checksum = {checksum}\n")
    return manifest


def load_plan(manifest_path) -> tuple[ResectionPlan, dict]:
    """Load a plan from its manifest; verifies the content checksum.

    Returns (plan, manifest_fields); fields include the liver mesh filename
    for callers that need the capsule for validation.
    """
    manifest_path = Path(manifest_path)
    fields = {}
    for raw in manifest_path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    base = manifest_path.parent
    for key in ("margin_mm", "path", "cutting_surface", "tumor_mesh", "checksum"):
        if key not in fields:
            raise PlanningError(f"{manifest_path}: manifest missing '{key}'")
    files = [base / fields["path"], base / fields["cutting_surface"],
             base / fields["tumor_mesh"]]
    checksum = _files_checksum(files)
    if checksum != fields["checksum"]:
        raise PlanningError(
            f"{manifest_path}: checksum mismatch (files changed since the plan "
            "was written)")
    plan = ResectionPlan(
        path=meshio.load_polyline(files[0]),
        cutting_surface=meshio.load_mesh(files[1]),
        tumor=meshio.load_mesh(files[2]),
        target_margin=float(fields["margin_mm"]),
    )
    return plan, fields
