"""Procedural test and demo meshes: icospheres, ellipsoids, plates, tubes."""

from __future__ import annotations

import numpy as np

from .geometry import Polyline3, TriangleMesh

__all__ = [
    "icosphere",
    "ellipsoid",
    "lens",
    "revolved_lens",
    "plane_grid",
    "open_cylinder",
    "circle_polyline",
]


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v, f


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosahedron subdivided ``subdivisions`` times, scaled to radius."""
    v, f = _icosahedron()
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}
        verts = list(v)

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = 0.5 * (verts[i] + verts[j])
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(verts)
                verts.append(m)
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.asarray(verts)
        f = np.asarray(new_faces, dtype=np.int64)
    return TriangleMesh(v * radius, f)


def ellipsoid(semi_axes, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    sphere = icosphere(subdivisions)
    v = sphere.vertices * np.asarray(semi_axes, dtype=np.float64)
    return TriangleMesh(v + np.asarray(center, dtype=np.float64), sphere.faces)


def lens(lateral_semi_axes, upper_height: float, lower_height: float,
         subdivisions: int = 4, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Ellipsoid with different vertical semi-axes above and below its equator.

    Models a palpable bump-shaped inclusion: widest at the equator, a shallow
    cap above (``upper_height``) and a deeper body below (``lower_height``).
    ``center`` is the equator center.
    """
    sphere = icosphere(subdivisions)
    a, b = lateral_semi_axes
    v = sphere.vertices.copy()
    v[:, 0] *= a
    v[:, 1] *= b
    up = v[:, 2] >= 0
    v[up, 2] *= upper_height
    v[~up, 2] *= lower_height
    return TriangleMesh(v + np.asarray(center, dtype=np.float64), sphere.faces)


def revolved_lens(lateral_semi_axes, upper_height: float, lower_height: float,
                  n_theta: int = 80, n_rings_per_side: int = 16,
                  ring_exponent: float = 1.5,
                  center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Lens built as a surface of revolution with rings packed at the equator.

    The sharp equator rim is where offset and distance accuracy matter, so
    latitude rings are spaced as |t|^ring_exponent, concentrating samples
    there. Watertight: pole vertices with triangle fans, quad strips between
    rings.
    """
    a, b = lateral_semi_axes
    t = np.linspace(-1.0, 1.0, 2 * n_rings_per_side + 1)
    phi = np.sign(t) * np.abs(t) ** ring_exponent * (np.pi / 2)
    phi = phi[1:-1]  # poles handled separately
    theta = 2 * np.pi * np.arange(n_theta) / n_theta

    rings = []
    for p in phi:
        r = np.cos(p)
        z = (upper_height if p >= 0 else lower_height) * np.sin(p)
        rings.append(np.stack([a * r * np.cos(theta), b * r * np.sin(theta),
                               np.full(n_theta, z)], axis=1))
    verts = np.vstack(rings)
    south = np.array([[0.0, 0.0, -lower_height]])
    north = np.array([[0.0, 0.0, upper_height]])
    verts = np.vstack([verts, south, north])
    i_south = len(verts) - 2
    i_north = len(verts) - 1

    faces = []
    n_rings = len(phi)
    for k in range(n_rings - 1):
        base0 = k * n_theta
        base1 = (k + 1) * n_theta
        j = np.arange(n_theta)
        jn = (j + 1) % n_theta
        faces.append(np.stack([base0 + j, base0 + jn, base1 + jn], axis=1))
        faces.append(np.stack([base0 + j, base1 + jn, base1 + j], axis=1))
    j = np.arange(n_theta)
    jn = (j + 1) % n_theta
    faces.append(np.stack([np.full(n_theta, i_south), j + 0, jn + 0], axis=1)[:, ::-1])
    top = (n_rings - 1) * n_theta
    faces.append(np.stack([np.full(n_theta, i_north), top + jn, top + j], axis=1)[:, ::-1])
    mesh = TriangleMesh(verts + np.asarray(center, dtype=np.float64),
                        np.vstack(faces).astype(np.int64))
    return mesh


def plane_grid(size_x: float, size_y: float, cells: int = 20,
               center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Flat rectangular plate in the z=0 plane (before centering offset)."""
    xs = np.linspace(-size_x / 2, size_x / 2, cells + 1)
    ys = np.linspace(-size_y / 2, size_y / 2, cells + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    faces = []
    for i in range(cells):
        for j in range(cells):
            a = i * (cells + 1) + j
            b = a + 1
            c = a + cells + 1
            d = c + 1
            faces += [[a, c, d], [a, d, b]]  # wound so normals face +z
    return TriangleMesh(verts + np.asarray(center, dtype=np.float64),
                        np.asarray(faces, dtype=np.int64))


def open_cylinder(radius: float, z_top: float, z_bottom: float,
                  segments: int = 360, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Cylindrical wall (no caps) with axis along z."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    top = np.column_stack([ring, np.full(segments, z_top)])
    bot = np.column_stack([ring, np.full(segments, z_bottom)])
    verts = np.vstack([top, bot]) + np.asarray(center, dtype=np.float64)
    idx = np.arange(segments)
    nxt = (idx + 1) % segments
    f1 = np.stack([idx, nxt, segments + idx], axis=1)
    f2 = np.stack([nxt, segments + nxt, segments + idx], axis=1)
    return TriangleMesh(verts, np.vstack([f1, f2]).astype(np.int64))


def circle_polyline(radius: float, n_points: int = 360,
                    center=(0.0, 0.0, 0.0)) -> Polyline3:
    ang = 2 * np.pi * np.arange(n_points) / n_points
    pts = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                    np.zeros(n_points)], axis=1)
    return Polyline3(pts + np.asarray(center, dtype=np.float64), closed=True)
