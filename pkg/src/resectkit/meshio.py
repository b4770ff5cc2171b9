"""Mesh and polyline file formats.

Meshes: binary STL (80-byte header, little-endian 50-byte triangle records)
and ASCII PLY (float x/y/z vertex properties, ``vertex_indices`` face list).
Duplicate STL vertices are welded within 1e-6 mm. Degenerate (zero-area)
faces are dropped at load and reported through the returned LoadReport.

Point sets and polylines: plain text, one ``x y z`` triple per line.
Lines starting with ``#`` are directives or comments; a ``#closed`` line
marks a closed polyline. This is the exchange format for planned paths and
fiducial-free point lists.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GeometryError, Polyline3, TriangleMesh, _dedup_mesh

WELD_TOL = 1e-6

__all__ = [
    "MeshFormatError",
    "LoadReport",
    "load_mesh",
    "save_mesh",
    "load_polyline",
    "save_polyline",
    "load_points",
    "save_points",
]


class MeshFormatError(GeometryError):
    """Malformed mesh file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LoadReport:
    """What the loader had to clean up."""
    degenerate_faces_dropped: int = 0
    vertices_welded: int = 0


def load_mesh(path, with_report: bool = False):
    """Load a mesh from binary STL or ASCII PLY, by file extension.

    Returns the mesh, or ``(mesh, LoadReport)`` when ``with_report`` is set.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        mesh, report = _load_stl(path)
    elif suffix == ".ply":
        mesh, report = _load_ply(path)
    else:
        raise MeshFormatError(f"unsupported mesh format '{suffix}'", 0)
    return (mesh, report) if with_report else mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        _save_stl(mesh, path)
    elif suffix == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh format '{suffix}'", 0)


def _load_stl(path: Path):
    data = path.read_bytes()
    if len(data) < 84:
        raise MeshFormatError("binary STL shorter than header", len(data))
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) != expected:
        raise MeshFormatError(
            f"triangle count {count} implies {expected} bytes, file has {len(data)}",
            84)
    raw = np.frombuffer(data, dtype=np.uint8, offset=84).reshape(count, 50)
    tris = raw[:, :48].copy().view("<f4").reshape(count, 4, 3)[:, 1:, :]
    verts = tris.reshape(-1, 3).astype(np.float64)
    if not np.all(np.isfinite(verts)):
        bad = int(np.flatnonzero(~np.isfinite(verts).all(axis=1))[0])
        raise MeshFormatError("non-finite vertex coordinates",
                              84 + 50 * (bad // 3) + 12 + 12 * (bad % 3))
    faces = np.arange(3 * count, dtype=np.int64).reshape(count, 3)
    before = len(verts)
    verts, faces, dropped = _dedup_mesh(verts, faces, WELD_TOL)
    report = LoadReport(degenerate_faces_dropped=dropped,
                        vertices_welded=before - len(verts))
    try:
        return TriangleMesh(verts, faces), report
    except GeometryError as exc:
        raise MeshFormatError(str(exc), 84) from exc


def _save_stl(mesh: TriangleMesh, path: Path) -> None:
    count = mesh.n_faces
    header = b"resectkit binary STL".ljust(80, b"\0")
    buf = bytearray(header)
    buf += struct.pack("<I", count)
    a, b, c = mesh.triangles
    normals = mesh.face_normals
    block = np.zeros((count, 50), dtype=np.uint8)
    floats = np.concatenate(
        [normals, a, b, c], axis=1).astype("<f4").view(np.uint8).reshape(count, 48)
    block[:, :48] = floats
    buf += block.tobytes()
    path.write_bytes(bytes(buf))


def _load_ply(path: Path):
    data = path.read_bytes()
    lines = data.split(b"\n")
    offsets = np.cumsum([0] + [len(ln) + 1 for ln in lines[:-1]])

    def err(msg, idx):
        raise MeshFormatError(msg, int(offsets[idx]))

    if not lines or lines[0].strip() != b"ply":
        err("missing 'ply' magic", 0)
    n_vertex = n_face = None
    header_end = None
    element_order = []
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == b"format":
            if parts[1] != b"ascii":
                err("only ASCII PLY is supported", i)
        elif parts[0] == b"element":
            if parts[1] == b"vertex":
                n_vertex = int(parts[2])
                element_order.append("vertex")
            elif parts[1] == b"face":
                n_face = int(parts[2])
                element_order.append("face")
            else:
                err(f"unsupported element '{parts[1].decode()}'", i)
        elif parts[0] == b"end_header":
            header_end = i
            break
        i += 1
    if header_end is None:
        err("missing end_header", len(lines) - 1)
    if n_vertex is None or n_face is None:
        err("header lacks vertex/face element declarations", header_end)
    if element_order != ["vertex", "face"]:
        err("expected vertex element before face element", header_end)

    body = [ln for ln in lines[header_end + 1:]]
    body_idx = [header_end + 1 + k for k in range(len(body))]
    rows = [(k, ln) for k, ln in zip(body_idx, body) if ln.strip()]
    if len(rows) < n_vertex + n_face:
        err(f"expected {n_vertex + n_face} data rows, found {len(rows)}",
            len(lines) - 1)

    verts = np.empty((n_vertex, 3), dtype=np.float64)
    for r in range(n_vertex):
        idx, ln = rows[r]
        parts = ln.split()
        if len(parts) < 3:
            err("vertex row with fewer than 3 coordinates", idx)
        try:
            verts[r] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            err("unparseable vertex coordinate", idx)
    if not np.all(np.isfinite(verts)):
        bad = int(np.flatnonzero(~np.isfinite(verts).all(axis=1))[0])
        err("non-finite vertex coordinate", rows[bad][0])

    faces = np.empty((n_face, 3), dtype=np.int64)
    for r in range(n_face):
        idx, ln = rows[n_vertex + r]
        parts = ln.split()
        try:
            n = int(parts[0])
            if n != 3:
                err(f"only triangle faces supported, got {n}-gon", idx)
            faces[r] = [int(parts[1]), int(parts[2]), int(parts[3])]
        except (ValueError, IndexError):
            err("unparseable face row", idx)
        if faces[r].min() < 0 or faces[r].max() >= n_vertex:
            err(f"face index out of range: {faces[r].tolist()}", idx)

    v, f, dropped = _dedup_mesh(verts, faces, 0.0)
    try:
        return TriangleMesh(v, f), LoadReport(degenerate_faces_dropped=dropped)
    except GeometryError as exc:
        raise MeshFormatError(str(exc), int(offsets[header_end])) from exc


def _save_ply(mesh: TriangleMesh, path: Path) -> None:
    out = ["ply", "format ascii 1.0",
           f"element vertex {mesh.n_vertices}",
           "property float x", "property float y", "property float z",
           f"element face {mesh.n_faces}",
           "property list uchar int vertex_indices",
           "end_header"]
    out += [f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    out += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Polyline / point list text format.

def save_points(points: np.ndarray, path, closed: bool | None = None) -> None:
    lines = []
    if closed:
        lines.append("#closed")
    lines += [f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f}" for p in np.asarray(points)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path) -> tuple[np.ndarray, bool]:
    """Read ``x y z`` rows; returns (points, closed_flag)."""
    closed = False
    rows = []
    for ln_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line == "#closed":
                closed = True
            continue
        parts = line.split()
        if len(parts) != 3:
            raise GeometryError(f"{path}: line {ln_no}: expected 'x y z', got {line!r}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise GeometryError(f"{path}: line {ln_no}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3), closed


def save_polyline(line: Polyline3, path) -> None:
    save_points(line.points, path, closed=line.closed)


def load_polyline(path) -> Polyline3:
    pts, closed = load_points(path)
    return Polyline3(pts, closed)
