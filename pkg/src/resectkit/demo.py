"""Bundled demo scene: phantom-scale liver, shallow lens tumor, fiducials.

The scene is generated procedurally so tests and the CLI can rebuild it
bit-identically. Geometry was tuned so the planned path comes out roughly
60 x 40 mm with a ~160 mm perimeter and so a perfectly executed cut keeps
just under the full 10 mm margin at depth (the straight-walled cut model
loses a little margin for any buried tumor).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh
from .planning import ResectionPlan, build_plan, save_plan
from .primitives import ellipsoid, revolved_lens
from . import meshio

LIVER_SEMI_AXES = (100.0, 62.0, 38.0)
LIVER_SUBDIVISIONS = 5
TUMOR_LATERAL_SEMI_AXES = (20.0, 10.5)
TUMOR_UPPER_HEIGHT = 1.2
TUMOR_LOWER_HEIGHT = 8.5
TUMOR_TOP_GAP = 0.5          # capsule to tumor top, mm
TUMOR_RING_SEGMENTS = 80
TUMOR_RINGS_PER_SIDE = 16
TARGET_MARGIN = 10.0
CUT_DEPTH = 40.0

# markers sit on the exposed superior surface where a scalpel tip can reach
# them; keeping their plane near the path level also keeps the rotational
# registration error at the operative field small
FIDUCIAL_LABELS = ("left-lobe-ridge", "right-superior-edge", "gallbladder-fossa")
_FIDUCIAL_XY = ((-70.0, 12.0), (60.0, 25.0), (20.0, -42.0))

__all__ = [
    "DemoScene",
    "demo_liver",
    "demo_tumor",
    "demo_fiducials",
    "build_demo_scene",
    "write_demo",
    "LIVER_SEMI_AXES",
    "TARGET_MARGIN",
    "CUT_DEPTH",
    "FIDUCIAL_LABELS",
]


def demo_liver() -> TriangleMesh:
    return ellipsoid(LIVER_SEMI_AXES, LIVER_SUBDIVISIONS)


def _capsule_height(x: float, y: float) -> float:
    a, b, c = LIVER_SEMI_AXES
    return c * np.sqrt(max(0.0, 1.0 - (x / a) ** 2 - (y / b) ** 2))


def demo_tumor() -> TriangleMesh:
    center_z = _capsule_height(0.0, 0.0) - TUMOR_TOP_GAP - TUMOR_UPPER_HEIGHT
    return revolved_lens(TUMOR_LATERAL_SEMI_AXES, TUMOR_UPPER_HEIGHT,
                         TUMOR_LOWER_HEIGHT, TUMOR_RING_SEGMENTS,
                         TUMOR_RINGS_PER_SIDE, center=(0.0, 0.0, center_z))


def demo_fiducials() -> tuple[tuple[str, ...], np.ndarray]:
    """Labels and model-frame positions of the three surface markers."""
    pts = np.array([[x, y, _capsule_height(x, y)] for x, y in _FIDUCIAL_XY])
    return FIDUCIAL_LABELS, pts


@dataclass(frozen=True)
class DemoScene:
    liver: TriangleMesh
    tumor: TriangleMesh
    plan: ResectionPlan
    fiducial_labels: tuple[str, ...]
    fiducial_points: np.ndarray


def build_demo_scene(margin: float = TARGET_MARGIN) -> DemoScene:
    liver = demo_liver()
    tumor = demo_tumor()
    plan = build_plan(liver, tumor, margin)
    labels, points = demo_fiducials()
    return DemoScene(liver=liver, tumor=tumor, plan=plan,
                     fiducial_labels=labels, fiducial_points=points)


def write_demo(out_dir, margin: float = TARGET_MARGIN) -> Path:
    """Write meshes, plan, fiducials and a default study config; returns out_dir."""
    from .registration import FiducialSet, save_fiducials
    from .study import default_config_text

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = build_demo_scene(margin)
    meshio.save_mesh(scene.liver, out / "liver.stl")
    meshio.save_mesh(scene.tumor, out / "tumor.stl")
    save_plan(scene.plan, out / "plan", liver_mesh_file="../liver.stl")
    # fiducial table with measured == model (no capture applied yet)
    save_fiducials(FiducialSet(scene.fiducial_labels, scene.fiducial_points,
                               scene.fiducial_points), out / "fiducials.txt")
    (out / "demo.cfg").write_text(default_config_text(
        plan_manifest="plan/plan.manifest"))
    return out
