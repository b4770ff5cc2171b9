"""Point-based rigid registration and its error metrics.

The solver is the closed-form quaternion absolute-orientation method: build
the 4x4 symmetric profile matrix from the centered correspondence
cross-dispersion and take the eigenvector of its largest eigenvalue as the
rotation quaternion. The eigen formulation always yields a proper rotation,
never a reflection, which is the required behavior for anatomical scenes.

Scale is fixed at 1 (the phantom is life sized); only rotation plus
translation are estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (GeometryError, RigidTransform, as_points, compose,
                       quat_normalize, quat_to_matrix)
from .seeding import DRIFT, rng_for

COLLINEARITY_TOL = 1e-6

__all__ = [
    "DegenerateFiducialsError",
    "FiducialSet",
    "RegistrationResult",
    "LeaveOneOutEntry",
    "DriftModel",
    "horn_absolute_orientation",
    "leave_one_out",
    "target_registration_error",
    "apply_drift",
    "load_fiducials",
    "save_fiducials",
    "format_registration_record",
    "parse_registration_record",
]


class DegenerateFiducialsError(GeometryError):
    """Fiducial configuration cannot constrain a rigid transform."""


def _collinearity_check(points: np.ndarray) -> None:
    # Non-collinear means the centered points span at least a plane, i.e.
    # the second singular value is clearly nonzero. (Exactly three fiducials
    # are always coplanar, so the third singular value is irrelevant.)
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if len(svals) < 2 or svals[1] <= COLLINEARITY_TOL:
        raise DegenerateFiducialsError(
            "fiducial model points are collinear or coincident "
            f"(singular values {svals})")


@dataclass(frozen=True)
class FiducialSet:
    """Named fiducials with model-frame and measured (world-frame) positions."""

    labels: tuple[str, ...]
    model_points: np.ndarray
    measured_points: np.ndarray

    def __post_init__(self):
        model = as_points(self.model_points)
        measured = as_points(self.measured_points)
        labels = tuple(self.labels)
        if not (len(labels) == len(model) == len(measured)):
            raise GeometryError("labels, model and measured lists must align")
        if len(labels) < 3:
            raise GeometryError("at least 3 fiducials required")
        if len(set(labels)) != len(labels):
            raise GeometryError("fiducial labels must be unique")
        _collinearity_check(model)
        model.setflags(write=False)
        measured.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "model_points", model)
        object.__setattr__(self, "measured_points", measured)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class RegistrationResult:
    """Model-to-world transform with its residual diagnostics.

    Both RMS and mean-absolute fiducial residuals are reported; published
    alignment figures do not always say which convention they use.
    """

    transform: RigidTransform
    fre_rms: float
    fre_mean: float
    per_fiducial_residuals: np.ndarray
    leave_one_out_errors: np.ndarray | None = None

    def __post_init__(self):
        if self.fre_rms < 0:
            raise GeometryError("fre_rms must be non-negative")


@dataclass(frozen=True)
class LeaveOneOutEntry:
    """Cross-validation error for one held-out fiducial.

    status 'ok' carries the held-out prediction error. With only three
    fiducials the two remaining points cannot constrain rotation about
    their axis, so the entry is flagged 'unobservable' and carries the
    all-point fit residual instead of pretending to a cross-validated
    number. 'degenerate' flags subsets that collapse entirely.
    """

    error_mm: float
    status: str = "ok"


def _horn_fit(model: np.ndarray, measured: np.ndarray) -> RigidTransform:
    mc = model.mean(axis=0)
    wc = measured.mean(axis=0)
    s = (model - mc).T @ (measured - wc)
    profile = np.array([
        [s[0, 0] + s[1, 1] + s[2, 2], s[1, 2] - s[2, 1], s[2, 0] - s[0, 2], s[0, 1] - s[1, 0]],
        [s[1, 2] - s[2, 1], s[0, 0] - s[1, 1] - s[2, 2], s[0, 1] + s[1, 0], s[2, 0] + s[0, 2]],
        [s[2, 0] - s[0, 2], s[0, 1] + s[1, 0], s[1, 1] - s[0, 0] - s[2, 2], s[1, 2] + s[2, 1]],
        [s[0, 1] - s[1, 0], s[2, 0] + s[0, 2], s[1, 2] + s[2, 1], s[2, 2] - s[0, 0] - s[1, 1]],
    ])
    eigvals, eigvecs = np.linalg.eigh(profile)
    q = quat_normalize(eigvecs[:, -1])
    rot = quat_to_matrix(q)
    t = wc - rot @ mc
    return RigidTransform(q, t)


def horn_absolute_orientation(fiducials: FiducialSet) -> RegistrationResult:
    """Least-squares rigid model-to-world alignment of the fiducial pairs."""
    model, measured = fiducials.model_points, fiducials.measured_points
    transform = _horn_fit(model, measured)
    residuals = np.linalg.norm(transform.apply(model) - measured, axis=1)
    return RegistrationResult(
        transform=transform,
        fre_rms=float(np.sqrt(np.mean(residuals ** 2))),
        fre_mean=float(residuals.mean()),
        per_fiducial_residuals=residuals,
    )


def leave_one_out(fiducials: FiducialSet) -> list[LeaveOneOutEntry]:
    """Held-out prediction error per fiducial (needs 4+ to be meaningful)."""
    n = len(fiducials)
    model, measured = fiducials.model_points, fiducials.measured_points
    if n == 3:
        residuals = horn_absolute_orientation(fiducials).per_fiducial_residuals
        return [LeaveOneOutEntry(float(r), "unobservable") for r in residuals]
    entries = []
    for i in range(n):
        keep = np.arange(n) != i
        sub_model = model[keep]
        try:
            _collinearity_check(sub_model)
        except DegenerateFiducialsError:
            entries.append(LeaveOneOutEntry(float("nan"), "degenerate"))
            continue
        fit = _horn_fit(sub_model, measured[keep])
        err = float(np.linalg.norm(fit.apply(model[i]) - measured[i]))
        entries.append(LeaveOneOutEntry(err))
    return entries


def target_registration_error(t_estimated: RigidTransform, t_true: RigidTransform,
                              targets) -> np.ndarray:
    """Displacement magnitude at each target between the two transforms."""
    pts = as_points(targets)
    if len(pts) == 0:
        raise GeometryError("at least one target required")
    return np.linalg.norm(t_estimated.apply(pts) - t_true.apply(pts), axis=1)


@dataclass(frozen=True)
class DriftModel:
    """Slow positional drift of the tracking frame.

    A fixed random unit direction (drawn from the seed) with translation
    magnitude growing linearly at ``rate_mm_per_min``. No rotational drift.
    """

    rate_mm_per_min: float = 0.3
    seed: int = 0

    @property
    def direction(self) -> np.ndarray:
        v = rng_for(self.seed, DRIFT).normal(size=3)
        return v / np.linalg.norm(v)


def apply_drift(t: RigidTransform, model: DriftModel, elapsed_ms: float) -> RigidTransform:
    """Transform as observed after ``elapsed_ms`` of tracking drift."""
    if elapsed_ms < 0:
        raise GeometryError(f"elapsed time must be non-negative, got {elapsed_ms}")
    magnitude = model.rate_mm_per_min * (elapsed_ms / 60000.0)
    offset = RigidTransform(np.array([1.0, 0, 0, 0]), magnitude * model.direction)
    return compose(offset, t)


# ---------------------------------------------------------------------------
# Text formats: fiducial table and registration record.

def save_fiducials(fiducials: FiducialSet, path) -> None:
    rows = ["# label model_x model_y model_z measured_x measured_y measured_z"]
    for lbl, m, w in zip(fiducials.labels, fiducials.model_points,
                         fiducials.measured_points):
        rows.append(f"{lbl} {m[0]:.9f} {m[1]:.9f} {m[2]:.9f} "
                    f"{w[0]:.9f} {w[1]:.9f} {w[2]:.9f}")
    Path(path).write_text("\n".join(rows) + "\n")


def load_fiducials(path) -> FiducialSet:
    labels, model, measured = [], [], []
    for ln_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise GeometryError(
                f"{path}: line {ln_no}: expected 'label mx my mz wx wy wz'")
        labels.append(parts[0])
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise GeometryError(f"{path}: line {ln_no}: {exc}") from exc
        model.append(vals[:3])
        measured.append(vals[3:])
    return FiducialSet(tuple(labels), np.asarray(model), np.asarray(measured))


def format_registration_record(result: RegistrationResult) -> str:
    q = result.transform.rotation
    t = result.transform.translation
    lines = [
        f"quaternion_wxyz = {q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}",
        f"translation_xyz = {t[0]:.9f} {t[1]:.9f} {t[2]:.9f}",
        f"fre_rms_mm = {result.fre_rms:.9f}",
        f"fre_mean_mm = {result.fre_mean:.9f}",
        "residuals_mm = " + " ".join(f"{r:.9f}" for r in result.per_fiducial_residuals),
    ]
    if result.leave_one_out_errors is not None:
        lines.append("leave_one_out_mm = " +
                     " ".join(f"{r:.9f}" for r in result.leave_one_out_errors))
    return "\n".join(lines) + "\n"


def parse_registration_record(text: str) -> RegistrationResult:
    fields = {}
    for line in text.splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    q = np.array([float(x) for x in fields["quaternion_wxyz"].split()])
    t = np.array([float(x) for x in fields["translation_xyz"].split()])
    residuals = np.array([float(x) for x in fields["residuals_mm"].split()])
    loo = None
    if "leave_one_out_mm" in fields:
        loo = np.array([float(x) for x in fields["leave_one_out_mm"].split()])
    return RegistrationResult(
        transform=RigidTransform(q, t),
        fre_rms=float(fields["fre_rms_mm"]),
        fre_mean=float(fields["fre_mean_mm"]),
        per_fiducial_residuals=residuals,
        leave_one_out_errors=loo,
    )
