"""Seeded simulation of capture noise and operator cutting behavior.

Replaces the hardware loop: fiducial touch capture with isotropic Gaussian
noise, and scalpel traces that follow a planned path with smooth correlated
lateral error, a signed systematic bias (outward positive), per-sample
tracker jitter, and pauses.

Noise channels draw from separate sub-seeded streams (lateral / jitter /
pauses), so changing pause parameters never changes positions for the same
master seed. Tracker drift is a registration-frame effect and is applied to
the overlay pose by the study harness, not inside the trace itself.

Lateral error is a one-dimensional Gaussian process over arc length with a
squared-exponential kernel (wrapped around the closed path), sampled on a
knot grid and interpolated with a periodic cubic spline. White noise would
make the deviation metric depend on the sampling rate; hand error is smooth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (GeometryError, Polyline3, RigidTransform, TriangleMesh,
                       _dedup_mesh, best_fit_plane_normal)
from .planning import ResectionPlan
from .registration import DriftModel, FiducialSet
from .seeding import FIDUCIAL, JITTER, LATERAL, PAUSE, rng_for

SAMPLE_RATE_HZ = 60.0
GUIDED = "guided"
UNGUIDED = "unguided"
CONDITIONS = (GUIDED, UNGUIDED)

__all__ = [
    "SAMPLE_RATE_HZ",
    "GUIDED",
    "UNGUIDED",
    "CONDITIONS",
    "TraceFormatError",
    "NoiseModel",
    "OperatorModel",
    "CutTrace",
    "simulate_fiducial_capture",
    "simulate_cut_trace",
    "derive_cut_surface",
    "format_trace",
    "parse_trace",
    "save_trace",
    "load_trace",
]


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Measurement-chain noise: capture sigma, per-sample jitter, drift."""

    fiducial_sigma: float = 0.0
    tracker_jitter_sigma: float = 0.0
    drift: DriftModel = field(default_factory=lambda: DriftModel(rate_mm_per_min=0.0))

    def __post_init__(self):
        if self.fiducial_sigma < 0 or self.tracker_jitter_sigma < 0:
            raise GeometryError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class OperatorModel:
    """Behavioral model of one operator under one condition.

    Lateral error: GP sigma (mm) with the given correlation length (mm of
    arc), plus a signed bias along the outward in-surface direction (positive
    widens the cut). Pauses: Poisson count with exponential durations; they
    stretch timestamps only.
    """

    condition: str
    lateral_error_sigma: float
    lateral_error_correlation_length: float
    systematic_bias: float
    cut_speed: float
    pause_count_mean: float = 0.0
    pause_duration_mean: float = 0.0

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise GeometryError(f"condition must be one of {CONDITIONS}")
        if self.lateral_error_sigma < 0:
            raise GeometryError("lateral_error_sigma must be non-negative")
        if self.lateral_error_correlation_length <= 0:
            raise GeometryError("correlation length must be positive")
        if self.cut_speed <= 0:
            raise GeometryError("cut speed must be positive")
        if self.pause_count_mean < 0 or self.pause_duration_mean < 0:
            raise GeometryError("pause parameters must be non-negative")


@dataclass(frozen=True)
class CutTrace:
    """Timestamped scalpel-tip samples (ms, mm)."""

    timestamps_ms: np.ndarray
    positions: np.ndarray
    condition: str
    seed: int
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        t = np.asarray(self.timestamps_ms, dtype=np.float64)
        p = np.asarray(self.positions, dtype=np.float64)
        if t.ndim != 1 or p.shape != (len(t), 3):
            raise GeometryError("trace needs (n,) timestamps and (n, 3) positions")
        if len(t) < 2:
            raise GeometryError("trace needs at least 2 samples")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(p)):
            raise GeometryError("non-finite trace samples")
        if np.any(np.diff(t) <= 0):
            bad = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1
            raise GeometryError(f"timestamps not strictly increasing at sample {bad}")
        if self.condition not in CONDITIONS:
            raise GeometryError(f"condition must be one of {CONDITIONS}")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "timestamps_ms", t)
        object.__setattr__(self, "positions", p)

    @property
    def n_samples(self) -> int:
        return len(self.timestamps_ms)

    def polyline(self) -> Polyline3:
        return Polyline3(self.positions, closed=False)


def simulate_fiducial_capture(labels, model_points, t_true: RigidTransform,
                              noise: NoiseModel, seed: int) -> FiducialSet:
    """Touch-capture of the fiducials in the world frame, with noise."""
    model = np.asarray(model_points, dtype=np.float64)
    measured = t_true.apply(model)
    if noise.fiducial_sigma > 0:
        rng = rng_for(seed, FIDUCIAL)
        measured = measured + rng.normal(0.0, noise.fiducial_sigma, measured.shape)
    return FiducialSet(tuple(labels), model, measured)


def _path_frames(path: Polyline3, arcs: np.ndarray, loop_normal: np.ndarray):
    """Positions and outward lateral directions at the given arc lengths."""
    seg_len = path.segment_lengths
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.clip(arcs, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    a, b = path.segments
    frac = (s - cum[idx]) / seg_len[idx]
    pts = a[idx] + frac[:, None] * (b[idx] - a[idx])
    tangents = (b[idx] - a[idx]) / seg_len[idx][:, None]
    outward = np.cross(tangents, loop_normal)
    outward /= np.linalg.norm(outward, axis=1, keepdims=True)
    return pts, outward


def _lateral_field(length: float, sigma: float, corr_length: float,
                   rng: np.random.Generator):
    """Periodic squared-exponential GP over arc length, as a callable.

    Uses the periodic kernel exp(-2 sin^2(pi d / L) / lp^2) with
    lp = 2 pi corr_length / L, which matches a squared-exponential of the
    given correlation length for small separations and stays positive
    semi-definite on the closed loop.
    """
    from scipy.interpolate import CubicSpline

    n_knots = int(np.clip(np.ceil(length / (corr_length / 6.0)), 24, 512))
    s = np.linspace(0.0, length, n_knots, endpoint=False)
    delta = np.abs(s[:, None] - s[None, :])
    lp = 2.0 * np.pi * corr_length / length
    cov = sigma * sigma * np.exp(-2.0 * np.sin(np.pi * delta / length) ** 2 / lp ** 2)
    # eigen factorization tolerates the near-singular long-correlation case
    eigvals, eigvecs = np.linalg.eigh(cov)
    scale = np.sqrt(np.clip(eigvals, 0.0, None))
    values = eigvecs @ (scale * rng.standard_normal(n_knots))
    knots = np.append(s, length)
    return CubicSpline(knots, np.append(values, values[0]), bc_type="periodic")


def simulate_cut_trace(plan: ResectionPlan, op: OperatorModel, noise: NoiseModel,
                       seed: int, sample_rate_hz: float = SAMPLE_RATE_HZ) -> CutTrace:
    """Trace an operator cutting along the plan path.

    With all error parameters zero the trace lies exactly on the path with
    duration = perimeter / cut_speed.
    """
    path = plan.path
    length = path.length
    duration = length / op.cut_speed  # seconds of cutting motion
    n_ticks = int(np.floor(duration * sample_rate_hz))
    times = np.arange(n_ticks + 1, dtype=np.float64) / sample_rate_hz
    if times[-1] < duration - 1e-12:
        times = np.append(times, duration)
    arcs = op.cut_speed * times

    base, outward = _path_frames(path, arcs, plan.outward_loop_normal)

    lateral = np.full(len(arcs), op.systematic_bias)
    if op.lateral_error_sigma > 0:
        field_fn = _lateral_field(length, op.lateral_error_sigma,
                                  op.lateral_error_correlation_length,
                                  rng_for(seed, LATERAL))
        lateral = lateral + field_fn(np.minimum(arcs, length))

    positions = base + lateral[:, None] * outward
    if noise.tracker_jitter_sigma > 0:
        positions = positions + rng_for(seed, JITTER).normal(
            0.0, noise.tracker_jitter_sigma, positions.shape)

    if op.pause_count_mean > 0:
        rng = rng_for(seed, PAUSE)
        count = int(rng.poisson(op.pause_count_mean))
        if count:
            starts = np.sort(rng.uniform(0.0, duration, count))
            durations = rng.exponential(op.pause_duration_mean, count)
            shift = (times[:, None] > starts[None, :]) @ durations
            times = times + shift

    return CutTrace(timestamps_ms=times * 1000.0, positions=positions,
                    condition=op.condition, seed=seed,
                    sample_rate_hz=sample_rate_hz)


def derive_cut_surface(trace: CutTrace, depth: float,
                       direction=None) -> TriangleMesh:
    """Ruled wall: the trace extruded to ``depth`` along the cut direction.

    ``direction`` defaults to the negated best-fit plane normal of the trace
    loop (by winding order), i.e. straight in from the traced surface.
    Self-intersecting traces get a warning; the wall is still produced.
    Vertex layout: the trace samples first, then their extruded copies.
    """
    if depth <= 0:
        raise GeometryError(f"extrusion depth must be positive, got {depth}")
    pts = trace.positions
    n = len(pts)
    if n < 3:
        raise GeometryError("need at least 3 samples to build a cut surface")
    if direction is None:
        direction = -best_fit_plane_normal(pts, winding=True)
    else:
        direction = np.asarray(direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)

    if _loop_self_intersects(pts, direction):
        warnings.warn("trace crosses itself; cut surface will be folded",
                      UserWarning)

    verts = np.vstack([pts, pts + depth * direction])
    i = np.arange(n)
    j = (i + 1) % n
    faces = np.concatenate([
        np.stack([i, j, n + j], axis=1),
        np.stack([i, n + j, n + i], axis=1),
    ])
    verts, faces, _ = _dedup_mesh(verts, faces, weld_tol=0.0)
    return TriangleMesh(verts, faces)


def _loop_self_intersects(pts: np.ndarray, axis: np.ndarray,
                          coarse_spacing: float = 2.0) -> bool:
    """Coarse 2-D crossing test of the loop projected along the axis."""
    u = np.cross(axis, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(axis, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    flat = np.stack([pts @ u, pts @ v], axis=1)
    # decimate by cumulative arc length to keep the pairwise test small
    steps = np.linalg.norm(np.diff(flat, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    targets = np.arange(0.0, arc[-1], coarse_spacing)
    keep = np.unique(np.searchsorted(arc, targets))
    flat = flat[keep]
    m = len(flat)
    if m < 4:
        return False
    a = flat
    b = flat[(np.arange(m) + 1) % m]

    def orient(p, q, r):
        # p, q broadcast as (m, 1, 2); r as (1, m, 2)
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) \
             - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    a1, b1 = a[:, None, :], b[:, None, :]
    a2, b2 = a[None, :, :], b[None, :, :]
    o1 = orient(a1, b1, a2)
    o2 = orient(a1, b1, b2)
    o3 = orient(a2, b2, a1)
    o4 = orient(a2, b2, b1)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    idx = np.arange(m)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) \
        | (np.abs(idx[:, None] - idx[None, :]) == m - 1)
    return bool(np.any(crossing & ~adjacent))


# ---------------------------------------------------------------------------
# Trace text format. Header lines `key value`, then one `t_ms x y z` row per
# sample. Lines starting with `#` are comments. The trial UI submits traces
# in exactly this format.

def format_trace(trace: CutTrace) -> str:
    lines = [
        f"condition {trace.condition}",
        f"seed {trace.seed}",
        f"sample_rate_hz {trace.sample_rate_hz:g}",
    ]
    for t, p in zip(trace.timestamps_ms, trace.positions):
        lines.append(f"{t:.6f} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> CutTrace:
    condition = None
    seed = 0
    rate = SAMPLE_RATE_HZ
    times, pts = [], []
    for ln_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "condition":
            condition = parts[1] if len(parts) > 1 else None
            continue
        if parts[0] == "seed":
            seed = int(parts[1])
            continue
        if parts[0] == "sample_rate_hz":
            rate = float(parts[1])
            continue
        if len(parts) != 4:
            raise TraceFormatError(
                f"line {ln_no}: expected 't_ms x y z', got {line!r}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise TraceFormatError(f"line {ln_no}: {exc}") from exc
        times.append(vals[0])
        pts.append(vals[1:])
    if condition not in CONDITIONS:
        raise TraceFormatError(f"missing or invalid condition header: {condition!r}")
    if len(times) < 2:
        raise TraceFormatError("trace has fewer than 2 samples")
    t = np.asarray(times)
    bad = np.flatnonzero(np.diff(t) <= 0)
    if len(bad):
        raise TraceFormatError(
            f"timestamps not strictly increasing at sample {int(bad[0]) + 1}")
    try:
        return CutTrace(t, np.asarray(pts), condition, seed, rate)
    except GeometryError as exc:
        raise TraceFormatError(str(exc)) from exc


def save_trace(trace: CutTrace, path) -> None:
    Path(path).write_text(format_trace(trace))


def load_trace(path) -> CutTrace:
    return parse_trace(Path(path).read_text())
