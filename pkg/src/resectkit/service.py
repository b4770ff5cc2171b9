"""Trial guidance service: sessions, overlays, trace submission, export.

The engine state lives in SessionStore, a plain object the HTTP layer wraps;
tests can drive the store directly and the HTTP layer stays thin. Metrics
for submitted traces go through exactly the same engine call as the study
harness, so service results are bit-equal to direct computation.

Persistence is an append-only per-session event log plus the submitted
trace files; session state is a pure fold over those events, so restarting
the service and replaying the log reproduces the state exactly (metric
values are logged with full float precision).

Transport is plain HTTP with the repo's structured-text bodies. Traces are
submitted whole at trial end in the standard trace file format; there is no
streaming and no live scoring.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .geometry import GeometryError
from .metrics import (TrialMetrics, compute_trial_metrics, format_metrics_csv,
                      format_metrics_record, make_tumor_index)
from .planning import ResectionPlan, load_plan
from .seeding import ORDER, rng_for
from .simulate import GUIDED, UNGUIDED, TraceFormatError, parse_trace
from .study import StudyReport, analyze_trials, default_config, format_report_text, format_stats_csv

OVERLAY_STYLE = (
    "[style]\n"
    "path dashed #ffd54a width:3\n"
    "tumor highlight #e03131\n"
    "safe_zone fill rgba(224,49,49,0.25)\n"
    "liver fill rgba(76,175,80,0.40)\n"
    "palpation_hint fill rgba(110,110,220,0.30)\n"
)

__all__ = ["ServiceError", "SessionStore", "GuidanceHTTPServer", "serve"]


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class SessionState:
    session_id: str
    participant: str
    seed: int
    order: tuple[str, str]
    created_at_ms: int
    metrics: dict[int, TrialMetrics] = field(default_factory=dict)
    trace_texts: dict[int, str] = field(default_factory=dict)

    @property
    def open_trial(self) -> int | None:
        n = len(self.metrics)
        return n if n < 2 else None

    @property
    def complete(self) -> bool:
        return len(self.metrics) == 2

    def record_text(self) -> str:
        open_trial = self.open_trial
        return (f"session_id {self.session_id}\n"
                f"participant {self.participant}\n"
                f"seed {self.seed}\n"
                f"order {','.join(self.order)}\n"
                f"open_trial {open_trial if open_trial is not None else 'none'}\n"
                f"submitted {len(self.metrics)}\n"
                f"created_at_ms {self.created_at_ms}\n")


def _polyline_section(name: str, points: np.ndarray) -> str:
    rows = "\n".join(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in points)
    return f"[{name}]\n{rows}\n"


def _hull_outline(points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """3-D outline: convex hull of the points projected along the view axis."""
    from scipy.spatial import ConvexHull

    u = np.cross(axis, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(axis, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    flat = np.stack([points @ u, points @ v], axis=1)
    hull = ConvexHull(flat)
    return points[hull.vertices]


def _dilate_outline(points: np.ndarray, axis: np.ndarray, amount: float) -> np.ndarray:
    center = points.mean(axis=0)
    radial = points - center
    radial -= np.outer(radial @ axis, axis)
    norms = np.linalg.norm(radial, axis=1, keepdims=True)
    return points + amount * radial / np.maximum(norms, 1e-9)


class SessionStore:
    """Engine-facing session manager; safe for concurrent HTTP handlers."""

    def __init__(self, plan: ResectionPlan, state_dir=None, cut_depth: float = 40.0):
        self.plan = plan
        self.cut_depth = cut_depth
        self._tumor_index = make_tumor_index(plan.tumor)
        self._axis = plan.outward_loop_normal
        self._liver_outline = None
        self._sessions: dict[str, SessionState] = {}
        self._by_participant: dict[str, str] = {}
        self._counter = 0
        self._master_lock = threading.Lock()
        self._session_locks: dict[str, threading.Lock] = {}
        self._state_dir = Path(state_dir) if state_dir else None
        self._overlay_cache: dict[str, str] = {}
        if self._state_dir:
            self._replay()

    # -- overlays ----------------------------------------------------------

    def _overlay_body(self, condition: str) -> str:
        if condition in self._overlay_cache:
            return self._overlay_cache[condition]
        plan = self.plan
        tumor_outline = _hull_outline(plan.tumor.vertices, self._axis)
        parts = [f"margin_mm {plan.target_margin:.6f}\n", OVERLAY_STYLE]
        if condition == GUIDED:
            parts.append(_polyline_section("path", plan.path.points))
            parts.append(_polyline_section("tumor", tumor_outline))
            parts.append(_polyline_section("safe_zone", plan.path.points))
        else:
            parts.append(_polyline_section(
                "palpation_hint",
                _dilate_outline(tumor_outline, self._axis, 6.0)))
        body = "".join(parts)
        self._overlay_cache[condition] = body
        return body

    def set_liver_outline(self, liver_vertices: np.ndarray) -> None:
        """Attach the phantom silhouette used by both conditions."""
        self._liver_outline = _hull_outline(liver_vertices, self._axis)

    def overlay_text(self, session_id: str, trial: int) -> str:
        state = self._get(session_id)
        if trial not in (0, 1):
            raise ServiceError(404, f"no trial {trial}")
        if state.open_trial != trial:
            raise ServiceError(409, f"trial {trial} is not open")
        condition = state.order[trial]
        head = f"overlay 1\ncondition {condition}\ntrial {trial}\n"
        outline = ""
        if self._liver_outline is not None:
            outline = _polyline_section("liver_outline", self._liver_outline)
        return head + outline + self._overlay_body(condition)

    # -- sessions ----------------------------------------------------------

    def create_session(self, participant: str, seed: int) -> SessionState:
        if not participant or any(c.isspace() for c in participant):
            raise ServiceError(400, "participant id must be non-empty, no spaces")
        with self._master_lock:
            open_sid = self._by_participant.get(participant)
            if open_sid and not self._sessions[open_sid].complete:
                raise ServiceError(
                    409, f"participant {participant} already has open session "
                         f"{open_sid}")
            self._counter += 1
            sid = f"s{self._counter:05d}"
            guided_first = rng_for(seed, ORDER).random() < 0.5
            order = (GUIDED, UNGUIDED) if guided_first else (UNGUIDED, GUIDED)
            state = SessionState(
                session_id=sid, participant=participant, seed=int(seed),
                order=order, created_at_ms=int(time.time() * 1000))
            self._sessions[sid] = state
            self._by_participant[participant] = sid
            self._session_locks[sid] = threading.Lock()
            self._log(state, "created",
                      f"participant={participant}\tseed={seed}\t"
                      f"order={','.join(order)}\t"
                      f"created_at_ms={state.created_at_ms}")
            return state

    def _get(self, session_id: str) -> SessionState:
        state = self._sessions.get(session_id)
        if state is None:
            raise ServiceError(404, f"unknown session {session_id}")
        return state

    def session_record(self, session_id: str) -> str:
        return self._get(session_id).record_text()

    def submit_trace(self, session_id: str, trial: int, text: str) -> TrialMetrics:
        state = self._get(session_id)
        with self._session_locks[session_id]:
            if trial in state.metrics:
                raise ServiceError(409, f"trial {trial} already submitted")
            if state.open_trial != trial:
                raise ServiceError(409, f"trial {trial} is not open")
            try:
                trace = parse_trace(text)
            except TraceFormatError as exc:
                raise ServiceError(400, f"invalid trace: {exc}") from exc
            expected = state.order[trial]
            if trace.condition != expected:
                raise ServiceError(
                    400, f"trace condition {trace.condition!r} does not match "
                         f"trial condition {expected!r}")
            try:
                metrics = compute_trial_metrics(
                    trace, self.plan, state.participant,
                    cut_depth=self.cut_depth, tumor_index=self._tumor_index)
            except GeometryError as exc:
                raise ServiceError(400, f"trace rejected: {exc}") from exc
            state.metrics[trial] = metrics
            state.trace_texts[trial] = text
            self._persist_trace(state, trial, text)
            self._log(state, "trace_submitted",
                      f"trial={trial}\t" + _metrics_kv(metrics))
            return metrics

    def metrics_record(self, session_id: str, trial: int) -> str:
        state = self._get(session_id)
        if trial not in state.metrics:
            raise ServiceError(404, f"trial {trial} has no metrics yet")
        return format_metrics_record(state.metrics[trial])

    # -- export ------------------------------------------------------------

    def export(self):
        """(metrics_csv, report_text, warnings) over complete sessions."""
        complete = [s for s in self._sessions.values() if s.complete]
        warnings = [f"session {s.session_id} (participant {s.participant}) "
                    "incomplete; excluded"
                    for s in self._sessions.values() if not s.complete]
        if len(complete) < 2:
            raise ServiceError(409, "need at least 2 complete sessions to export")
        trials = []
        for s in sorted(complete, key=lambda s: s.session_id):
            trials.extend(s.metrics[k] for k in sorted(s.metrics))
        csv_text = format_metrics_csv(trials)
        tests, descriptives = analyze_trials(trials)
        report = StudyReport(
            config=default_config(n_participants=len(complete)),
            trials=tuple(trials), tests=tests, descriptives=descriptives,
            registration_fre=(), registration_tre=(),
            orders=tuple(s.order[0] for s in complete))
        text = format_report_text(report)
        if warnings:
            text += "\n[warnings]\n" + "\n".join(warnings) + "\n"
        return csv_text, text, warnings

    # -- persistence -------------------------------------------------------

    def _session_dir(self, state: SessionState) -> Path | None:
        if not self._state_dir:
            return None
        d = self._state_dir / "sessions" / state.session_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _log(self, state: SessionState, kind: str, payload: str) -> None:
        d = self._session_dir(state)
        if d is None:
            return
        with open(d / "events.log", "a") as fh:
            fh.write(f"{kind}\t{payload}\n")

    def _persist_trace(self, state: SessionState, trial: int, text: str) -> None:
        d = self._session_dir(state)
        if d is not None:
            (d / f"trial{trial}.trace").write_text(text)

    def _replay(self) -> None:
        root = self._state_dir / "sessions"
        if not root.exists():
            return
        for sdir in sorted(root.iterdir()):
            log = sdir / "events.log"
            if not log.exists():
                continue
            state = None
            for line in log.read_text().splitlines():
                kind, _, payload = line.partition("\t")
                fields = dict(kv.split("=", 1) for kv in payload.split("\t") if "=" in kv)
                if kind == "created":
                    state = SessionState(
                        session_id=sdir.name,
                        participant=fields["participant"],
                        seed=int(fields["seed"]),
                        order=tuple(fields["order"].split(",")),
                        created_at_ms=int(fields["created_at_ms"]))
                elif kind == "trace_submitted" and state is not None:
                    trial = int(fields["trial"])
                    state.metrics[trial] = _metrics_from_kv(fields)
                    trace_file = sdir / f"trial{trial}.trace"
                    if trace_file.exists():
                        state.trace_texts[trial] = trace_file.read_text()
            if state is not None:
                self._sessions[state.session_id] = state
                self._session_locks[state.session_id] = threading.Lock()
                if not state.complete:
                    self._by_participant[state.participant] = state.session_id
                else:
                    self._by_participant.setdefault(state.participant,
                                                    state.session_id)
                number = int(state.session_id[1:])
                self._counter = max(self._counter, number)


def _metrics_kv(m: TrialMetrics) -> str:
    return ("participant={}\tcondition={}\tdev_mean={!r}\tdev_max={!r}\t"
            "margin={!r}\ttime={!r}\tbreach={}").format(
        m.participant_id, m.condition, m.path_deviation_mean,
        m.path_deviation_max, m.margin_min, m.completion_time, int(m.breach))


def _metrics_from_kv(fields: dict) -> TrialMetrics:
    return TrialMetrics(
        participant_id=fields["participant"],
        condition=fields["condition"],
        path_deviation_mean=float(fields["dev_mean"]),
        path_deviation_max=float(fields["dev_max"]),
        margin_min=float(fields["margin"]),
        completion_time=float(fields["time"]),
        breach=fields["breach"] == "1",
    )


# ---------------------------------------------------------------------------
# HTTP layer.

_ROUTES = [
    ("POST", re.compile(r"^/api/sessions$"), "create"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)$"), "session"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)/overlay/(\d+)$"), "overlay"),
    ("POST", re.compile(r"^/api/sessions/([^/]+)/trace/(\d+)$"), "trace"),
    ("GET", re.compile(r"^/api/sessions/([^/]+)/metrics/(\d+)$"), "metrics"),
    ("GET", re.compile(r"^/api/export/metrics.csv$"), "export_csv"),
    ("GET", re.compile(r"^/api/export/report.txt$"), "export_report"),
]

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".svg": "image/svg+xml",
}


class _Handler(BaseHTTPRequestHandler):
    store: SessionStore = None
    ui_dir: Path | None = None
    quiet = True

    def log_message(self, fmt, *args):
        if not self.quiet:
            super().log_message(fmt, *args)

    def _send(self, status: int, body: str, content_type="text/plain; charset=utf-8"):
        data = body.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()
        self.wfile.write(data)

    def do_OPTIONS(self):
        self._send(204, "")

    def _dispatch(self, method: str):
        for verb, pattern, name in _ROUTES:
            if verb != method:
                continue
            m = pattern.match(self.path)
            if m:
                try:
                    getattr(self, f"_handle_{name}")(*m.groups())
                except ServiceError as exc:
                    self._send(exc.status, f"error: {exc}\n")
                except Exception as exc:
                    self._send(500, f"error: {type(exc).__name__}: {exc}\n")
                return
        if method == "GET" and self.ui_dir is not None:
            self._serve_static()
            return
        self._send(404, "error: no such endpoint\n")

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def _body(self) -> str:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length).decode("utf-8")

    def _handle_create(self):
        fields = {}
        for line in self._body().splitlines():
            parts = line.split(None, 1)
            if len(parts) == 2:
                fields[parts[0]] = parts[1].strip()
        participant = fields.get("participant", "")
        try:
            seed = int(fields.get("seed", "0"))
        except ValueError:
            raise ServiceError(400, "seed must be an integer")
        state = self.store.create_session(participant, seed)
        self._send(201, state.record_text())

    def _handle_session(self, sid):
        self._send(200, self.store.session_record(sid))

    def _handle_overlay(self, sid, trial):
        self._send(200, self.store.overlay_text(sid, int(trial)))

    def _handle_trace(self, sid, trial):
        metrics = self.store.submit_trace(sid, int(trial), self._body())
        self._send(200, format_metrics_record(metrics))

    def _handle_metrics(self, sid, trial):
        self._send(200, self.store.metrics_record(sid, int(trial)))

    def _handle_export_csv(self):
        csv_text, _, _ = self.store.export()
        self._send(200, csv_text, content_type="text/csv; charset=utf-8")

    def _handle_export_report(self):
        _, report, _ = self.store.export()
        self._send(200, report)

    def _serve_static(self):
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        try:
            target.relative_to(self.ui_dir.resolve())
        except ValueError:
            self._send(403, "error: outside ui directory\n")
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._send(404, "error: not found\n")
            return
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        data = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)


class GuidanceHTTPServer(ThreadingHTTPServer):
    daemon_threads = True


def make_server(plan: ResectionPlan, port: int = 0, state_dir=None,
                ui_dir=None, liver_vertices=None,
                cut_depth: float = 40.0) -> GuidanceHTTPServer:
    store = SessionStore(plan, state_dir=state_dir, cut_depth=cut_depth)
    if liver_vertices is not None:
        store.set_liver_outline(liver_vertices)

    handler = type("BoundHandler", (_Handler,), {
        "store": store,
        "ui_dir": Path(ui_dir) if ui_dir else None,
    })
    server = GuidanceHTTPServer(("127.0.0.1", port), handler)
    server.store = store
    return server


def serve(plan_manifest, port: int = 8077, state_dir=None, ui_dir=None) -> None:
    plan, manifest = load_plan(plan_manifest)
    liver_vertices = None
    liver_path = Path(plan_manifest).parent / manifest.get("liver_mesh", "")
    if manifest.get("liver_mesh") and liver_path.exists():
        from . import meshio
        liver_vertices = meshio.load_mesh(liver_path).vertices
    server = make_server(plan, port=port, state_dir=state_dir, ui_dir=ui_dir,
                         liver_vertices=liver_vertices)
    host, actual_port = server.server_address
    print(f"guidance service listening on http://{host}:{actual_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
