"""End-to-end synthetic study: registration, guided/unguided trials, analysis.

Protocol per participant: one guided and one unguided trial in a
counterbalanced randomized order (exactly ceil(n/2) participants start
guided). A participant's skill and pace multipliers are drawn once and
shared across both conditions, so the paired design carries real
within-participant correlation; the guided condition scales the
participant's error, it does not redraw it.

Guided trials run the full loop: simulate a noisy fiducial capture,
register, apply drift to the registration for the setup delay, and have the
operator follow the (slightly misplaced) overlay. Metrics always score
against the true plan. Unguided trials use no registration; the operator
works from palpation-level anatomy knowledge modeled by the wider unguided
error parameters.

Reports are deterministic functions of (config, seed): no timestamps, fixed
formatting. Trials may be computed by a worker pool; assembly order is
fixed by participant, so the worker count never changes the bytes.
"""

from __future__ import annotations

import configparser
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from .geometry import GeometryError, compose, invert, quat_normalize, RigidTransform
from .metrics import (TrialMetrics, compute_trial_metrics, format_metrics_csv,
                      make_tumor_index)
from .planning import PlanningError, ResectionPlan, load_plan, validate_plan
from .registration import (DriftModel, apply_drift, horn_absolute_orientation,
                           target_registration_error)
from .seeding import ORDER, PARTICIPANT, PLACEMENT, rng_for
from .simulate import (GUIDED, UNGUIDED, NoiseModel, OperatorModel,
                       simulate_cut_trace, simulate_fiducial_capture)
from .stats import DescriptiveStats, PairedSample, TestResult, describe, paired_t_test
from . import meshio

TRIAL_CHANNEL = 101
CAPTURE_CHANNEL = 102
DRIFT_CHANNEL = 103

METRIC_FIELDS = (
    ("deviation_mean_mm", "path_deviation_mean"),
    ("margin_min_mm", "margin_min"),
    ("time_s", "completion_time"),
)

__all__ = [
    "ConditionParams",
    "PopulationModel",
    "StudyConfig",
    "StudyReport",
    "run_study",
    "analyze_trials",
    "write_report",
    "parse_config",
    "format_config",
    "default_config",
    "default_config_text",
    "load_config",
]


@dataclass(frozen=True)
class ConditionParams:
    """Baseline operator parameters for one condition."""

    lateral_error_sigma: float
    correlation_length: float
    systematic_bias: float
    cut_speed: float
    pause_count_mean: float
    pause_duration_mean: float


@dataclass(frozen=True)
class PopulationModel:
    """Across-participant variation of the operator baselines."""

    skill_sigma_log: float = cal.SKILL_SIGMA_LOG
    speed_sigma_log: float = cal.SPEED_SIGMA_LOG
    unguided_bias_sigma: float = cal.UNGUIDED_BIAS_SIGMA


@dataclass(frozen=True)
class StudyConfig:
    plan_manifest: str
    fiducials_file: str
    n_participants: int = 10
    seed: int = 0
    alpha: float = 0.05
    order_randomization: bool = True
    cut_depth: float = 40.0
    sample_rate_hz: float = 60.0
    drift_elapsed_s: float = cal.DRIFT_ELAPSED_S
    fiducial_sigma: float = cal.FIDUCIAL_SIGMA
    tracker_jitter_sigma: float = cal.TRACKER_JITTER_SIGMA
    drift_rate_mm_per_min: float = cal.DRIFT_RATE_MM_PER_MIN
    guided: ConditionParams = field(default_factory=lambda: ConditionParams(
        cal.GUIDED_LATERAL_SIGMA, cal.GUIDED_CORRELATION_LENGTH,
        cal.GUIDED_BIAS, cal.GUIDED_SPEED, cal.GUIDED_PAUSE_COUNT,
        cal.GUIDED_PAUSE_DURATION))
    unguided: ConditionParams = field(default_factory=lambda: ConditionParams(
        cal.UNGUIDED_LATERAL_SIGMA, cal.UNGUIDED_CORRELATION_LENGTH,
        cal.UNGUIDED_BIAS, cal.UNGUIDED_SPEED, cal.UNGUIDED_PAUSE_COUNT,
        cal.UNGUIDED_PAUSE_DURATION))
    population: PopulationModel = field(default_factory=PopulationModel)

    def __post_init__(self):
        if self.n_participants < 2:
            raise GeometryError("study needs at least 2 participants")
        if not 0.0 < self.alpha < 1.0:
            raise GeometryError("alpha must be in (0, 1)")
        if self.cut_depth <= 0:
            raise GeometryError("cut depth must be positive")


@dataclass(frozen=True)
class ParticipantDraw:
    participant_id: str
    skill: float
    pace: float
    unguided_bias: float
    first_condition: str


@dataclass(frozen=True)
class StudyReport:
    config: StudyConfig
    trials: tuple[TrialMetrics, ...]
    tests: dict
    descriptives: dict
    registration_fre: tuple[float, ...]
    registration_tre: tuple[float, ...]
    orders: tuple[str, ...]

    @property
    def metrics_csv(self) -> str:
        return format_metrics_csv(self.trials)


def _participant_draws(config: StudyConfig) -> list[ParticipantDraw]:
    n = config.n_participants
    n_guided_first = (n + 1) // 2
    firsts = [GUIDED] * n_guided_first + [UNGUIDED] * (n - n_guided_first)
    if config.order_randomization:
        rng_for(config.seed, ORDER).shuffle(firsts)
    pop = config.population
    draws = []
    for i in range(n):
        rng = rng_for(config.seed, PARTICIPANT, i)
        draws.append(ParticipantDraw(
            participant_id=f"P{i + 1:02d}",
            skill=float(np.exp(rng.normal(0.0, pop.skill_sigma_log))),
            pace=float(np.exp(rng.normal(0.0, pop.speed_sigma_log))),
            unguided_bias=float(rng.normal(0.0, pop.unguided_bias_sigma)),
            first_condition=firsts[i],
        ))
    return draws


def _operator_for(config: StudyConfig, draw: ParticipantDraw,
                  condition: str) -> OperatorModel:
    base = config.guided if condition == GUIDED else config.unguided
    bias = (base.systematic_bias * draw.skill if condition == GUIDED
            else draw.unguided_bias)
    return OperatorModel(
        condition=condition,
        lateral_error_sigma=base.lateral_error_sigma * draw.skill,
        lateral_error_correlation_length=base.correlation_length,
        systematic_bias=bias,
        cut_speed=base.cut_speed * draw.pace,
        pause_count_mean=base.pause_count_mean,
        pause_duration_mean=base.pause_duration_mean,
    )


def _random_placement(rng: np.random.Generator) -> RigidTransform:
    q = quat_normalize(rng.normal(size=4))
    t = rng.uniform(-150.0, 150.0, 3)
    return RigidTransform(q, t)


def _run_trial(config: StudyConfig, plan: ResectionPlan, fiducials,
               draw: ParticipantDraw, index: int, slot: int, condition: str,
               tumor_index):
    labels, model_points = fiducials
    noise = NoiseModel(
        fiducial_sigma=config.fiducial_sigma,
        tracker_jitter_sigma=config.tracker_jitter_sigma,
        drift=DriftModel(config.drift_rate_mm_per_min,
                         seed=_derived_seed(config.seed, DRIFT_CHANNEL,
                                            index, slot)),
    )
    trial_seed = _derived_seed(config.seed, TRIAL_CHANNEL, index, slot)
    fre = tre = None
    if condition == GUIDED:
        t_true = _random_placement(rng_for(config.seed, PLACEMENT, index, slot))
        capture = simulate_fiducial_capture(
            labels, model_points, t_true, noise,
            _derived_seed(config.seed, CAPTURE_CHANNEL, index, slot))
        reg = horn_absolute_orientation(capture)
        observed = apply_drift(reg.transform, noise.drift,
                               config.drift_elapsed_s * 1000.0)
        overlay_error = compose(invert(t_true), observed)
        followed = plan.transformed(overlay_error)
        fre = reg.fre_rms
        tre = float(target_registration_error(
            observed, t_true, plan.tumor.centroid[None, :])[0])
    else:
        followed = plan
    op = _operator_for(config, draw, condition)
    trace = simulate_cut_trace(followed, op, noise, trial_seed,
                               sample_rate_hz=config.sample_rate_hz)
    metrics = compute_trial_metrics(trace, plan, draw.participant_id,
                                    cut_depth=config.cut_depth,
                                    tumor_index=tumor_index)
    return metrics, fre, tre


def _derived_seed(master: int, channel: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master),
                                spawn_key=(channel, *key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 62))


def run_study(config: StudyConfig, plan: ResectionPlan | None = None,
              fiducials=None, liver=None, workers: int = 1) -> StudyReport:
    """Execute the full protocol; deterministic given (config, seed).

    ``plan``/``fiducials``/``liver`` may be passed pre-loaded to skip file
    IO; otherwise they are read from the paths in the config and the plan
    is validated before any trial runs.
    """
    if plan is None:
        plan, manifest = load_plan(config.plan_manifest)
        if liver is None and manifest.get("liver_mesh"):
            liver_path = Path(config.plan_manifest).parent / manifest["liver_mesh"]
            if liver_path.exists():
                liver = meshio.load_mesh(liver_path)
    if fiducials is None:
        from .registration import load_fiducials
        fset = load_fiducials(config.fiducials_file)
        fiducials = (fset.labels, fset.model_points)
    if liver is not None:
        report = validate_plan(plan, liver)
        if not report.passed:
            raise PlanningError(f"plan failed validation:\n{report}")

    draws = _participant_draws(config)
    tumor_index = make_tumor_index(plan.tumor)
    jobs = []
    for i, draw in enumerate(draws):
        order = ([GUIDED, UNGUIDED] if draw.first_condition == GUIDED
                 else [UNGUIDED, GUIDED])
        for slot, condition in enumerate(order):
            jobs.append((i, slot, condition, draw))

    def run(job):
        i, slot, condition, draw = job
        return _run_trial(config, plan, fiducials, draw, i, slot, condition,
                          tumor_index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    trials = tuple(r[0] for r in results)
    fre = tuple(r[1] for r in results if r[1] is not None)
    tre = tuple(r[2] for r in results if r[2] is not None)
    tests, descriptives = analyze_trials(trials)
    return StudyReport(
        config=config,
        trials=trials,
        tests=tests,
        descriptives=descriptives,
        registration_fre=fre,
        registration_tre=tre,
        orders=tuple(d.first_condition for d in draws),
    )


def analyze_trials(trials) -> tuple[dict, dict]:
    """Paired tests and descriptive tables from per-trial metrics rows.

    Rows must contain each participant exactly once per condition.
    """
    by_participant: dict[str, dict[str, TrialMetrics]] = {}
    for m in trials:
        slot = by_participant.setdefault(m.participant_id, {})
        if m.condition in slot:
            raise GeometryError(
                f"duplicate {m.condition} trial for {m.participant_id}")
        slot[m.condition] = m
    incomplete = [p for p, s in by_participant.items() if len(s) != 2]
    if incomplete:
        raise GeometryError(f"participants missing a condition: {incomplete}")
    participants = sorted(by_participant)

    tests: dict[str, TestResult] = {}
    descriptives: dict[tuple[str, str], DescriptiveStats] = {}
    for metric_name, attr in METRIC_FIELDS:
        guided_vals = [getattr(by_participant[p][GUIDED], attr)
                       for p in participants]
        unguided_vals = [getattr(by_participant[p][UNGUIDED], attr)
                         for p in participants]
        tests[metric_name] = paired_t_test(PairedSample(
            tuple(guided_vals), tuple(unguided_vals), (GUIDED, UNGUIDED)))
        descriptives[(metric_name, GUIDED)] = describe(guided_vals)
        descriptives[(metric_name, UNGUIDED)] = describe(unguided_vals)
    return tests, descriptives


# ---------------------------------------------------------------------------
# Report files.

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def format_stats_csv(report: StudyReport) -> str:
    lines = ["metric,guided_mean,guided_sd,unguided_mean,unguided_sd,"
             "t,df,p,degenerate"]
    for metric_name, _ in METRIC_FIELDS:
        g = report.descriptives[(metric_name, GUIDED)]
        u = report.descriptives[(metric_name, UNGUIDED)]
        t = report.tests[metric_name]
        lines.append(
            f"{metric_name},{_fmt(g.mean)},{_fmt(g.sd)},{_fmt(u.mean)},"
            f"{_fmt(u.sd)},{_fmt(t.t_statistic) if np.isfinite(t.t_statistic) else t.t_statistic},"
            f"{t.degrees_of_freedom},{t.p_value:.9g},{int(t.degenerate)}")
    return "\n".join(lines) + "\n"


def format_report_text(report: StudyReport) -> str:
    out = io.StringIO()
    cfg = report.config
    w = out.write
    w("synthetic resection study report\n")
    w("=================================\n")
    w(f"participants {cfg.n_participants}\n")
    w(f"seed {cfg.seed}\n")
    w(f"alpha {cfg.alpha}\n")
    w(f"order guided-first: "
      f"{sum(1 for o in report.orders if o == GUIDED)} of {len(report.orders)}\n")
    for metric_name, _ in METRIC_FIELDS:
        w(f"\n[{metric_name}]\n")
        for condition in (GUIDED, UNGUIDED):
            d = report.descriptives[(metric_name, condition)]
            w(f"{condition:9s} mean {_fmt(d.mean)}  sd {_fmt(d.sd)}  "
              f"median {_fmt(d.median)}  min {_fmt(d.min)}  max {_fmt(d.max)}\n")
        t = report.tests[metric_name]
        verdict = ("degenerate" if t.degenerate else
                   "significant" if t.p_value < cfg.alpha else
                   "not significant")
        w(f"paired t {_fmt(t.t_statistic) if np.isfinite(t.t_statistic) else t.t_statistic}  "
          f"df {t.degrees_of_freedom}  p {t.p_value:.9g}  "
          f"[{verdict} at alpha={cfg.alpha}]\n")
    if report.registration_fre:
        w("\n[registration]\n")
        fre = describe(report.registration_fre)
        tre = describe(report.registration_tre)
        w(f"fre_rms_mm mean {_fmt(fre.mean)}  sd {_fmt(fre.sd)}  "
          f"min {_fmt(fre.min)}  max {_fmt(fre.max)}  n {fre.n}\n")
        w(f"tre_mm     mean {_fmt(tre.mean)}  sd {_fmt(tre.sd)}  "
          f"min {_fmt(tre.min)}  max {_fmt(tre.max)}  n {tre.n}\n")
    w("\n[breaches]\n")
    for condition in (GUIDED, UNGUIDED):
        rows = [m for m in report.trials if m.condition == condition]
        w(f"{condition:9s} {sum(m.breach for m in rows)} of {len(rows)} trials\n")
    return out.getvalue()


def write_report(report: StudyReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.metrics_csv)
    (out / "stats.csv").write_text(format_stats_csv(report))
    (out / "report.txt").write_text(format_report_text(report))
    return out


# ---------------------------------------------------------------------------
# Config file (INI-style key/value sections).

def default_config(plan_manifest="plan/plan.manifest",
                   fiducials_file="fiducials.txt", **overrides) -> StudyConfig:
    return StudyConfig(plan_manifest=plan_manifest,
                       fiducials_file=fiducials_file, **overrides)


def format_config(config: StudyConfig) -> str:
    def cond_section(name, c: ConditionParams) -> str:
        return (f"[{name}]\n"
                f"lateral_sigma_mm = {c.lateral_error_sigma}\n"
                f"correlation_length_mm = {c.correlation_length}\n"
                f"bias_mm = {c.systematic_bias}\n"
                f"speed_mm_s = {c.cut_speed}\n"
                f"pause_count_mean = {c.pause_count_mean}\n"
                f"pause_duration_mean_s = {c.pause_duration_mean}\n")

    pop = config.population
    return (
        "# resectkit study configuration\n"
        "[study]\n"
        f"participants = {config.n_participants}\n"
        f"seed = {config.seed}\n"
        f"alpha = {config.alpha}\n"
        f"order_randomization = {str(config.order_randomization).lower()}\n"
        f"plan = {config.plan_manifest}\n"
        f"fiducials = {config.fiducials_file}\n"
        f"cut_depth_mm = {config.cut_depth}\n"
        f"sample_rate_hz = {config.sample_rate_hz}\n"
        "\n[noise]\n"
        f"fiducial_sigma_mm = {config.fiducial_sigma}\n"
        f"tracker_jitter_sigma_mm = {config.tracker_jitter_sigma}\n"
        f"drift_rate_mm_per_min = {config.drift_rate_mm_per_min}\n"
        f"drift_elapsed_s = {config.drift_elapsed_s}\n"
        "\n[population]\n"
        f"skill_sigma_log = {pop.skill_sigma_log}\n"
        f"speed_sigma_log = {pop.speed_sigma_log}\n"
        f"unguided_bias_sigma_mm = {pop.unguided_bias_sigma}\n"
        "\n" + cond_section("guided", config.guided)
        + "\n" + cond_section("unguided", config.unguided))


def default_config_text(plan_manifest="plan/plan.manifest",
                        fiducials_file="fiducials.txt") -> str:
    return format_config(default_config(plan_manifest, fiducials_file))


def parse_config(text: str, base_dir: Path | None = None) -> StudyConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    study = parser["study"]
    noise = parser["noise"] if parser.has_section("noise") else {}
    pop = parser["population"] if parser.has_section("population") else {}

    def cond(name, default: ConditionParams) -> ConditionParams:
        if not parser.has_section(name):
            return default
        s = parser[name]
        return ConditionParams(
            lateral_error_sigma=s.getfloat("lateral_sigma_mm",
                                           default.lateral_error_sigma),
            correlation_length=s.getfloat("correlation_length_mm",
                                          default.correlation_length),
            systematic_bias=s.getfloat("bias_mm", default.systematic_bias),
            cut_speed=s.getfloat("speed_mm_s", default.cut_speed),
            pause_count_mean=s.getfloat("pause_count_mean",
                                        default.pause_count_mean),
            pause_duration_mean=s.getfloat("pause_duration_mean_s",
                                           default.pause_duration_mean),
        )

    def path_of(value: str) -> str:
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return str(p)

    defaults = default_config()
    return StudyConfig(
        plan_manifest=path_of(study.get("plan", "plan/plan.manifest")),
        fiducials_file=path_of(study.get("fiducials", "fiducials.txt")),
        n_participants=study.getint("participants", 10),
        seed=study.getint("seed", 0),
        alpha=study.getfloat("alpha", 0.05),
        order_randomization=study.getboolean("order_randomization", True),
        cut_depth=study.getfloat("cut_depth_mm", 40.0),
        sample_rate_hz=study.getfloat("sample_rate_hz", 60.0),
        fiducial_sigma=float(noise.get("fiducial_sigma_mm",
                                       cal.FIDUCIAL_SIGMA)),
        tracker_jitter_sigma=float(noise.get("tracker_jitter_sigma_mm",
                                             cal.TRACKER_JITTER_SIGMA)),
        drift_rate_mm_per_min=float(noise.get("drift_rate_mm_per_min",
                                              cal.DRIFT_RATE_MM_PER_MIN)),
        drift_elapsed_s=float(noise.get("drift_elapsed_s",
                                        cal.DRIFT_ELAPSED_S)),
        population=PopulationModel(
            skill_sigma_log=float(pop.get("skill_sigma_log",
                                          cal.SKILL_SIGMA_LOG)),
            speed_sigma_log=float(pop.get("speed_sigma_log",
                                          cal.SPEED_SIGMA_LOG)),
            unguided_bias_sigma=float(pop.get("unguided_bias_sigma_mm",
                                              cal.UNGUIDED_BIAS_SIGMA)),
        ),
        guided=cond("guided", defaults.guided),
        unguided=cond("unguided", defaults.unguided),
    )


def load_config(path) -> StudyConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
