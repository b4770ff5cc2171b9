"""Calibrated defaults for the simulated study.

These constants were fitted with the sweep scripts in scripts/ (run against
the bundled demo scene) so that the default study reproduces the reference
group outcomes this toolkit targets:

  capture noise   -> mean fiducial RMS residual ~1.5 mm,
                     mean target error at the tumor centroid ~1.7 mm
  guided operator -> path deviation 2.0 +/- 0.5 mm, time 32 +/- 8 s,
                     depth margin staying above 9 mm
  unguided        -> path deviation 5.0 +/- 1.0 mm, time 55 +/- 10 s

Re-run scripts/calibrate_capture.py and scripts/calibrate_operators.py to
regenerate after changing the demo geometry or the operator model.
"""

# capture / tracking noise
FIDUCIAL_SIGMA = 1.62          # mm, isotropic per-axis touch noise
TRACKER_JITTER_SIGMA = 0.15    # mm per trace sample
DRIFT_RATE_MM_PER_MIN = 0.3
DRIFT_ELAPSED_S = 60.0         # registration-to-incision delay, guided trials

# guided condition operator baseline
GUIDED_LATERAL_SIGMA = 0.55
GUIDED_CORRELATION_LENGTH = 30.0
GUIDED_BIAS = 1.80             # deliberate cut on the outer edge of the line
GUIDED_SPEED = 5.05            # mm/s
GUIDED_PAUSE_COUNT = 0.5
GUIDED_PAUSE_DURATION = 1.0    # s

# unguided condition operator baseline
UNGUIDED_LATERAL_SIGMA = 5.9
UNGUIDED_CORRELATION_LENGTH = 20.0
UNGUIDED_BIAS = 0.0            # per-participant bias drawn separately
UNGUIDED_SPEED = 3.60
UNGUIDED_PAUSE_COUNT = 3.0
UNGUIDED_PAUSE_DURATION = 3.5

# across-participant variation
SKILL_SIGMA_LOG = 0.12         # lognormal sigma of the skill multiplier
SPEED_SIGMA_LOG = 0.10         # lognormal sigma of the pace multiplier
UNGUIDED_BIAS_SIGMA = 1.5      # mm, zero-mean personal bias (unguided only)
