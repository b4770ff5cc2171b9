#!/usr/bin/env python3
"""Sweep operator parameters against the study outcome targets.

For each parameter variant, runs the default study over many seeds and
reports: grand means per condition, the fraction of seeds whose paired
deviation test reaches p < 0.001 and whose time test reaches p < 0.01, and
the pooled fraction of guided trials keeping at least a 9 mm margin.
Update resectkit/calibration.py with the chosen row.
"""

import sys
import time
import warnings

import numpy as np

from resectkit.demo import build_demo_scene
from resectkit.simulate import GUIDED, UNGUIDED
from resectkit.study import ConditionParams, PopulationModel, default_config, replace, run_study

warnings.filterwarnings("ignore")


def evaluate(scene, config, n_seeds=20, workers=4, label=""):
    t0 = time.time()
    dev_g, dev_u, time_g, time_u = [], [], [], []
    p_dev_hits = p_time_hits = 0
    margins_g = []
    for seed in range(n_seeds):
        rep = run_study(replace(config, seed=seed), plan=scene.plan,
                        fiducials=(scene.fiducial_labels, scene.fiducial_points),
                        workers=workers)
        for m in rep.trials:
            if m.condition == GUIDED:
                dev_g.append(m.path_deviation_mean)
                time_g.append(m.completion_time)
                margins_g.append(m.margin_min)
            else:
                dev_u.append(m.path_deviation_mean)
                time_u.append(m.completion_time)
        p_dev_hits += rep.tests["deviation_mean_mm"].p_value < 0.001
        p_time_hits += rep.tests["time_s"].p_value < 0.01
    margins_g = np.asarray(margins_g)
    print(f"{label:28s} devG {np.mean(dev_g):.2f}±{np.std(dev_g):.2f} "
          f"devU {np.mean(dev_u):.2f}±{np.std(dev_u):.2f} "
          f"tG {np.mean(time_g):.1f} tU {np.mean(time_u):.1f} "
          f"pdev {p_dev_hits}/{n_seeds} ptime {p_time_hits}/{n_seeds} "
          f"margin>=9 {np.mean(margins_g >= 9.0) * 100:.1f}% "
          f"(p5 {np.percentile(margins_g, 5):.2f}) "
          f"[{time.time() - t0:.0f}s]")


def main():
    scene = build_demo_scene()
    base = default_config()
    n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 20

    variants = {
        "baseline": base,
        "g:b1.6 s.5 l35": replace(base, guided=ConditionParams(0.50, 35.0, 1.60, 5.05, 0.5, 1.0)),
        "g:b1.7 s.45 l35": replace(base, guided=ConditionParams(0.45, 35.0, 1.70, 5.05, 0.5, 1.0)),
        "u:s6.3 l12 b1.0": replace(base, unguided=ConditionParams(6.3, 12.0, 0.0, 3.60, 3.0, 3.5),
                                   population=PopulationModel(0.12, 0.10, 1.0)),
        "u:s6.5 l10 b0.8": replace(base, unguided=ConditionParams(6.5, 10.0, 0.0, 3.60, 3.0, 3.5),
                                   population=PopulationModel(0.12, 0.10, 0.8)),
    }
    for label, cfg in variants.items():
        evaluate(scene, cfg, n_seeds=n_seeds, label=label)


if __name__ == "__main__":
    main()
