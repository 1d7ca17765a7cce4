"""Regenerate the bundled rendezvous scenario and settings files.

The scenario is a three-phase Clohessy-Wiltshire approach with finite-burn
inputs, per-phase keep-out boxes, and a terminal approach cone.  The noise
levels are chosen so the tightened problem keeps a strict safety margin at
the pinned terminal state; see the README for the sizing argument.
"""

import json
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, os.pardir, "scenarios")


def diag_sq(vals):
    return np.diag(np.square(np.asarray(vals, float))).tolist()


scenario = {
    "grid": {
        "nodes": [0.0, 30.0, 38.0, 42.0, 43.0, 44.0, 45.0, 46.0, 47.25,
                  47.5, 47.75, 48.0],
        "n2": 3,
        "n3": 7,
        "t_safe": 6.0,
    },
    "model": {"kind": "cw", "mean_motion": 2.0 * np.pi / (6.56 * 24.0)},
    "control": {"kind": "fbp", "t_burn_phases": [0.25, 0.25, 0.125]},
    "avoid_half_edges": [10.0, 1.0, 0.2],
    "cone": {"axis": [0.0, 0.0, 1.0], "half_angle_deg": 55.0},
    "node_bounds": {"a2_minus": 45.0, "a2_plus": 55.0,
                    "a3_minus": 3.5, "a3_plus": 6.5},
    "u_max": 120.0,
    "x_init": [0.0, -600.0, 800.0, 2.5, 30.0, -20.0],
    "x_final": [0.0, 0.0, 0.6, 0.0, 0.0, 0.0],
    "uncertainty": {
        "beta_ps": 0.8,
        "beta_ac": 0.8,
        "beta_act": 0.8,
        "sigma_i": diag_sq([2.0] * 3 + [0.2] * 3),
        "sigma_act": diag_sq([0.005] * 3),
        "sigma_rr_decision": [
            diag_sq([0.5] * 3 + [0.02] * 3),
            diag_sq([0.03] * 3 + [0.005] * 3),
            diag_sq([0.002] * 3 + [0.001] * 3),
            diag_sq([0.001] * 3 + [0.0005] * 3),
        ],
    },
}

settings = {
    "w_ep": 1e4,
    "w_px": 0.1,
    "eps_relax": 1e-6,
    "eps_ep": 1e-6,
    "eps_px": 1e-7,
    "max_iters": 50,
    "solver_tol": 1e-8,
    "scaling": {"x_scale": [100.0] * 3 + [10.0] * 3, "u_scale": 100.0},
}


def main():
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "cw_rendezvous.json"), "w",
              encoding="utf-8") as f:
        json.dump(scenario, f, indent=1)
        f.write("\n")
    with open(os.path.join(OUT, "cw_rendezvous_settings.json"), "w",
              encoding="utf-8") as f:
        json.dump(settings, f, indent=1)
        f.write("\n")
    print("wrote", os.path.abspath(OUT))


if __name__ == "__main__":
    main()
