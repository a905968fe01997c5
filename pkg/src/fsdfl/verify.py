"""Randomized oracle suite for the linear-dynamics decomposition."""
from __future__ import annotations

import json
from dataclasses import replace

import numpy as np

from . import dynamics
from .graph import build_random_connected, build_ring, build_star


def random_instance(seed: int, synchronized: bool = True,
                    max_n: int = 8, max_rounds: int = 50):
    """One random linear-dynamics rollout with a random graph and schedule.

    synchronized=True uses the constant-y0 / zero-multiplier start for
    which the derivation's gamma0 = 0 claim holds.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_n + 1))
    kind = rng.choice(["ring", "star", "random"])
    if kind == "ring":
        topo = build_ring(n)
    elif kind == "star":
        topo = build_star(n)
    else:
        max_edges = n * (n - 1) // 2
        edge_count = int(rng.integers(n - 1, max_edges + 1))
        topo = build_random_connected(n, edge_count, int(rng.integers(2**31)))
    rounds = int(rng.integers(5, max_rounds + 1))
    rho = float(rng.uniform(0.01, 1.0))
    nu = float(rng.uniform(0.0, 0.5))
    schedule = dynamics.NoiseSchedule.random(rounds, n, int(rng.integers(2**31)))
    if synchronized:
        y0 = np.full(n, float(rng.normal()))
        lam0 = None
    else:
        y0 = rng.standard_normal(n)
        lam0 = rng.standard_normal(n)
    return dynamics.simulate_linear(topo, rounds, schedule, rho, nu, y0, lam0)


def verify_suite(instances: int, seed: int, tamper: bool = False,
                 rel_tol: float = dynamics.REL_TOL) -> dict:
    """Run the identity checks over random instances; returns a JSON-able report.

    tamper=True flips the sign of the recorded SGD drift before
    verification, as a negative control: the decomposition must then fail.
    """
    reports = []
    worst = 0.0
    for k in range(instances):
        traj = random_instance(seed * 1_000_003 + k, synchronized=(k % 2 == 0))
        if tamper:
            bad = replace(traj.schedule, dbar=-traj.schedule.dbar)
            traj = dynamics.LinearTrajectory(
                ops=traj.ops, rho=traj.rho, nu=traj.nu, schedule=bad,
                y=traj.y, y_tilde=traj.y_tilde, lam=traj.lam, lam0=traj.lam0)
        rep = dynamics.verify_appendix_chain(traj)
        worst = max(worst, rep.max_residual())
        reports.append(rep.to_dict())
    return {
        "instances": instances,
        "seed": seed,
        "rel_tol": rel_tol,
        "max_residual": worst,
        "passed": worst <= rel_tol,
        "reports": reports,
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
