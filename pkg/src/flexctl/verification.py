"""Invariant suite behind the ``verify`` command.

Runs the structural checks the solver relies on: the energy identities of
the trilinear forms, positivity of the coercivity estimates, the discrete
duality pairing, a finite-difference gradient check, and the smallness
condition of the linearised-solvability diagnostic.  Each check reports a
value, a threshold, and whether it gates the exit status.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import discretization as disc
from .forward import (ControlTrajectory, build_operators, evaluate_cost, run,
                      smallness_ratio)
from .sensitivity import (discrete_gradient, gradient_trace_discrepancy,
                          pairing_identity_gap, run_adjoint)

log = logging.getLogger("flexctl")

FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    comparator: str          # "<=" or ">="
    passed: bool
    gate: bool = True        # non-gating rows are informational


def _check(name, value, threshold, comparator, gate=True):
    ok = value <= threshold if comparator == "<=" else value >= threshold
    return CheckResult(name=name, value=float(value), threshold=float(threshold),
                       comparator=comparator, passed=bool(ok), gate=gate)


def random_velocity(spaces, rng, constrained=True):
    z = rng.standard_normal(spaces.num_velocity_dofs)
    if constrained:
        z[~spaces.velocity_free] = 0.0
    return z


def random_temperature(spaces, rng, constrained=True):
    w = rng.standard_normal(spaces.num_nodes)
    if constrained:
        w[~spaces.temperature_free] = 0.0
    return w


def form_identity_checks(spaces, samples=200, seed=0):
    """Antisymmetry identities of the convection and advection forms."""
    rng = np.random.default_rng(seed)
    h1v = disc.vector_h1(spaces)
    h1w = disc.scalar_h1(spaces)

    worst_bvv = 0.0
    worst_bsym = 0.0
    worst_cskew = 0.0
    for _ in range(samples):
        u = random_velocity(spaces, rng)
        v = random_velocity(spaces, rng)
        w = random_velocity(spaces, rng)
        nu = np.sqrt(u @ (h1v @ u))
        nv = np.sqrt(v @ (h1v @ v))
        nw = np.sqrt(w @ (h1v @ w))
        worst_bvv = max(worst_bvv,
                        abs(disc.rotational_convection(spaces, u, v, v)) / (nu * nv ** 2))
        val = abs(disc.rotational_convection(spaces, u, v, w)
                  + disc.rotational_convection(spaces, u, w, v))
        worst_bsym = max(worst_bsym, val / (nu * nv * nw))
        z = random_velocity(spaces, rng)
        t = random_temperature(spaces, rng)
        nt = np.sqrt(t @ (h1w @ t))
        nz = np.sqrt(z @ (h1v @ z))
        worst_cskew = max(worst_cskew,
                          abs(disc.advection(spaces, z, t, t, skew=True)) / (nz * nt ** 2))
    return [
        _check("form_b_energy_identity", worst_bvv, 1e-12, "<="),
        _check("form_b_antisymmetry", worst_bsym, 1e-12, "<="),
        _check("form_c_skew_identity", worst_cskew, 1e-12, "<="),
    ]


def coercivity_checks(spaces):
    c1, c1p = disc.estimate_coercivity(spaces)
    return [
        _check("coercivity_velocity", c1, 0.0, ">="),
        _check("coercivity_temperature", c1p, 0.0, ">="),
    ]


def random_admissible(spec, rng):
    return ControlTrajectory(
        spec.v1_min + (spec.v1_max - spec.v1_min) * rng.random(spec.v1_min.shape),
        spec.v2_min + (spec.v2_max - spec.v2_min) * rng.random(spec.v2_min.shape),
    )


def random_direction(spec, rng, scale=1.0):
    return ControlTrajectory(
        scale * rng.standard_normal(spec.v1_min.shape),
        scale * rng.standard_normal(spec.v2_min.shape),
    )


def pairing_check(spec, seed=0):
    rng = np.random.default_rng(seed)
    v = random_admissible(spec, rng)
    dv = random_direction(spec, rng)
    base = run(spec, v)
    gap = pairing_identity_gap(spec, base, dv)
    return [_check("adjoint_pairing_identity", gap, 1e-10, "<=")]


def gradient_fd_error(spec, v, dv, seed=None):
    """Best relative mismatch between the adjoint gradient and central
    finite differences of the cost over the documented step sweep."""
    base = run(spec, v)
    adj = run_adjoint(base, spec, include_trace_source=False)
    g1, g2 = discrete_gradient(base, adj, spec)
    directional = float(np.sum(g1 * dv.v1) + np.sum(g2 * dv.v2))

    def cost_at(t):
        vt = ControlTrajectory(v.v1 + t * dv.v1, v.v2 + t * dv.v2)
        return evaluate_cost(run(spec, vt), vt, spec)

    best = np.inf
    for h in FD_STEPS:
        fd = (cost_at(h) - cost_at(-h)) / (2.0 * h)
        best = min(best, abs(fd - directional) / max(abs(fd), 1e-300))
    return best


def gradient_check(spec, seed=1):
    rng = np.random.default_rng(seed)
    v = random_admissible(spec, rng)
    dv = random_direction(spec, rng)
    err = gradient_fd_error(spec, v, dv)
    return [_check("gradient_finite_difference", err, 1e-6, "<=")]


def smallness_check(spec):
    ratio = smallness_ratio(spec)
    if ratio > 1.0:
        log.warning("linearised-solvability smallness ratio %.3f exceeds 1; "
                    "the sufficient condition is not met at these constants", ratio)
    return [_check("smallness_condition_ratio", ratio, 1.0, "<=", gate=False)]


def flux_recovery_check(spec, seed=2):
    """Informational: recovered wall flux versus the prescribed control."""
    rng = np.random.default_rng(seed)
    v = random_admissible(spec, rng)
    base = run(spec, v)
    rec = disc.recovered_boundary_flux(spec.spaces, base[-1].w, spec.kappa)
    ref = v.v2[:, -1]
    err = float(np.linalg.norm(rec - ref) / max(np.linalg.norm(ref), 1e-300))
    return [_check("boundary_flux_recovery", err, 1.0, "<=", gate=False)]


def trace_discrepancy_check(spec, seed=3):
    """Informational: flux-form gradient versus the bare adjoint trace."""
    rng = np.random.default_rng(seed)
    v = random_admissible(spec, rng)
    base = run(spec, v)
    val = gradient_trace_discrepancy(spec, base)
    return [_check("gradient_vs_trace_discrepancy", val, np.inf, "<=", gate=False)]


def run_verification(spec, seed=0):
    """The full invariant suite on one problem; returns CheckResults."""
    results = []
    results += form_identity_checks(spec.spaces, samples=200, seed=seed)
    results += coercivity_checks(spec.spaces)
    results += pairing_check(spec, seed=seed)
    results += gradient_check(spec, seed=seed + 1)
    results += smallness_check(spec)
    results += flux_recovery_check(spec, seed=seed + 2)
    results += trace_discrepancy_check(spec, seed=seed + 3)
    return results
