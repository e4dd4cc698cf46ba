"""Admissible-set handling, bang-bang selection and the outer optimisation.

Control pairings over the boundary-time cylinder use positive nodal
quadrature weights (Simpson per edge), so maximising a linear functional over
the admissible box decouples node by node and the bang-bang map is its exact
maximiser.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import ControlTrajectory, evaluate_cost, run
from .mesh import GAMMA1, GAMMA2
from .discretization import boundary_lumped_weights
from .sensitivity import SwitchingFields, discrete_gradient, run_adjoint

log = logging.getLogger("flexctl")

GAP_TOL = "gap-tol"
MAX_ITER = "max-iter"
STALLED = "stalled-line-search"

ARMIJO = 1e-4
MAX_HALVINGS = 30


@dataclass
class OptimizationResult:
    control: ControlTrajectory
    cost_history: list
    gap_history: list
    iterations: int
    reason: str
    switching: SwitchingFields = None
    trajectory: object = field(default=None, repr=False)


def project_admissible(v, spec):
    """Componentwise clip of a control trajectory into the admissible box."""
    if np.any(spec.v1_min <= 0.0) or np.any(spec.v2_min <= 0.0) \
            or np.any(spec.v1_max < spec.v1_min) or np.any(spec.v2_max < spec.v2_min):
        raise ValueError("invalid bounds: need 0 < lower <= upper")
    return ControlTrajectory(
        np.clip(v.v1, spec.v1_min, spec.v1_max),
        np.clip(v.v2, spec.v2_min, spec.v2_max),
    )


def bang_bang(sigma, spec):
    """Extreme-point control selected by the switching-field signs.

    Positive switching values pick the upper bound, negative the lower; the
    sign-free tie is broken toward the lower bound for determinism.
    """
    if sigma.sigma1.shape != spec.v1_min.shape or sigma.sigma2.shape != spec.v2_min.shape:
        raise ValueError("switching fields do not match the control grid")
    return ControlTrajectory(
        np.where(sigma.sigma1 > 0.0, spec.v1_max, spec.v1_min),
        np.where(sigma.sigma2 > 0.0, spec.v2_max, spec.v2_min),
    )


def control_pairing(sigma, dv1, dv2, spec):
    """Weighted boundary-time quadrature of switching fields against control
    increments: sum of dt * (W1 int sigma1 dv1 + W2 int sigma2 dv2)."""
    s = spec.spaces
    w1 = boundary_lumped_weights(s, GAMMA1)
    w2 = boundary_lumped_weights(s, GAMMA2)
    term1 = spec.flow_weight * float(np.sum(w1[:, None] * sigma.sigma1 * dv1))
    term2 = spec.heat_weight * float(np.sum(w2[:, None] * sigma.sigma2 * dv2))
    return spec.dt * (term1 + term2)


def fw_gap(v, sigma, spec):
    """Duality gap: the pairing evaluated at the bang-bang vertex.

    Nonnegative for any admissible ``v``; zero exactly when ``v`` already
    maximises the pairing wherever the switching field does not vanish.
    """
    vertex = bang_bang(sigma, spec)
    return control_pairing(sigma, vertex.v1 - v.v1, vertex.v2 - v.v2, spec)


def vi_residual(v, sigma, spec, samples=100, seed=0):
    """First-order optimality residual of the control variational inequality.

    Maximum of the pairing over ``samples`` random admissible trial controls
    plus the bang-bang vertex; at a maximum-principle point the random trials
    pair nonpositively and the vertex pairs to zero.
    """
    rng = np.random.default_rng(seed)
    best = fw_gap(v, sigma, spec)
    shape1, shape2 = v.v1.shape, v.v2.shape
    for _ in range(samples):
        t1 = spec.v1_min + (spec.v1_max - spec.v1_min) * rng.random(shape1)
        t2 = spec.v2_min + (spec.v2_max - spec.v2_min) * rng.random(shape2)
        best = max(best, control_pairing(sigma, t1 - v.v1, t2 - v.v2, spec))
    return best


def bang_bang_violations(v, sigma, spec, sigma_rtol=1e-6, deviation_rtol=1e-6):
    """Count of (node, step) pairs where the switching field is active but the
    control is not at the selected bound."""
    vertex = bang_bang(sigma, spec)
    count = 0
    for sig, val, ref, lo, hi in (
        (sigma.sigma1, v.v1, vertex.v1, spec.v1_min, spec.v1_max),
        (sigma.sigma2, v.v2, vertex.v2, spec.v2_min, spec.v2_max),
    ):
        smax = np.max(np.abs(sig)) if sig.size else 0.0
        active = np.abs(sig) > sigma_rtol * smax
        off = np.abs(val - ref) > deviation_rtol * (hi - lo)
        count += int(np.count_nonzero(active & off))
    return count


def _negative_gradient_field(spec, base):
    adj = run_adjoint(base, spec, include_trace_source=False)
    g1, g2 = discrete_gradient(base, adj, spec)
    return SwitchingFields(sigma1=-g1, sigma2=-g2), (g1, g2)


def optimize(spec, initial=None, method="conditional-gradient",
             gap_tol=1e-6, max_iter=50):
    """Minimise the boundary-control cost over the admissible box.

    Both methods evaluate the exact discrete gradient through the adjoint.
    The conditional-gradient method steps toward the bang-bang vertex of the
    negative gradient with an Armijo backtracking line search; the
    projected-gradient method clips explicit gradient steps.  Terminates when
    the duality gap drops below ``gap_tol * (1 + |J|)``, on the iteration
    cap, or when the line search stalls.
    """
    if method not in ("conditional-gradient", "projected-gradient"):
        raise ValueError(f"unknown method {method!r}")
    if initial is None:
        initial = ControlTrajectory(0.5 * (spec.v1_min + spec.v1_max),
                                    0.5 * (spec.v2_min + spec.v2_max))
    v = project_admissible(initial, spec)

    base = run(spec, v)
    cost = evaluate_cost(base, v, spec)
    cost_history = [cost]
    gap_history = []
    sigma = None
    reason = MAX_ITER
    iterations = 0
    step_size = 1.0   # projected-gradient scale, adapted across iterations

    for iterations in range(1, max_iter + 1):
        sigma, (g1, g2) = _negative_gradient_field(spec, base)
        gap = fw_gap(v, sigma, spec)
        gap_history.append(gap)
        log.info("iter %d: J=%.12e gap=%.3e", iterations, cost, gap)
        if gap <= gap_tol * (1.0 + abs(cost)):
            reason = GAP_TOL
            break

        if method == "conditional-gradient":
            vertex = bang_bang(sigma, spec)
            d1, d2 = vertex.v1 - v.v1, vertex.v2 - v.v2
            slope = float(np.sum(g1 * d1) + np.sum(g2 * d2))
            accepted = False
            lam = 1.0
            for _ in range(MAX_HALVINGS + 1):
                v_try = ControlTrajectory(v.v1 + lam * d1, v.v2 + lam * d2)
                base_try = run(spec, v_try)
                cost_try = evaluate_cost(base_try, v_try, spec)
                if cost_try <= cost + ARMIJO * lam * slope:
                    accepted = True
                    break
                lam *= 0.5
            if not accepted:
                reason = STALLED
                break
            v, base, cost = v_try, base_try, cost_try
        else:
            accepted = False
            eta = step_size
            for _ in range(MAX_HALVINGS + 1):
                v_try = project_admissible(
                    ControlTrajectory(v.v1 - eta * g1, v.v2 - eta * g2), spec)
                slope = float(np.sum(g1 * (v_try.v1 - v.v1))
                              + np.sum(g2 * (v_try.v2 - v.v2)))
                if slope >= 0.0:
                    break
                base_try = run(spec, v_try)
                cost_try = evaluate_cost(base_try, v_try, spec)
                if cost_try <= cost + ARMIJO * slope:
                    accepted = True
                    break
                eta *= 0.5
            if not accepted:
                reason = STALLED
                break
            step_size = 2.0 * eta
            v, base, cost = v_try, base_try, cost_try
        cost_history.append(cost)
    else:
        iterations = max_iter

    if max_iter == 0:
        iterations = 0

    return OptimizationResult(
        control=v,
        cost_history=cost_history,
        gap_history=gap_history,
        iterations=iterations,
        reason=reason,
        switching=sigma,
        trajectory=base,
    )
