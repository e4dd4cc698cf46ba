"""Time integration of the controlled Boussinesq system and cost evaluation.

Each implicit Euler step performs two linear solves: a momentum/total-pressure
saddle solve with convection frozen at the previous velocity and buoyancy
taken explicitly, followed by a temperature solve with implicit diffusion and
skew advection by the new velocity.  Controls are piecewise constant in time
and enter at the right endpoint of each step: the total-pressure values on
gamma1 act through the boundary coupling, the heat-flux values on gamma2
through the trace pairing.
"""

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import discretization as disc
from .mesh import GAMMA1, GAMMA2

log = logging.getLogger("flexctl")

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """Linear solve failed or exceeded the residual contract."""


@dataclass
class ProblemSpec:
    """Physical constants, cost data, bounds and discretisation data.

    Boundary arrays (`flow_profile`, `heat_profile`, the four bound arrays)
    are node-by-step tables over the gamma1/gamma2 node lists and the time
    steps 1..num_steps.
    """

    spaces: disc.SpaceSet
    nu: float                      # kinematic viscosity, > 0
    kappa: float                   # thermal conductivity, > 0
    expansion: float               # buoyancy coefficient, >= 0
    gravity: np.ndarray            # gravity direction vector
    flow_weight: float             # weight of the normal-velocity cost term
    heat_weight: float             # weight of the wall-flux cost term
    flow_profile: np.ndarray       # (n_gamma1, num_steps)
    heat_profile: np.ndarray       # (n_gamma2, num_steps)
    v1_min: np.ndarray
    v1_max: np.ndarray
    v2_min: np.ndarray
    v2_max: np.ndarray
    final_time: float
    num_steps: int
    initial_velocity: object = None     # callable (x, y) -> (vx, vy), or array
    initial_temperature: object = None  # callable (x, y) -> w, or array
    forcing_velocity: object = None     # callable (x, y, t) -> (fx, fy)
    forcing_temperature: object = None  # callable (x, y, t) -> f
    _ops: object = dc_field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.nu <= 0.0 or self.kappa <= 0.0:
            raise ValueError("viscosity and conductivity must be positive")
        if self.expansion < 0.0:
            raise ValueError("expansion coefficient must be nonnegative")
        if self.flow_weight < 0.0 or self.heat_weight < 0.0:
            raise ValueError("cost weights must be nonnegative")
        if self.final_time <= 0.0 or self.num_steps < 0:
            raise ValueError("need final_time > 0 and num_steps >= 0")
        n1 = self.spaces.gamma1_nodes.size
        n2 = self.spaces.gamma2_nodes.size
        shape1, shape2 = (n1, self.num_steps), (n2, self.num_steps)
        for name, arr, shape in (
            ("flow_profile", self.flow_profile, shape1),
            ("heat_profile", self.heat_profile, shape2),
            ("v1_min", self.v1_min, shape1), ("v1_max", self.v1_max, shape1),
            ("v2_min", self.v2_min, shape2), ("v2_max", self.v2_max, shape2),
        ):
            arr = np.asarray(arr, dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)
        if np.any(self.v1_min <= 0.0) or np.any(self.v2_min <= 0.0):
            raise ValueError("lower control bounds must be strictly positive")
        if np.any(self.v1_max < self.v1_min) or np.any(self.v2_max < self.v2_min):
            raise ValueError("upper control bounds must dominate the lower bounds")

    @property
    def dt(self):
        if self.num_steps == 0:
            raise ValueError("time grid has no steps")
        return self.final_time / self.num_steps

    def times(self):
        return np.linspace(0.0, self.final_time, self.num_steps + 1)


@dataclass
class ControlTrajectory:
    """Piecewise-constant controls: column n holds the values on (t_n, t_{n+1}]."""

    v1: np.ndarray   # (n_gamma1, num_steps) total-pressure values
    v2: np.ndarray   # (n_gamma2, num_steps) heat-flux values

    def copy(self):
        return ControlTrajectory(self.v1.copy(), self.v2.copy())

    def is_admissible(self, spec, tol=0.0):
        return (np.all(self.v1 >= spec.v1_min - tol) and np.all(self.v1 <= spec.v1_max + tol)
                and np.all(self.v2 >= spec.v2_min - tol) and np.all(self.v2 <= spec.v2_max + tol))


def zero_controls(spec):
    return ControlTrajectory(
        np.zeros((spec.spaces.gamma1_nodes.size, spec.num_steps)),
        np.zeros((spec.spaces.gamma2_nodes.size, spec.num_steps)),
    )


def constant_controls(spec, v1_value, v2_value):
    c = zero_controls(spec)
    c.v1[:] = v1_value
    c.v2[:] = v2_value
    return c


@dataclass
class State:
    """Solution snapshot at one time level."""

    z: np.ndarray    # velocity coefficients (x block, y block)
    p: np.ndarray    # total-pressure multiplier
    w: np.ndarray    # temperature coefficients
    t: float
    div_residual: float = 0.0


@dataclass
class StateTrajectory:
    """States at every time level 0..num_steps."""

    states: list

    def __len__(self):
        return len(self.states)

    def __getitem__(self, n):
        return self.states[n]

    @property
    def velocities(self):
        return [s.z for s in self.states]

    @property
    def temperatures(self):
        return [s.w for s in self.states]


class Operators:
    """Assembled time-independent operators, reduced to free dofs."""

    def __init__(self, spec):
        s = spec.spaces
        self.spaces = s
        self.mass_w = disc.mass_matrix(s)
        self.stiff_w = disc.stiffness_matrix(s)
        self.mass_v = disc.vector_mass(s)
        self.h1_v = disc.vector_h1(s)
        self.h1_w = disc.scalar_h1(s)
        self.curl = disc.curl_curl_matrix(s)
        self.div = disc.divergence_matrix(s)
        self.buoy = disc.buoyancy_matrix(s, spec.expansion, spec.gravity)
        self.t1 = disc.pressure_boundary_coupling(s)
        self.t2 = disc.heat_boundary_coupling(s)
        self.bmass2 = disc.boundary_mass(s, GAMMA2)
        self.vfree = s.velocity_free
        self.tfree = s.temperature_free
        self.nvf = int(self.vfree.sum())
        self.npr = s.num_pressure_dofs
        self.div_f = self.div[:, self.vfree].tocsr()
        self._coercivity = None

    def coercivity(self):
        if self._coercivity is None:
            self._coercivity = disc.estimate_coercivity(self.spaces)
        return self._coercivity


def build_operators(spec):
    if spec._ops is None:
        spec._ops = Operators(spec)
    return spec._ops


def _lu(matrix, what):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"singular {what} system: {exc}") from exc


def _checked_solve(lu, matrix, rhs, what):
    x = lu.solve(rhs)
    nb = np.linalg.norm(rhs)
    res = np.linalg.norm(matrix @ x - rhs) / max(nb, 1e-300)
    if res > RESIDUAL_TOL:
        # one sweep of iterative refinement before giving up
        x = x + lu.solve(rhs - matrix @ x)
        res = np.linalg.norm(matrix @ x - rhs) / max(nb, 1e-300)
        if res > RESIDUAL_TOL:
            raise SolverError(f"{what} solve stalled at relative residual {res:.3e}")
    return x


def momentum_saddle(spec, ops, z_frozen):
    """Reduced saddle matrix for one step, convection frozen at ``z_frozen``."""
    s = spec.spaces
    conv = disc.rotational_convection_matrix(s, z_frozen, "first")
    k = ops.mass_v / spec.dt + spec.nu * ops.curl + conv
    k_ff = k[ops.vfree][:, ops.vfree]
    return sp.bmat([[k_ff, -ops.div_f.T], [ops.div_f, None]], format="csc")


def temperature_system(spec, ops, z_new):
    s = spec.spaces
    adv = disc.advection_velocity_matrix(s, z_new, skew=True)
    a = ops.mass_w / spec.dt + spec.kappa * ops.stiff_w + adv
    return a[ops.tfree][:, ops.tfree].tocsc()


def project_initial(spec):
    """Initial fields: constrained interpolants, the velocity projected onto
    the discretely divergence-free subspace by one Stokes-type solve."""
    s = spec.spaces
    ops = build_operators(spec)

    w0 = spec.initial_temperature
    if w0 is None:
        w0 = np.zeros(s.num_nodes)
    elif callable(w0):
        w0 = disc.interpolate_scalar(s, w0)
    w0 = disc.apply_temperature_constraints(s, np.asarray(w0, dtype=float))

    z0 = spec.initial_velocity
    if z0 is None:
        return np.zeros(s.num_velocity_dofs), w0
    if callable(z0):
        z0 = disc.interpolate_velocity(s, z0)
    z0 = disc.apply_velocity_constraints(s, np.asarray(z0, dtype=float))
    if not np.any(z0):
        return z0, w0

    m_ff = ops.mass_v[ops.vfree][:, ops.vfree]
    saddle = sp.bmat([[m_ff, -ops.div_f.T], [ops.div_f, None]], format="csc")
    rhs = np.concatenate([(ops.mass_v @ z0)[ops.vfree], np.zeros(ops.npr)])
    lu = _lu(saddle, "initial projection")
    sol = _checked_solve(lu, saddle, rhs, "initial projection")
    z = np.zeros(s.num_velocity_dofs)
    z[ops.vfree] = sol[:ops.nvf]
    return z, w0


def step(spec, state, v1, v2):
    """Advance one implicit Euler step with controls for (t, t + dt]."""
    ops = build_operators(spec)
    s = spec.spaces
    dt = spec.dt
    t_next = state.t + dt

    saddle = momentum_saddle(spec, ops, state.z)
    rhs_m = (disc.pressure_boundary_load(s, v1)
             + ops.mass_v @ state.z / dt
             - ops.buoy @ state.w)
    if spec.forcing_velocity is not None:
        rhs_m = rhs_m + disc.velocity_load(s, spec.forcing_velocity, t_next)
    rhs = np.concatenate([rhs_m[ops.vfree], np.zeros(ops.npr)])
    lu = _lu(saddle, "momentum saddle")
    sol = _checked_solve(lu, saddle, rhs, "momentum saddle")
    z = np.zeros(s.num_velocity_dofs)
    z[ops.vfree] = sol[:ops.nvf]
    p = sol[ops.nvf:]
    divres = float(np.linalg.norm(ops.div_f @ sol[:ops.nvf]) / (1.0 + np.linalg.norm(z)))

    a_ff = temperature_system(spec, ops, z)
    rhs_w = disc.heat_flux_load(s, v2) + ops.mass_w @ state.w / dt
    if spec.forcing_temperature is not None:
        rhs_w = rhs_w + disc.temperature_load(s, spec.forcing_temperature, t_next)
    lu_w = _lu(a_ff, "temperature")
    w_f = _checked_solve(lu_w, a_ff, rhs_w[ops.tfree], "temperature")
    w = np.zeros(s.num_nodes)
    w[ops.tfree] = w_f

    return State(z=z, p=p, w=w, t=t_next, div_residual=divres)


def run(spec, controls):
    """Integrate the state system over all steps for the given controls."""
    if controls.v1.shape != spec.flow_profile.shape:
        raise ValueError("v1 control table does not match the gamma1 grid")
    if controls.v2.shape != spec.heat_profile.shape:
        raise ValueError("v2 control table does not match the gamma2 grid")
    z0, w0 = project_initial(spec)
    states = [State(z=z0, p=np.zeros(spec.spaces.num_pressure_dofs), w=w0, t=0.0)]
    for n in range(spec.num_steps):
        try:
            states.append(step(spec, states[-1], controls.v1[:, n], controls.v2[:, n]))
        except SolverError as exc:
            raise SolverError(f"step {n + 1}: {exc}") from exc
    return StateTrajectory(states)


def evaluate_cost(traj, controls, spec, flux_form=True):
    """Cost of a trajectory/control pair.

    The first term integrates the cost density against the normal velocity on
    gamma1.  The second term integrates the density against the wall heat
    flux on gamma2; by default the normal temperature derivative is replaced
    through the flux boundary condition (dw/dn = -v2 / conductivity), the
    alternative ``flux_form=False`` pairs the density with the temperature
    trace instead.
    """
    if len(traj) != spec.num_steps + 1:
        raise ValueError("trajectory length does not match the time grid")
    if controls.v2.shape != spec.heat_profile.shape:
        raise ValueError("control table does not match the boundary grid")
    if spec.num_steps == 0:
        return 0.0
    ops = build_operators(spec)
    dt = spec.dt
    j = 0.0
    for n in range(1, spec.num_steps + 1):
        r1 = spec.flow_profile[:, n - 1]
        r2 = spec.heat_profile[:, n - 1]
        j += spec.flow_weight * dt * float(r1 @ (ops.t1 @ traj[n].z))
        if flux_form:
            j -= (spec.heat_weight / spec.kappa) * dt * float(
                r2 @ (ops.bmass2 @ controls.v2[:, n - 1]))
        else:
            j += spec.heat_weight * dt * float(r2 @ (ops.t2 @ traj[n].w))
    return j


def energy_report(traj, controls, spec):
    """Per-step margins of the discrete kinetic and thermal energy bounds.

    Both reports compare the accumulated left side (energy plus coercivity
    times dissipation plus buoyancy work) against the right side (initial
    energy plus boundary work); the scheme makes both margins nonnegative up
    to round-off.
    """
    ops = build_operators(spec)
    c1, c1p = ops.coercivity()
    nsteps = spec.num_steps
    dt = spec.dt if nsteps else 0.0
    times = spec.times()

    kin_lhs = np.zeros(nsteps + 1)
    kin_rhs = np.zeros(nsteps + 1)
    th_lhs = np.zeros(nsteps + 1)
    th_rhs = np.zeros(nsteps + 1)
    vel_norm = np.zeros(nsteps + 1)
    temp_norm = np.zeros(nsteps + 1)

    z0, w0 = traj[0].z, traj[0].w
    e0 = 0.5 * float(z0 @ (ops.mass_v @ z0))
    h0 = 0.5 * float(w0 @ (ops.mass_w @ w0))
    kin_lhs[0], kin_rhs[0] = e0, e0
    th_lhs[0], th_rhs[0] = h0, h0
    vel_norm[0] = np.sqrt(2.0 * e0)
    temp_norm[0] = np.sqrt(2.0 * h0)

    # dissipation sums in the L2 norm: the coercivity estimates hold against
    # the full H1 product, so they dominate the L2 bound with slack
    diss_z = work_z = buoy_z = 0.0
    diss_w = work_w = 0.0
    for n in range(1, nsteps + 1):
        z, w = traj[n].z, traj[n].w
        diss_z += dt * float(z @ (ops.mass_v @ z))
        buoy_z += dt * float(z @ (ops.buoy @ traj[n - 1].w))
        work_z += dt * float(controls.v1[:, n - 1] @ (ops.t1 @ z))
        kin_lhs[n] = 0.5 * float(z @ (ops.mass_v @ z)) + spec.nu * c1 * diss_z + buoy_z
        kin_rhs[n] = e0 + work_z
        diss_w += dt * float(w @ (ops.mass_w @ w))
        work_w += dt * float(controls.v2[:, n - 1] @ (ops.t2 @ w))
        th_lhs[n] = 0.5 * float(w @ (ops.mass_w @ w)) + spec.kappa * c1p * diss_w
        th_rhs[n] = h0 + work_w
        vel_norm[n] = np.sqrt(float(z @ (ops.mass_v @ z)))
        temp_norm[n] = np.sqrt(float(w @ (ops.mass_w @ w)))

    return {
        "time": times,
        "kinetic_lhs": kin_lhs,
        "kinetic_rhs": kin_rhs,
        "kinetic_margin": kin_rhs - kin_lhs,
        "thermal_lhs": th_lhs,
        "thermal_rhs": th_rhs,
        "thermal_margin": th_rhs - th_lhs,
        "velocity_norm": vel_norm,
        "temperature_norm": temp_norm,
        "coercivity": (c1, c1p),
    }


def smallness_ratio(spec):
    """Diagnostic ratio of the linearised-solvability smallness condition.

    Values at or below one satisfy the condition
    ``beta |g| (beta |g| + 1) / (nu c1) <= kappa c1' / 4`` with the estimated
    discrete coercivity constants standing in for the continuous ones.
    """
    ops = build_operators(spec)
    c1, c1p = ops.coercivity()
    bgn = spec.expansion * float(np.max(np.abs(spec.gravity)))
    lhs = bgn * (bgn + 1.0) / (spec.nu * c1)
    rhs = spec.kappa * c1p / 4.0
    return lhs / rhs
