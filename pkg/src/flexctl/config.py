"""Run configuration: TOML parsing, validation and lowering to a ProblemSpec.

Every block has documented defaults, so a minimal file (or an empty one)
parses to the default channel problem: a unit square with pressure-controlled
left/right sides and flux-controlled walls.  Unknown keys are rejected with
the offending path, and invariant violations name the configuration entry at
fault.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:      # Python < 3.11
    import tomli as tomllib

from . import discretization as disc
from .forward import ControlTrajectory, ProblemSpec
from .mesh import GAMMA1, GAMMA2, SIDES, build_rectangle_mesh


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending path."""


DEFAULTS = {
    "mesh": {"nx": 8, "ny": 8, "lx": 1.0, "ly": 1.0,
             "left": "gamma1", "right": "gamma1",
             "bottom": "gamma2", "top": "gamma2"},
    "physics": {"viscosity": 1.0, "conductivity": 1.0,
                "expansion": 0.05, "gravity": [0.0, -1.0]},
    "time": {"final_time": 0.5, "num_steps": 10},
    # the flow cost density must not cover all of gamma1 uniformly: the net
    # boundary flux of a divergence-free field vanishes, which would zero out
    # the flow term; the default observes the left side only
    "cost": {"flow_weight": 1.0, "heat_weight": 1.0,
             "flow_profile": {"type": "segment", "side": "left",
                              "lo": 0.0, "hi": 1.0, "value": 1.0},
             "heat_profile": 1.0},
    "bounds": {"v1_min": 0.5, "v1_max": 2.0, "v2_min": 0.1, "v2_max": 1.0},
    "initial": {"velocity": "zero", "temperature": "zero"},
    "controls": {"v1": "midpoint", "v2": "midpoint"},
    "optimizer": {"method": "conditional-gradient", "gap_tol": 1e-6,
                  "max_iter": 50, "start": "midpoint"},
    "output": {"directory": "out", "figures": True, "vtk_stride": 1,
               "precision": 17},
}

_PRESET_KEYS = {"type", "value", "side", "lo", "hi", "background",
                "path", "amplitude", "center", "width"}


@dataclass
class RunConfig:
    """Validated configuration; block contents mirror the TOML layout."""

    mesh: dict = field(default_factory=dict)
    physics: dict = field(default_factory=dict)
    time: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    controls: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)


def _merge(block, defaults, path):
    out = dict(defaults)
    for key, val in block.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}: unknown key")
        out[key] = val
    return out


def _check_table(value, path):
    if isinstance(value, dict):
        for key in value:
            if key not in _PRESET_KEYS:
                raise ConfigError(f"{path}.{key}: unknown key")
    return value


def parse_config(text):
    """Parse TOML text into a validated RunConfig with defaults filled in."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc

    for block in raw:
        if block not in DEFAULTS:
            raise ConfigError(f"{block}: unknown block")
        if not isinstance(raw[block], dict):
            raise ConfigError(f"{block}: must be a table")

    cfg = RunConfig()
    for name in DEFAULTS:
        merged = _merge(raw.get(name, {}), DEFAULTS[name], name)
        setattr(cfg, name, merged)

    m = cfg.mesh
    if int(m["nx"]) != m["nx"] or int(m["ny"]) != m["ny"] or m["nx"] < 1 or m["ny"] < 1:
        raise ConfigError("mesh.nx/mesh.ny: must be integers >= 1")
    if m["lx"] <= 0 or m["ly"] <= 0:
        raise ConfigError("mesh.lx/mesh.ly: must be positive")
    for side in SIDES:
        if m[side] not in (GAMMA1, GAMMA2):
            raise ConfigError(f"mesh.{side}: must be 'gamma1' or 'gamma2'")
    tags = {m[s] for s in SIDES}
    for tag in (GAMMA1, GAMMA2):
        if tag not in tags:
            raise ConfigError(f"mesh: boundary part {tag} is empty; "
                              f"assign at least one side to it")

    p = cfg.physics
    if p["viscosity"] <= 0:
        raise ConfigError("physics.viscosity: must be positive")
    if p["conductivity"] <= 0:
        raise ConfigError("physics.conductivity: must be positive")
    if p["expansion"] < 0:
        raise ConfigError("physics.expansion: must be nonnegative")
    g = p["gravity"]
    if not (isinstance(g, (list, tuple)) and len(g) == 2):
        raise ConfigError("physics.gravity: must be a 2-vector")

    t = cfg.time
    if t["final_time"] <= 0:
        raise ConfigError("time.final_time: must be positive")
    if int(t["num_steps"]) != t["num_steps"] or t["num_steps"] < 0:
        raise ConfigError("time.num_steps: must be a nonnegative integer")

    c = cfg.cost
    if c["flow_weight"] < 0 or c["heat_weight"] < 0:
        raise ConfigError("cost.flow_weight/heat_weight: must be nonnegative")
    _check_table(c["flow_profile"], "cost.flow_profile")
    _check_table(c["heat_profile"], "cost.heat_profile")

    b = cfg.bounds
    for key in ("v1_min", "v1_max", "v2_min", "v2_max"):
        _check_table(b[key], f"bounds.{key}")
    for key in ("v1_min", "v2_min"):
        if isinstance(b[key], (int, float)) and b[key] <= 0:
            raise ConfigError(f"bounds.{key}: must be strictly positive "
                              f"(admissible controls satisfy 0 < lower <= upper)")

    o = cfg.optimizer
    if o["method"] not in ("conditional-gradient", "projected-gradient"):
        raise ConfigError("optimizer.method: must be 'conditional-gradient' "
                          "or 'projected-gradient'")
    if o["gap_tol"] <= 0:
        raise ConfigError("optimizer.gap_tol: must be positive")
    if int(o["max_iter"]) != o["max_iter"] or o["max_iter"] < 0:
        raise ConfigError("optimizer.max_iter: must be a nonnegative integer")

    if int(cfg.output["vtk_stride"]) != cfg.output["vtk_stride"] or cfg.output["vtk_stride"] < 1:
        raise ConfigError("output.vtk_stride: must be an integer >= 1")
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def default_config():
    return parse_config("")


# ---------------------------------------------------------------------------
# lowering boundary presets to node-by-step tables
# ---------------------------------------------------------------------------

def _side_of_nodes(spaces, side):
    lx, ly = spaces.mesh.domain_lengths
    x, y = spaces.nodes[:, 0], spaces.nodes[:, 1]
    tol = 1e-12 * max(lx, ly)
    return {
        "left": np.abs(x) <= tol,
        "right": np.abs(x - lx) <= tol,
        "bottom": np.abs(y) <= tol,
        "top": np.abs(y - ly) <= tol,
    }[side]


def _side_fraction(spaces, side):
    lx, ly = spaces.mesh.domain_lengths
    if side in ("left", "right"):
        return spaces.nodes[:, 1] / ly
    return spaces.nodes[:, 0] / lx


def read_boundary_csv(path, node_ids, times, column=None):
    """Read a node-by-step table from a CSV in the control-file schema."""
    table = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if column is not None and row.get("control", column) != column:
                continue
            table[(int(row["node_id"]), round(float(row["time"]), 12))] = float(row["value"])
    out = np.empty((len(node_ids), len(times)))
    for j, t in enumerate(times):
        for i, nid in enumerate(node_ids):
            key = (int(nid), round(float(t), 12))
            if key not in table:
                raise ConfigError(f"{path}: missing value for node {nid} at time {t}")
            out[i, j] = table[key]
    return out


def lower_boundary_table(preset, spaces, tag, times, path_name):
    """Evaluate a boundary preset to a (nodes, steps) array.

    Presets: a bare number (constant), ``{type="constant", value=...}``,
    ``{type="segment", side=..., lo=..., hi=..., value=..., background=...}``
    for an indicator of a sub-segment, or ``{type="csv", path=...}``.
    """
    nodes = spaces.boundary_nodes(tag)
    shape = (nodes.size, len(times))
    if isinstance(preset, (int, float)):
        return np.full(shape, float(preset))
    if not isinstance(preset, dict) or "type" not in preset:
        raise ConfigError(f"{path_name}: expected a number or a preset table")
    kind = preset["type"]
    if kind == "constant":
        return np.full(shape, float(preset.get("value", 0.0)))
    if kind == "segment":
        side = preset.get("side")
        if side not in SIDES:
            raise ConfigError(f"{path_name}.side: must be one of {SIDES}")
        lo = float(preset.get("lo", 0.0))
        hi = float(preset.get("hi", 1.0))
        value = float(preset.get("value", 1.0))
        background = float(preset.get("background", 0.0))
        on_side = _side_of_nodes(spaces, side)[nodes]
        frac = _side_fraction(spaces, side)[nodes]
        mask = on_side & (frac >= lo - 1e-12) & (frac <= hi + 1e-12)
        out = np.full(shape, background)
        out[mask, :] = value
        return out
    if kind == "csv":
        if "path" not in preset:
            raise ConfigError(f"{path_name}.path: required for csv presets")
        return read_boundary_csv(preset["path"], nodes, times)
    raise ConfigError(f"{path_name}.type: unknown preset type {kind!r}")


def _initial_velocity(preset):
    if preset == "zero":
        return None
    if isinstance(preset, dict) and preset.get("type") == "vortex":
        amp = float(preset.get("amplitude", 1.0))
        cx, cy = preset.get("center", [0.5, 0.5])
        width = float(preset.get("width", 0.2))

        def fn(x, y):
            r2 = ((x - cx) ** 2 + (y - cy) ** 2) / width ** 2
            bump = amp * np.exp(-r2)
            return -(y - cy) * bump, (x - cx) * bump

        return fn
    raise ConfigError("initial.velocity: must be 'zero' or a vortex preset")


def _initial_temperature(preset):
    if preset == "zero":
        return None
    if isinstance(preset, dict) and preset.get("type") == "gaussian":
        amp = float(preset.get("amplitude", 1.0))
        cx, cy = preset.get("center", [0.5, 0.5])
        width = float(preset.get("width", 0.2))

        def fn(x, y):
            return amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width ** 2)

        return fn
    raise ConfigError("initial.temperature: must be 'zero' or a gaussian preset")


def build_problem(cfg):
    """Lower a RunConfig to mesh, spaces and a ProblemSpec."""
    m = cfg.mesh
    try:
        mesh = build_rectangle_mesh(
            int(m["nx"]), int(m["ny"]), (m["lx"], m["ly"]),
            {side: m[side] for side in SIDES})
    except ValueError as exc:
        raise ConfigError(f"mesh: {exc}") from exc
    spaces = disc.build_spaces(mesh)

    nsteps = int(cfg.time["num_steps"])
    times = [(n + 1) * cfg.time["final_time"] / max(nsteps, 1) for n in range(nsteps)]

    def table(preset, tag, name):
        return lower_boundary_table(preset, spaces, tag, times, name)

    v1_min = table(cfg.bounds["v1_min"], GAMMA1, "bounds.v1_min")
    v1_max = table(cfg.bounds["v1_max"], GAMMA1, "bounds.v1_max")
    v2_min = table(cfg.bounds["v2_min"], GAMMA2, "bounds.v2_min")
    v2_max = table(cfg.bounds["v2_max"], GAMMA2, "bounds.v2_max")
    if np.any(v1_min <= 0):
        raise ConfigError("bounds.v1_min: must be strictly positive")
    if np.any(v2_min <= 0):
        raise ConfigError("bounds.v2_min: must be strictly positive")
    if np.any(v1_max < v1_min):
        raise ConfigError("bounds.v1_max: must dominate bounds.v1_min")
    if np.any(v2_max < v2_min):
        raise ConfigError("bounds.v2_max: must dominate bounds.v2_min")

    try:
        spec = ProblemSpec(
            spaces=spaces,
            nu=float(cfg.physics["viscosity"]),
            kappa=float(cfg.physics["conductivity"]),
            expansion=float(cfg.physics["expansion"]),
            gravity=np.asarray(cfg.physics["gravity"], dtype=float),
            flow_weight=float(cfg.cost["flow_weight"]),
            heat_weight=float(cfg.cost["heat_weight"]),
            flow_profile=table(cfg.cost["flow_profile"], GAMMA1, "cost.flow_profile"),
            heat_profile=table(cfg.cost["heat_profile"], GAMMA2, "cost.heat_profile"),
            v1_min=v1_min, v1_max=v1_max, v2_min=v2_min, v2_max=v2_max,
            final_time=float(cfg.time["final_time"]),
            num_steps=nsteps,
            initial_velocity=_initial_velocity(cfg.initial["velocity"]),
            initial_temperature=_initial_temperature(cfg.initial["temperature"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def control_preset(cfg, spec):
    """Controls for simulate mode from the ``controls`` block."""
    def lower(preset, tag, lo, hi, name):
        if preset == "midpoint":
            return 0.5 * (lo + hi)
        if preset == "lower":
            return lo.copy()
        if preset == "upper":
            return hi.copy()
        return lower_boundary_table(preset, spec.spaces, tag,
                                    [(n + 1) * spec.dt for n in range(spec.num_steps)],
                                    name)

    return ControlTrajectory(
        lower(cfg.controls["v1"], GAMMA1, spec.v1_min, spec.v1_max, "controls.v1"),
        lower(cfg.controls["v2"], GAMMA2, spec.v2_min, spec.v2_max, "controls.v2"),
    )


def initial_control(cfg, spec):
    """Optimiser start control from the ``optimizer.start`` entry."""
    start = cfg.optimizer["start"]
    if start == "midpoint":
        return ControlTrajectory(0.5 * (spec.v1_min + spec.v1_max),
                                 0.5 * (spec.v2_min + spec.v2_max))
    if start == "lower":
        return ControlTrajectory(spec.v1_min.copy(), spec.v2_min.copy())
    if start == "upper":
        return ControlTrajectory(spec.v1_max.copy(), spec.v2_max.copy())
    raise ConfigError("optimizer.start: must be 'midpoint', 'lower' or 'upper'")
