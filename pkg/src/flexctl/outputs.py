"""Deterministic serialisation of fields, trajectories and reports.

Field snapshots use legacy ASCII VTK unstructured grids over the quadratic
nodes (each triangle split into four subtriangles); time series and boundary
tables use CSV with a header row.  All floats print with 17 significant
digits so rewriting the same artifacts is byte-identical and values
round-trip exactly.
"""

import csv
import os

import numpy as np

from .forward import ControlTrajectory
from .mesh import GAMMA1, GAMMA2

PRECISION = 17


def _fmt(x):
    return f"{float(x):.{PRECISION - 1}e}"


def _subtriangles(spaces):
    """Split every quadratic triangle into four vertex-level cells."""
    t = spaces.tri_nodes
    return np.vstack([
        t[:, [0, 3, 5]], t[:, [1, 4, 3]], t[:, [2, 5, 4]], t[:, [3, 4, 5]],
    ])


def pressure_on_nodes(spaces, p):
    """Linear pressure extended to the quadratic nodes by edge averaging."""
    out = np.empty(spaces.num_nodes)
    nv = spaces.mesh.num_vertices
    out[:nv] = p
    parents = spaces.midpoint_parents
    out[nv:] = 0.5 * (p[parents[:, 0]] + p[parents[:, 1]])
    return out


def write_vtk(path, spaces, point_data):
    """Write scalar/vector point data over the quadratic nodes.

    ``point_data`` maps array names to flat arrays: length n2 for scalars,
    2*n2 for velocity-layout vectors (padded with a zero third component).
    """
    n2 = spaces.num_nodes
    cells = _subtriangles(spaces)
    lines = [
        "# vtk DataFile Version 3.0",
        "flexctl field snapshot",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n2} double",
    ]
    for x, y in spaces.nodes:
        lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(0.0)}")
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    for a, b, c in cells:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {len(cells)}")
    lines.extend(["5"] * len(cells))
    lines.append(f"POINT_DATA {n2}")
    for name, values in point_data.items():
        values = np.asarray(values, dtype=float)
        if values.size == 2 * n2:
            lines.append(f"VECTORS {name} double")
            for i in range(n2):
                lines.append(f"{_fmt(values[i])} {_fmt(values[n2 + i])} {_fmt(0.0)}")
        elif values.size == n2:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in values)
        else:
            raise ValueError(f"point data {name!r} has incompatible size {values.size}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_state_vtk(path, spaces, state):
    write_vtk(path, spaces, {
        "velocity": state.z,
        "total_pressure": pressure_on_nodes(spaces, state.p),
        "temperature": state.w,
    })


def write_adjoint_vtk(path, spaces, p, q):
    write_vtk(path, spaces, {
        "adjoint_velocity": p,
        "adjoint_temperature": q,
    })


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _boundary_rows(label, spaces, nodes, times, table):
    rows = []
    for j, t in enumerate(times):
        for i, nid in enumerate(nodes):
            x, y = spaces.nodes[nid]
            rows.append([label, _fmt(t), int(nid), _fmt(x), _fmt(y),
                         _fmt(table[i, j])])
    return rows


def write_controls_csv(path, spaces, spec, controls):
    """Both boundary controls as node-by-step rows.

    The leading ``control`` column disambiguates the two boundary parts
    (corner nodes can carry one value per part); the remaining columns follow
    the time, node_id, x, y, value schema.
    """
    times = [(n + 1) * spec.dt for n in range(spec.num_steps)]
    rows = (_boundary_rows("v1", spaces, spaces.gamma1_nodes, times, controls.v1)
            + _boundary_rows("v2", spaces, spaces.gamma2_nodes, times, controls.v2))
    _write_rows(path, ["control", "time", "node_id", "x", "y", "value"], rows)


def read_controls_csv(path, spaces, spec):
    """Inverse of :func:`write_controls_csv`."""
    times = [(n + 1) * spec.dt for n in range(spec.num_steps)]
    tables = {"v1": {}, "v2": {}}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            tables[row["control"]][(int(row["node_id"]),
                                    round(float(row["time"]), 12))] = float(row["value"])
    v1 = np.empty((spaces.gamma1_nodes.size, spec.num_steps))
    v2 = np.empty((spaces.gamma2_nodes.size, spec.num_steps))
    for j, t in enumerate(times):
        key_t = round(float(t), 12)
        for i, nid in enumerate(spaces.gamma1_nodes):
            v1[i, j] = tables["v1"][(int(nid), key_t)]
        for i, nid in enumerate(spaces.gamma2_nodes):
            v2[i, j] = tables["v2"][(int(nid), key_t)]
    return ControlTrajectory(v1, v2)


def write_switching_csv(path, spaces, spec, fields, label_prefix="sigma"):
    times = [(n + 1) * spec.dt for n in range(spec.num_steps)]
    rows = (_boundary_rows(f"{label_prefix}1", spaces, spaces.gamma1_nodes,
                           times, fields.sigma1)
            + _boundary_rows(f"{label_prefix}2", spaces, spaces.gamma2_nodes,
                             times, fields.sigma2))
    _write_rows(path, ["control", "time", "node_id", "x", "y", "value"], rows)


def write_history_csv(path, values, column):
    _write_rows(path, ["iteration", column],
                [[i, _fmt(v)] for i, v in enumerate(values)])


def write_energy_csv(path, report):
    keys = ["time", "kinetic_lhs", "kinetic_rhs", "kinetic_margin",
            "thermal_lhs", "thermal_rhs", "thermal_margin",
            "velocity_norm", "temperature_norm"]
    rows = []
    for n in range(len(report["time"])):
        rows.append([_fmt(report[k][n]) for k in keys])
    _write_rows(path, keys, rows)


def write_verify_csv(path, results):
    rows = [[r.name, "pass" if r.passed else ("warn" if not r.gate else "fail"),
             _fmt(r.value), _fmt(r.threshold), r.comparator]
            for r in results]
    _write_rows(path, ["check", "status", "value", "threshold", "comparator"], rows)


def write_summary_csv(path, entries):
    _write_rows(path, ["key", "value"],
                [[k, v if isinstance(v, str) else _fmt(v)] for k, v in entries])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
