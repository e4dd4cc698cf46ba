"""Figure rendering for run reports.

Every report CSV gets a companion PNG: cost/gap histories, energy margins,
boundary-control and switching heatmaps, and final-state snapshots.  Figures
are rendered headless and carry pinned metadata so rewriting a run directory
does not churn bytes.
"""

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE = {"dpi": 130, "metadata": {"Software": "flexctl"}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_history(path, values, ylabel):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(range(len(values)), values, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if ylabel == "duality gap" and np.all(np.asarray(values) > 0):
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    _finish(fig, path)


def plot_energy(path, report):
    fig, axes = plt.subplots(1, 2, figsize=(8.2, 3.2))
    t = report["time"]
    axes[0].plot(t, report["kinetic_margin"], label="kinetic")
    axes[0].plot(t, report["thermal_margin"], label="thermal")
    axes[0].set_xlabel("time")
    axes[0].set_ylabel("inequality margin")
    axes[0].legend()
    axes[0].grid(alpha=0.3)
    axes[1].plot(t, report["velocity_norm"], label="|velocity|")
    axes[1].plot(t, report["temperature_norm"], label="|temperature|")
    axes[1].set_xlabel("time")
    axes[1].set_ylabel("L2 norm")
    axes[1].legend()
    axes[1].grid(alpha=0.3)
    _finish(fig, path)


def _boundary_heatmap(ax, table, title):
    if table.size == 0:
        ax.set_axis_off()
        ax.set_title(f"{title} (empty)")
        return
    im = ax.imshow(table, aspect="auto", origin="lower", cmap="viridis",
                   interpolation="nearest")
    ax.set_xlabel("time step")
    ax.set_ylabel("boundary node")
    ax.set_title(title)
    plt.colorbar(im, ax=ax, shrink=0.9)


def plot_boundary_tables(path, v1, v2, titles):
    fig, axes = plt.subplots(1, 2, figsize=(8.6, 3.4))
    _boundary_heatmap(axes[0], v1, titles[0])
    _boundary_heatmap(axes[1], v2, titles[1])
    _finish(fig, path)


def plot_state(path, spaces, state):
    from .outputs import _subtriangles, pressure_on_nodes
    import matplotlib.tri as mtri

    n2 = spaces.num_nodes
    tri = mtri.Triangulation(spaces.nodes[:, 0], spaces.nodes[:, 1],
                             _subtriangles(spaces))
    fig, axes = plt.subplots(1, 3, figsize=(11.5, 3.4))

    speed = np.hypot(state.z[:n2], state.z[n2:])
    tc = axes[0].tripcolor(tri, speed, shading="gouraud", cmap="magma")
    stride = max(1, n2 // 400)
    sel = np.arange(0, n2, stride)
    axes[0].quiver(spaces.nodes[sel, 0], spaces.nodes[sel, 1],
                   state.z[:n2][sel], state.z[n2:][sel],
                   color="white", scale_units="xy", width=0.004)
    axes[0].set_title(f"velocity, t={state.t:.3g}")
    plt.colorbar(tc, ax=axes[0], shrink=0.9)

    tc = axes[1].tripcolor(tri, pressure_on_nodes(spaces, state.p),
                           shading="gouraud", cmap="coolwarm")
    axes[1].set_title("total pressure")
    plt.colorbar(tc, ax=axes[1], shrink=0.9)

    tc = axes[2].tripcolor(tri, state.w, shading="gouraud", cmap="inferno")
    axes[2].set_title("temperature")
    plt.colorbar(tc, ax=axes[2], shrink=0.9)

    for ax in axes:
        ax.set_aspect("equal")
    _finish(fig, path)
