"""Structured triangulations of axis-aligned rectangles with a two-part boundary.

The computational domain is a rectangle (0, Lx) x (0, Ly) whose boundary is
partitioned into a pressure-controlled part (tag ``gamma1``) and a wall part
carrying a heat-flux control (tag ``gamma2``).  Each grid cell is split into
two triangles along the same diagonal, so the midpoints used by quadratic
elements line up with a uniformly refined grid.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi

GAMMA1 = "gamma1"
GAMMA2 = "gamma2"

SIDES = ("left", "right", "bottom", "top")

#: left/right carry the pressure control, bottom/top the heat-flux control
DEFAULT_ASSIGNMENT = {
    "left": GAMMA1,
    "right": GAMMA1,
    "bottom": GAMMA2,
    "top": GAMMA2,
}


@dataclass
class Mesh:
    """Triangulated rectangle with tagged, oriented boundary edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
        Vertex coordinates.
    triangles : (nt, 3) int array
        Vertex indices per triangle, counterclockwise.
    edge_vertices : (ne, 2) int array
        Endpoints of each boundary edge, ordered so the domain lies on the
        left of the edge direction.
    edge_tags : (ne,) str array
        ``gamma1`` or ``gamma2`` per boundary edge.
    edge_normals : (ne, 2) float array
        Outward unit normal per boundary edge.
    edge_triangles : (ne,) int array
        Index of the unique triangle owning each boundary edge.
    domain_lengths : (2,) float array
        Side lengths (Lx, Ly).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edge_vertices: np.ndarray
    edge_tags: np.ndarray
    edge_normals: np.ndarray
    edge_triangles: np.ndarray
    domain_lengths: np.ndarray
    grid_shape: tuple = field(default=None)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_boundary_edges(self):
        return self.edge_vertices.shape[0]

    def triangle_areas(self):
        """Signed areas, positive for counterclockwise triangles."""
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges_with_tag(self, tag):
        """Indices of boundary edges carrying ``tag``."""
        return np.flatnonzero(self.edge_tags == tag)


def build_rectangle_mesh(nx, ny, lengths=(1.0, 1.0), boundary_assignment=None):
    """Triangulate (0, Lx) x (0, Ly) on an nx-by-ny structured grid.

    Parameters
    ----------
    nx, ny : int
        Cells per direction, at least 1.
    lengths : (float, float)
        Rectangle side lengths, both positive.
    boundary_assignment : dict, optional
        Maps a subset of ``left/right/bottom/top`` to ``gamma1``/``gamma2``;
        unspecified sides keep the default (left/right pressure-controlled,
        bottom/top flux-controlled).  Each tag must own at least one side.

    Returns
    -------
    Mesh
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"grid must have nx, ny >= 1, got ({nx}, {ny})")
    nx, ny = int(nx), int(ny)
    lx, ly = float(lengths[0]), float(lengths[1])
    if lx <= 0.0 or ly <= 0.0:
        raise ValueError(f"domain lengths must be positive, got ({lx}, {ly})")

    assignment = dict(DEFAULT_ASSIGNMENT)
    if boundary_assignment:
        for side, tag in boundary_assignment.items():
            if side not in SIDES:
                raise ValueError(f"unknown boundary side {side!r}")
            if tag not in (GAMMA1, GAMMA2):
                raise ValueError(f"unknown boundary tag {tag!r} for side {side!r}")
            assignment[side] = tag
    for tag in (GAMMA1, GAMMA2):
        if tag not in assignment.values():
            raise ValueError(f"boundary part {tag} is empty: every side is assigned "
                             f"to the other part; assign at least one side to {tag}")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    # two CCW triangles per cell, all cut along the same (lower-left to
    # upper-right) diagonal
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    t = 0
    for j in range(ny):
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            triangles[t] = (a, b, c)
            triangles[t + 1] = (a, c, d)
            t += 2

    def lower(i, j):
        return 2 * (j * nx + i)

    def upper(i, j):
        return 2 * (j * nx + i) + 1

    edge_v, edge_tag, edge_tri = [], [], []
    for i in range(nx):  # bottom, traversed with the domain on the left
        edge_v.append((vid(i, 0), vid(i + 1, 0)))
        edge_tag.append(assignment["bottom"])
        edge_tri.append(lower(i, 0))
    for j in range(ny):  # right
        edge_v.append((vid(nx, j), vid(nx, j + 1)))
        edge_tag.append(assignment["right"])
        edge_tri.append(lower(nx - 1, j))
    for i in range(nx - 1, -1, -1):  # top
        edge_v.append((vid(i + 1, ny), vid(i, ny)))
        edge_tag.append(assignment["top"])
        edge_tri.append(upper(i, ny - 1))
    for j in range(ny - 1, -1, -1):  # left
        edge_v.append((vid(0, j + 1), vid(0, j)))
        edge_tag.append(assignment["left"])
        edge_tri.append(upper(0, j))

    edge_vertices = np.asarray(edge_v, dtype=np.int64)
    tangents = vertices[edge_vertices[:, 1]] - vertices[edge_vertices[:, 0]]
    tangents /= np.linalg.norm(tangents, axis=1)[:, None]
    # domain on the left of the traversal direction puts the normal on the right
    edge_normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])

    mesh = Mesh(
        vertices=vertices,
        triangles=triangles,
        edge_vertices=edge_vertices,
        edge_tags=np.asarray(edge_tag, dtype=object),
        edge_normals=edge_normals,
        edge_triangles=np.asarray(edge_tri, dtype=np.int64),
        domain_lengths=np.array([lx, ly]),
        grid_shape=(nx, ny),
    )
    areas = mesh.triangle_areas()
    if np.any(areas <= 0.0):
        raise ValueError("triangulation produced non-positive triangle areas")
    return mesh


def outward_normal(mesh, edge_index):
    """Outward unit normal of boundary edge ``edge_index``."""
    ne = mesh.num_boundary_edges
    if not 0 <= edge_index < ne:
        raise IndexError(f"boundary edge index {edge_index} out of range [0, {ne})")
    return mesh.edge_normals[edge_index].copy()


@dataclass
class QuadratureRule:
    """Quadrature on the reference triangle {x, y >= 0, x + y <= 1}.

    ``points`` holds barycentric coordinates (1 - x - y, x, y) per node and
    ``weights`` carries the reference-area measure, so the weights of any rule
    sum to 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def xy(self):
        """Cartesian reference coordinates of the nodes."""
        return self.points[:, 1:3]


# degree-5 symmetric 7-point rule (weights normalised to unit total)
_D5_A1, _D5_B1, _D5_W1 = 0.0597158717897698, 0.4701420641051151, 0.1323941527885062
_D5_A2, _D5_B2, _D5_W2 = 0.7974269853530873, 0.1012865073234563, 0.1259391805448271

_MAX_DEGREE = 20


def triangle_quadrature(degree):
    """Rule exact for bivariate polynomials up to ``degree`` on the reference
    triangle.

    Degrees up to 5 use the symmetric 7-point rule; higher degrees fall back
    to a conical-product rule.  Supported degrees are 1..20.
    """
    if int(degree) != degree or not 1 <= degree <= _MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}; supported 1..{_MAX_DEGREE}")
    degree = int(degree)
    if degree <= 5:
        pts = [(1 / 3, 1 / 3, 1 / 3)]
        wts = [0.225]
        for a, b, w in ((_D5_A1, _D5_B1, _D5_W1), (_D5_A2, _D5_B2, _D5_W2)):
            pts += [(a, b, b), (b, a, b), (b, b, a)]
            wts += [w, w, w]
        points = np.asarray(pts)
        weights = 0.5 * np.asarray(wts)
        return QuadratureRule(points=points, weights=weights, degree=5)

    # conical product: Gauss-Jacobi(1,0) in x against Gauss-Legendre in the
    # collapsed direction; k-point tensor is exact for total degree 2k - 1
    k = (degree + 2) // 2
    xj, wj = roots_jacobi(k, 1.0, 0.0)
    xi = 0.5 * (xj + 1.0)          # nodes in (0, 1)
    wi = 0.25 * wj                 # absorbs the (1 - x) weight and the maps
    yl, wl = np.polynomial.legendre.leggauss(k)
    eta = 0.5 * (yl + 1.0)
    weta = 0.5 * wl

    X = np.repeat(xi, k)
    Y = np.tile(eta, k) * (1.0 - X)
    W = np.repeat(wi, k) * np.tile(weta, k)
    points = np.column_stack([1.0 - X - Y, X, Y])
    return QuadratureRule(points=points, weights=W, degree=2 * k - 1)


def edge_quadrature(npoints=3):
    """Gauss-Legendre nodes/weights on [0, 1]; ``npoints`` points integrate
    polynomials up to degree 2 npoints - 1 exactly."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w
