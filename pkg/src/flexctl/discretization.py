"""Discrete function spaces and form assembly on triangulated rectangles.

Velocity uses vector quadratic (P2) nodal elements, pressure linear (P1),
temperature scalar quadratic (P2); the pair is inf-sup stable so the
incompressibility constraint can be carried by a total-pressure Lagrange
multiplier.  Convection is assembled in rotational form
``(rot u) x u`` and temperature advection in skew-symmetrised form, which
makes the energy identities of the trilinear forms hold at machine
precision.

Essential constraints (all homogeneous):
  * velocity: tangential component zero on gamma1, both components zero on
    gamma2 (corner nodes inherit the union, i.e. the full constraint);
  * temperature: zero on gamma1;
  * pressure: unconstrained.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import GAMMA1, GAMMA2, edge_quadrature, triangle_quadrature

ASSEMBLY_DEGREE = 5   # exact for every implemented form on quadratic fields
EDGE_POINTS = 3       # Gauss points per boundary edge, exact to degree 5

VELOCITY = "velocity"
PRESSURE = "pressure"
TEMPERATURE = "temperature"


@dataclass
class Field:
    """Coefficient vector over one of the discrete spaces."""

    space: str
    values: np.ndarray

    def copy(self):
        return Field(self.space, self.values.copy())


def _values(u, space, size):
    """Unwrap a Field or bare array, checking space tag and length."""
    if isinstance(u, Field):
        if u.space != space:
            raise ValueError(f"expected a {space} field, got {u.space}")
        u = u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (size,):
        raise ValueError(f"{space} coefficient vector must have shape ({size},), "
                         f"got {u.shape}")
    return u


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------

def _p2_basis(bary):
    """P2 shape functions at barycentric points; returns (6, nq)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])


def _p2_grad(bary):
    """Reference gradients of the P2 shape functions; returns (6, nq, 2)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    nq = bary.shape[0]
    g = np.zeros((6, nq, 2))
    for i in range(3):
        g[i] = (4 * bary[:, i] - 1)[:, None] * dl[i]
    pairs = ((0, 1), (1, 2), (2, 0))
    lam = (l0, l1, l2)
    for k, (a, b) in enumerate(pairs):
        g[3 + k] = 4 * (lam[a][:, None] * dl[b] + lam[b][:, None] * dl[a])
    return g


def _p1_basis(bary):
    return bary.T.copy()   # (3, nq)


class ElementData:
    """Per-element geometry and basis tables for one quadrature degree."""

    def __init__(self, mesh, tri_nodes, degree):
        rule = triangle_quadrature(degree)
        self.qw = rule.weights
        self.p2 = _p2_basis(rule.points)
        self.p1 = _p1_basis(rule.points)
        p2g = _p2_grad(rule.points)

        pts = mesh.vertices[mesh.triangles]          # (nt, 3, 2)
        j1 = pts[:, 1] - pts[:, 0]
        j2 = pts[:, 2] - pts[:, 0]
        self.detJ = j1[:, 0] * j2[:, 1] - j1[:, 1] * j2[:, 0]
        inv_jt = np.empty((len(self.detJ), 2, 2))
        inv_jt[:, 0, 0] = j2[:, 1]
        inv_jt[:, 0, 1] = -j1[:, 1]
        inv_jt[:, 1, 0] = -j2[:, 0]
        inv_jt[:, 1, 1] = j1[:, 0]
        inv_jt /= self.detJ[:, None, None]

        # physical gradients: (nt, 6, nq)
        self.gx = np.einsum("ea,iqa->eiq", inv_jt[:, 0, :], p2g)
        self.gy = np.einsum("ea,iqa->eiq", inv_jt[:, 1, :], p2g)

        xy = rule.xy
        self.qx = pts[:, 0, 0:1] + np.outer(j1[:, 0], xy[:, 0]) + np.outer(j2[:, 0], xy[:, 1])
        self.qy = pts[:, 0, 1:2] + np.outer(j1[:, 1], xy[:, 0]) + np.outer(j2[:, 1], xy[:, 1])


@dataclass
class SpaceSet:
    """Degree-of-freedom maps, constraint masks and boundary node lists."""

    mesh: object
    nodes: np.ndarray            # (n2, 2) quadratic node coordinates
    tri_nodes: np.ndarray        # (nt, 6) quadratic connectivity
    velocity_free: np.ndarray    # bool mask over 2*n2 dofs (x block, y block)
    temperature_free: np.ndarray # bool mask over n2 dofs
    gamma1_nodes: np.ndarray     # sorted node ids on gamma1 edges
    gamma2_nodes: np.ndarray
    gamma1_normals: np.ndarray   # per gamma1 node, mean of adjacent edge normals
    edge_nodes: np.ndarray       # (ne, 3): endpoint, midpoint, endpoint per boundary edge
    midpoint_parents: np.ndarray # (n2 - nv, 2): endpoint vertices per midside node
    _edata: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_velocity_dofs(self):
        return 2 * self.num_nodes

    @property
    def num_pressure_dofs(self):
        return self.mesh.num_vertices

    def element_data(self, degree=ASSEMBLY_DEGREE):
        if degree not in self._edata:
            self._edata[degree] = ElementData(self.mesh, self.tri_nodes, degree)
        return self._edata[degree]

    def boundary_nodes(self, tag):
        return self.gamma1_nodes if tag == GAMMA1 else self.gamma2_nodes


def build_spaces(mesh):
    """Construct the quadratic/linear space set over ``mesh``."""
    nv = mesh.num_vertices
    tris = mesh.triangles
    nt = tris.shape[0]

    mid_of = {}
    tri_nodes = np.empty((nt, 6), dtype=np.int64)
    mid_coords = []
    mid_parents = []
    next_id = nv
    for e in range(nt):
        a, b, c = tris[e]
        tri_nodes[e, :3] = (a, b, c)
        for k, (u, v) in enumerate(((a, b), (b, c), (c, a))):
            key = (u, v) if u < v else (v, u)
            m = mid_of.get(key)
            if m is None:
                m = next_id
                mid_of[key] = m
                mid_coords.append(0.5 * (mesh.vertices[u] + mesh.vertices[v]))
                mid_parents.append(key)
                next_id += 1
            tri_nodes[e, 3 + k] = m
    nodes = np.vstack([mesh.vertices, np.asarray(mid_coords)])
    n2 = nodes.shape[0]

    ne = mesh.num_boundary_edges
    edge_nodes = np.empty((ne, 3), dtype=np.int64)
    for i in range(ne):
        u, v = mesh.edge_vertices[i]
        key = (u, v) if u < v else (v, u)
        edge_nodes[i] = (u, mid_of[key], v)

    velocity_free = np.ones(2 * n2, dtype=bool)
    temperature_free = np.ones(n2, dtype=bool)
    g1_nodes, g2_nodes = set(), set()
    normal_sum = np.zeros((n2, 2))
    normal_cnt = np.zeros(n2)

    for i in range(ne):
        tag = mesh.edge_tags[i]
        nids = edge_nodes[i]
        if tag == GAMMA2:
            g2_nodes.update(int(k) for k in nids)
            velocity_free[nids] = False          # x components
            velocity_free[n2 + nids] = False     # y components
            temperature_free[nids] = temperature_free[nids]  # flux side stays free
        else:
            g1_nodes.update(int(k) for k in nids)
            t = mesh.vertices[mesh.edge_vertices[i, 1]] - mesh.vertices[mesh.edge_vertices[i, 0]]
            comp = int(np.argmax(np.abs(t)))
            if abs(abs(t[comp]) - np.linalg.norm(t)) > 1e-12 * np.linalg.norm(t):
                raise NotImplementedError("tangential constraints require axis-aligned edges")
            velocity_free[comp * n2 + nids] = False   # kill the tangential component
            temperature_free[nids] = False
            normal_sum[nids] += mesh.edge_normals[i]
            normal_cnt[nids] += 1.0

    gamma1_nodes = np.array(sorted(g1_nodes), dtype=np.int64)
    gamma2_nodes = np.array(sorted(g2_nodes), dtype=np.int64)
    gamma1_normals = normal_sum[gamma1_nodes] / normal_cnt[gamma1_nodes, None]

    return SpaceSet(
        mesh=mesh,
        nodes=nodes,
        tri_nodes=tri_nodes,
        velocity_free=velocity_free,
        temperature_free=temperature_free,
        gamma1_nodes=gamma1_nodes,
        gamma2_nodes=gamma2_nodes,
        gamma1_normals=gamma1_normals,
        edge_nodes=edge_nodes,
        midpoint_parents=np.asarray(mid_parents, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# interior assembly
# ---------------------------------------------------------------------------

def _assemble(spaces, local, rows, cols, shape):
    """Scatter (nt, a, b) element blocks into a CSR matrix."""
    nt, a, b = local.shape
    r = np.broadcast_to(rows[:, :, None], (nt, a, b)).ravel()
    c = np.broadcast_to(cols[:, None, :], (nt, a, b)).ravel()
    mat = sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _p2_pair(spaces, ti, tj, weight=None, degree=ASSEMBLY_DEGREE):
    """Element integrals of ``ti * tj`` (optionally weighted) over P2 pairs.

    ``ti``/``tj`` select the factor per test/trial index: the string ``"val"``
    or one of ``"gx"``/``"gy"``.
    """
    ed = spaces.element_data(degree)
    tables = {"val": ed.p2, "gx": ed.gx, "gy": ed.gy}
    A = tables[ti]
    B = tables[tj]
    if weight is None:
        if A.ndim == 2 and B.ndim == 2:
            base = np.einsum("q,iq,jq->ij", ed.qw, A, B)
            return ed.detJ[:, None, None] * base[None, :, :]
        A3 = A if A.ndim == 3 else np.broadcast_to(A[None], (len(ed.detJ),) + A.shape)
        B3 = B if B.ndim == 3 else np.broadcast_to(B[None], (len(ed.detJ),) + B.shape)
        return np.einsum("q,e,eiq,ejq->eij", ed.qw, ed.detJ, A3, B3)
    A3 = A if A.ndim == 3 else np.broadcast_to(A[None], (len(ed.detJ),) + A.shape)
    B3 = B if B.ndim == 3 else np.broadcast_to(B[None], (len(ed.detJ),) + B.shape)
    return np.einsum("q,e,eq,eiq,ejq->eij", ed.qw, ed.detJ, weight, A3, B3)


def _p2_matrix(spaces, ti, tj, weight=None):
    n2 = spaces.num_nodes
    local = _p2_pair(spaces, ti, tj, weight)
    return _assemble(spaces, local, spaces.tri_nodes, spaces.tri_nodes, (n2, n2))


def mass_matrix(spaces):
    """Scalar P2 mass matrix; symmetric positive definite."""
    key = "mass"
    if key not in spaces._cache:
        spaces._cache[key] = _p2_matrix(spaces, "val", "val")
    return spaces._cache[key]


def stiffness_matrix(spaces):
    """Scalar P2 gradient-gradient matrix (thermal diffusion)."""
    key = "stiffness"
    if key not in spaces._cache:
        spaces._cache[key] = (_p2_matrix(spaces, "gx", "gx")
                              + _p2_matrix(spaces, "gy", "gy"))
    return spaces._cache[key]


def vector_mass(spaces):
    """Vector P2 mass matrix over the (x block, y block) velocity layout."""
    key = "vmass"
    if key not in spaces._cache:
        m = mass_matrix(spaces)
        spaces._cache[key] = sp.block_diag((m, m), format="csr")
    return spaces._cache[key]


def vector_h1(spaces):
    """Full H1 inner-product matrix for velocity fields."""
    key = "vh1"
    if key not in spaces._cache:
        k = mass_matrix(spaces) + stiffness_matrix(spaces)
        spaces._cache[key] = sp.block_diag((k, k), format="csr")
    return spaces._cache[key]


def scalar_h1(spaces):
    key = "sh1"
    if key not in spaces._cache:
        spaces._cache[key] = (mass_matrix(spaces) + stiffness_matrix(spaces)).tocsr()
    return spaces._cache[key]


def curl_curl_matrix(spaces):
    """Vorticity form: entries of (rot u, rot v) over velocity dofs.

    In 2D ``rot u = du2/dx - du1/dy`` is scalar, so the matrix is the
    symmetric positive semidefinite rot-rot pairing.
    """
    key = "curlcurl"
    if key not in spaces._cache:
        sxx = _p2_matrix(spaces, "gx", "gx")
        syy = _p2_matrix(spaces, "gy", "gy")
        sxy = _p2_matrix(spaces, "gx", "gy")
        spaces._cache[key] = sp.bmat([[syy, -sxy.T], [-sxy, sxx]], format="csr")
    return spaces._cache[key]


def grad_div_matrix(spaces):
    """Entries of (div u, div v); used by the coercivity diagnostics."""
    key = "graddiv"
    if key not in spaces._cache:
        sxx = _p2_matrix(spaces, "gx", "gx")
        syy = _p2_matrix(spaces, "gy", "gy")
        sxy = _p2_matrix(spaces, "gx", "gy")
        spaces._cache[key] = sp.bmat([[sxx, sxy], [sxy.T, syy]], format="csr")
    return spaces._cache[key]


def divergence_matrix(spaces):
    """Pressure-test/velocity-trial pairing with entries (div u, q)."""
    key = "div"
    if key not in spaces._cache:
        ed = spaces.element_data()
        nt = spaces.tri_nodes.shape[0]
        p1 = np.broadcast_to(ed.p1[None], (nt,) + ed.p1.shape)
        loc_x = np.einsum("q,e,eiq,ejq->eij", ed.qw, ed.detJ, p1, ed.gx)
        loc_y = np.einsum("q,e,eiq,ejq->eij", ed.qw, ed.detJ, p1, ed.gy)
        np_, n2 = spaces.num_pressure_dofs, spaces.num_nodes
        prows = spaces.tri_nodes[:, :3]
        dx = _assemble(spaces, loc_x, prows, spaces.tri_nodes, (np_, n2))
        dy = _assemble(spaces, loc_y, prows, spaces.tri_nodes, (np_, n2))
        spaces._cache[key] = sp.hstack([dx, dy], format="csr")
    return spaces._cache[key]


def buoyancy_matrix(spaces, beta, xi):
    """Temperature-to-velocity coupling with entries beta * (xi w, psi)."""
    if beta < 0.0 or not np.all(np.isfinite(xi)):
        raise ValueError("buoyancy needs beta >= 0 and finite gravity vector")
    m = mass_matrix(spaces)
    return sp.vstack([beta * xi[0] * m, beta * xi[1] * m], format="csr")


# ---------------------------------------------------------------------------
# field evaluation at quadrature points
# ---------------------------------------------------------------------------

def _scalar_at_quad(spaces, coeffs, ed):
    return np.einsum("iq,ei->eq", ed.p2, coeffs[spaces.tri_nodes])


def _scalar_grad_at_quad(spaces, coeffs, ed):
    c = coeffs[spaces.tri_nodes]
    return np.einsum("eiq,ei->eq", ed.gx, c), np.einsum("eiq,ei->eq", ed.gy, c)


def _velocity_at_quad(spaces, coeffs, ed):
    n2 = spaces.num_nodes
    return (_scalar_at_quad(spaces, coeffs[:n2], ed),
            _scalar_at_quad(spaces, coeffs[n2:], ed))


def _rot_at_quad(spaces, coeffs, ed):
    n2 = spaces.num_nodes
    cx = coeffs[:n2][spaces.tri_nodes]
    cy = coeffs[n2:][spaces.tri_nodes]
    return np.einsum("eiq,ei->eq", ed.gx, cy) - np.einsum("eiq,ei->eq", ed.gy, cx)


# ---------------------------------------------------------------------------
# trilinear forms: rotational convection and temperature advection
# ---------------------------------------------------------------------------

def rotational_convection(spaces, u, v, w):
    """Value of the rotational convection form (rot u x v, w).

    With scalar ``r = rot u`` the 2D cross product reads
    ``r x v = r (-v2, v1)``, so the integrand is ``r (v1 w2 - v2 w1)``.
    """
    nvd = spaces.num_velocity_dofs
    u = _values(u, VELOCITY, nvd)
    v = _values(v, VELOCITY, nvd)
    w = _values(w, VELOCITY, nvd)
    ed = spaces.element_data()
    r = _rot_at_quad(spaces, u, ed)
    vx, vy = _velocity_at_quad(spaces, v, ed)
    wx, wy = _velocity_at_quad(spaces, w, ed)
    integrand = r * (vx * wy - vy * wx)
    return float(np.einsum("q,e,eq->", ed.qw, ed.detJ, integrand))


def rotational_convection_matrix(spaces, frozen, slot):
    """Matrix of the convection form with one velocity argument frozen.

    slot="first":  (v, psi) -> (rot frozen x v, psi); the resulting matrix is
    exactly antisymmetric, which is what makes the kinetic energy estimate
    unconditional.
    slot="second": (u, psi) -> (rot u x frozen, psi).
    """
    nvd = spaces.num_velocity_dofs
    frozen = _values(frozen, VELOCITY, nvd)
    ed = spaces.element_data()
    n2 = spaces.num_nodes
    if slot == "first":
        r = _rot_at_quad(spaces, frozen, ed)
        mr = _p2_matrix(spaces, "val", "val", weight=r)
        return sp.bmat([[None, -mr], [mr, None]], format="csr")
    if slot == "second":
        fx, fy = _velocity_at_quad(spaces, frozen, ed)
        gxx = _p2_matrix(spaces, "val", "gy", weight=fy)
        gxy = _p2_matrix(spaces, "val", "gx", weight=fy)
        gyx = _p2_matrix(spaces, "val", "gy", weight=fx)
        gyy = _p2_matrix(spaces, "val", "gx", weight=fx)
        return sp.bmat([[gxx, -gxy], [-gyx, gyy]], format="csr")
    raise ValueError(f"slot must be 'first' or 'second', got {slot!r}")


def advection(spaces, z, w, phi, skew=True):
    """Temperature advection form (z . grad w, phi).

    The skew variant ``((z.grad w, phi) - (z.grad phi, w)) / 2`` is
    antisymmetric in its two scalar arguments by construction.
    """
    z = _values(z, VELOCITY, spaces.num_velocity_dofs)
    w = _values(w, TEMPERATURE, spaces.num_nodes)
    phi = _values(phi, TEMPERATURE, spaces.num_nodes)
    ed = spaces.element_data()
    zx, zy = _velocity_at_quad(spaces, z, ed)

    def raw(a, b):
        ax, ay = _scalar_grad_at_quad(spaces, a, ed)
        bv = _scalar_at_quad(spaces, b, ed)
        return float(np.einsum("q,e,eq->", ed.qw, ed.detJ, (zx * ax + zy * ay) * bv))

    if not skew:
        return raw(w, phi)
    return 0.5 * (raw(w, phi) - raw(phi, w))


def advection_velocity_matrix(spaces, z, skew=True):
    """Matrix of (w, phi) -> (z . grad w, phi) for frozen velocity z."""
    z = _values(z, VELOCITY, spaces.num_velocity_dofs)
    ed = spaces.element_data()
    zx, zy = _velocity_at_quad(spaces, z, ed)
    raw = (_p2_matrix(spaces, "val", "gx", weight=zx)
           + _p2_matrix(spaces, "val", "gy", weight=zy))
    if not skew:
        return raw
    return (0.5 * (raw - raw.T)).tocsr()


def advection_scalar_matrix(spaces, w, skew=True):
    """Matrix of (g, phi) -> (g . grad w, phi) for frozen temperature w.

    Maps velocity coefficients to the temperature dual; the skew variant
    matches the linearisation of the skew advection used by the solver.
    """
    w = _values(w, TEMPERATURE, spaces.num_nodes)
    ed = spaces.element_data()
    wx, wy = _scalar_grad_at_quad(spaces, w, ed)
    hx = _p2_matrix(spaces, "val", "val", weight=wx)
    hy = _p2_matrix(spaces, "val", "val", weight=wy)
    raw = sp.hstack([hx, hy], format="csr")
    if not skew:
        return raw
    wv = _scalar_at_quad(spaces, w, ed)
    kx = _p2_matrix(spaces, "gx", "val", weight=wv)
    ky = _p2_matrix(spaces, "gy", "val", weight=wv)
    return (0.5 * (raw - sp.hstack([kx, ky], format="csr"))).tocsr()


# ---------------------------------------------------------------------------
# boundary couplings and traces
# ---------------------------------------------------------------------------

def _edge_mass_local(spaces):
    """2D array of 1D P2 edge mass integrals on the unit interval."""
    s, w = edge_quadrature(EDGE_POINTS)
    basis = np.stack([(1 - s) * (1 - 2 * s), 4 * s * (1 - s), s * (2 * s - 1)])
    return np.einsum("q,iq,jq->ij", w, basis, basis)


def _edge_lengths(spaces):
    mesh = spaces.mesh
    d = mesh.vertices[mesh.edge_vertices[:, 1]] - mesh.vertices[mesh.edge_vertices[:, 0]]
    return np.linalg.norm(d, axis=1)


def _boundary_positions(spaces, tag):
    nodes = spaces.boundary_nodes(tag)
    return {int(n): i for i, n in enumerate(nodes)}


def pressure_boundary_coupling(spaces):
    """Coupling T with entries T[k, j] = int_gamma1 phi_k (psi_j . n) ds.

    Rows follow the sorted gamma1 node list; the boundary value is the scalar
    magnitude of the prescribed total pressure in the normal direction, so
    only the normal trace of the velocity test functions enters.
    """
    key = "t1"
    if key not in spaces._cache:
        mesh = spaces.mesh
        mloc = _edge_mass_local(spaces)
        lens = _edge_lengths(spaces)
        pos = _boundary_positions(spaces, GAMMA1)
        n2 = spaces.num_nodes
        rows, cols, data = [], [], []
        # edge node order along the edge: endpoint, midpoint, endpoint
        for e in spaces.mesh.edges_with_tag(GAMMA1):
            nids = spaces.edge_nodes[e][[0, 1, 2]]
            along = (nids[0], nids[1], nids[2])
            nrm = mesh.edge_normals[e]
            m = mloc * lens[e]
            for a in range(3):
                ra = pos[int(along[a])]
                for b in range(3):
                    nb = int(along[b])
                    rows += [ra, ra]
                    cols += [nb, n2 + nb]
                    data += [m[a, b] * nrm[0], m[a, b] * nrm[1]]
        t = sp.coo_matrix((data, (rows, cols)),
                          shape=(len(pos), spaces.num_velocity_dofs)).tocsr()
        t.sum_duplicates()
        t.sort_indices()
        spaces._cache[key] = t
    return spaces._cache[key]


def heat_boundary_coupling(spaces):
    """Coupling T with entries T[k, j] = int_gamma2 phi_k phi_j ds."""
    key = "t2"
    if key not in spaces._cache:
        mloc = _edge_mass_local(spaces)
        lens = _edge_lengths(spaces)
        pos = _boundary_positions(spaces, GAMMA2)
        rows, cols, data = [], [], []
        for e in spaces.mesh.edges_with_tag(GAMMA2):
            nids = spaces.edge_nodes[e]
            m = mloc * lens[e]
            for a in range(3):
                for b in range(3):
                    rows.append(pos[int(nids[a])])
                    cols.append(int(nids[b]))
                    data.append(m[a, b])
        t = sp.coo_matrix((data, (rows, cols)),
                          shape=(len(pos), spaces.num_nodes)).tocsr()
        t.sum_duplicates()
        t.sort_indices()
        spaces._cache[key] = t
    return spaces._cache[key]


def boundary_mass(spaces, tag):
    """Edge mass matrix over the boundary node list of ``tag``."""
    key = f"bmass:{tag}"
    if key not in spaces._cache:
        mloc = _edge_mass_local(spaces)
        lens = _edge_lengths(spaces)
        pos = _boundary_positions(spaces, tag)
        rows, cols, data = [], [], []
        for e in spaces.mesh.edges_with_tag(tag):
            nids = spaces.edge_nodes[e]
            m = mloc * lens[e]
            for a in range(3):
                for b in range(3):
                    rows.append(pos[int(nids[a])])
                    cols.append(pos[int(nids[b])])
                    data.append(m[a, b])
        n = len(pos)
        mat = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        spaces._cache[key] = mat
    return spaces._cache[key]


def boundary_lumped_weights(spaces, tag):
    """Positive nodal quadrature weights (Simpson per edge) on ``tag``.

    Used for control-space pairings so that maximising a linear functional
    over the admissible box decouples node by node.
    """
    key = f"blump:{tag}"
    if key not in spaces._cache:
        lens = _edge_lengths(spaces)
        pos = _boundary_positions(spaces, tag)
        w = np.zeros(len(pos))
        simpson = np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
        for e in spaces.mesh.edges_with_tag(tag):
            nids = spaces.edge_nodes[e]
            for a in range(3):
                w[pos[int(nids[a])]] += simpson[a] * lens[e]
        spaces._cache[key] = w
    return spaces._cache[key]


def pressure_boundary_load(spaces, v1):
    """Velocity dual vector of the gamma1 total-pressure values ``v1``."""
    if spaces.gamma1_nodes.size == 0:
        raise ValueError("gamma1 is empty; no pressure boundary to load")
    v1 = np.asarray(v1, dtype=float)
    return pressure_boundary_coupling(spaces).T @ v1


def heat_flux_load(spaces, v2):
    """Temperature dual vector of the gamma2 heat-flux values ``v2``."""
    if spaces.gamma2_nodes.size == 0:
        raise ValueError("gamma2 is empty; no flux boundary to load")
    v2 = np.asarray(v2, dtype=float)
    return heat_boundary_coupling(spaces).T @ v2


def normal_trace(spaces, z):
    """Nodal values of z . n on the gamma1 node list.

    Corner nodes shared by two gamma1 edges use the mean of the adjacent
    edge normals.
    """
    z = _values(z, VELOCITY, spaces.num_velocity_dofs)
    n2 = spaces.num_nodes
    ids = spaces.gamma1_nodes
    return (z[ids] * spaces.gamma1_normals[:, 0]
            + z[n2 + ids] * spaces.gamma1_normals[:, 1])


# ---------------------------------------------------------------------------
# interpolation, loads and error norms
# ---------------------------------------------------------------------------

def interpolate_scalar(spaces, fn):
    """Nodal interpolation of ``fn(x, y)`` into the temperature space."""
    x, y = spaces.nodes[:, 0], spaces.nodes[:, 1]
    return np.asarray(fn(x, y), dtype=float)


def interpolate_velocity(spaces, fn):
    """Nodal interpolation of vector ``fn(x, y) -> (vx, vy)``."""
    x, y = spaces.nodes[:, 0], spaces.nodes[:, 1]
    vx, vy = fn(x, y)
    return np.concatenate([np.broadcast_to(np.asarray(vx, float), x.shape),
                           np.broadcast_to(np.asarray(vy, float), x.shape)])


def apply_velocity_constraints(spaces, z):
    z = np.array(z, dtype=float, copy=True)
    z[~spaces.velocity_free] = 0.0
    return z


def apply_temperature_constraints(spaces, w):
    w = np.array(w, dtype=float, copy=True)
    w[~spaces.temperature_free] = 0.0
    return w


def velocity_load(spaces, fn, t, degree=ASSEMBLY_DEGREE):
    """Dual vector of a vector-valued forcing ``fn(x, y, t)``."""
    ed = spaces.element_data(degree)
    fx, fy = fn(ed.qx, ed.qy, t)
    n2 = spaces.num_nodes
    out = np.zeros(2 * n2)
    base = np.einsum("q,e,eq,iq->ei", ed.qw, ed.detJ, np.broadcast_to(fx, ed.qx.shape), ed.p2)
    np.add.at(out[:n2], spaces.tri_nodes.ravel(), base.ravel())
    base = np.einsum("q,e,eq,iq->ei", ed.qw, ed.detJ, np.broadcast_to(fy, ed.qx.shape), ed.p2)
    np.add.at(out[n2:], spaces.tri_nodes.ravel(), base.ravel())
    return out


def temperature_load(spaces, fn, t, degree=ASSEMBLY_DEGREE):
    """Dual vector of a scalar forcing ``fn(x, y, t)``."""
    ed = spaces.element_data(degree)
    fv = np.broadcast_to(fn(ed.qx, ed.qy, t), ed.qx.shape)
    out = np.zeros(spaces.num_nodes)
    base = np.einsum("q,e,eq,iq->ei", ed.qw, ed.detJ, fv, ed.p2)
    np.add.at(out, spaces.tri_nodes.ravel(), base.ravel())
    return out


def l2_error_scalar(spaces, coeffs, exact, degree=7):
    """L2 distance between a temperature field and ``exact(x, y)``."""
    ed = spaces.element_data(degree)
    vals = _scalar_at_quad(spaces, np.asarray(coeffs, float), ed)
    diff = vals - exact(ed.qx, ed.qy)
    return float(np.sqrt(np.einsum("q,e,eq->", ed.qw, ed.detJ, diff * diff)))


def l2_error_velocity(spaces, coeffs, exact, degree=7):
    """L2 distance between a velocity field and vector ``exact(x, y)``."""
    ed = spaces.element_data(degree)
    vx, vy = _velocity_at_quad(spaces, np.asarray(coeffs, float), ed)
    ex, ey = exact(ed.qx, ed.qy)
    dx, dy = vx - ex, vy - ey
    return float(np.sqrt(np.einsum("q,e,eq->", ed.qw, ed.detJ, dx * dx + dy * dy)))


def recovered_boundary_flux(spaces, w, conductivity):
    """Nodal values of -k dw/dn on the gamma2 node list.

    Differentiates the discrete temperature inside the triangle owning each
    boundary edge; a consistency diagnostic against the prescribed flux, not
    part of the solve.
    """
    w = _values(w, TEMPERATURE, spaces.num_nodes)
    mesh = spaces.mesh
    pos = _boundary_positions(spaces, GAMMA2)
    out = np.zeros(len(pos))
    cnt = np.zeros(len(pos))
    pts = mesh.vertices[mesh.triangles]
    for e in spaces.mesh.edges_with_tag(GAMMA2):
        tri = int(mesh.edge_triangles[e])
        p0 = pts[tri, 0]
        j1 = pts[tri, 1] - p0
        j2 = pts[tri, 2] - p0
        det = j1[0] * j2[1] - j1[1] * j2[0]
        inv_jt = np.array([[j2[1], -j2[0]], [-j1[1], j1[0]]]) / det
        nrm = mesh.edge_normals[e]
        for nid in spaces.edge_nodes[e]:
            xy = spaces.nodes[nid]
            xi = np.linalg.solve(np.column_stack([j1, j2]), xy - p0)
            bary = np.array([[1 - xi[0] - xi[1], xi[0], xi[1]]])
            g = _p2_grad(bary)[:, 0, :] @ inv_jt.T
            grad = g.T @ w[spaces.tri_nodes[tri]]
            k = pos[int(nid)]
            out[k] += -conductivity * float(grad @ nrm)
            cnt[k] += 1.0
    return out / np.maximum(cnt, 1.0)


# ---------------------------------------------------------------------------
# coercivity diagnostics
# ---------------------------------------------------------------------------

def estimate_coercivity(spaces, tol=1e-8, maxiter=500, seed=0):
    """Smallest generalized eigenvalues quantifying ellipticity.

    Returns ``(c1, c1_prime)``.  ``c1`` is the minimum of the vorticity form
    plus a unit-weight divergence penalty against the full H1 inner product
    on the essential-constrained velocity space; the penalty stands in for
    the divergence constraint and removes the gradient-field kernel of the
    rot-rot form (for constrained fields ``|grad u|^2 = |rot u|^2 +
    |div u|^2`` up to boundary terms, so the combination is an H1-equivalent
    energy).  ``c1_prime`` is the analogue of the thermal diffusion form on
    the constrained temperature space.  Both are computed by inverse power
    iteration to ``tol`` relative.

    Raises RuntimeError when the iteration fails to settle within
    ``maxiter`` sweeps.
    """
    rng = np.random.default_rng(seed)
    shift = 1e-10  # pencil shift: exact eigenvalue translation, no bias

    def smallest(lu, amat, bmat, n):
        x = rng.standard_normal(n)
        lam_prev = None
        for _ in range(maxiter):
            x = lu.solve(bmat @ x)
            x /= np.sqrt(x @ (bmat @ x))
            lam = float(x @ (amat @ x))
            if lam_prev is not None and abs(lam - lam_prev) <= tol * abs(lam):
                return lam - shift
            lam_prev = lam
        raise RuntimeError("coercivity inverse iteration did not converge "
                           f"within {maxiter} sweeps")

    vfree = spaces.velocity_free
    a1 = ((curl_curl_matrix(spaces) + grad_div_matrix(spaces))
          [vfree][:, vfree]).tocsc()
    b1 = vector_h1(spaces)[vfree][:, vfree].tocsc()
    c1 = smallest(splu((a1 + shift * b1).tocsc()), a1, b1, int(vfree.sum()))

    tfree = spaces.temperature_free
    a2 = stiffness_matrix(spaces)[tfree][:, tfree].tocsc()
    b2 = scalar_h1(spaces)[tfree][:, tfree].tocsc()
    c1p = smallest(splu((a2 + shift * b2).tocsc()), a2, b2, int(tfree.sum()))

    return float(c1), float(c1p)
