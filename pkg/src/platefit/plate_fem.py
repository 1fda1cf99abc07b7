"""Morley nonconforming triangle for fourth-order plate bending.

Degrees of freedom are function values at mesh nodes plus normal
derivatives at edge midpoints.  The module builds the local quadratic
basis, the element integrals behind the mass, rotary-inertia and
curvature bilinear forms, and assembles the parameter-independent global
operators (matrices, Dirichlet lift vectors, probe functional).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GeometryError
from .mesh import GeometryConfig, Mesh

#: order in which the six elastic moduli are stored everywhere
ALPHAS = ("11", "12", "16", "22", "26", "66")

# 6-point triangle rule, exact through degree 4 (barycentric points, weights
# sum to 1; multiply by the triangle area).
_QB1 = 0.816847572980459
_QB2 = 0.091576213509771
_QB3 = 0.108103018168070
_QB4 = 0.445948490915965
TRI_QUAD_BARY = np.array(
    [
        [_QB1, _QB2, _QB2],
        [_QB2, _QB1, _QB2],
        [_QB2, _QB2, _QB1],
        [_QB3, _QB4, _QB4],
        [_QB4, _QB3, _QB4],
        [_QB4, _QB4, _QB3],
    ]
)
TRI_QUAD_W = np.array(
    [
        0.109951743655322,
        0.109951743655322,
        0.109951743655322,
        0.223381589678011,
        0.223381589678011,
        0.223381589678011,
    ]
)


def triangle_area(verts) -> float:
    v = np.asarray(verts, dtype=float)
    return 0.5 * float(
        (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
        - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0])
    )


def _outward_normals(verts):
    """Unit normals of the three edges (edge j opposite vertex j), outward."""
    v = np.asarray(verts, dtype=float)
    normals = np.empty((3, 2))
    centroid = v.mean(axis=0)
    for j in range(3):
        a, b = v[(j + 1) % 3], v[(j + 2) % 3]
        t = b - a
        n = np.array([t[1], -t[0]]) / np.hypot(t[0], t[1])
        if np.dot(n, 0.5 * (a + b) - centroid) < 0:
            n = -n
        normals[j] = n
    return normals


class MorleyBasis:
    """Six quadratic shape functions on one physical triangle.

    DOF order: value at vertex 0, 1, 2, then normal derivative at the
    midpoint of the edge opposite each vertex, taken along the supplied
    unit normals.  Functions are represented in centred, scaled monomials
    so the 6x6 nodal system stays well conditioned on small elements.
    """

    def __init__(self, verts, normals=None):
        verts = np.asarray(verts, dtype=float)
        area = triangle_area(verts)
        if not area > 0:
            raise GeometryError("degenerate (nonpositive-area) triangle")
        self.verts = verts
        self.area = area
        if normals is None:
            normals = _outward_normals(verts)
        self.normals = np.asarray(normals, dtype=float)
        self.center = verts.mean(axis=0)
        self.scale = np.sqrt(2.0 * area)
        mids = 0.5 * (verts[[1, 2, 0]] + verts[[2, 0, 1]])
        self.midpoints = mids

        A = np.empty((6, 6))
        A[:3] = self._monomials(verts)
        gm = self._monomial_grads(mids)  # (3, 6, 2)
        A[3:] = np.einsum("jd,jmd->jm", self.normals, gm)
        # columns of coeffs are the monomial coefficients of each basis fn
        self.coeffs = np.linalg.solve(A, np.eye(6))

    def _local(self, points):
        return (np.asarray(points, dtype=float) - self.center) / self.scale

    def _monomials(self, points):
        xi = self._local(points)
        x, y = xi[..., 0], xi[..., 1]
        return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)

    def _monomial_grads(self, points):
        xi = self._local(points)
        x, y = xi[..., 0], xi[..., 1]
        z = np.zeros_like(x)
        o = np.ones_like(x)
        gx = np.stack([z, o, z, 2 * x, y, z], axis=-1)
        gy = np.stack([z, z, o, z, x, 2 * y], axis=-1)
        return np.stack([gx, gy], axis=-1) / self.scale

    def values(self, points) -> np.ndarray:
        """Basis values at ``points``; shape (..., 6)."""
        return self._monomials(points) @ self.coeffs

    def grads(self, points) -> np.ndarray:
        """Physical gradients at ``points``; shape (..., 6, 2)."""
        g = self._monomial_grads(points)
        return np.einsum("...md,mi->...id", g, self.coeffs)

    def hessians(self) -> np.ndarray:
        """Constant second derivatives; row i is (w_xx, w_yy, w_xy) of basis i."""
        return np.column_stack(self.hessian_rows())

    def hessian_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(w_xx, w_yy, w_xy) of all six basis functions, each length 6.

        Each row is dotted against the DOF vectors of the interpolants of
        1, x and y, which have zero curvature.  Floating-point coefficients
        leave a tiny defect there that the near-singular bending solve
        amplifies, so the rows are projected onto the exact annihilator of
        those three vectors.
        """
        c = self.coeffs
        s2 = self.scale**2
        rows = np.vstack([2 * c[3], 2 * c[5], c[4]]) / s2

        xi = self._local(self.verts)
        W = np.zeros((6, 3))
        W[:3, 0] = 1.0
        W[:3, 1] = xi[:, 0]
        W[:3, 2] = xi[:, 1]
        W[3:, 1] = self.normals[:, 0] / self.scale
        W[3:, 2] = self.normals[:, 1] / self.scale
        G = W.T @ W
        rows = rows - (rows @ W) @ np.linalg.solve(G, W.T)
        return rows[0], rows[1], rows[2]


def morley_basis(verts, normals=None) -> MorleyBasis:
    """Build the Morley basis on a triangle.

    ``normals`` fixes the direction of the edge-derivative DOFs; outward
    normals are used when omitted.
    """
    return MorleyBasis(verts, normals)


def element_matrices(verts, normals=None):
    """Local 6x6 integrals: mass m, gradient l, curvature k^alpha.

    m uses the degree-4 rule (exact for products of quadratics); the
    curvature forms have constant integrands so a single area factor is
    exact.  The mixed 16/26 forms are assembled in their symmetrised
    variant, which leaves the associated quadratic energy unchanged.
    """
    basis = MorleyBasis(verts, normals)
    pts = TRI_QUAD_BARY @ basis.verts
    w = TRI_QUAD_W * basis.area
    V = basis.values(pts)
    G = basis.grads(pts)
    # accumulate rank-1 terms so both integrals come out bitwise symmetric
    m = np.zeros((6, 6))
    l = np.zeros((6, 6))
    for q in range(w.size):
        m += w[q] * np.outer(V[q], V[q])
        l += w[q] * (np.outer(G[q, :, 0], G[q, :, 0]) + np.outer(G[q, :, 1], G[q, :, 1]))

    hxx, hyy, hxy = basis.hessian_rows()
    a = basis.area
    k = {
        "11": a * np.outer(hxx, hxx),
        "12": a * (np.outer(hyy, hxx) + np.outer(hxx, hyy)),
        "16": 1.5 * a * (np.outer(hxy, hxx) + np.outer(hxx, hxy)),
        "22": a * np.outer(hyy, hyy),
        "26": 1.5 * a * (np.outer(hxy, hyy) + np.outer(hyy, hxy)),
        "66": 2.0 * a * np.outer(hxy, hxy),
    }
    return m, l, k


@dataclass(frozen=True)
class DofMap:
    """Global DOF numbering: node values first, then edge derivatives.

    ``free`` / ``constrained`` partition all DOFs; ``free_index`` maps a
    global DOF to its position among the free ones (-1 when constrained).
    """

    n_nodes: int
    n_edges: int
    free: np.ndarray
    constrained: np.ndarray
    free_index: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.n_nodes + self.n_edges

    @property
    def n_free(self) -> int:
        return self.free.size

    def edge_dof(self, edge_index):
        return self.n_nodes + edge_index


def build_dof_map(mesh: Mesh) -> DofMap:
    n = mesh.n_nodes + mesh.n_edges
    constrained = np.concatenate(
        [mesh.clamped_nodes, mesh.n_nodes + np.asarray(mesh.clamped_edges)]
    ).astype(np.int64)
    constrained.sort()
    mask = np.ones(n, dtype=bool)
    mask[constrained] = False
    free = np.flatnonzero(mask)
    free_index = np.full(n, -1, dtype=np.int64)
    free_index[free] = np.arange(free.size)
    return DofMap(
        n_nodes=mesh.n_nodes,
        n_edges=mesh.n_edges,
        free=free,
        constrained=constrained,
        free_index=free_index,
    )


def _element_dofs(mesh: Mesh, t: int) -> np.ndarray:
    tri = mesh.triangles[t]
    return np.concatenate([tri, mesh.n_nodes + mesh.tri_edges[t]])


def find_containing_triangle(mesh: Mesh, point, tol=1e-12) -> int:
    """First triangle whose closed interior contains ``point``."""
    p = np.asarray(point, dtype=float)
    verts = mesh.nodes[mesh.triangles]
    v0 = verts[:, 0]
    d1 = verts[:, 1] - v0
    d2 = verts[:, 2] - v0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    rel = p - v0
    s = (rel[:, 0] * d2[:, 1] - rel[:, 1] * d2[:, 0]) / det
    u = (d1[:, 0] * rel[:, 1] - d1[:, 1] * rel[:, 0]) / det
    inside = (s >= -tol) & (u >= -tol) & (s + u <= 1 + tol)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise GeometryError(f"point {tuple(p)} lies outside the mesh")
    return int(idx[0])


def interpolation_dofs(mesh: Mesh, func, grad):
    """Morley interpolant DOF vector of a smooth function.

    ``func(x, y)`` gives values at nodes, ``grad(x, y)`` the gradient used
    for the edge-normal DOFs at midpoints.
    """
    vals = np.array([func(x, y) for x, y in mesh.nodes], dtype=float)
    gmid = np.array([grad(x, y) for x, y in mesh.edge_midpoints], dtype=float)
    dn = np.einsum("ed,ed->e", gmid, mesh.edge_normals)
    return np.concatenate([vals, dn])


@dataclass
class ConstantOperators:
    """Parameter-independent assembled operators, reduced to free DOFs.

    All matrices share one CSR sparsity pattern so that frequency-domain
    system matrices are formed by combining ``.data`` arrays.  ``Mc``/``Lc``
    and their lifts are integrated over the accelerometer footprint only.
    Lift vectors carry the minus sign of the Dirichlet elimination, i.e.
    the driven system reads  K~ u = f_l - w^2 (mass lifts) + sum_a Dhat_a f_a.
    """

    dofs: DofMap
    M0: sp.csr_matrix
    Mc: sp.csr_matrix
    L0: sp.csr_matrix
    Lc: sp.csr_matrix
    K: dict
    f_M0: np.ndarray
    f_Mc: np.ndarray
    f_L0: np.ndarray
    f_Lc: np.ndarray
    f_K: dict
    f_l: np.ndarray
    c: np.ndarray
    c0: float
    rho0: float
    rho_c: float
    e: float
    g: float
    accel_area: float
    test_point: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_free(self) -> int:
        return self.dofs.n_free

    @property
    def pattern(self):
        """(indptr, indices) shared by every assembled matrix."""
        return self.M0.indptr, self.M0.indices

    def mass_data(self) -> np.ndarray:
        """CSR data of rho0*(M0 + e^2/3 L0) + rho_c*(Mc + e^2/3 Lc)."""
        key = "mass_data"
        if key not in self._cache:
            r = self.e**2 / 3.0
            self._cache[key] = self.rho0 * (self.M0.data + r * self.L0.data) + self.rho_c * (
                self.Mc.data + r * self.Lc.data
            )
        return self._cache[key]

    def mass_lift(self) -> np.ndarray:
        key = "mass_lift"
        if key not in self._cache:
            r = self.e**2 / 3.0
            self._cache[key] = self.rho0 * (self.f_M0 + r * self.f_L0) + self.rho_c * (
                self.f_Mc + r * self.f_Lc
            )
        return self._cache[key]

    def stacked_curvature_data(self) -> np.ndarray:
        """(6, nnz) array of the K^alpha CSR data rows, in ALPHAS order."""
        key = "kdata"
        if key not in self._cache:
            self._cache[key] = np.stack([self.K[a].data for a in ALPHAS])
        return self._cache[key]

    def stacked_curvature_lifts(self) -> np.ndarray:
        key = "klift"
        if key not in self._cache:
            self._cache[key] = np.stack([self.f_K[a] for a in ALPHAS])
        return self._cache[key]

    def csr_from_data(self, data) -> sp.csr_matrix:
        indptr, indices = self.pattern
        return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(self.n_free, self.n_free))


def assemble_global_matrices(mesh: Mesh):
    """Assemble M0, Mc, L0, Lc and the K^alpha over ALL DOFs (no BCs).

    Returns a dict of CSR matrices with a common pattern.  Mc/Lc carry
    explicit zero blocks outside the accelerometer footprint so that every
    matrix shares the same nonzero layout.  Duplicate entries are summed
    with np.add.at in element order, which makes the assembled data exactly
    symmetric (the (i, j) and (j, i) slots see identical addition
    sequences) regardless of element ordering.
    """
    nt = mesh.n_triangles
    ndof = mesh.n_nodes + mesh.n_edges
    rows = np.empty(36 * nt, dtype=np.int64)
    cols = np.empty(36 * nt, dtype=np.int64)
    data = {name: np.empty(36 * nt) for name in ["M0", "Mc", "L0", "Lc", *ALPHAS]}
    accel = np.zeros(nt, dtype=bool)
    accel[np.asarray(mesh.accel_triangles, dtype=np.int64)] = True

    for t in range(nt):
        verts = mesh.nodes[mesh.triangles[t]]
        normals = mesh.edge_normals[mesh.tri_edges[t]]
        m, l, k = element_matrices(verts, normals)
        dofs = _element_dofs(mesh, t)
        sl = slice(36 * t, 36 * (t + 1))
        rows[sl] = np.repeat(dofs, 6)
        cols[sl] = np.tile(dofs, 6)
        data["M0"][sl] = m.ravel()
        data["L0"][sl] = l.ravel()
        on = 1.0 if accel[t] else 0.0
        data["Mc"][sl] = on * m.ravel()
        data["Lc"][sl] = on * l.ravel()
        for a in ALPHAS:
            data[a][sl] = k[a].ravel()

    keys = rows * ndof + cols
    uniq, inverse = np.unique(keys, return_inverse=True)
    urow = (uniq // ndof).astype(np.int64)
    ucol = (uniq % ndof).astype(np.int64)
    counts = np.bincount(urow, minlength=ndof)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    out = {}
    for name, vals in data.items():
        acc = np.zeros(uniq.size)
        np.add.at(acc, inverse, vals)
        out[name] = sp.csr_matrix((acc, ucol.copy(), indptr.copy()), shape=(ndof, ndof))
    return out


def probe_coefficients(mesh: Mesh, dofmap: DofMap, point, g_values):
    """Coefficients (c, c0) with P(u) = c . u_free + c0.

    ``g_values`` maps constrained DOF -> boundary value.  The interpolant
    of the triangle containing ``point`` is evaluated; on a shared edge the
    lowest-index containing triangle wins (the Morley space is
    nonconforming, so traces from neighbouring triangles may differ).
    """
    t = find_containing_triangle(mesh, point)
    basis = MorleyBasis(mesh.nodes[mesh.triangles[t]], mesh.edge_normals[mesh.tri_edges[t]])
    vals = basis.values(np.asarray(point, dtype=float))
    dofs = _element_dofs(mesh, t)
    c = np.zeros(dofmap.n_free)
    c0 = 0.0
    for v, d in zip(np.atleast_2d(vals)[0], dofs):
        i = dofmap.free_index[d]
        if i >= 0:
            c[i] += v
        else:
            c0 += v * g_values.get(int(d), 0.0)
    return c, c0


def assemble(mesh: Mesh, cfg: GeometryConfig, rho0: float, g: float = 1.0,
             load=None) -> ConstantOperators:
    """Reduce the global matrices to free DOFs and build lifts and probe.

    The clamped boundary carries value ``g`` at node DOFs and zero normal
    derivative at edge DOFs.  The accelerometer density correction is
    rho_c = m_a / (2e * accel_area), which reproduces the attached mass
    exactly on the tagged footprint.
    """
    cfg.validate()
    if cfg.accel_mass > 0 and mesh.accel_triangles.size == 0:
        raise GeometryError("accelerometer configured but the mesh has no tagged triangles")

    dofmap = build_dof_map(mesh)
    full = assemble_global_matrices(mesh)

    free = dofmap.free
    gvec = np.zeros(dofmap.n_dofs)
    gvec[mesh.clamped_nodes] = g  # edge DOFs on the clamp stay 0 (zero normal slope)
    g_values = {int(d): float(gvec[d]) for d in dofmap.constrained}

    reduced = {}
    lifts = {}
    pattern = None
    for name, mat in full.items():
        sub = mat[free][:, free].tocsr()
        sub.sort_indices()
        if pattern is None:
            pattern = (sub.indptr.copy(), sub.indices.copy())
        elif not (
            sub.data.size == pattern[1].size and np.array_equal(sub.indices, pattern[1])
        ):
            # all full matrices share one layout, so the reductions must too
            raise AssertionError("reduced operator lost the common sparsity pattern")
        reduced[name] = sp.csr_matrix(
            (sub.data, pattern[1], pattern[0]), shape=(free.size, free.size)
        )
        lifts[name] = -(mat[free] @ gvec)

    e = cfg.half_thickness
    if cfg.accel_mass > 0:
        rho_c = cfg.accel_mass / (2.0 * e * mesh.accel_area)
    else:
        rho_c = 0.0

    f_l = np.zeros(free.size)
    if load is not None:
        f_l = _assemble_load(mesh, dofmap, load)

    c, c0 = probe_coefficients(mesh, dofmap, cfg.test_point, g_values)

    return ConstantOperators(
        dofs=dofmap,
        M0=reduced["M0"],
        Mc=reduced["Mc"],
        L0=reduced["L0"],
        Lc=reduced["Lc"],
        K={a: reduced[a] for a in ALPHAS},
        f_M0=lifts["M0"],
        f_Mc=lifts["Mc"],
        f_L0=lifts["L0"],
        f_Lc=lifts["Lc"],
        f_K={a: lifts[a] for a in ALPHAS},
        f_l=f_l,
        c=c,
        c0=c0,
        rho0=float(rho0),
        rho_c=float(rho_c),
        e=float(e),
        g=float(g),
        accel_area=float(mesh.accel_area),
        test_point=tuple(cfg.test_point),
    )


def _assemble_load(mesh: Mesh, dofmap: DofMap, load):
    """Load vector over free DOFs ( f_l )_j = integral of load * h_j."""
    f = np.zeros(dofmap.n_dofs)
    for t in range(mesh.n_triangles):
        verts = mesh.nodes[mesh.triangles[t]]
        normals = mesh.edge_normals[mesh.tri_edges[t]]
        basis = MorleyBasis(verts, normals)
        pts = TRI_QUAD_BARY @ verts
        w = TRI_QUAD_W * basis.area
        fv = np.array([load(x, y) for x, y in pts])
        f[_element_dofs(mesh, t)] += basis.values(pts).T @ (w * fv)
    return f[dofmap.free]


def export_matrix_triplets(matrix, path):
    """Dump a sparse matrix as `row col value` text (debugging aid)."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write("# row col value\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
