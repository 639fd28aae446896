"""Linear elasticity on quadratic triangle meshes: assembly, BCs, solves, norms."""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FineMesh, PatchMesh, node_dofs


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Material:
    """Per-phase Lame constants; phase m uses lambda1[m-1], lambda2[m-1]."""

    lambda1: tuple
    lambda2: tuple

    def __post_init__(self):
        l1 = tuple(float(v) for v in np.atleast_1d(self.lambda1))
        l2 = tuple(float(v) for v in np.atleast_1d(self.lambda2))
        if len(l1) != len(l2) or not l1:
            raise ValueError("need matching non-empty lambda1/lambda2 tuples")
        for a, b in zip(l1, l2):
            if b <= 0:
                raise ValueError("lambda2 must be positive")
            if a + b <= 0:  # 2-D bulk modulus lambda1 + 2*lambda2/d
                raise ValueError("material violates positive bulk response")
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @property
    def n_phases(self):
        return len(self.lambda1)

    @classmethod
    def from_young_poisson(cls, E, nu, kind="plane_strain"):
        """Lame constants from Young's modulus / Poisson ratio per phase.

        kind selects the 2-D interpretation; plane_strain uses the 3-D
        constants directly, plane_stress the usual reduced lambda1.
        """
        E = np.atleast_1d(np.asarray(E, dtype=float))
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        if nu.size == 1:
            nu = np.full_like(E, nu[0])
        if kind == "plane_strain":
            lam1 = E * nu / ((1 + nu) * (1 - 2 * nu))
        elif kind == "plane_stress":
            lam1 = E * nu / (1 - nu**2)
        else:
            raise ValueError(f"unknown 2-D interpretation {kind!r}")
        lam2 = E / (2 * (1 + nu))
        return cls(tuple(lam1), tuple(lam2))

    def scaled(self, s):
        return Material(tuple(s * v for v in self.lambda1),
                        tuple(s * v for v in self.lambda2))


@dataclass
class SparseSystem:
    """Assembled system; matrix stays the unconstrained operator until
    apply_dirichlet produces the eliminated version."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained_dofs: list = field(default_factory=list)  # (dof, value) pairs

    @property
    def n_dofs(self):
        return self.matrix.shape[0]


# 6-point Gauss rule on the reference triangle, exact to degree 4
_GP_A, _GP_B = 0.445948490915965, 0.091576213509771
_GW_A, _GW_B = 0.111690794839005, 0.054975871827661
_TRI_POINTS = np.array([
    (_GP_A, _GP_A), (1 - 2 * _GP_A, _GP_A), (_GP_A, 1 - 2 * _GP_A),
    (_GP_B, _GP_B), (1 - 2 * _GP_B, _GP_B), (_GP_B, 1 - 2 * _GP_B),
])
_TRI_WEIGHTS = np.array([_GW_A] * 3 + [_GW_B] * 3)

# 3-point Gauss on [-1, 1], exact to degree 5
_EDGE_POINTS = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


def _p2_gradients(xi, eta):
    """Reference gradients of the 6 quadratic shapes, connectivity
    (v0, v1, v2, m01, m12, m20)."""
    return np.array([
        [4 * (xi + eta) - 3, 4 * (xi + eta) - 3],
        [4 * xi - 1, 0.0],
        [0.0, 4 * eta - 1],
        [4 * (1 - 2 * xi - eta), -4 * xi],
        [4 * eta, 4 * xi],
        [-4 * eta, 4 * (1 - xi - 2 * eta)],
    ])


def _p2_shapes(xi, eta):
    lam = 1 - xi - eta
    return np.array([
        lam * (2 * lam - 1), xi * (2 * xi - 1), eta * (2 * eta - 1),
        4 * lam * xi, 4 * xi * eta, 4 * eta * lam,
    ])


def _elastic_d(lam1, lam2):
    return np.array([
        [lam1 + 2 * lam2, lam1, 0.0],
        [lam1, lam1 + 2 * lam2, 0.0],
        [0.0, 0.0, lam2],
    ])


def element_stiffness(nodes, lambda1, lambda2):
    """12x12 stiffness of one 6-node triangle (straight edges, midside nodes
    at edge midpoints, so the geometry mapping is affine)."""
    nodes = np.asarray(nodes, dtype=float)
    jac = np.array([nodes[1] - nodes[0], nodes[2] - nodes[0]]).T
    det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    if det <= 0:
        raise ValueError("degenerate or inverted element")
    jinv_t = np.array([[jac[1, 1], -jac[1, 0]], [-jac[0, 1], jac[0, 0]]]) / det
    dmat = _elastic_d(lambda1, lambda2)
    ke = np.zeros((12, 12))
    for (xi, eta), w in zip(_TRI_POINTS, _TRI_WEIGHTS):
        grads = _p2_gradients(xi, eta) @ jinv_t.T
        bmat = np.zeros((3, 12))
        bmat[0, 0::2] = grads[:, 0]
        bmat[1, 1::2] = grads[:, 1]
        bmat[2, 0::2] = grads[:, 1]
        bmat[2, 1::2] = grads[:, 0]
        ke += w * det * bmat.T @ dmat @ bmat
    return ke


def _mesh_of(mesh):
    return mesh.mesh if isinstance(mesh, PatchMesh) else mesh


def assemble(mesh, material: Material) -> SparseSystem:
    """Assemble the global stiffness; rhs starts at zero."""
    fm = _mesh_of(mesh)
    if fm.material_label.max() > material.n_phases:
        raise ValueError("mesh references a material phase without parameters")
    coords = fm.node_coords
    n_dofs = fm.n_dofs

    rows, cols, vals = [], [], []
    # the element matrix is a function of the exact vertex-difference bits
    # and the phase only, so caching on those is bitwise transparent
    cache = {}
    for conn, label in zip(fm.elements, fm.material_label):
        pts = coords[conn[:3]]
        key = (float(pts[1, 0] - pts[0, 0]), float(pts[1, 1] - pts[0, 1]),
               float(pts[2, 0] - pts[0, 0]), float(pts[2, 1] - pts[0, 1]),
               int(label))
        ke = cache.get(key)
        if ke is None:
            ke = element_stiffness(coords[conn], material.lambda1[label - 1],
                                   material.lambda2[label - 1])
            cache[key] = ke
        edofs = node_dofs(conn)
        rows.append(np.repeat(edofs, 12))
        cols.append(np.tile(edofs, 12))
        vals.append(ke.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_dofs, n_dofs),
    ).tocsr()
    return SparseSystem(mat, np.zeros(n_dofs))


def apply_dirichlet(system: SparseSystem, dofs, values) -> SparseSystem:
    """Constrain DoFs by symmetric elimination (rows/cols zeroed, unit diagonal)."""
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    seen = {}
    for d, v in zip(dofs, values):
        d = int(d)
        if d in seen and not np.isclose(seen[d], v, rtol=0, atol=1e-14):
            raise ValueError(f"conflicting constraints on dof {d}: {seen[d]} vs {v}")
        seen[d] = float(v)
    dofs = np.fromiter(seen.keys(), dtype=np.int64)
    values = np.fromiter(seen.values(), dtype=float)

    n = system.n_dofs
    lift = np.zeros(n)
    lift[dofs] = values
    rhs = system.rhs - system.matrix @ lift
    rhs[dofs] = values

    free = np.ones(n)
    free[dofs] = 0.0
    keep = sp.diags(free)
    pin = sp.diags(1.0 - free)
    mat = (keep @ system.matrix @ keep + pin).tocsr()
    constrained = system.constrained_dofs + [(int(d), float(v)) for d, v in zip(dofs, values)]
    return SparseSystem(mat, rhs, constrained)


def assemble_traction(mesh, segment_nodes, traction) -> np.ndarray:
    """Consistent load vector of a traction on a boundary polyline.

    segment_nodes is an arclength-ordered node list of quadratic edges
    (odd length); traction maps (x, y) to a 2-vector.
    """
    fm = _mesh_of(mesh)
    segment_nodes = np.asarray(segment_nodes, dtype=np.int64)
    if segment_nodes.size % 2 == 0:
        raise ValueError("quadratic boundary segment needs an odd node count")
    f = np.zeros(fm.n_dofs)
    coords = fm.node_coords
    for k in range(0, segment_nodes.size - 2, 2):
        tri = segment_nodes[k:k + 3]
        p0, p2 = coords[tri[0]], coords[tri[2]]
        half = 0.5 * np.linalg.norm(p2 - p0)  # straight edge Jacobian
        for xi, w in zip(_EDGE_POINTS, _EDGE_WEIGHTS):
            shapes = np.array([0.5 * xi * (xi - 1), 1 - xi**2, 0.5 * xi * (xi + 1)])
            x = shapes @ coords[tri]
            t = np.asarray(traction(x[0], x[1]), dtype=float)
            for loc, nid in enumerate(tri):
                f[2 * nid:2 * nid + 2] += w * half * shapes[loc] * t
    return f


def factorize(matrix):
    """Direct factorization returning a solve callable; reused for many rhs.

    Falls back to conjugate gradients when the sparse LU fails (the offline
    operators are symmetric positive definite on their free DoFs)."""
    try:
        lu = spla.splu(matrix.tocsc())
        return lu.solve
    except (RuntimeError, MemoryError):
        pass

    csr = matrix.tocsr()

    def cg_solve(rhs):
        x, info = spla.cg(csr, rhs, rtol=1e-12, atol=0.0, maxiter=20 * csr.shape[0])
        if info != 0:
            raise SolverError(f"conjugate gradient fallback failed (info={info})")
        return x

    return cg_solve


def solve(system: SparseSystem) -> np.ndarray:
    """Direct solve of the constrained system with singularity and residual checks."""
    if not system.constrained_dofs:
        raise SolverError("system has no constraints; stiffness kernel present")
    try:
        lu = spla.splu(system.matrix.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from None
    diag = np.abs(lu.U.diagonal())
    if diag.min() < 1e-13 * diag.max():
        raise SolverError(
            "system is numerically singular (insufficient constraints?)")
    u = lu.solve(system.rhs)
    if not np.all(np.isfinite(u)):
        raise SolverError("solution contains non-finite entries (singular system?)")
    resid = np.linalg.norm(system.matrix @ u - system.rhs)
    scale = max(np.linalg.norm(system.rhs), 1e-30)
    if resid > 1e-10 * scale:
        raise SolverError(f"relative residual {resid / scale:.2e} exceeds 1e-10")
    return u


def energy_inner(u, v, system) -> float:
    """Energy inner product a(u, v) with the unconstrained stiffness."""
    mat = system.matrix if isinstance(system, SparseSystem) else system
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape[0] != mat.shape[0] or v.shape[0] != mat.shape[0]:
        raise ValueError("vector length does not match the operator dimension")
    return float(u @ (mat @ v))


def energy_norm(v, system) -> float:
    return float(np.sqrt(max(energy_inner(v, v, system), 0.0)))


def edge_mass_1d(nodes_xy):
    """Exact scalar L2 mass matrix of a quadratic polyline (odd node count)."""
    nodes_xy = np.asarray(nodes_xy, dtype=float)
    n = nodes_xy.shape[0]
    if n % 2 == 0 or n < 3:
        raise ValueError("quadratic polyline needs an odd node count >= 3")
    mass = np.zeros((n, n))
    ref = np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0
    for k in range(0, n - 2, 2):
        length = np.linalg.norm(nodes_xy[k + 2] - nodes_xy[k])
        mass[k:k + 3, k:k + 3] += length * ref
    return mass


def boundary_mass_matrix(mesh, segments) -> sp.csr_matrix:
    """L2 Gramian of boundary traces over the given node polylines.

    Returns a full-mesh-size sparse matrix acting on interleaved (x, y)
    DoFs; slice with the boundary DoF set to obtain the source-space inner
    product of a transfer operator.
    """
    fm = _mesh_of(mesh)
    rows, cols, vals = [], [], []
    for seg in segments:
        seg = np.asarray(seg, dtype=np.int64)
        mloc = edge_mass_1d(fm.node_coords[seg])
        nz = np.nonzero(mloc)
        for comp in range(2):
            rows.append(2 * seg[nz[0]] + comp)
            cols.append(2 * seg[nz[1]] + comp)
            vals.append(mloc[nz])
    if not rows:
        raise ValueError("no boundary segments given")
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fm.n_dofs, fm.n_dofs),
    )
    return mat.tocsr()


def export_coo(matrix, path):
    """Write a sparse matrix in coordinate text format (row col value)."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.16g}\n")


def rigid_body_modes(coords):
    """Span of the 2-D rigid motions on the given nodes (translations + rotation)."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    modes = np.zeros((2 * n, 3))
    modes[0::2, 0] = 1.0
    modes[1::2, 1] = 1.0
    center = coords.mean(axis=0)
    modes[0::2, 2] = -(coords[:, 1] - center[1])
    modes[1::2, 2] = coords[:, 0] - center[0]
    return modes
