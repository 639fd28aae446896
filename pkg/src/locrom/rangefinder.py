"""Offline sampling: transfer operators, training sets, adaptive randomized
range approximation, POD compression and edge-snapshot harvesting."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.special import erfinv

from . import fem, shapes
from .basis import EdgeModeSet
from .mesh import BOTTOM, EDGE_IDS, LEFT, RIGHT, TOP, PatchMesh, node_dofs


class TrainingSetExhausted(RuntimeError):
    pass


class RangeFinderStall(RuntimeError):
    pass


@dataclass
class RangeFinderParams:
    tol: float = 1e-3
    n_t: int = 20
    eps_algofail: float = 1e-15
    stall_window: int | None = None   # defaults to 5 * n_t
    stall_rtol: float = 1e-3
    drop_tol: float = 1e-10           # relative norm below which a snapshot adds no basis vector
    max_snapshots: int | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.eps_algofail < 1:
            raise ValueError("eps_algofail must lie in (0, 1)")
        if self.n_t < 1:
            raise ValueError("need at least one test vector")


@dataclass
class TrainingSet:
    """Ordered training samples on the gamma_mu DoFs.

    SoI samples (rows of soi, in POD-energy order) are consumed first, then
    fresh random normal vectors if allowed.
    """

    soi: np.ndarray
    allow_random: bool = True

    @classmethod
    def random_only(cls, dim):
        return cls(np.zeros((0, dim)), True)


@dataclass
class SnapshotSet:
    """Displacement snapshots restricted to the target cell (columns)."""

    snapshots: np.ndarray            # (n_target_dofs, n_samples)
    tags: tuple                      # "soi" | "random" per column
    product: str = "energy"

    @property
    def n_samples(self):
        return self.snapshots.shape[1]


@dataclass
class RangeFinderResult:
    snapshots: SnapshotSet
    basis: np.ndarray                # range-orthonormal basis of span(snapshots)
    test_vectors: np.ndarray         # residual test vectors after the run
    c_est: float
    estimator: float                 # final value of (max test norm) * c_est
    history: list = field(default_factory=list)
    n_soi: int = 0
    n_random: int = 0
    lambda_min: float = 0.0


class TransferOperator:
    """Maps boundary data on gamma_mu to the patch solution on the target cell.

    The patch stiffness is factorized once on the free DoFs; every apply is a
    single triangular solve. With include_global_bcs the configuration's
    Dirichlet data and tractions enter the solve (affine response); without,
    those are homogenized and the operator is linear.
    """

    def __init__(self, patch: PatchMesh, matrix, target_cell, source_product,
                 range_product, dirichlet_dofs=None, dirichlet_values=None,
                 traction=None):
        self.patch = patch
        self.gamma_dofs = np.asarray(patch.gamma_mu_dofs, dtype=np.int64)
        if self.gamma_dofs.size == 0:
            raise ValueError("configuration has no gamma_mu DoFs")
        self.dirichlet_dofs = np.asarray(
            dirichlet_dofs if dirichlet_dofs is not None else [], dtype=np.int64)
        self.dirichlet_values = np.asarray(
            dirichlet_values if dirichlet_values is not None else [], dtype=float)
        overlap = np.intersect1d(self.gamma_dofs, self.dirichlet_dofs)
        if overlap.size:
            raise ValueError("gamma_mu and Dirichlet DoF sets overlap")
        self.target_cell = int(target_cell)
        self.target_dofs = patch.cell_dofs(target_cell)
        self.source_product = source_product   # |gamma| x |gamma|
        self.range_product = range_product     # RCE stiffness (energy Gramian)
        self.traction = traction
        # the range product is a seminorm with the rigid motions as kernel;
        # restrictions are returned modulo that kernel to keep Gram-Schmidt
        # in the range space numerically stable
        target_nodes = self.target_dofs[0::2] // 2
        rigid = fem.rigid_body_modes(patch.mesh.node_coords[target_nodes])
        self._rigid_q = np.linalg.qr(rigid)[0]

        n = matrix.shape[0]
        prescribed = np.concatenate([self.gamma_dofs, self.dirichlet_dofs])
        mask = np.ones(n, dtype=bool)
        mask[prescribed] = False
        self.free_dofs = np.flatnonzero(mask)
        self._prescribed = prescribed
        self._solve = fem.factorize(matrix[np.ix_(self.free_dofs, self.free_dofs)])
        self._coupling = matrix[np.ix_(self.free_dofs, prescribed)].tocsr()
        self._n = n

    @property
    def source_dim(self):
        return self.gamma_dofs.size

    @property
    def range_dim(self):
        return self.target_dofs.size

    def solve_patch(self, g, include_global_bcs=False):
        """Full patch solution for boundary data g on gamma_mu."""
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.gamma_dofs.size:
            raise ValueError("boundary data does not match the gamma_mu DoF count")
        u = np.zeros(self._n)
        u[self.gamma_dofs] = g
        if include_global_bcs and self.dirichlet_dofs.size:
            u[self.dirichlet_dofs] = self.dirichlet_values
        rhs = -(self._coupling @ u[self._prescribed])
        if include_global_bcs and self.traction is not None:
            rhs = rhs + self.traction[self.free_dofs]
        u[self.free_dofs] = self._solve(rhs)
        return u

    def apply(self, g, include_global_bcs=False, remove_rigid=True):
        u = self.solve_patch(g, include_global_bcs)[self.target_dofs]
        if remove_rigid:
            u = u - self._rigid_q @ (self._rigid_q.T @ u)
        return u

    def range_norm(self, v):
        return float(np.sqrt(max(v @ (self.range_product @ v), 0.0)))

    def source_lambda_min(self):
        mat = self.source_product
        if mat.shape[0] <= 2000:
            lam = sla.eigvalsh(np.asarray(mat.todense()))
            return float(lam[0])
        lam = spla.eigsh(mat.tocsc(), k=1, sigma=0, return_eigenvectors=False)
        return float(lam[0])


def transfer_apply(T: TransferOperator, g, include_global_bcs=False):
    return T.apply(g, include_global_bcs)


def random_boundary_vector(rng, dim):
    """I.i.d. standard normal boundary data; reproducible under a seeded rng."""
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    return rng.standard_normal(dim)


def estimator_factor(lambda_min, n_t, eps_testfail):
    """Error estimator factor of the adaptive range approximation,
    1 / (sqrt(2 lambda_min) * erfinv(eps_testfail ** (1 / n_t)))."""
    if lambda_min <= 0:
        raise ValueError("source Gramian must be positive definite")
    arg = eps_testfail ** (1.0 / n_t)
    if not 0 < arg < 1:
        raise ValueError("erfinv argument outside (0, 1)")
    return float(1.0 / (np.sqrt(2.0 * lambda_min) * erfinv(arg)))


def _orthonormal_append(basis, v, product, drop_tol):
    """Two-pass modified Gram-Schmidt append in the given inner product.

    Returns the new orthonormal vector or None when v is (numerically)
    dependent on the current basis.
    """
    norm0 = np.sqrt(max(v @ (product @ v), 0.0))
    if norm0 == 0.0:
        return None
    w = v.copy()
    for _ in range(2):
        for b in basis:
            w = w - b * float(b @ (product @ w))
    norm = np.sqrt(max(w @ (product @ w), 0.0))
    if norm <= drop_tol * norm0:
        return None
    return w / norm


def deflate_rigid(vectors, coords):
    """Remove the (Euclidean) rigid-motion content of displacement vectors.

    The energy Gramian is only a seminorm with the rigid motions as kernel;
    deflating them first keeps Gram-Schmidt in that product stable without
    changing any energy inner product.
    """
    rigid = np.linalg.qr(fem.rigid_body_modes(coords))[0]
    vectors = np.asarray(vectors, dtype=float)
    return vectors - rigid @ (rigid.T @ vectors)


def orthonormalize(vectors, product, drop_tol=1e-10):
    """Gram-Schmidt orthonormalization, dropping dependent vectors."""
    basis = []
    for v in np.asarray(vectors, dtype=float).T:
        b = _orthonormal_append(basis, v, product, drop_tol)
        if b is not None:
            basis.append(b)
    if not basis:
        return np.zeros((np.asarray(vectors).shape[0], 0))
    return np.column_stack(basis)


def compute_snapshots(T: TransferOperator, params: RangeFinderParams,
                      training: TrainingSet, rng) -> RangeFinderResult:
    """Modified adaptive randomized range approximation.

    Draws SoI samples first (solved with the configuration's global BCs),
    then fresh random normal vectors (homogenized BCs), until the randomized
    posterior estimator (max test-vector range norm) * c_est drops below the
    target tolerance. Returns the unorthonormalized snapshots together with
    the orthonormal basis and diagnostics.
    """
    dim = T.source_dim
    n_test = params.n_t
    test = []
    for _ in range(n_test):
        g = random_boundary_vector(rng, dim)
        test.append(T.apply(g))
    test = np.column_stack(test)

    n_op = min(T.source_dim, T.range_dim)  # provable bound on the operator rank
    eps_testfail = params.eps_algofail / n_op
    lam_min = T.source_lambda_min()
    c_est = estimator_factor(lam_min, n_test, eps_testfail)

    basis = []
    snapshots = []
    tags = []
    history = []
    n_soi = n_random = 0
    soi_queue = list(np.asarray(training.soi, dtype=float))
    stall_window = params.stall_window or 5 * params.n_t
    best = np.inf
    stalled = 0

    def current_estimator():
        norms = [T.range_norm(test[:, k]) for k in range(n_test)]
        return max(norms) * c_est

    est = current_estimator()
    history.append(est)
    while est > params.tol:
        if params.max_snapshots is not None and len(snapshots) >= params.max_snapshots:
            raise RangeFinderStall(
                f"snapshot budget {params.max_snapshots} exhausted at estimator {est:.3e}")
        if soi_queue:
            g = soi_queue.pop(0)
            u = T.apply(g, include_global_bcs=True)
            tags.append("soi")
            n_soi += 1
        elif training.allow_random:
            g = random_boundary_vector(rng, dim)
            u = T.apply(g)
            tags.append("random")
            n_random += 1
        else:
            raise TrainingSetExhausted(
                f"training set exhausted at estimator {est:.3e} > tol {params.tol:.3e}")
        snapshots.append(u)
        b = _orthonormal_append(basis, u, T.range_product, params.drop_tol)
        if b is not None:
            basis.append(b)
            proj = b @ (T.range_product @ test)
            test = test - np.outer(b, proj)
        est = current_estimator()
        history.append(est)
        if est < best * (1.0 - params.stall_rtol):
            best = est
            stalled = 0
        else:
            stalled += 1
            if stalled >= stall_window:
                raise RangeFinderStall(
                    f"estimator stalled at {est:.3e} for {stalled} draws (tol {params.tol:.3e})")

    U = (np.column_stack(snapshots) if snapshots
         else np.zeros((T.range_dim, 0)))
    B = (np.column_stack(basis) if basis
         else np.zeros((T.range_dim, 0)))
    return RangeFinderResult(
        SnapshotSet(U, tuple(tags)), B, test, c_est, est, history,
        n_soi, n_random, lam_min,
    )


def affine_snapshot(T: TransferOperator):
    """Response to the configuration's inhomogeneous data with zero gamma_mu
    boundary values, or None when the data is homogeneous.

    Any patch solution with global BCs splits into this affine part plus a
    member of the homogenized operator's range, so adding the single affine
    snapshot to the pool lets the edge POD see the BC response while the
    range finder itself works with the linear operator only.
    """
    if T.traction is None and not np.any(T.dirichlet_values):
        return None
    return T.apply(np.zeros(T.source_dim), include_global_bcs=True)


def posterior_check(T: TransferOperator, result: RangeFinderResult, n_probe, rng,
                    tol):
    """Count fresh random probes whose projected-residual estimate exceeds tol."""
    B = result.basis
    failures = 0
    for _ in range(n_probe):
        g = random_boundary_vector(rng, T.source_dim)
        u = T.apply(g)
        if B.shape[1]:
            u = u - B @ (B.T @ (T.range_product @ u))
        if T.range_norm(u) * result.c_est > tol:
            failures += 1
    return failures


def pod(snapshots, product, tol=None, modes=None):
    """POD via the method of snapshots.

    The correlation matrix is the Gramian of the snapshot columns in the
    given inner product; modes are returned orthonormal in that product with
    eigenvalues in non-increasing order. Truncation keeps the smallest n with
    sum(lambda[n:]) / sum(lambda) <= tol, or exactly `modes` vectors.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("need at least one snapshot column")
    MS = product @ S
    norms2 = np.einsum("ij,ij->j", S, MS)
    if np.all(norms2 <= 0):
        raise ValueError("all-zero snapshot set")
    corr = S.T @ MS
    corr = 0.5 * (corr + corr.T)
    lam, vec = sla.eigh(corr)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vec = vec[:, order]
    keep = lam > max(lam[0], 0.0) * 1e-13
    lam_kept = lam[keep]
    vec = vec[:, keep]
    if modes is not None:
        n = min(modes, lam_kept.size)
    elif tol is not None:
        total = lam_kept.sum()
        tail = np.concatenate([np.cumsum(lam_kept[::-1])[::-1][1:], [0.0]])
        n = int(np.argmax(tail / total <= tol) + 1) if total > 0 else 0
    else:
        n = lam_kept.size
    chi = S @ (vec[:, :n] / np.sqrt(lam_kept[:n]))
    # the method of snapshots loses orthogonality for trailing eigenvalues;
    # one prefix-preserving Gram-Schmidt pass restores it without changing
    # spans, ordering or eigenvalues
    for j in range(chi.shape[1]):
        v = chi[:, j]
        for k in range(j):
            v = v - chi[:, k] * float(chi[:, k] @ (product @ v))
        nrm = np.sqrt(max(v @ (product @ v), 0.0))
        if nrm > 0:
            chi[:, j] = v / nrm
    return chi, lam_kept


def coarse_part(u, rce):
    """Bilinear interpolant of the four corner-vertex values of u."""
    u = np.asarray(u, dtype=float)
    corners = rce.corner_nodes()
    coords = rce.node_coords
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    xi = 2 * (coords[:, 0] - lo[0]) / (hi[0] - lo[0]) - 1
    eta = 2 * (coords[:, 1] - lo[1]) / (hi[1] - lo[1]) - 1
    vshapes = shapes.bilinear_vertex_shapes(xi, eta)  # (4, n_nodes)
    uc = np.zeros_like(u)
    for v, cn in enumerate(corners):
        for comp in range(2):
            uc[comp::2] += vshapes[v] * u[2 * cn + comp]
    return uc


def fine_part(u, rce):
    return np.asarray(u, dtype=float) - coarse_part(u, rce)


def restrict_to_edges(v, rce):
    """Traces of a fine-scale field on the four edges, canonical orientation."""
    v = np.asarray(v, dtype=float)
    return {e: v[node_dofs(rce.boundary_edges[e])] for e in EDGE_IDS}


def edge_l2_product(rce, edge):
    """Vector-valued L2 Gramian of one RCE edge trace."""
    pts = rce.node_coords[rce.boundary_edges[edge]]
    scalar = fem.edge_mass_1d(pts)
    n = scalar.shape[0]
    full = np.zeros((2 * n, 2 * n))
    full[0::2, 0::2] = scalar
    full[1::2, 1::2] = scalar
    return full


def pooling_groups(cfg, coarse):
    """Edge pooling rule: opposite edges are pooled when both are interior to
    the global domain (a bottom-top and a right-left set); edges touching the
    global boundary keep their own snapshot set."""
    target_edges = dict(zip(EDGE_IDS, (int(e) for e in coarse.cell_edges[cfg.target_cell])))
    boundary = set(int(e) for e in coarse.boundary_edge_ids())

    def on_global(e):
        return target_edges[e] in boundary

    groups = []
    for pair in ((BOTTOM, TOP), (RIGHT, LEFT)):
        if not on_global(pair[0]) and not on_global(pair[1]):
            groups.append(pair)
        else:
            groups.extend((e,) for e in pair)
    return tuple(groups)


def edge_basis_from_snapshots(result_or_snapshots, rce, groups=None,
                              pod_tol=1e-6) -> EdgeModeSet:
    """Fine-scale edge modes from target-cell snapshots.

    Subtracts the coarse part of every snapshot, restricts to the edges,
    pools traces per group and applies POD with the L2(edge) inner product.
    Pooled edges receive identical mode sets.
    """
    U = (result_or_snapshots.snapshots.snapshots
         if isinstance(result_or_snapshots, RangeFinderResult)
         else np.asarray(result_or_snapshots, dtype=float))
    if U.shape[1] == 0:
        raise ValueError("no snapshots to compress")
    if groups is None:
        groups = ((BOTTOM, TOP), (RIGHT, LEFT))
    traces = [restrict_to_edges(fine_part(U[:, k], rce), rce) for k in range(U.shape[1])]

    modes = {}
    eigenvalues = {}
    for group in groups:
        product = edge_l2_product(rce, group[0])
        cols = [traces[k][e] for e in group for k in range(len(traces))]
        S = np.column_stack(cols)
        norms = np.sqrt(np.abs(np.einsum("ij,ij->j", S, product @ S)))
        keep = norms > 1e-12 * max(norms.max(), 1e-300)
        if not keep.any():
            chi = np.zeros((S.shape[0], 0))
            lam = np.zeros(0)
        else:
            chi, lam = pod(S[:, keep], product, tol=pod_tol)
        for e in group:
            modes[e] = np.ascontiguousarray(chi.T)
            eigenvalues[e] = lam
    return EdgeModeSet(modes, "empirical", eigenvalues)


def spectral_basis(U, product, drop_tol=1e-10):
    """Energy-orthonormal subdomain basis from raw target restrictions."""
    U = np.asarray(U, dtype=float)
    if U.shape[1] == 0:
        raise ValueError("no snapshots given")
    return orthonormalize(U, product, drop_tol)


# --- coarse global problem for the SoI training set ------------------------

def _quad_stiffness(cell_size, lam1, lam2):
    """Bilinear quad element stiffness (2x2 Gauss), vertex order bl, br, tr, tl."""
    gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    dmat = np.array([
        [lam1 + 2 * lam2, lam1, 0.0],
        [lam1, lam1 + 2 * lam2, 0.0],
        [0.0, 0.0, lam2],
    ])
    verts = shapes.QUAD_VERTS
    ke = np.zeros((8, 8))
    jac = cell_size / 2.0
    for xi in gp:
        for eta in gp:
            dn = np.column_stack([
                0.25 * verts[:, 0] * (1 + eta * verts[:, 1]),
                0.25 * verts[:, 1] * (1 + xi * verts[:, 0]),
            ]) / jac
            bmat = np.zeros((3, 8))
            bmat[0, 0::2] = dn[:, 0]
            bmat[1, 1::2] = dn[:, 1]
            bmat[2, 0::2] = dn[:, 1]
            bmat[2, 1::2] = dn[:, 0]
            ke += jac * jac * bmat.T @ dmat @ bmat
    return ke


def averaged_lame(rce, material):
    """Volume-averaged Lame constants of the RCE (equal-area elements)."""
    labels = rce.material_label
    lam1 = np.mean([material.lambda1[m - 1] for m in labels])
    lam2 = np.mean([material.lambda2[m - 1] for m in labels])
    return float(lam1), float(lam2)


def solve_coarse_global(coarse, lam1, lam2, dirichlet, tractions):
    """Standard bilinear-quad FEM on the coarse grid with homogenized material.

    dirichlet: iterable of (vertex id, component, value); tractions: iterable
    of (edge id, traction callable). Returns vertex displacements (n_v, 2).
    """
    n = 2 * coarse.n_vertices
    ke = _quad_stiffness(coarse.cell_size, lam1, lam2)
    import scipy.sparse as sp

    rows, cols, vals = [], [], []
    for c in range(coarse.n_cells):
        edofs = node_dofs(coarse.cells[c])
        rows.append(np.repeat(edofs, 8))
        cols.append(np.tile(edofs, 8))
        vals.append(ke.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()

    rhs = np.zeros(n)
    gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    for edge_id, trac in tractions:
        v0, v1 = coarse.edges[edge_id]
        p0, p1 = coarse.vertices[v0], coarse.vertices[v1]
        half = 0.5 * np.linalg.norm(p1 - p0)
        for xi in gp:
            sh = np.array([0.5 * (1 - xi), 0.5 * (1 + xi)])
            x = sh[0] * p0 + sh[1] * p1
            t = np.asarray(trac(x[0], x[1]), dtype=float)
            for loc, vv in enumerate((v0, v1)):
                rhs[2 * vv:2 * vv + 2] += half * sh[loc] * t

    dofs = [2 * int(v) + int(c) for v, c, _ in dirichlet]
    values = [float(val) for _, _, val in dirichlet]
    system = fem.SparseSystem(mat, rhs)
    system = fem.apply_dirichlet(system, dofs, values)
    u = fem.solve(system)
    return u.reshape(-1, 2)


def _find_window(coarse, cell, width, height):
    """Patch-shaped cell window containing `cell`, fully inside the mask,
    with minimal shift from the centered placement."""
    col, row = coarse.cell_index[cell]
    c_pref = col - (width - 1) // 2
    r_pref = row - (height - 1) // 2
    candidates = []
    for c0 in range(max(0, col - width + 1), min(col, coarse.nx - width) + 1):
        for r0 in range(max(0, row - height + 1), min(row, coarse.ny - height) + 1):
            cells = [coarse.cell_at(c0 + dc, r0 + dr)
                     for dr in range(height) for dc in range(width)]
            if -1 in cells:
                continue
            shift = abs(c0 - c_pref) + abs(r0 - r_pref)
            candidates.append((shift, c0, r0, tuple(cells)))
    if not candidates:
        return None
    candidates.sort()
    _, c0, r0, cells = candidates[0]
    return c0, r0, cells


def macro_state_samples(coarse, cfg, patch, coarse_solution,
                        macro_shapes="serendipity"):
    """Boundary data g(alpha) on gamma_mu for every member cell of a class.

    alpha holds the macro shape DoFs (8-node serendipity, P = 16, or 9-node
    biquadratic Lagrange, P = 18) of a patch-shaped window around the member
    cell, interpolated from the coarse global solution; the window is
    shifted minimally where the centered placement leaves the domain.
    Members without a valid window are skipped.
    """
    if macro_shapes == "serendipity":
        shape_fn, n_nodes = shapes.serendipity_quadratic, 8
    elif macro_shapes == "biquadratic":
        shape_fn, n_nodes = shapes.biquadratic_lagrange, 9
    else:
        raise ValueError(f"unknown macro shape family {macro_shapes!r}")
    macro_nodes = np.vstack([shapes.SERENDIPITY_NODES, [(0.0, 0.0)]])[:n_nodes]

    cols = coarse.cell_index[list(cfg.patch_cells), 0]
    rows = coarse.cell_index[list(cfg.patch_cells), 1]
    width = int(cols.max() - cols.min() + 1)
    height = int(rows.max() - rows.min() + 1)
    cs = coarse.cell_size

    gamma_nodes = patch.gamma_mu_dofs[0::2] // 2
    gamma_xy = patch.mesh.node_coords[gamma_nodes]
    patch_lo = np.array([cols.min() * cs, rows.min() * cs])
    span = np.array([width * cs, height * cs])
    xi = 2 * (gamma_xy[:, 0] - patch_lo[0]) / span[0] - 1
    eta = 2 * (gamma_xy[:, 1] - patch_lo[1]) / span[1] - 1
    shape_vals = np.column_stack(
        [shape_fn(i, xi, eta) for i in range(n_nodes)])

    def interp_coarse(x, y):
        cx, cy = x / cs, y / cs
        fuzz = 1e-9
        for col in (int(np.floor(cx)), int(np.floor(cx)) - 1):
            for row in (int(np.floor(cy)), int(np.floor(cy)) - 1):
                if not (-fuzz <= cx - col <= 1 + fuzz and -fuzz <= cy - row <= 1 + fuzz):
                    continue
                cid = coarse.cell_at(col, row)
                if cid == -1:
                    continue
                lx = np.clip(2 * (cx - col) - 1, -1.0, 1.0)
                ly = np.clip(2 * (cy - row) - 1, -1.0, 1.0)
                vals = coarse_solution[coarse.cells[cid]]
                weights = np.array([shapes.coarse_shape(j, lx, ly) for j in range(4)])
                return weights @ vals
        raise ValueError(f"point ({x}, {y}) outside the coarse grid")

    samples = []
    members = []
    for member in cfg.member_cells:
        window = _find_window(coarse, member, width, height)
        if window is None:
            continue
        c0, r0, _ = window
        lo = np.array([c0 * cs, r0 * cs])
        alpha = np.zeros((n_nodes, 2))
        for i, (sx, sy) in enumerate(macro_nodes):
            x = lo[0] + 0.5 * (sx + 1) * width * cs
            y = lo[1] + 0.5 * (sy + 1) * height * cs
            alpha[i] = interp_coarse(x, y)
        g = np.zeros(patch.gamma_mu_dofs.size)
        g[0::2] = shape_vals @ alpha[:, 0]
        g[1::2] = shape_vals @ alpha[:, 1]
        samples.append(g)
        members.append(member)
    return np.asarray(samples), tuple(members)


def soi_training_set(coarse, cfg, patch, source_product, coarse_solution,
                     pod_tol=1e-6, macro_shapes="serendipity") -> TrainingSet:
    """SoI training set: macroscopic states of all member cells, compressed
    by POD in the source inner product, followed by random samples."""
    samples, members = macro_state_samples(coarse, cfg, patch, coarse_solution,
                                           macro_shapes)
    if len(samples) == 0:
        return TrainingSet.random_only(patch.gamma_mu_dofs.size)
    modes, _ = pod(samples.T, source_product, tol=pod_tol)
    return TrainingSet(modes.T, True)
