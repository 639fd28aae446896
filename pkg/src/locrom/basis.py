"""Local reduced bases on an RCE: harmonic extensions and the basis matrix.

Column convention of the basis matrix: 8 coarse columns first (vertex order
bottom-left, bottom-right, top-right, top-left; x component before y), then
the fine-scale columns grouped by edge in the order bottom, right, top, left.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fem, shapes
from .mesh import BOTTOM, EDGE_IDS, FineMesh, node_dofs

# vertex order used for the coarse columns, matching CoarseGrid cell order
VERTEX_ORDER = ("bl", "br", "tr", "tl")


@dataclass
class EdgeModeSet:
    """Fine-scale edge modes per edge id, rows are modes over the edge trace
    DoFs (interleaved x/y, canonical orientation)."""

    modes: dict                      # edge id -> (k_e, 2 * n_edge_nodes)
    provenance: str                  # "empirical" | "hierarchical"
    eigenvalues: dict = field(default_factory=dict)

    def count(self, edge):
        return self.modes[edge].shape[0]

    def truncated(self, n_mpe):
        """First min(n_mpe, available) modes per edge (POD/nesting order)."""
        return EdgeModeSet(
            {e: m[: min(n_mpe, m.shape[0])] for e, m in self.modes.items()},
            self.provenance,
            {e: v for e, v in self.eigenvalues.items()},
        )


@dataclass
class BasisMatrix:
    """Reduced basis in fine-grid coefficients; columns per the module convention."""

    B: np.ndarray
    edge_counts: dict                # edge id -> number of fine columns
    provenance: str

    @property
    def n_columns(self):
        return self.B.shape[1]

    def edge_slice(self, edge):
        start = 8
        for e in EDGE_IDS:
            k = self.edge_counts[e]
            if e == edge:
                return slice(start, start + k)
            start += k
        raise KeyError(edge)


class HarmonicExtender:
    """Extends boundary data a-harmonically into the RCE interior.

    The stiffness is assembled and the interior block factorized once; every
    coarse shape and edge mode extension reuses the factorization.
    """

    def __init__(self, rce: FineMesh, material: fem.Material):
        if rce.boundary_edges is None:
            raise ValueError("extension requires a rectangular RCE mesh")
        self.rce = rce
        self.system = fem.assemble(rce, material)
        bnodes = np.unique(np.concatenate([rce.boundary_edges[e] for e in EDGE_IDS]))
        self.boundary_dofs = node_dofs(bnodes)
        mask = np.ones(rce.n_dofs, dtype=bool)
        mask[self.boundary_dofs] = False
        self.interior_dofs = np.flatnonzero(mask)
        mat = self.system.matrix
        self._solve = fem.factorize(mat[np.ix_(self.interior_dofs, self.interior_dofs)])
        self._coupling = mat[np.ix_(self.interior_dofs, self.boundary_dofs)]

    def extend(self, boundary_values):
        """Field with the given trace on the full boundary DoF set."""
        g = np.asarray(boundary_values, dtype=float)
        if g.shape[0] != self.boundary_dofs.size:
            raise ValueError("boundary data length mismatch")
        u = np.zeros(self.rce.n_dofs)
        u[self.boundary_dofs] = g
        u[self.interior_dofs] = self._solve(-(self._coupling @ g))
        return u


def extend_coarse(extender: HarmonicExtender) -> np.ndarray:
    """The 8 coarse basis columns: harmonic extensions of the bilinear vertex
    shapes applied per displacement component."""
    rce = extender.rce
    coords = rce.node_coords
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    xi = 2 * (coords[:, 0] - lo[0]) / (hi[0] - lo[0]) - 1
    eta = 2 * (coords[:, 1] - lo[1]) / (hi[1] - lo[1]) - 1
    vertex_shapes = shapes.bilinear_vertex_shapes(xi, eta)  # (4, n_nodes)

    bnode = extender.boundary_dofs[0::2] // 2
    cols = np.zeros((rce.n_dofs, 8))
    for v in range(4):
        trace_scalar = vertex_shapes[v][bnode]
        for comp in range(2):
            g = np.zeros(extender.boundary_dofs.size)
            g[comp::2] = trace_scalar
            cols[:, 2 * v + comp] = extender.extend(g)
    return cols


def extend_edge_mode(extender: HarmonicExtender, edge, chi) -> np.ndarray:
    """Extend one edge mode; zero trace on the other three edges."""
    rce = extender.rce
    chi = np.asarray(chi, dtype=float)
    enodes = rce.boundary_edges[edge]
    if chi.shape[0] != 2 * enodes.size:
        raise ValueError("edge mode length mismatch")
    scale = np.abs(chi).max()
    endpoints = np.abs(np.concatenate([chi[:2], chi[-2:]]))
    if scale > 0 and endpoints.max() > 1e-12 * scale:
        raise ValueError("edge mode must vanish at the edge endpoints")
    u_b = np.zeros(rce.n_dofs)
    u_b[node_dofs(enodes)] = chi
    return extender.extend(u_b[extender.boundary_dofs])


def hierarchical_edge_basis(n_mpe, rce: FineMesh) -> EdgeModeSet:
    """Integrated-Legendre bubbles sampled at the edge trace nodes.

    Mode ordering interleaves displacement components: x bubble of degree 2,
    y bubble of degree 2, x of degree 3, and so on, so a truncation at any
    n_mpe treats both components symmetrically.
    """
    if n_mpe < 0:
        raise ValueError("n_mpe must be non-negative")
    modes = {}
    for e in EDGE_IDS:
        enodes = rce.boundary_edges[e]
        pts = rce.node_coords[enodes]
        arc = np.linalg.norm(pts - pts[0], axis=1)
        xi = 2 * arc / arc[-1] - 1
        max_modes = 2 * (enodes.size - 2)  # sampled bubbles above this are dependent
        if n_mpe > max_modes:
            raise ValueError(
                f"n_mpe={n_mpe} exceeds the {max_modes} independent trace bubbles"
            )
        block = np.zeros((n_mpe, 2 * enodes.size))
        for m in range(n_mpe):
            values = shapes.hierarchical_edge_fn(1 + m // 2, xi)
            values[0] = values[-1] = 0.0  # exact endpoints
            block[m, m % 2::2] = values
        modes[e] = block
    return EdgeModeSet(modes, "hierarchical")


def build_basis_matrix(coarse_cols, edge_extensions, provenance) -> BasisMatrix:
    """Stack coarse and per-edge fine columns and verify full column rank.

    edge_extensions maps edge id -> (n_dofs, k_e) extension columns.
    """
    blocks = [np.asarray(coarse_cols, dtype=float)]
    counts = {}
    for e in EDGE_IDS:
        ext = np.asarray(edge_extensions.get(e, np.zeros((blocks[0].shape[0], 0))))
        counts[e] = ext.shape[1]
        if ext.shape[1]:
            blocks.append(ext)
    B = np.hstack(blocks)
    if np.linalg.matrix_rank(B) < B.shape[1]:
        raise ValueError("basis matrix is rank deficient (duplicate modes?)")
    return BasisMatrix(B, counts, provenance)


def assemble_basis(extender: HarmonicExtender, mode_sets, n_mpe) -> BasisMatrix:
    """Coarse columns plus extensions of the first n_mpe modes per edge.

    mode_sets maps edge id -> EdgeModeSet supplying that edge (different
    edges of one cell may draw from different oversampling configurations).
    """
    coarse = extend_coarse(extender)
    exts = {}
    provenance = None
    for e in EDGE_IDS:
        mset = mode_sets[e]
        provenance = provenance or mset.provenance
        chis = mset.truncated(n_mpe).modes[e]
        ext = np.zeros((extender.rce.n_dofs, chis.shape[0]))
        for j, chi in enumerate(chis):
            ext[:, j] = extend_edge_mode(extender, e, chi)
        exts[e] = ext
    return build_basis_matrix(coarse, exts, provenance or "empirical")
