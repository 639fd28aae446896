"""Galerkin reduction per subdomain and conforming global ROM assembly.

Global DoF layout: 2 DoFs per coarse vertex first (x then y), then one block
per coarse edge holding that edge's fine-scale mode coefficients. Cell-local
ordering matches the basis matrix columns: 8 coarse DoFs, then the edge
blocks in the order bottom, right, top, left.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import EDGE_IDS, node_dofs


@dataclass
class DofMap:
    coarse: object
    edge_counts: dict            # coarse edge id -> mode count
    edge_offsets: dict           # coarse edge id -> first global dof

    @property
    def n_dofs(self):
        nv = 2 * self.coarse.n_vertices
        return nv + sum(self.edge_counts.values())

    def vertex_dof(self, vertex, comp):
        return 2 * int(vertex) + int(comp)

    def edge_dofs(self, edge):
        off = self.edge_offsets[edge]
        return np.arange(off, off + self.edge_counts[edge], dtype=np.int64)

    def cell_dofs(self, cell):
        verts = self.coarse.cells[cell]
        out = [node_dofs(verts)]
        for e in self.coarse.cell_edges[cell]:
            out.append(self.edge_dofs(int(e)))
        return np.concatenate(out)


def build_dof_map(coarse, n_mpe, edge_counts=None) -> DofMap:
    """Deterministic global numbering; vertices first, then edges in order.

    edge_counts optionally caps individual edges below n_mpe (POD rank or
    trace-capacity limits); the uniform count gives N = 2 n_v + n_mpe n_e.
    """
    counts = {}
    for e in range(coarse.n_edges):
        cap = n_mpe if edge_counts is None else min(n_mpe, edge_counts.get(e, n_mpe))
        counts[e] = int(cap)
    offsets = {}
    off = 2 * coarse.n_vertices
    for e in range(coarse.n_edges):
        offsets[e] = off
        off += counts[e]
    return DofMap(coarse, counts, offsets)


@dataclass
class ReducedLocal:
    """Reduced stiffness/load contribution of one subdomain."""

    A_n: np.ndarray
    f_n: np.ndarray
    cell: int
    provenance: str = "empirical"


def reduce_local(A_loc, f_loc, B, cell=-1, provenance="empirical") -> ReducedLocal:
    """Exact triple product B^T A B and reduced load B^T f."""
    Bm = np.asarray(B, dtype=float)
    if A_loc.shape[0] != Bm.shape[0]:
        raise ValueError("basis and local operator dimensions do not conform")
    An = Bm.T @ (A_loc @ Bm)
    An = 0.5 * (An + An.T)
    if f_loc is None:
        fn = np.zeros(Bm.shape[1])
    else:
        f_loc = np.asarray(f_loc, dtype=float)
        if f_loc.shape[0] != Bm.shape[0]:
            raise ValueError("load vector does not conform")
        fn = Bm.T @ f_loc
    return ReducedLocal(An, fn, int(cell), provenance)


def assemble_global(reduced, dof_map: DofMap):
    """Scatter-add the local contributions into the global ROM system."""
    N = dof_map.n_dofs
    rows, cols, vals = [], [], []
    f = np.zeros(N)
    for red in reduced:
        gdofs = dof_map.cell_dofs(red.cell)
        if red.A_n.shape[0] != gdofs.size:
            raise ValueError(
                f"cell {red.cell}: reduced block size {red.A_n.shape[0]} does not "
                f"match the DoF map ({gdofs.size})")
        rows.append(np.repeat(gdofs, gdofs.size))
        cols.append(np.tile(gdofs, gdofs.size))
        vals.append(red.A_n.ravel())
        f[gdofs] += red.f_n
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N)).tocsr()
    return A, f


def _significant_rows(modes, masked_cols, product):
    """Indices of modes with non-negligible content in the masked components."""
    sig = []
    for j, mode in enumerate(modes):
        total = np.sqrt(mode @ product @ mode)
        part = np.sqrt(mode[masked_cols] @ product[np.ix_(masked_cols, masked_cols)]
                       @ mode[masked_cols])
        if total > 0 and part > 1e-8 * total:
            sig.append(j)
    return sig


def project_edge_dirichlet(g_trace, endpoint_values, modes, product, comp_mask=(True, True)):
    """Edge-mode coefficients of Dirichlet data on one coarse edge.

    The fine-scale part (data minus the linear interpolant between the edge's
    endpoint vertex values) is L2-projected onto the edge modes. With a
    partial component mask, only modes carrying that component are
    constrained, via a least-squares fit on the masked component.
    """
    n_nodes = g_trace.shape[0] // 2
    t = np.linspace(0.0, 1.0, n_nodes)
    lin = np.outer(1 - t, endpoint_values[0]) + np.outer(t, endpoint_values[1])
    fine = g_trace - lin.ravel()

    if modes.shape[0] == 0:
        return {}
    if all(comp_mask):
        V = modes.T
        G = V.T @ product @ V
        rhs = V.T @ (product @ fine)
        coeff = np.linalg.solve(G, rhs)
        return {j: float(c) for j, c in enumerate(coeff)}

    masked = np.zeros(2 * n_nodes, dtype=bool)
    for comp, active in enumerate(comp_mask):
        if active:
            masked[comp::2] = True
    cols = np.flatnonzero(masked)
    sig = _significant_rows(modes, cols, product)
    if not sig:
        return {}
    V = modes[sig][:, cols].T
    Pm = product[np.ix_(cols, cols)]
    G = V.T @ Pm @ V
    rhs = V.T @ (Pm @ fine[cols])
    coeff = np.linalg.solve(G, rhs)
    return {int(j): float(c) for j, c in zip(sig, coeff)}


def solve_rom(A_N, f_N, constraints):
    """Constrained reduced solve; constraints maps global dof -> value."""
    system = fem.SparseSystem(A_N, f_N)
    dofs = np.fromiter(constraints.keys(), dtype=np.int64)
    vals = np.fromiter(constraints.values(), dtype=float)
    system = fem.apply_dirichlet(system, dofs, vals)
    return fem.solve(system)


def reconstruct(u_N, dof_map: DofMap, B, cell):
    """Fine-grid displacement of one cell from the global ROM solution."""
    Bm = B.B if hasattr(B, "B") else np.asarray(B)
    return Bm @ u_N[dof_map.cell_dofs(cell)]


def save_rom(path, A_N, f_N, dof_map: DofMap):
    """Persist the assembled reduced system and its DoF layout."""
    coo = sp.coo_matrix(A_N)
    edges = np.array(sorted(dof_map.edge_counts), dtype=np.int64)
    np.savez(path, row=coo.row, col=coo.col, data=coo.data,
             shape=np.array(coo.shape), f=np.asarray(f_N),
             edges=edges,
             counts=np.array([dof_map.edge_counts[e] for e in edges]),
             offsets=np.array([dof_map.edge_offsets[e] for e in edges]))


def load_rom(path, coarse):
    with np.load(path) as data:
        A_N = sp.coo_matrix((data["data"], (data["row"], data["col"])),
                            shape=tuple(data["shape"])).tocsr()
        f_N = data["f"]
        counts = {int(e): int(c) for e, c in zip(data["edges"], data["counts"])}
        offsets = {int(e): int(o) for e, o in zip(data["edges"], data["offsets"])}
    return A_N, f_N, DofMap(coarse, counts, offsets)
