"""Structured coarse grids, fine RCE meshes and composed patch meshes.

Fine meshes use 6-node quadratic triangles obtained by splitting the cells
of a structured square grid. All nodes live on a regular lattice with half
the grid spacing, which makes node deduplication across composed RCE copies
exact (integer lattice arithmetic instead of floating point comparisons).

DoF convention throughout the package: node k carries DoFs (2k, 2k + 1) for
the x and y displacement components.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

# boundary edge ids of a square subdomain
BOTTOM, RIGHT, TOP, LEFT = 1, 2, 3, 4
EDGE_IDS = (BOTTOM, RIGHT, TOP, LEFT)

MATRIX_PHASE = 1
AGGREGATE_PHASE = 2


@dataclass(frozen=True)
class RceGeometry:
    """Geometry of one representative coarse grid element (unit cell)."""

    side_length: float
    aggregates: tuple = ()  # ((cx, cy), radius) pairs, absolute coordinates
    n_verts_per_edge: int = 7

    def __post_init__(self):
        if self.side_length <= 0:
            raise ValueError("side_length must be positive")
        if self.n_verts_per_edge < 2:
            raise ValueError("n_verts_per_edge must be at least 2")
        s = self.side_length
        aggs = tuple(((float(c[0]), float(c[1])), float(r)) for c, r in self.aggregates)
        object.__setattr__(self, "aggregates", aggs)
        for (cx, cy), r in aggs:
            if r <= 0:
                raise ValueError("aggregate radius must be positive")
            if min(cx, cy, s - cx, s - cy) <= r:
                raise ValueError(f"aggregate at ({cx}, {cy}) touches the cell boundary")
        for a in range(len(aggs)):
            for b in range(a + 1, len(aggs)):
                (ca, ra), (cb, rb) = aggs[a], aggs[b]
                if np.hypot(ca[0] - cb[0], ca[1] - cb[1]) <= ra + rb:
                    raise ValueError("aggregates overlap")


@dataclass
class FineMesh:
    """Quadratic triangle mesh with per-element material labels.

    boundary_edges maps edge id (1=bottom, 2=right, 3=top, 4=left) to node
    index lists ordered by arclength; it is None for non-rectangular meshes.
    vertex_mask flags element vertices (as opposed to midside nodes).
    """

    node_coords: np.ndarray
    elements: np.ndarray
    material_label: np.ndarray
    boundary_edges: dict | None
    vertex_mask: np.ndarray

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_dofs(self):
        return 2 * self.node_coords.shape[0]

    def corner_nodes(self):
        """Node ids of the four corners (bl, br, tr, tl); requires boundary_edges."""
        if self.boundary_edges is None:
            raise ValueError("mesh has no rectangular boundary structure")
        bot = self.boundary_edges[BOTTOM]
        top = self.boundary_edges[TOP]
        return np.array([bot[0], bot[-1], top[-1], top[0]])


def build_rce_mesh(geom: RceGeometry) -> FineMesh:
    """Mesh the unit cell with a structured grid of quadratic triangles.

    Each of the (n_verts_per_edge - 1)^2 squares is split into two 6-node
    triangles. An element is labeled aggregate when its centroid lies inside
    an aggregate disk (staircase approximation of the disk boundary).
    """
    n = geom.n_verts_per_edge
    s = geom.side_length
    m = 2 * (n - 1)  # lattice intervals per side (half the element size)
    coords_1d = np.linspace(0.0, s, m + 1)
    xg, yg = np.meshgrid(coords_1d, coords_1d, indexing="xy")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])

    def nid(i, j):
        return j * (m + 1) + i

    elements = []
    for b in range(n - 1):
        for a in range(n - 1):
            i, j = 2 * a, 2 * b
            # lower-right triangle, then upper-left; both counter-clockwise
            elements.append(
                [nid(i, j), nid(i + 2, j), nid(i + 2, j + 2),
                 nid(i + 1, j), nid(i + 2, j + 1), nid(i + 1, j + 1)]
            )
            elements.append(
                [nid(i, j), nid(i + 2, j + 2), nid(i, j + 2),
                 nid(i + 1, j + 1), nid(i + 1, j + 2), nid(i, j + 1)]
            )
    elements = np.asarray(elements, dtype=np.int64)

    centroids = nodes[elements[:, :3]].mean(axis=1)
    labels = np.full(len(elements), MATRIX_PHASE, dtype=np.int64)
    for (cx, cy), r in geom.aggregates:
        inside = (centroids[:, 0] - cx) ** 2 + (centroids[:, 1] - cy) ** 2 < r**2
        labels[inside] = AGGREGATE_PHASE

    idx = np.arange(m + 1)
    boundary = {
        BOTTOM: nid(idx, 0),
        RIGHT: nid(m, idx),
        TOP: nid(idx, m),
        LEFT: nid(0, idx),
    }
    parity = np.zeros(len(nodes), dtype=bool)
    ii, jj = np.meshgrid(idx, idx, indexing="xy")
    parity[nid(ii.ravel(), jj.ravel())] = (ii.ravel() % 2 == 0) & (jj.ravel() % 2 == 0)
    return FineMesh(nodes, elements, labels, boundary, parity)


@dataclass
class CoarseGrid:
    """Structured quadrilateral coarse grid, possibly with masked-out cells.

    Cells, vertices and edges are numbered row-major over the underlying
    nx-by-ny grid, compacted over the mask. Edge orientation is canonical:
    horizontal edges run left to right, vertical edges bottom to top.
    """

    nx: int
    ny: int
    cell_size: float
    vertices: np.ndarray        # (n_v, 2)
    cells: np.ndarray           # (n_c, 4) vertex ids (bl, br, tr, tl)
    cell_index: np.ndarray      # (n_c, 2) (col, row) of each cell
    edges: np.ndarray           # (n_e, 2) vertex ids, canonical orientation
    cell_edges: np.ndarray      # (n_c, 4) edge ids (bottom, right, top, left)
    edge_cells: np.ndarray      # (n_e, 2) adjacent cell ids, -1 if none

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    _cell_lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._cell_lookup = {
            (int(c), int(r)): i for i, (c, r) in enumerate(self.cell_index)
        }

    def cell_at(self, col, row):
        """Cell id at grid position (col, row), or -1 if masked out/absent."""
        return self._cell_lookup.get((col, row), -1)

    def boundary_edge_ids(self):
        return np.flatnonzero((self.edge_cells == -1).any(axis=1))

    def cell_origin(self, cell):
        col, row = self.cell_index[cell]
        return np.array([col * self.cell_size, row * self.cell_size])

    def edge_midpoint(self, edge):
        v0, v1 = self.edges[edge]
        return 0.5 * (self.vertices[v0] + self.vertices[v1])

    def is_horizontal(self, edge):
        v0, v1 = self.edges[edge]
        return abs(self.vertices[v1][1] - self.vertices[v0][1]) < 1e-12 * self.cell_size


def build_coarse_grid(shape, cell_size=1.0) -> CoarseGrid:
    """Build a coarse grid from a shape spec.

    shape is ("rectangle", nx, ny) or ("lpanel", k); the L-panel is the
    2k-by-2k grid with the lower-right k-by-k quadrant removed.
    """
    kind = shape[0]
    if kind == "rectangle":
        _, nx, ny = shape
        keep = lambda c, r: True  # noqa: E731
    elif kind == "lpanel":
        _, k = shape
        nx = ny = 2 * k
        keep = lambda c, r: c < k or r >= k  # noqa: E731
    else:
        raise ValueError(f"unknown coarse grid shape {shape!r}")
    if nx < 1 or ny < 1:
        raise ValueError("grid dimensions must be at least 1")

    kept = [(c, r) for r in range(ny) for c in range(nx) if keep(c, r)]
    if not kept:
        raise ValueError("mask removes every cell")

    # compact vertex numbering over the kept cells, row-major
    vert_id = {}
    for c, r in kept:
        for dc, dr in ((0, 0), (1, 0), (1, 1), (0, 1)):
            vert_id.setdefault((c + dc, r + dr), None)
    for rank, key in enumerate(sorted(vert_id, key=lambda k: (k[1], k[0]))):
        vert_id[key] = rank
    vertices = np.zeros((len(vert_id), 2))
    for (c, r), i in vert_id.items():
        vertices[i] = (c * cell_size, r * cell_size)

    # edges: horizontal keyed (c, r, "h"), vertical (c, r, "v"); canonical order
    edge_id = {}

    def add_edge(key):
        if key not in edge_id:
            edge_id[key] = None

    for c, r in kept:
        add_edge((c, r, "h"))
        add_edge((c, r + 1, "h"))
        add_edge((c, r, "v"))
        add_edge((c + 1, r, "v"))
    for rank, key in enumerate(sorted(edge_id, key=lambda k: (k[2], k[1], k[0]))):
        edge_id[key] = rank
    edges = np.zeros((len(edge_id), 2), dtype=np.int64)
    for (c, r, o), i in edge_id.items():
        if o == "h":
            edges[i] = (vert_id[(c, r)], vert_id[(c + 1, r)])
        else:
            edges[i] = (vert_id[(c, r)], vert_id[(c, r + 1)])

    cells = np.zeros((len(kept), 4), dtype=np.int64)
    cell_edges = np.zeros((len(kept), 4), dtype=np.int64)
    cell_index = np.asarray(kept, dtype=np.int64)
    edge_cells = np.full((len(edge_id), 2), -1, dtype=np.int64)
    for i, (c, r) in enumerate(kept):
        cells[i] = (
            vert_id[(c, r)], vert_id[(c + 1, r)],
            vert_id[(c + 1, r + 1)], vert_id[(c, r + 1)],
        )
        cell_edges[i] = (
            edge_id[(c, r, "h")], edge_id[(c + 1, r, "v")],
            edge_id[(c, r + 1, "h")], edge_id[(c, r, "v")],
        )
        for e in cell_edges[i]:
            slot = 0 if edge_cells[e, 0] == -1 else 1
            edge_cells[e, slot] = i

    return CoarseGrid(nx, ny, cell_size, vertices, cells, cell_index,
                      edges, cell_edges, edge_cells)


@dataclass
class PatchMesh:
    """Fine mesh composed from translated RCE copies over a set of coarse cells.

    cell_nodes[c] maps RCE-local node ids to patch node ids (the restriction
    index set of cell c); edge_nodes[e] lists the fine trace nodes of coarse
    edge e in canonical orientation.
    """

    mesh: FineMesh
    cells: tuple
    cell_of_element: np.ndarray
    cell_nodes: dict
    edge_nodes: dict
    boundary_coarse_edges: tuple
    bc_spec: dict            # patch-boundary coarse edge id -> EdgeBC (global edges)
    gamma_mu_edges: tuple
    gamma_mu_dofs: np.ndarray

    def cell_dofs(self, cell):
        """Patch DoF indices of one cell in RCE-local DoF order."""
        return node_dofs(self.cell_nodes[cell])

    def edge_dofs(self, edge):
        return node_dofs(self.edge_nodes[edge])


def node_dofs(nodes):
    """Interleaved (x, y) DoF indices for a list of node ids."""
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.empty(2 * nodes.size, dtype=np.int64)
    out[0::2] = 2 * nodes
    out[1::2] = 2 * nodes + 1
    return out


def _edge_connected(coarse, cells):
    cells = set(int(c) for c in cells)
    start = next(iter(cells))
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for e in coarse.cell_edges[c]:
            for nb in coarse.edge_cells[e]:
                if nb != -1 and nb in cells and nb not in seen:
                    seen.add(int(nb))
                    queue.append(int(nb))
    return seen == cells


def compose_patch(coarse, cells, rce: FineMesh, bc_spec=None) -> PatchMesh:
    """Merge translated RCE copies over the given coarse cells.

    Shared interface nodes are deduplicated exactly via integer lattice
    indices (equivalent to a coordinate match within 1e-12 of the cell size,
    since all nodes are generated lattice points). bc_spec assigns global
    boundary conditions to patch-boundary coarse edges; every other boundary
    edge belongs to gamma_mu.
    """
    cells = tuple(sorted(int(c) for c in cells))
    if not cells:
        raise ValueError("empty cell set")
    if not _edge_connected(coarse, cells):
        raise ValueError("patch cells must be edge-connected")
    if rce.boundary_edges is None:
        raise ValueError("rce mesh must carry a rectangular boundary structure")

    cs = coarse.cell_size
    m = len(rce.boundary_edges[BOTTOM]) - 1  # lattice intervals per side
    span = rce.node_coords.max(axis=0)
    if not np.allclose(span, cs, rtol=0, atol=1e-9 * cs):
        raise ValueError("rce side length does not match the coarse cell size")
    local_lattice = np.rint(rce.node_coords / (cs / m)).astype(np.int64)

    node_of_key = {}
    coords = []
    vmask = []
    cell_nodes = {}
    n_local = rce.n_nodes
    for c in cells:
        col, row = coarse.cell_index[c]
        offset = np.array([col * m, row * m], dtype=np.int64)
        mapping = np.empty(n_local, dtype=np.int64)
        origin = coarse.cell_origin(c)
        for ln in range(n_local):
            key = (local_lattice[ln, 0] + offset[0], local_lattice[ln, 1] + offset[1])
            pid = node_of_key.get(key)
            if pid is None:
                pid = len(coords)
                node_of_key[key] = pid
                coords.append(origin + rce.node_coords[ln])
                vmask.append(bool(rce.vertex_mask[ln]))
            mapping[ln] = pid
        cell_nodes[c] = mapping

    coords = np.asarray(coords)
    vmask = np.asarray(vmask, dtype=bool)
    elements = np.concatenate([cell_nodes[c][rce.elements] for c in cells])
    labels = np.concatenate([rce.material_label for _ in cells])
    cell_of_element = np.concatenate(
        [np.full(len(rce.elements), c, dtype=np.int64) for c in cells]
    )

    edge_nodes = {}
    for c in cells:
        for side, e in zip(EDGE_IDS, coarse.cell_edges[c]):
            e = int(e)
            if e not in edge_nodes:
                edge_nodes[e] = cell_nodes[c][rce.boundary_edges[side]]

    cell_set = set(cells)
    boundary_edges = []
    for c in cells:
        for e in coarse.cell_edges[c]:
            others = [nb for nb in coarse.edge_cells[e] if nb != -1 and nb != c]
            if not any(nb in cell_set for nb in others):
                boundary_edges.append(int(e))
    boundary_edges = tuple(sorted(set(boundary_edges)))

    bc_spec = dict(bc_spec or {})
    unknown = set(bc_spec) - set(boundary_edges)
    if unknown:
        raise ValueError(f"bc_spec refers to non-boundary edges {sorted(unknown)}")
    gamma_edges = tuple(e for e in boundary_edges if e not in bc_spec)
    gamma_nodes = set()
    for e in gamma_edges:
        gamma_nodes.update(int(n) for n in edge_nodes[e])
    # Dirichlet segments own their interface nodes
    for e, bc in bc_spec.items():
        if bc.kind == "dirichlet":
            gamma_nodes.difference_update(int(n) for n in edge_nodes[e])
    gamma_mu_dofs = node_dofs(np.array(sorted(gamma_nodes), dtype=np.int64))

    # rectangular patches keep the four-sided boundary structure
    cols = coarse.cell_index[list(cells), 0]
    rows = coarse.cell_index[list(cells), 1]
    wid, hei = cols.max() - cols.min() + 1, rows.max() - rows.min() + 1
    boundary = None
    if wid * hei == len(cells):
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        tol = 1e-9 * cs

        def line(axis, value, sort_axis):
            on = np.flatnonzero(np.abs(coords[:, axis] - value) < tol)
            return on[np.argsort(coords[on, sort_axis], kind="stable")]

        boundary = {
            BOTTOM: line(1, lo[1], 0),
            RIGHT: line(0, hi[0], 1),
            TOP: line(1, hi[1], 0),
            LEFT: line(0, lo[0], 1),
        }

    mesh = FineMesh(coords, elements, labels, boundary, vmask)
    return PatchMesh(mesh, cells, cell_of_element, cell_nodes, edge_nodes,
                     boundary_edges, bc_spec, gamma_edges, gamma_mu_dofs)


@dataclass(frozen=True)
class EdgeBC:
    """Boundary condition tag for one coarse boundary edge."""

    kind: str                      # "dirichlet" | "neumann"
    tag: str = ""                  # physical side name, groups edges
    inhomogeneous: bool = False    # carries nonzero data

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown bc kind {self.kind!r}")


@dataclass
class Configuration:
    """One oversampling problem: a patch, its target subdomain and BC layout."""

    index: int
    target_cell: int
    patch_cells: tuple
    bc_spec: dict          # patch-boundary coarse edge -> EdgeBC
    member_cells: tuple    # coarse cells approximated with this class's basis
    key: tuple


def _window(coarse, cell, radius=1):
    col, row = coarse.cell_index[cell]
    out = []
    for r in range(row - radius, row + radius + 1):
        for c in range(col - radius, col + radius + 1):
            cid = coarse.cell_at(c, r)
            if cid != -1:
                out.append(cid)
    return tuple(sorted(out))


def _patch_bc_spec(coarse, patch_cells, global_bc):
    cell_set = set(patch_cells)
    spec = {}
    for c in patch_cells:
        for e in coarse.cell_edges[c]:
            e = int(e)
            others = [nb for nb in coarse.edge_cells[e] if nb != -1 and nb != c]
            if any(nb in cell_set for nb in others):
                continue
            if e in global_bc:
                spec[e] = global_bc[e]
    return spec


def classify_configurations(coarse, global_bc, ignore_global_bcs=False):
    """Group coarse cells into oversampling configurations.

    global_bc maps every boundary coarse edge to an EdgeBC. Cells touching a
    Dirichlet or inhomogeneous Neumann edge each get their own configuration
    (the boundary data shapes the local solution). Cells touching only
    homogeneous Neumann boundary get one configuration per contact pattern,
    and all remaining cells share a single interior configuration. With
    ignore_global_bcs the whole grid collapses to the interior class and
    gamma_mu covers the full patch boundary.
    """
    global_bc = dict(global_bc or {})
    boundary = set(int(e) for e in coarse.boundary_edge_ids())
    if not ignore_global_bcs:
        missing = boundary - set(global_bc)
        if missing:
            raise ValueError(f"boundary edges without bc assignment: {sorted(missing)}")

    def cell_key(c):
        if ignore_global_bcs:
            return ("interior",)
        contacts = []
        for side, e in zip(EDGE_IDS, coarse.cell_edges[c]):
            e = int(e)
            if e in boundary:
                bc = global_bc[e]
                contacts.append((side, bc.kind, bc.tag, bc.inhomogeneous))
        if not contacts:
            return ("interior",)
        if any(k == "dirichlet" or inhom for _, k, _, inhom in contacts):
            return ("exact", int(c))
        return ("free", tuple(sorted(contacts)))

    groups = {}
    for c in range(coarse.n_cells):
        groups.setdefault(cell_key(c), []).append(c)

    def gamma_mu_contact(cell, patch, spec):
        cell_set = set(patch)
        touch = 0
        for e in coarse.cell_edges[cell]:
            e = int(e)
            others = [nb for nb in coarse.edge_cells[e] if nb != -1 and nb != cell]
            if not any(nb in cell_set for nb in others) and e not in spec:
                touch += 1
        return touch

    def representative(members):
        best = None
        for c in members:
            patch = _window(coarse, c)
            spec = _patch_bc_spec(coarse, patch, {} if ignore_global_bcs else global_bc)
            # prefer a member whose target stays clear of gamma_mu, whose
            # patch touches as little global boundary as possible beyond what
            # its own class requires, and whose window is as large as possible
            target_edges = set(int(e) for e in coarse.cell_edges[c])
            extra = sum(1 for e in spec if e not in target_edges)
            score = (gamma_mu_contact(c, patch, spec), extra, -len(patch), c)
            if best is None or score < best[0]:
                best = (score, c, patch, spec)
        return best[1], best[2], best[3]

    configs = []
    for key in sorted(groups, key=lambda k: min(groups[k])):
        members = tuple(sorted(groups[key]))
        target, patch, spec = representative(members)
        configs.append(Configuration(len(configs), target, patch, spec, members, key))
    return configs


def interior_cells(coarse: CoarseGrid):
    """Cells whose closure does not touch the domain boundary.

    Stricter than edge contact: a cell meeting the boundary only in a vertex
    (the re-entrant corner neighbour of an L-shaped mask) is excluded too.
    """
    boundary_verts = set()
    for e in coarse.boundary_edge_ids():
        boundary_verts.update(int(v) for v in coarse.edges[e])
    return tuple(c for c in range(coarse.n_cells)
                 if not any(int(v) in boundary_verts for v in coarse.cells[c]))


def export_text(mesh: FineMesh, path):
    """Write node/element/label tables in a plain-text format for inspection."""
    with open(path, "w") as fh:
        fh.write(f"# nodes {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.node_coords):
            fh.write(f"{i} {x:.16g} {y:.16g}\n")
        fh.write(f"# elements {len(mesh.elements)} (6-node triangles) label\n")
        for i, (conn, lab) in enumerate(zip(mesh.elements, mesh.material_label)):
            fh.write(f"{i} " + " ".join(str(int(n)) for n in conn) + f" {int(lab)}\n")
