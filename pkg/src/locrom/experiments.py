"""Experiment drivers: block, beam, L-panel and the projection-error study.

The offline stage classifies oversampling configurations, runs the adaptive
range approximation per configuration and persists the edge mode sets; the
online stage rebuilds cell bases from those artifacts, assembles and solves
the reduced model and compares against the persisted full order solution.
Identical config + seed reproduces identical CSV bytes (timings live in the
manifests only).
"""

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import basis as bas
from . import fem, mesh, metrics, rangefinder as rf, rom

RCE_PRESETS = {
    # one centered disk; approximates the single-inclusion unit cell
    "type1": (((0.5, 0.5), 0.2),),
    # off-center multi-disk layout; approximates the multi-inclusion cell
    "type2": (
        ((0.25, 0.25), 0.12),
        ((0.70, 0.30), 0.09),
        ((0.35, 0.70), 0.10),
        ((0.75, 0.75), 0.08),
        ((0.55, 0.52), 0.06),
    ),
}

EXPERIMENTS = ("block", "beam", "lpanel", "projection_study")


@dataclass
class ExperimentConfig:
    experiment: str = "block"
    nx: int = 5
    ny: int = 5
    lpanel_k: int = 3
    cell_size: float = 1.0
    rce_preset: str = "type1"
    aggregates: tuple = ()              # overrides the preset when non-empty
    n_verts_per_edge: int = 7
    e_matrix: float = 30000.0
    e_aggregate: float = 60000.0
    nu: float = 0.2
    plane: str = "plane_strain"
    basis: str = "empirical"
    training_set: str = "random"
    n_mpe: tuple = (2, 6, 10, 14, 18)
    tol: float = 1e-3
    n_t: int = 20
    eps_algofail: float = 1e-15
    edge_pod_tol: float = 1e-6
    soi_pod_tol: float = 1e-6
    macro_shapes: str = "serendipity"
    seed: int = 20220701
    out: str = "locrom_out"
    # block boundary data coefficients u_i = a_ij x_j + b_ij x_j^2
    block_a: tuple = ((0.01, 0.005), (0.005, -0.01))
    block_b: tuple = ((0.002, -0.001), (0.001, 0.002))
    # L-panel hat load peak (N/mm^2)
    t_y: float = 200.0
    n_test: int = 50                    # random testing set size (projection study)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.basis not in ("empirical", "hierarchical"):
            raise ValueError(f"unknown basis kind {self.basis!r}")
        if self.training_set not in ("soi", "random"):
            raise ValueError(f"unknown training set {self.training_set!r}")
        if self.macro_shapes not in ("serendipity", "biquadratic"):
            raise ValueError(f"unknown macro shape family {self.macro_shapes!r}")
        if not self.n_mpe:
            raise ValueError("n_mpe sweep must be non-empty")
        self.n_mpe = tuple(int(v) for v in self.n_mpe)
        self.aggregates = tuple(
            ((float(a[0]), float(a[1])), float(a[2])) for a in self.aggregates)
        self.block_a = tuple(tuple(float(v) for v in row) for row in self.block_a)
        self.block_b = tuple(tuple(float(v) for v in row) for row in self.block_b)

    @classmethod
    def from_mapping(cls, data):
        data = dict(data or {})
        kwargs = {}
        coarse = data.pop("coarse", {})
        kwargs.update({k: coarse[k2] for k, k2 in
                       (("nx", "nx"), ("ny", "ny"), ("lpanel_k", "k"),
                        ("cell_size", "cell_size")) if k2 in coarse})
        rce = data.pop("rce", {})
        if "preset" in rce:
            kwargs["rce_preset"] = rce["preset"]
        if "aggregates" in rce:
            kwargs["aggregates"] = [
                ((a[0], a[1]), a[2]) if len(a) == 3 else (tuple(a[0]), a[1])
                for a in rce["aggregates"]]
        if "n_verts_per_edge" in rce:
            kwargs["n_verts_per_edge"] = rce["n_verts_per_edge"]
        if "side_length" in rce:
            kwargs["cell_size"] = rce["side_length"]
        material = data.pop("material", {})
        if "ratio" in material:
            kwargs["e_matrix"] = material.get("e_matrix", 30000.0)
            kwargs["e_aggregate"] = material["ratio"] * kwargs["e_matrix"]
        else:
            for k in ("e_matrix", "e_aggregate"):
                if k in material:
                    kwargs[k] = material[k]
        for k in ("nu", "plane"):
            if k in material:
                kwargs[k] = material[k]
        rfp = data.pop("rangefinder", {})
        for k in ("tol", "n_t", "eps_algofail"):
            if k in rfp:
                kwargs[k] = rfp[k]
        pod = data.pop("pod", {})
        if "edge_tol" in pod:
            kwargs["edge_pod_tol"] = pod["edge_tol"]
        if "soi_tol" in pod:
            kwargs["soi_pod_tol"] = pod["soi_tol"]
        block = data.pop("block", {})
        if "a" in block:
            kwargs["block_a"] = block["a"]
        if "b" in block:
            kwargs["block_b"] = block["b"]
        lpanel = data.pop("lpanel", {})
        if "t_y" in lpanel:
            kwargs["t_y"] = lpanel["t_y"]
        # remaining keys: direct dataclass fields (round trip of to_mapping)
        valid = set(cls.__dataclass_fields__)
        for k in list(data):
            if k in valid:
                kwargs.setdefault(k, data.pop(k))
        if data:
            raise ValueError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)

    def to_mapping(self):
        return asdict(self)

    def offline_hash(self):
        """Hash over every field that offline/fom artifacts depend on."""
        payload = self.to_mapping()
        for k in ("out", "n_mpe", "basis", "n_test"):
            payload.pop(k)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def block_dirichlet(a, b, x):
    """Componentwise quadratic boundary displacement u_i = a_ij x_j + b_ij x_j^2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    if a.shape != (2, 2) or b.shape != (2, 2):
        raise ValueError("coefficient matrices must be 2x2")
    return a @ x + b @ x**2


def beam_analytical(x, y, E, nu, c):
    """Pure-bending beam fields (u, v, sigma_xx) for a homogeneous material."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma_xx = 240.0 * y / c - 120.0
    u = (240.0 * x * y / c - 120.0 * x) / E
    v = -nu / E * (120.0 * y**2 / c - 120.0 * y) - 120.0 * x**2 / (c * E)
    return u, v, sigma_xx


# --- problem wiring ---------------------------------------------------------

@dataclass
class Problem:
    """Geometry, material and boundary conditions of one experiment."""

    config: ExperimentConfig
    coarse: mesh.CoarseGrid
    rce: mesh.FineMesh
    material: fem.Material
    global_bc: dict                     # boundary coarse edge -> EdgeBC
    ignore_global_bcs: bool
    dirichlet_data: dict                # tag -> (g(x, y) -> 2-vector, comp_mask)
    tractions: dict                     # tag -> t(x, y) -> 2-vector
    pins: tuple = ()                    # ((x, y), comp, value)

    def edges_by_tag(self, tag):
        return [e for e, bc in self.global_bc.items() if bc.tag == tag]

    def fine_dirichlet(self, patchlike):
        """(dofs, values) of all global Dirichlet data present on a patch."""
        dofs, values = [], []
        coords = patchlike.mesh.node_coords
        for e, bc in patchlike.bc_spec.items():
            if bc.kind != "dirichlet":
                continue
            g_fn, comp_mask = self.dirichlet_data[bc.tag]
            nodes = patchlike.edge_nodes[e]
            for n in nodes:
                g = g_fn(*coords[n])
                for comp in range(2):
                    if comp_mask[comp]:
                        dofs.append(2 * int(n) + comp)
                        values.append(float(g[comp]))
        for (px, py), comp, value in self.pins:
            hit = np.flatnonzero(
                (np.abs(coords[:, 0] - px) < 1e-9) & (np.abs(coords[:, 1] - py) < 1e-9))
            for n in hit[:1]:
                dofs.append(2 * int(n) + comp)
                values.append(float(value))
        if not dofs:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        dofs = np.asarray(dofs, dtype=np.int64)
        values = np.asarray(values)
        order = np.argsort(dofs, kind="stable")
        dofs, values = dofs[order], values[order]
        keep = np.concatenate([[True], np.diff(dofs) != 0])
        return dofs[keep], values[keep]

    def traction_vector(self, patchlike):
        vec = np.zeros(patchlike.mesh.n_dofs)
        any_load = False
        for e, bc in patchlike.bc_spec.items():
            if bc.kind == "neumann" and bc.inhomogeneous:
                vec += fem.assemble_traction(
                    patchlike.mesh, patchlike.edge_nodes[e], self.tractions[bc.tag])
                any_load = True
        return vec if any_load else None

    def cell_load(self, cell, B):
        """Reduced load of one cell (nonzero only next to a loaded edge)."""
        fn = np.zeros(B.B.shape[1])
        ox, oy = self.coarse.cell_origin(cell)
        for pos, e in zip(mesh.EDGE_IDS, self.coarse.cell_edges[cell]):
            bc = self.global_bc.get(int(e))
            if bc is None or bc.kind != "neumann" or not bc.inhomogeneous:
                continue
            trac = self.tractions[bc.tag]
            floc = fem.assemble_traction(
                self.rce, self.rce.boundary_edges[pos],
                lambda x, y: trac(x + ox, y + oy))
            fn += B.B.T @ floc
        return fn

    def coarse_dirichlet(self):
        """(vertex, comp, value) constraints of the coarse global problem."""
        out = []
        verts = self.coarse.vertices
        seen = set()
        for e, bc in self.global_bc.items():
            if bc.kind != "dirichlet":
                continue
            g_fn, comp_mask = self.dirichlet_data[bc.tag]
            for v in self.coarse.edges[e]:
                g = g_fn(*verts[v])
                for comp in range(2):
                    if comp_mask[comp] and (int(v), comp) not in seen:
                        seen.add((int(v), comp))
                        out.append((int(v), comp, float(g[comp])))
        for (px, py), comp, value in self.pins:
            hit = np.flatnonzero(
                (np.abs(verts[:, 0] - px) < 1e-9) & (np.abs(verts[:, 1] - py) < 1e-9))
            for v in hit[:1]:
                if (int(v), comp) not in seen:
                    out.append((int(v), comp, float(value)))
        return out

    def coarse_tractions(self):
        out = []
        for e, bc in self.global_bc.items():
            if bc.kind == "neumann" and bc.inhomogeneous:
                out.append((int(e), self.tractions[bc.tag]))
        return out


def make_problem(config: ExperimentConfig) -> Problem:
    aggregates = config.aggregates or RCE_PRESETS[config.rce_preset]
    geom = mesh.RceGeometry(config.cell_size, aggregates, config.n_verts_per_edge)
    rce = mesh.build_rce_mesh(geom)
    material = fem.Material.from_young_poisson(
        [config.e_matrix, config.e_aggregate], [config.nu, config.nu], config.plane)

    experiment = config.experiment
    if experiment == "projection_study":
        experiment = "lpanel"           # SoI data comes from the L-panel problem

    if experiment == "block":
        coarse = mesh.build_coarse_grid(("rectangle", config.nx, config.ny),
                                        config.cell_size)
        a, b = np.asarray(config.block_a), np.asarray(config.block_b)
        g_fn = lambda x, y: block_dirichlet(a, b, np.array([x, y]))  # noqa: E731
        global_bc = {int(e): mesh.EdgeBC("dirichlet", "boundary", inhomogeneous=True)
                     for e in coarse.boundary_edge_ids()}
        return Problem(config, coarse, rce, material, global_bc,
                       ignore_global_bcs=True,
                       dirichlet_data={"boundary": (g_fn, (True, True))},
                       tractions={})

    if experiment == "beam":
        coarse = mesh.build_coarse_grid(("rectangle", config.nx, config.ny),
                                        config.cell_size)
        L = config.nx * config.cell_size
        c = config.ny * config.cell_size
        f_x = lambda x, y: (240.0 * y / c - 120.0, 0.0)  # noqa: E731
        global_bc = {}
        for e in coarse.boundary_edge_ids():
            mp = coarse.edge_midpoint(e)
            if not coarse.is_horizontal(e) and mp[0] < 1e-9 * L:
                global_bc[int(e)] = mesh.EdgeBC("dirichlet", "left")
            elif not coarse.is_horizontal(e) and mp[0] > L * (1 - 1e-9):
                global_bc[int(e)] = mesh.EdgeBC("neumann", "right", inhomogeneous=True)
            elif mp[1] < 1e-9 * L:
                global_bc[int(e)] = mesh.EdgeBC("neumann", "bottom")
            else:
                global_bc[int(e)] = mesh.EdgeBC("neumann", "top")
        zero = lambda x, y: (0.0, 0.0)  # noqa: E731
        return Problem(config, coarse, rce, material, global_bc,
                       ignore_global_bcs=False,
                       dirichlet_data={"left": (zero, (True, False))},
                       tractions={"right": f_x},
                       pins=(((0.0, 0.0), 1, 0.0),))

    # L-panel: 2k x 2k grid minus the lower-right quadrant; clamped bottom,
    # upward hat load on the two rightmost cells of the cut edge
    k = config.lpanel_k
    cs = config.cell_size
    coarse = mesh.build_coarse_grid(("lpanel", k), cs)
    span = 2 * k * cs
    load_lo = (2 * k - 2) * cs          # hat over x in [load_lo, span]
    peak_x = (2 * k - 1) * cs
    t_y = config.t_y

    def hat(x, y):
        return (0.0, t_y * max(0.0, 1.0 - abs(x - peak_x) / cs))

    global_bc = {}
    for e in coarse.boundary_edge_ids():
        mp = coarse.edge_midpoint(e)
        horiz = coarse.is_horizontal(e)
        if horiz and mp[1] < 1e-9 * span:
            global_bc[int(e)] = mesh.EdgeBC("dirichlet", "bottom")
        elif horiz and abs(mp[1] - k * cs) < 1e-9 * span and mp[0] > load_lo:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "load", inhomogeneous=True)
        elif horiz and abs(mp[1] - k * cs) < 1e-9 * span:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "cut_h")
        elif horiz:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "top")
        elif mp[0] < 1e-9 * span:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "left")
        elif abs(mp[0] - k * cs) < 1e-9 * span:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "cut_v")
        else:
            global_bc[int(e)] = mesh.EdgeBC("neumann", "right")
    zero = lambda x, y: (0.0, 0.0)  # noqa: E731
    return Problem(config, coarse, rce, material, global_bc,
                   ignore_global_bcs=False,
                   dirichlet_data={"bottom": (zero, (True, True))},
                   tractions={"load": hat})


# --- offline stage ----------------------------------------------------------

def build_transfer_operator(problem: Problem, cfg, A_rce=None):
    patch = mesh.compose_patch(problem.coarse, cfg.patch_cells, problem.rce,
                               cfg.bc_spec)
    A = fem.assemble(patch, problem.material).matrix
    segments = [patch.edge_nodes[e] for e in patch.gamma_mu_edges]
    Ms = fem.boundary_mass_matrix(patch.mesh, segments)[
        np.ix_(patch.gamma_mu_dofs, patch.gamma_mu_dofs)]
    if A_rce is None:
        A_rce = fem.assemble(problem.rce, problem.material).matrix
    ddofs, dvals = problem.fine_dirichlet(patch)
    traction = problem.traction_vector(patch)
    return patch, rf.TransferOperator(
        patch, A, cfg.target_cell, Ms, A_rce,
        ddofs if ddofs.size else None, dvals if ddofs.size else None, traction)


def config_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _offline_one(config_map, index):
    """Run one oversampling configuration; module-level for process pools."""
    config = ExperimentConfig.from_mapping(config_map)
    problem = make_problem(config)
    cfgs = mesh.classify_configurations(problem.coarse, problem.global_bc,
                                        problem.ignore_global_bcs)
    cfg = cfgs[index]
    t0 = time.perf_counter()
    patch, T = build_transfer_operator(problem, cfg)

    if config.training_set == "soi":
        lam1, lam2 = rf.averaged_lame(problem.rce, problem.material)
        coarse_u = rf.solve_coarse_global(
            problem.coarse, lam1, lam2,
            problem.coarse_dirichlet(), problem.coarse_tractions())
        training = rf.soi_training_set(problem.coarse, cfg, patch,
                                       T.source_product, coarse_u,
                                       config.soi_pod_tol, config.macro_shapes)
    else:
        training = rf.TrainingSet.random_only(T.source_dim)

    params = rf.RangeFinderParams(tol=config.tol, n_t=config.n_t,
                                  eps_algofail=config.eps_algofail)
    result = rf.compute_snapshots(T, params, training, config_rng(config.seed, index))

    U = result.snapshots.snapshots
    affine = rf.affine_snapshot(T)
    if affine is not None:
        U = np.column_stack([affine, U])
    groups = rf.pooling_groups(cfg, problem.coarse)
    mode_set = rf.edge_basis_from_snapshots(U, problem.rce, groups,
                                            config.edge_pod_tol)
    info = {
        "index": cfg.index,
        "key": repr(cfg.key),
        "target_cell": cfg.target_cell,
        "patch_cells": list(cfg.patch_cells),
        "member_cells": list(cfg.member_cells),
        "n_snapshots": result.snapshots.n_samples,
        "n_soi": result.n_soi,
        "n_random": result.n_random,
        "affine_snapshot": affine is not None,
        "estimator": result.estimator,
        "c_est": result.c_est,
        "lambda_min": result.lambda_min,
        "modes_per_edge": {str(e): mode_set.count(e) for e in mesh.EDGE_IDS},
        "seconds": time.perf_counter() - t0,
    }
    return mode_set, info


def _basis_path(out_dir, index):
    return Path(out_dir) / f"basis_cfg{index:03d}.npz"


def save_mode_set(path, mode_set: bas.EdgeModeSet, meta):
    arrays = {f"modes_{e}": mode_set.modes[e] for e in mesh.EDGE_IDS}
    arrays.update({f"eig_{e}": mode_set.eigenvalues.get(e, np.zeros(0))
                   for e in mesh.EDGE_IDS})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_mode_set(path):
    with np.load(path) as data:
        modes = {e: data[f"modes_{e}"] for e in mesh.EDGE_IDS}
        eig = {e: data[f"eig_{e}"] for e in mesh.EDGE_IDS}
        meta = json.loads(bytes(data["meta"]).decode())
    return bas.EdgeModeSet(modes, "empirical", eig), meta


def run_offline(config: ExperimentConfig):
    """Offline phase: train every configuration and persist the edge bases."""
    if config.basis == "hierarchical":
        return {"configurations": [], "note": "hierarchical basis needs no training"}
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = make_problem(config)
    cfgs = mesh.classify_configurations(problem.coarse, problem.global_bc,
                                        problem.ignore_global_bcs)
    workers = int(os.environ.get("LOCROM_WORKERS", "1"))
    config_map = config.to_mapping()
    infos = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_offline_one, [config_map] * len(cfgs),
                                    range(len(cfgs))))
    else:
        results = [_offline_one(config_map, i) for i in range(len(cfgs))]
    for cfg, (mode_set, info) in zip(cfgs, results):
        meta = {"hash": config.offline_hash(), "training_set": config.training_set,
                "seed": config.seed, "tol": config.tol,
                "edge_pod_tol": config.edge_pod_tol, **info}
        save_mode_set(_basis_path(out_dir, cfg.index), mode_set, meta)
        infos.append(info)
    manifest = {
        "stage": "offline",
        "hash": config.offline_hash(),
        "config": config_map,
        "n_configurations": len(cfgs),
        "configurations": infos,
    }
    with open(out_dir / "manifest_offline.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


# --- FOM stage --------------------------------------------------------------

def run_fom(config: ExperimentConfig):
    """Full order solve on the composed global fine mesh; persisted to fom.npz."""
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = make_problem(config)
    t0 = time.perf_counter()
    gp = mesh.compose_patch(problem.coarse, range(problem.coarse.n_cells),
                            problem.rce, problem.global_bc)
    system = fem.assemble(gp, problem.material)
    t_assemble = time.perf_counter() - t0
    traction = problem.traction_vector(gp)
    if traction is not None:
        system.rhs = system.rhs + traction
    dofs, values = problem.fine_dirichlet(gp)
    if dofs.size == 0:
        raise fem.SolverError(f"fom: no Dirichlet data (config {config.offline_hash()})")
    t0 = time.perf_counter()
    u = fem.solve(fem.apply_dirichlet(system, dofs, values))
    t_solve = time.perf_counter() - t0

    A_rce = fem.assemble(problem.rce, problem.material).matrix
    cell_norms = np.array([
        fem.energy_norm(u[gp.cell_dofs(c)], A_rce)
        for c in range(problem.coarse.n_cells)])
    meta = {
        "stage": "fom",
        "hash": config.offline_hash(),
        "n_dofs": int(system.n_dofs),
        "assemble_seconds": t_assemble,
        "solve_seconds": t_solve,
        "global_norm": float(np.sqrt(np.sum(cell_norms**2))),
    }
    np.savez(out_dir / "fom.npz", u=u, cell_norms=cell_norms,
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    with open(out_dir / "manifest_fom.json", "w") as fh:
        json.dump({**meta, "config": config.to_mapping()}, fh, indent=2)
    return meta


def load_fom(config: ExperimentConfig):
    path = Path(config.out) / "fom.npz"
    if not path.exists():
        raise FileNotFoundError(
            f"online: missing FOM artifact {path} (config {config.offline_hash()})")
    with np.load(path) as data:
        u = data["u"]
        cell_norms = data["cell_norms"]
        meta = json.loads(bytes(data["meta"]).decode())
    if meta["hash"] != config.offline_hash():
        raise ValueError(
            f"online: FOM artifact hash {meta['hash']} does not match config "
            f"{config.offline_hash()}")
    return u, cell_norms, meta


# --- online stage -----------------------------------------------------------

def assign_edge_sources(problem: Problem, cfgs):
    """Pick the mode-set source (configuration, cell side) of every coarse
    edge; the most specialized adjacent class wins so shared edges carry one
    common trace basis (conforming coupling)."""
    cell_class = {m: cf.index for cf in cfgs for m in cf.member_cells}
    size = {cf.index: len(cf.member_cells) for cf in cfgs}
    assign = {}
    for e in range(problem.coarse.n_edges):
        candidates = []
        for cl in problem.coarse.edge_cells[e]:
            if cl == -1:
                continue
            side = mesh.EDGE_IDS[list(problem.coarse.cell_edges[cl]).index(e)]
            ci = cell_class[int(cl)]
            candidates.append((size[ci], ci, side))
        candidates.sort()
        assign[e] = (candidates[0][1], candidates[0][2])
    return assign


def load_class_mode_sets(config: ExperimentConfig, problem: Problem, cfgs):
    if config.basis == "hierarchical":
        hset = bas.hierarchical_edge_basis(max(config.n_mpe), problem.rce)
        return {cf.index: hset for cf in cfgs}
    out_dir = Path(config.out)
    sets = {}
    for cf in cfgs:
        path = _basis_path(out_dir, cf.index)
        if not path.exists():
            raise FileNotFoundError(
                f"online: missing basis artifact {path} (config {config.offline_hash()})")
        mode_set, meta = load_mode_set(path)
        if meta["hash"] != config.offline_hash():
            raise ValueError(
                f"online: artifact {path.name} hash {meta['hash']} does not match "
                f"config {config.offline_hash()}")
        sets[cf.index] = mode_set
    return sets


def rom_constraints(problem: Problem, dof_map, edge_assign, class_sets, gp):
    """Global ROM Dirichlet constraints: vertex data plus projected edge data."""
    cons = {}
    edge_product = rf.edge_l2_product(problem.rce, mesh.BOTTOM)
    for e, bc in problem.global_bc.items():
        if bc.kind != "dirichlet":
            continue
        g_fn, comp_mask = problem.dirichlet_data[bc.tag]
        v0, v1 = problem.coarse.edges[e]
        for v in (v0, v1):
            g = g_fn(*problem.coarse.vertices[v])
            for comp in range(2):
                if comp_mask[comp]:
                    cons[dof_map.vertex_dof(v, comp)] = float(g[comp])
        ci, side = edge_assign[e]
        modes = class_sets[ci].truncated(dof_map.edge_counts[e]).modes[side]
        nodes = gp.edge_nodes[e]
        coords = gp.mesh.node_coords[nodes]
        g_trace = np.array([g_fn(x, y) for x, y in coords]).ravel()
        endpoint = np.array([g_fn(*problem.coarse.vertices[v0]),
                             g_fn(*problem.coarse.vertices[v1])])
        coeff = rom.project_edge_dirichlet(g_trace, endpoint, modes, edge_product,
                                           comp_mask)
        for j, value in coeff.items():
            cons[int(dof_map.edge_dofs(e)[j])] = value
    for (px, py), comp, value in problem.pins:
        verts = problem.coarse.vertices
        hit = np.flatnonzero((np.abs(verts[:, 0] - px) < 1e-9)
                             & (np.abs(verts[:, 1] - py) < 1e-9))
        for v in hit[:1]:
            cons[dof_map.vertex_dof(int(v), comp)] = float(value)
    return cons


@dataclass
class RomBuild:
    """Assembled reduced model for one n_mpe (online building block)."""

    n_mpe: int
    dof_map: rom.DofMap
    cell_basis: dict
    A_N: object
    f_N: np.ndarray
    constraints: dict
    edge_assign: dict
    gp: mesh.PatchMesh
    A_rce: object
    seconds_reduce: float = 0.0
    seconds_assemble: float = 0.0

    def global_basis_vectors(self):
        """Fine-grid representation of every global reduced basis function.

        Conformity makes overwrite-scatter well defined on shared edges."""
        psi = np.zeros((self.gp.mesh.n_dofs, self.dof_map.n_dofs))
        for cell, B in self.cell_basis.items():
            fine = self.gp.cell_dofs(cell)
            for pos, k in enumerate(self.dof_map.cell_dofs(cell)):
                psi[fine, k] = B.B[:, pos]
        return psi


def build_rom(config, problem, cfgs, class_sets, n_mpe, gp=None, A_rce=None,
              extender=None) -> RomBuild:
    """Reduce every cell and assemble the global ROM for one mode count."""
    if gp is None:
        gp = mesh.compose_patch(problem.coarse, range(problem.coarse.n_cells),
                                problem.rce, problem.global_bc)
    if A_rce is None:
        A_rce = fem.assemble(problem.rce, problem.material).matrix
    if extender is None:
        extender = bas.HarmonicExtender(problem.rce, problem.material)
    edge_assign = assign_edge_sources(problem, cfgs)

    t0 = time.perf_counter()
    counts = {e: min(n_mpe, class_sets[ci].count(side))
              for e, (ci, side) in edge_assign.items()}
    dof_map = rom.build_dof_map(problem.coarse, n_mpe, counts)
    basis_cache, reduced_cache = {}, {}
    cell_basis = {}
    reduced = []
    for cell in range(problem.coarse.n_cells):
        sig = tuple(edge_assign[int(e)] for e in problem.coarse.cell_edges[cell])
        if sig not in basis_cache:
            mode_sets = {}
            for pos, e in zip(mesh.EDGE_IDS, problem.coarse.cell_edges[cell]):
                ci, side = edge_assign[int(e)]
                src = class_sets[ci]
                mode_sets[pos] = bas.EdgeModeSet(
                    {pos: src.truncated(n_mpe).modes[side]}, src.provenance)
            basis_cache[sig] = bas.assemble_basis(extender, mode_sets, n_mpe)
            reduced_cache[sig] = rom.reduce_local(A_rce, None, basis_cache[sig].B, cell)
        B = basis_cache[sig]
        cell_basis[cell] = B
        fn = problem.cell_load(cell, B)
        reduced.append(rom.ReducedLocal(reduced_cache[sig].A_n, fn, cell,
                                        B.provenance))
    t_reduce = time.perf_counter() - t0
    t0 = time.perf_counter()
    A_N, f_N = rom.assemble_global(reduced, dof_map)
    cons = rom_constraints(problem, dof_map, edge_assign, class_sets, gp)
    t_assemble = time.perf_counter() - t0
    return RomBuild(n_mpe, dof_map, cell_basis, A_N, f_N, cons, edge_assign,
                    gp, A_rce, t_reduce, t_assemble)


def run_online(config: ExperimentConfig):
    """Online phase: reduce, assemble, solve and compare against the FOM."""
    out_dir = Path(config.out)
    problem = make_problem(config)
    cfgs = mesh.classify_configurations(problem.coarse, problem.global_bc,
                                        problem.ignore_global_bcs)
    class_sets = load_class_mode_sets(config, problem, cfgs)
    u_fom, cell_norms, fom_meta = load_fom(config)
    gp = mesh.compose_patch(problem.coarse, range(problem.coarse.n_cells),
                            problem.rce, problem.global_bc)
    A_rce = fem.assemble(problem.rce, problem.material).matrix
    extender = bas.HarmonicExtender(problem.rce, problem.material)

    reports = []
    timings = []
    for n_mpe in config.n_mpe:
        build = build_rom(config, problem, cfgs, class_sets, n_mpe,
                          gp=gp, A_rce=A_rce, extender=extender)
        t0 = time.perf_counter()
        u_N = rom.solve_rom(build.A_N, build.f_N, build.constraints)
        t_solve = time.perf_counter() - t0
        t_reduce, t_assemble = build.seconds_reduce, build.seconds_assemble
        dof_map, cell_basis = build.dof_map, build.cell_basis

        errors = np.array([
            metrics.local_error(u_fom[gp.cell_dofs(c)],
                                rom.reconstruct(u_N, dof_map, cell_basis[c], c),
                                A_rce)
            for c in range(problem.coarse.n_cells)])
        absolute, relative = metrics.global_errors(errors, cell_norms)
        reports.append(metrics.ErrorReport(
            basis=config.basis, training_set=(
                config.training_set if config.basis == "empirical" else "none"),
            n_mpe=n_mpe, n_dofs=dof_map.n_dofs,
            cell_errors={c: float(v) for c, v in enumerate(errors)},
            absolute=absolute, relative=relative))
        timings.append({"n_mpe": n_mpe, "reduce_seconds": t_reduce,
                        "assemble_seconds": t_assemble, "solve_seconds": t_solve})
        rom.save_rom(out_dir / f"rom_n{n_mpe:03d}.npz", build.A_N, build.f_N,
                     dof_map)

    rows = [
        {"basis": r.basis, "training_set": r.training_set, "n_mpe": r.n_mpe,
         "N_dofs": r.n_dofs, "abs_err": r.absolute, "rel_err": r.relative}
        for r in reports
    ]
    write_csv(out_dir / "errors.csv",
              ("basis", "training_set", "n_mpe", "N_dofs", "abs_err", "rel_err"),
              rows)
    manifest = {
        "stage": "online", "hash": config.offline_hash(),
        "config": config.to_mapping(), "fom": fom_meta, "timings": timings,
        "rows": rows,
        "cell_errors": [{"n_mpe": r.n_mpe, "errors": r.cell_errors}
                        for r in reports],
    }
    with open(out_dir / "manifest_online.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest, reports


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10e}"
    return v


def run_compare(config: ExperimentConfig):
    """Full pipeline: offline (empirical only), FOM baseline, online, errors."""
    stage = "offline"
    try:
        offline = run_offline(config)
        stage = "fom"
        fom = run_fom(config)
        stage = "online"
        online, reports = run_online(config)
    except Exception as exc:
        raise RuntimeError(
            f"compare failed in stage {stage} (config {config.offline_hash()}): {exc}"
        ) from exc
    return {"offline": offline, "fom": fom, "online": online}


# --- projection-error study -------------------------------------------------

def run_projection_study(config: ExperimentConfig):
    """Local projection errors of empirical and spectral bases, SoI and
    random training, against random and FOM testing sets."""
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = make_problem(config)

    # oversampling with the full patch boundary as gamma_mu
    interior_cfgs = mesh.classify_configurations(problem.coarse, problem.global_bc,
                                                 ignore_global_bcs=True)
    cfg = interior_cfgs[0]
    patch, T = build_transfer_operator(problem, cfg)
    A_rce = fem.assemble(problem.rce, problem.material).matrix
    extender = bas.HarmonicExtender(problem.rce, problem.material)
    params = rf.RangeFinderParams(tol=config.tol, n_t=config.n_t,
                                  eps_algofail=config.eps_algofail)

    lam1, lam2 = rf.averaged_lame(problem.rce, problem.material)
    coarse_u = rf.solve_coarse_global(problem.coarse, lam1, lam2,
                                      problem.coarse_dirichlet(),
                                      problem.coarse_tractions())

    trainings = {
        "soi": rf.soi_training_set(problem.coarse, cfg, patch, T.source_product,
                                   coarse_u, config.soi_pod_tol,
                                   config.macro_shapes),
        "random": rf.TrainingSet.random_only(T.source_dim),
    }

    # testing sets: fresh random vectors (different stream than training) and
    # the FOM solution restricted to the interior cells
    rng_test = config_rng(config.seed, 9001)
    random_tests = np.column_stack([
        T.apply(rf.random_boundary_vector(rng_test, T.source_dim))
        for _ in range(config.n_test)])

    interior_members = mesh.interior_cells(problem.coarse)
    try:
        u_fom, _, _ = load_fom(config)
    except FileNotFoundError:
        run_fom(config)
        u_fom, _, _ = load_fom(config)
    gp = mesh.compose_patch(problem.coarse, range(problem.coarse.n_cells),
                            problem.rce, problem.global_bc)
    fom_tests = np.column_stack([u_fom[gp.cell_dofs(c)] for c in interior_members])

    testing_sets = {"random": random_tests, "fom": fom_tests}

    rows = []
    unit_square_emp = mesh.build_coarse_grid(("rectangle", 3, 3), 1.0 / 3.0)
    unit_square_spe = mesh.build_coarse_grid(("rectangle", 6, 6), 1.0 / 6.0)
    for tag, training in trainings.items():
        result = rf.compute_snapshots(T, params, training,
                                      config_rng(config.seed, 100 + cfg.index))
        U = result.snapshots.snapshots

        # empirical: coarse + extended edge modes, orthonormalized for the
        # projection (the coarse block spans the rigid kernel of the energy
        # Gramian, so the raw Gram system is singular by construction)
        mode_set = rf.edge_basis_from_snapshots(U, problem.rce,
                                                rf.pooling_groups(cfg, problem.coarse),
                                                config.edge_pod_tol)
        max_mpe = min(mode_set.count(e) for e in mesh.EDGE_IDS)
        for n_mpe in [n for n in config.n_mpe if n <= max_mpe]:
            B = bas.assemble_basis(extender, {e: mode_set for e in mesh.EDGE_IDS},
                                   n_mpe)
            deflated = rf.deflate_rigid(B.B, problem.rce.node_coords)
            Bo = rf.orthonormalize(deflated, A_rce)
            n_local = B.n_columns
            n_emp, _ = metrics.dof_counts(unit_square_emp, n_mpe, 0)
            for tname, tests in testing_sets.items():
                err = metrics.projection_error(tests, Bo, A_rce)
                rows.append({"basis": "empirical", "training_set": tag,
                             "n_mpe": n_mpe, "n_local": n_local, "N_dofs": n_emp,
                             "testing_set": tname, "max_rel_proj_err": err})

        spectral = rf.spectral_basis(U, A_rce)
        for n in sorted(set(min(n, spectral.shape[1])
                            for n in (*config.n_mpe, spectral.shape[1]))):
            if n < 1:
                continue
            _, n_spe = metrics.dof_counts(unit_square_spe, 0, n)
            for tname, tests in testing_sets.items():
                err = metrics.projection_error(tests, spectral[:, :n], A_rce)
                rows.append({"basis": "spectral", "training_set": tag,
                             "n_mpe": 0, "n_local": n, "N_dofs": n_spe,
                             "testing_set": tname, "max_rel_proj_err": err})

    write_csv(out_dir / "projection.csv",
              ("basis", "training_set", "n_mpe", "n_local", "N_dofs",
               "testing_set", "max_rel_proj_err"), rows)
    manifest = {"stage": "projection_study", "hash": config.offline_hash(),
                "config": config.to_mapping(), "n_rows": len(rows), "rows": rows}
    with open(out_dir / "manifest_projection.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def run_experiment(config: ExperimentConfig):
    if config.experiment == "projection_study":
        return run_projection_study(config)
    return run_compare(config)
