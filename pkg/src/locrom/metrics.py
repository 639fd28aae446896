"""Energy-norm error measures, projection errors and DoF counting."""

from dataclasses import dataclass, field

import numpy as np

from . import fem


@dataclass
class ErrorReport:
    basis: str
    training_set: str
    n_mpe: int
    n_dofs: int
    cell_errors: dict = field(default_factory=dict)   # cell id -> abs energy error
    absolute: float = 0.0
    relative: float = 0.0


def local_error(u_fom_i, u_rom_i, A_i) -> float:
    """Energy norm of the subdomain error."""
    u_fom_i = np.asarray(u_fom_i, dtype=float)
    u_rom_i = np.asarray(u_rom_i, dtype=float)
    if u_fom_i.shape != u_rom_i.shape:
        raise ValueError("field shapes do not match")
    return fem.energy_norm(u_fom_i - u_rom_i, A_i)


def global_errors(cell_errors, cell_fom_norms):
    """(absolute, relative): square root of summed squares, and its ratio to
    the identically accumulated FOM norm."""
    cell_errors = np.asarray(cell_errors, dtype=float)
    cell_fom_norms = np.asarray(cell_fom_norms, dtype=float)
    absolute = float(np.sqrt(np.sum(cell_errors**2)))
    fom = float(np.sqrt(np.sum(cell_fom_norms**2)))
    if fom <= 0:
        raise ValueError("FOM norm is zero; relative error undefined")
    return absolute, absolute / fom


class SingularGramError(RuntimeError):
    pass


def projection_error(test_vectors, basis, gram) -> float:
    """Maximum relative projection error of the test vectors onto span(basis).

    Inner products use the given Gramian. For a non-orthonormal basis the
    projection coefficients solve the basis Gram system (rejected when its
    estimated condition number exceeds 1e12).
    """
    V = np.asarray(basis, dtype=float)
    S = np.asarray(test_vectors, dtype=float)
    if V.ndim != 2 or V.shape[1] == 0:
        raise ValueError("basis must contain at least one vector")
    MV = gram @ V
    G = V.T @ MV
    G = 0.5 * (G + G.T)
    coeffs_rhs = MV.T @ S                      # (n_basis, n_test)
    if np.allclose(G, np.eye(G.shape[0]), atol=1e-10):
        coeff = coeffs_rhs
    else:
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularGramError(
                f"basis Gram matrix condition {cond:.2e} exceeds 1e12")
        coeff = np.linalg.solve(G, coeffs_rhs)

    worst = 0.0
    MS = gram @ S
    resid = S - V @ coeff      # explicit residuals avoid cancellation
    Mresid = gram @ resid
    for j in range(S.shape[1]):
        s2 = float(S[:, j] @ MS[:, j])
        if s2 <= 0:
            raise ValueError("test vector with zero norm")
        r2 = float(resid[:, j] @ Mresid[:, j])
        worst = max(worst, np.sqrt(max(r2, 0.0) / s2))
    return worst


def dof_counts(coarse, n_mpe, n_local):
    """Global DoF counts of the empirical and spectral (GFEM) approximations.

    The empirical count uses 2 DoFs per coarse vertex plus n_mpe per edge;
    the spectral/GFEM count is n_local basis functions per vertex.
    """
    n_emp = 2 * coarse.n_vertices + coarse.n_edges * int(n_mpe)
    n_spe = coarse.n_vertices * int(n_local)
    return n_emp, n_spe
