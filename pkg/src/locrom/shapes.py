"""Closed-form shape function families on the reference interval/square."""

import numpy as np

# serendipity node order: corners counter-clockwise, then edge midpoints
# (bottom, right, top, left)
SERENDIPITY_NODES = np.array(
    [
        (-1.0, -1.0),
        (1.0, -1.0),
        (1.0, 1.0),
        (-1.0, 1.0),
        (0.0, -1.0),
        (1.0, 0.0),
        (0.0, 1.0),
        (-1.0, 0.0),
    ]
)

# bilinear vertex order matches the coarse grid cell convention
# (bottom-left, bottom-right, top-right, top-left)
QUAD_VERTS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def lagrange_1d(q, k, xi):
    """Lagrange polynomial of degree q on equally spaced nodes in [-1, 1].

    Equals one at node k and zero at the other q nodes.
    """
    if not 0 <= k <= q:
        raise ValueError(f"node index k={k} out of range for degree q={q}")
    xi = np.asarray(xi, dtype=float)
    if q == 0:
        return np.ones_like(xi)
    nodes = np.linspace(-1.0, 1.0, q + 1)
    value = np.ones_like(xi)
    for m in range(q + 1):
        if m == k:
            continue
        value = value * (xi - nodes[m]) / (nodes[k] - nodes[m])
    return value


def coarse_shape(j, xi, eta):
    """Bilinear vertex shape j of the coarse quad (vertex order of QUAD_VERTS)."""
    if not 0 <= j <= 3:
        raise ValueError(f"vertex index j={j} out of range")
    xj, yj = QUAD_VERTS[j]
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return 0.25 * (1.0 + xi * xj) * (1.0 + eta * yj)


def bilinear_vertex_shapes(xi, eta):
    """All four bilinear vertex shapes stacked along the first axis."""
    return np.stack([coarse_shape(j, xi, eta) for j in range(4)])


def serendipity_quadratic(i, xi, eta):
    """8-node serendipity shape i on [-1, 1]^2 (node order of SERENDIPITY_NODES)."""
    if not 0 <= i <= 7:
        raise ValueError(f"node index i={i} out of range")
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    xn, yn = SERENDIPITY_NODES[i]
    if i < 4:
        return 0.25 * (1.0 + xi * xn) * (1.0 + eta * yn) * (xi * xn + eta * yn - 1.0)
    if xn == 0.0:
        return 0.5 * (1.0 - xi**2) * (1.0 + eta * yn)
    return 0.5 * (1.0 + xi * xn) * (1.0 - eta**2)


def biquadratic_lagrange(i, xi, eta):
    """9-node tensor-product quadratic shape i on [-1, 1]^2.

    Node order: the 8 serendipity nodes followed by the center node, so the
    two macro-shape families share indexing for the boundary nodes.
    """
    if not 0 <= i <= 8:
        raise ValueError(f"node index i={i} out of range")
    if i == 8:
        xn = yn = 0.0
    else:
        xn, yn = SERENDIPITY_NODES[i]
    k1 = int(np.sign(xn)) + 1  # node position on the 1-D 3-node stencil
    k2 = int(np.sign(yn)) + 1
    return lagrange_1d(2, k1, xi) * lagrange_1d(2, k2, eta)


def hierarchical_edge_fn(p, xi):
    """Integrated-Legendre edge bubble of degree p + 1.

    The generating polynomial is normalized such that its antiderivative
    vanishes at both interval endpoints; for p = 1 this gives xi^2 - 1.
    Derivatives of distinct bubbles are L2-orthogonal on [-1, 1].
    """
    if p < 1:
        raise ValueError(f"bubble requires p >= 1, got p={p}")
    xi = np.asarray(xi, dtype=float)
    # antiderivative of 2p * P_p expressed through standard Legendre polynomials:
    # h_{p+1} = 2p/(2p+1) * (P_{p+1} - P_{p-1}), zero at xi = +-1 by construction
    coeff = np.zeros(p + 2)
    coeff[p + 1] = 1.0
    coeff[p - 1] = -1.0
    return 2.0 * p / (2.0 * p + 1.0) * np.polynomial.legendre.legval(xi, coeff)
