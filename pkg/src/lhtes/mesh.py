"""Structured bilinear-quad meshes and element integral templates.

The storage device domain is a quarter annulus meshed on a uniform polar
grid and mapped to Cartesian coordinates; an axis-aligned strip builder
shares the same machinery for 1-D verification problems.  All integrals
use 2x2 Gauss quadrature on the bilinear mapping.  Quadrature weights
are rescaled per element so constants integrate to the exact cell volume
(polar sector / rectangle, unit out-of-plane depth); the straight-edged
quad otherwise under-integrates curved sectors by O(dtheta^2).

Element node ordering is counterclockwise; element (i, j) of the grid
couples radial (or x) index i with angular (or y) index j, and element
ids run fastest over i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_GAUSS = 1.0 / np.sqrt(3.0)
_GAUSS_PTS = np.array([(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS),
                       (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)])
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def shape_functions(xi: float, eta: float) -> np.ndarray:
    return 0.25 * (1.0 + xi * _CORNERS[:, 0]) * (1.0 + eta * _CORNERS[:, 1])


def shape_gradients(xi: float, eta: float) -> np.ndarray:
    """(4, 2) reference-space gradients [dN/dxi, dN/deta]."""
    return 0.25 * np.stack([
        _CORNERS[:, 0] * (1.0 + eta * _CORNERS[:, 1]),
        _CORNERS[:, 1] * (1.0 + xi * _CORNERS[:, 0]),
    ], axis=1)


@dataclass
class QuadMesh:
    coords: np.ndarray           # (n_nodes, 2)
    elems: np.ndarray            # (n_elems, 4) counterclockwise node ids
    volumes: np.ndarray          # exact cell volumes, unit depth
    dirichlet_nodes: np.ndarray  # inner arc (annulus) / left edge (strip)
    neumann_nodes: np.ndarray    # remaining boundary nodes
    grid_shape: tuple            # elements along (radial|x, angular|y)
    kind: str
    _operators: "ElementOperators | None" = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def centroids(self) -> np.ndarray:
        return self.coords[self.elems].mean(axis=1)

    def operators(self) -> "ElementOperators":
        if self._operators is None:
            self._operators = ElementOperators.from_mesh(self)
        return self._operators


@dataclass
class ElementOperators:
    """Precomputed Gauss-point data for every element.

    ``mass_g``/``grad_g`` hold the per-Gauss-point 4x4 blocks
    wdet*N^T N and wdet*B^T B; summing over the Gauss axis gives the
    conductivity/capacity-independent element templates.
    """

    N: np.ndarray        # (4 gauss, 4 nodes)
    wdet: np.ndarray     # (n_e, 4) scaled quadrature weights
    B: np.ndarray        # (n_e, 4, 2, 4) spatial shape gradients
    mass_g: np.ndarray   # (n_e, 4, 4, 4)
    grad_g: np.ndarray   # (n_e, 4, 4, 4)
    cond: np.ndarray     # (n_e, 4, 4) = sum_g grad_g
    h2: np.ndarray       # (n_e,) squared characteristic length (= area)

    @classmethod
    def from_mesh(cls, mesh: QuadMesh) -> "ElementOperators":
        Xe = mesh.coords[mesh.elems]                     # (n_e, 4, 2)
        N = np.stack([shape_functions(*gp) for gp in _GAUSS_PTS])
        dN = np.stack([shape_gradients(*gp) for gp in _GAUSS_PTS])  # (4, 4, 2)

        J = np.einsum("eia,gib->egab", Xe, dN)
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(detJ <= 0.0):
            raise ValueError("degenerate element: non-positive Jacobian determinant")
        invJ = np.empty_like(J)
        invJ[..., 0, 0] = J[..., 1, 1]
        invJ[..., 0, 1] = -J[..., 0, 1]
        invJ[..., 1, 0] = -J[..., 1, 0]
        invJ[..., 1, 1] = J[..., 0, 0]
        invJ /= detJ[..., None, None]
        B = np.einsum("egba,gib->egai", invJ, dN)

        # Gauss weights are all 1; rescale so constants integrate to the
        # exact cell volume.
        quad_vol = detJ.sum(axis=1)
        scale = mesh.volumes / quad_vol
        wdet = detJ * scale[:, None]

        mass_g = wdet[:, :, None, None] * np.einsum("gi,gj->gij", N, N)[None]
        grad_g = np.einsum("eg,egai,egaj->egij", wdet, B, B)
        cond = grad_g.sum(axis=1)
        return cls(N=N, wdet=wdet, B=B, mass_g=mass_g, grad_g=grad_g,
                   cond=cond, h2=mesh.volumes.copy())


def build_quarter_annulus(r_in: float, r_out: float, n_r: int, n_theta: int) -> QuadMesh:
    """Quarter annulus on a uniform polar grid, inner arc tagged Dirichlet."""
    if not (0.0 < r_in < r_out):
        raise ValueError(f"need 0 < r_in < r_out, got {r_in}, {r_out}")
    if n_r < 1 or n_theta < 1:
        raise ValueError("element counts must be >= 1")
    r = np.linspace(r_in, r_out, n_r + 1)
    theta = np.linspace(0.0, np.pi / 2.0, n_theta + 1)
    R, TH = np.meshgrid(r, theta, indexing="xy")  # (n_theta+1, n_r+1)
    coords = np.column_stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()])

    node = lambda i, j: j * (n_r + 1) + i
    elems = np.empty((n_r * n_theta, 4), dtype=np.int64)
    volumes = np.empty(n_r * n_theta)
    dtheta = theta[1] - theta[0]
    for j in range(n_theta):
        for i in range(n_r):
            e = j * n_r + i
            elems[e] = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1))
            volumes[e] = 0.5 * (r[i + 1] ** 2 - r[i] ** 2) * dtheta

    ii, jj = np.meshgrid(np.arange(n_r + 1), np.arange(n_theta + 1), indexing="ij")
    on_boundary = (ii == 0) | (ii == n_r) | (jj == 0) | (jj == n_theta)
    boundary = np.array([node(i, j) for i, j in zip(ii[on_boundary], jj[on_boundary])])
    dirichlet = np.array(sorted(node(0, j) for j in range(n_theta + 1)))
    neumann = np.setdiff1d(boundary, dirichlet)

    mesh = QuadMesh(coords, elems, volumes, dirichlet, neumann,
                    (n_r, n_theta), "quarter_annulus")
    mesh.operators()  # validates Jacobians eagerly
    return mesh


def build_strip(length: float, height: float, n_x: int, n_y: int) -> QuadMesh:
    """Axis-aligned strip, left edge (x = 0) tagged Dirichlet."""
    if length <= 0.0 or height <= 0.0:
        raise ValueError("strip dimensions must be positive")
    if n_x < 1 or n_y < 1:
        raise ValueError("element counts must be >= 1")
    x = np.linspace(0.0, length, n_x + 1)
    y = np.linspace(0.0, height, n_y + 1)
    X, Y = np.meshgrid(x, y, indexing="xy")
    coords = np.column_stack([X.ravel(), Y.ravel()])

    node = lambda i, j: j * (n_x + 1) + i
    elems = np.empty((n_x * n_y, 4), dtype=np.int64)
    for j in range(n_y):
        for i in range(n_x):
            elems[j * n_x + i] = (node(i, j), node(i + 1, j),
                                  node(i + 1, j + 1), node(i, j + 1))
    volumes = np.full(n_x * n_y, (x[1] - x[0]) * (y[1] - y[0]))

    ii, jj = np.meshgrid(np.arange(n_x + 1), np.arange(n_y + 1), indexing="ij")
    on_boundary = (ii == 0) | (ii == n_x) | (jj == 0) | (jj == n_y)
    boundary = np.array([node(i, j) for i, j in zip(ii[on_boundary], jj[on_boundary])])
    dirichlet = np.array(sorted(node(0, j) for j in range(n_y + 1)))
    neumann = np.setdiff1d(boundary, dirichlet)

    mesh = QuadMesh(coords, elems, volumes, dirichlet, neumann, (n_x, n_y), "strip")
    mesh.operators()
    return mesh


def element_matrices_template(mesh: QuadMesh, e: int) -> tuple:
    """Geometric element templates (integral grad N^T grad N, integral N^T N).

    These are scaled later by the effective conductivity and by
    rho_eff * apparent capacity respectively.
    """
    ops = mesh.operators()
    return ops.cond[e].copy(), ops.mass_g[e].sum(axis=0)


def write_vtk(path, mesh: QuadMesh, point_data: dict | None = None,
              cell_data: dict | None = None, title: str = "lhtes field export"):
    """Legacy ASCII VTK unstructured-grid writer."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.coords:
            fh.write(f"{x:.10g} {y:.10g} 0.0\n")
        fh.write(f"\nCELLS {mesh.n_elems} {5 * mesh.n_elems}\n")
        for quad in mesh.elems:
            fh.write("4 " + " ".join(str(n) for n in quad) + "\n")
        fh.write(f"\nCELL_TYPES {mesh.n_elems}\n")
        fh.write("9\n" * mesh.n_elems)
        if point_data:
            fh.write(f"\nPOINT_DATA {mesh.n_nodes}\n")
            for name, values in point_data.items():
                fh.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                fh.write("\n".join(f"{v:.10g}" for v in values) + "\n")
        if cell_data:
            fh.write(f"\nCELL_DATA {mesh.n_elems}\n")
            for name, values in cell_data.items():
                fh.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                fh.write("\n".join(f"{v:.10g}" for v in values) + "\n")
