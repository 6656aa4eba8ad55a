"""Pseudo-density design field: filtering, projection, interpolation.

The design chain is gamma -> density filter -> threshold projection ->
effective element properties; sensitivities traverse the same chain in
reverse.  gamma = 1 means phase-change material, gamma = 0 means the
high-conductivity material.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .mesh import QuadMesh


@dataclass
class DesignState:
    """Complete optimization variable set: densities plus two latent points."""

    gamma: np.ndarray  # (n_e,) in [0, 1]
    z_h: np.ndarray    # (2,) in [-3, 3]^2
    z_p: np.ndarray    # (2,) in [-3, 3]^2

    def clamped(self) -> "DesignState":
        return DesignState(np.clip(self.gamma, 0.0, 1.0),
                           np.clip(self.z_h, -3.0, 3.0),
                           np.clip(self.z_p, -3.0, 3.0))

    def copy(self) -> "DesignState":
        return DesignState(self.gamma.copy(), self.z_h.copy(), self.z_p.copy())

    @property
    def n_variables(self) -> int:
        return self.gamma.size + self.z_h.size + self.z_p.size


@dataclass
class FilterOperator:
    """Row-normalized linear-hat convolution filter on element centroids."""

    weights: sparse.csr_matrix
    radius: float

    @classmethod
    def from_mesh(cls, mesh: QuadMesh, radius: float) -> "FilterOperator":
        if radius <= 0.0:
            raise ValueError("filter radius must be positive")
        centroids = mesh.centroids
        tree = cKDTree(centroids)
        pairs = tree.query_pairs(radius, output_type="ndarray")
        n = mesh.n_elems
        rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        dist = np.linalg.norm(centroids[rows] - centroids[cols], axis=1)
        vals = radius - dist  # symmetric hat weights before normalization
        w = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        row_sums = np.asarray(w.sum(axis=1)).ravel()
        w = sparse.diags(1.0 / row_sums) @ w
        return cls(weights=w.tocsr(), radius=radius)

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        return self.weights @ gamma

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return self.weights.T @ v


def project(gamma_f: np.ndarray, beta_proj: float, eta: float = 0.5) -> np.ndarray:
    """tanh threshold projection sharpening the filtered field.

    Maps 0 -> 0, eta -> eta, 1 -> 1 and approaches a step at eta as
    beta_proj grows; beta_proj = 0 degenerates to the identity.
    """
    if beta_proj < 0.0:
        raise ValueError("projection sharpness must be >= 0")
    if beta_proj == 0.0:
        return np.asarray(gamma_f, dtype=float).copy()
    num = np.tanh(beta_proj * eta) + np.tanh(beta_proj * (gamma_f - eta))
    den = np.tanh(beta_proj * eta) + np.tanh(beta_proj * (1.0 - eta))
    return num / den


def project_derivative(gamma_f: np.ndarray, beta_proj: float, eta: float = 0.5) -> np.ndarray:
    if beta_proj == 0.0:
        return np.ones_like(np.asarray(gamma_f, dtype=float))
    den = np.tanh(beta_proj * eta) + np.tanh(beta_proj * (1.0 - eta))
    return beta_proj * (1.0 / np.cosh(beta_proj * (gamma_f - eta)) ** 2) / den


@dataclass
class EffectiveProperties:
    """Per-element interpolated properties plus the global phase data."""

    k: np.ndarray    # W/(m K)
    c: np.ndarray    # J/(kg K)
    rho: np.ndarray  # kg/m^3
    L: np.ndarray    # J/kg
    t_melt: float    # K, taken from the PCM
    mushy_width: float  # K
    p: float         # conductivity penalization exponent in effect


def interpolate(gamma_phys: np.ndarray, hcm_props: np.ndarray, pcm_props: np.ndarray,
                p: float, mushy_width: float) -> EffectiveProperties:
    """Blend endpoint material properties by the physical density field.

    Conductivity follows the power-law penalization with exponent ``p``;
    heat capacity, density and latent heat are linear.  The latent heat
    of the conductive material is zero and the melting temperature is
    the PCM's, not interpolated.  ``hcm_props`` is (k, c_p, rho, cost)
    and ``pcm_props`` is (k, c_p, rho, L, T_m).
    """
    if p < 1.0:
        raise ValueError("penalization exponent must be >= 1")
    g = np.asarray(gamma_phys, dtype=float)
    k_h, c_h, rho_h = hcm_props[0], hcm_props[1], hcm_props[2]
    k_p, c_p, rho_p, L_p, t_m = pcm_props[:5]
    return EffectiveProperties(
        k=k_h + (k_p - k_h) * g ** p,
        c=c_h + (c_p - c_h) * g,
        rho=rho_h + (rho_p - rho_h) * g,
        L=g * L_p,
        t_melt=float(t_m),
        mushy_width=float(mushy_width),
        p=float(p),
    )


def interpolation_gamma_gradient(gamma_phys: np.ndarray, hcm_props: np.ndarray,
                                 pcm_props: np.ndarray, p: float) -> dict:
    """d(effective property)/d(gamma_phys) for each interpolation channel."""
    g = np.asarray(gamma_phys, dtype=float)
    return {
        "k": p * g ** (p - 1.0) * (pcm_props[0] - hcm_props[0]),
        "c": np.full_like(g, pcm_props[1] - hcm_props[1]),
        "rho": np.full_like(g, pcm_props[2] - hcm_props[2]),
        "L": np.full_like(g, pcm_props[3]),
    }
