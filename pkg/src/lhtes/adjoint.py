"""Reverse-time discrete adjoint of the transient solver.

Differentiates the exact time-discrete maps the solver implements.  Each
step's converged state satisfies r_n(T_n, T_{n-1}; theta) = 0, so by the
implicit function theorem the adjoint solves use the transpose of the
full residual Jacobian at the converged state -- including the capacity
temperature-derivative term the forward modified-Newton iteration omits
-- regardless of how the forward iteration found the root:

    A_M^T lam_M = -dJ/dT_M,
    A_n^T lam_n = C_tot(T_{n+1}) lam_{n+1},     n = M-1 .. 1,
    dJ/dtheta   = dJ/dtheta|_explicit + sum_n lam_n^T dr_n/dtheta,

with A_n = K_tilde(T_n) + dC_tot/dT contracted with (T_n - T_{n-1}).
Gradients come out per effective-property channel (k, c, rho, L per
element plus the global melting temperature); chaining to the actual
design variables happens in the optimizer module.

Memory is bounded by a uniform checkpoint schedule: the forward pass
retains selected macro states and the reverse pass regenerates the
realized sub-steps of each span on the fly with the same deterministic
solver, so gradients are identical to the store-everything path.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy.sparse import linalg as sparse_linalg

from .design import EffectiveProperties
from .simulate import (PhaseModel, TemperatureHistory, ThermalSystem,
                       TransientSetup, smooth_step, smooth_step_derivative)

_PROP_CHANNELS = ("k", "c", "rho", "L")


@dataclass
class GradientBundle:
    """Total derivatives of objective and constraints w.r.t. the design.

    ``d_gamma`` rows are chained through projection and filter back to
    the raw density variables.  The latent constraint is independent of
    gamma, so its density block is identically zero and not stored.
    """

    j_gamma: np.ndarray
    j_z_h: np.ndarray
    j_z_p: np.ndarray
    gm_gamma: np.ndarray | None = None
    gm_z_h: np.ndarray | None = None
    gl_z_h: np.ndarray | None = None
    gl_z_p: np.ndarray | None = None


@dataclass(frozen=True)
class CheckpointSchedule:
    """Stored macro-step indices and the recompute spans between them."""

    n_steps: int
    stored: tuple
    spans: tuple  # ((start, end), ...) covering [0, n_steps]


def make_schedule(n_steps: int, max_stored: int) -> CheckpointSchedule:
    """Uniformly spaced checkpoints: ceil(n_steps / (max_stored - 1)) apart."""
    if max_stored < 2:
        raise ValueError("need at least 2 stored states")
    spacing = ceil(n_steps / (max_stored - 1))
    stored = sorted(set(range(0, n_steps, spacing)) | {n_steps})
    spans = tuple((stored[i], stored[i + 1]) for i in range(len(stored) - 1))
    return CheckpointSchedule(n_steps=n_steps, stored=tuple(stored), spans=spans)


def objective_state_gradient(system: ThermalSystem, props: EffectiveProperties,
                             phase: PhaseModel, t_ref: float, T_final: np.ndarray
                             ) -> tuple:
    """Explicit gradients of the stored-energy objective at the final state.

    Returns (dJ/dT over all nodes, per-channel explicit property grads).
    """
    mesh = system.mesh
    T_cent = T_final[mesh.elems].mean(axis=1)
    t_mid = phase.t_solidus + 0.5 * phase.width
    psi = smooth_step(T_cent, t_mid, phase.alpha, phase.width)
    dpsi = smooth_step_derivative(T_cent, t_mid, phase.alpha, phase.width)
    rho_v = props.rho * mesh.volumes

    per_node = (props.c + props.L * dpsi) * rho_v / 4.0
    dJ_dT = system.scatter(np.repeat(per_node[:, None], 4, axis=1))

    explicit = {
        "k": np.zeros(mesh.n_elems),
        "c": (T_cent - t_ref) * rho_v,
        "rho": (props.c * (T_cent - t_ref) + props.L * psi) * mesh.volumes,
        "L": psi * rho_v,
        # psi depends on T - t_solidus only
        "t_melt": float(-(props.L * dpsi * rho_v).sum()),
    }
    return dJ_dT, explicit


def _reverse_transitions(system: ThermalSystem, props, phase, setup,
                         history: TemperatureHistory):
    """Yield (T_prev, T_next, dt) for every realized transition, newest first.

    Works directly off a fully stored history; with a memory-lean
    history the spans between stored macro states are recomputed.
    """
    if history.stored_macro is None:
        for n in range(len(history.dts) - 1, -1, -1):
            yield history.fields[n], history.fields[n + 1], history.dts[n]
        return
    stored = history.stored_macro
    for s_idx in range(len(stored) - 1, 0, -1):
        start, end = stored[s_idx - 1], stored[s_idx]
        states = [history.macro_state(start)]
        dts = []
        for _ in range(start + 1, end + 1):
            realized = system.advance_macro(states[-1], props, phase, setup)
            for dt, state, _iters in realized:
                states.append(state)
                dts.append(dt)
        for n in range(len(dts) - 1, -1, -1):
            yield states[n], states[n + 1], dts[n]


def adjoint_property_gradients(system: ThermalSystem, props: EffectiveProperties,
                               phase: PhaseModel, setup: TransientSetup,
                               history: TemperatureHistory, t_ref: float) -> dict:
    """dJ/d(effective properties) for the stored energy at the final time.

    Keys "k", "c", "rho", "L" hold per-element arrays, "t_melt" the
    scalar for the global melting temperature.  Requires the history
    produced for exactly these arguments (states are revisited, or
    recomputed from checkpoints for lean histories).
    """
    mesh = system.mesh
    ops = system.ops
    grads = {ch: np.zeros(mesh.n_elems) for ch in _PROP_CHANNELS}
    dJ_dT, explicit = objective_state_gradient(system, props, phase, t_ref,
                                               history.final)
    grads["t_melt"] = explicit["t_melt"]
    for ch in _PROP_CHANNELS:
        grads[ch] += explicit[ch]

    coupling = -dJ_dT[system.free_nodes]  # rhs of the terminal adjoint solve
    for T_prev, T_next, dt in _reverse_transitions(system, props, phase, setup,
                                                   history):
        terms = system.capacity_terms(T_next, props, phase, dt,
                                      setup.ggls, setup.ggls_scale, derivs=True)
        c_tot_e = np.einsum("eg,egij->eij", terms["coeff_c"], ops.mass_g)
        if setup.ggls:
            c_tot_e = c_tot_e + dt * np.einsum("eg,egij->eij", terms["stab"],
                                               ops.grad_g)
        k_tilde_e = c_tot_e + (dt * props.k)[:, None, None] * ops.cond

        delta_e = (T_next - T_prev)[mesh.elems]
        u = np.einsum("egij,ej->egi", ops.mass_g, delta_e)
        w = np.einsum("egij,ej->egi", ops.grad_g, delta_e)
        cap_dT = terms["d_coeff_c"]["T"]
        stab_dT = terms["d_stab"]["T"]
        d_blocks = (np.einsum("eg,egi,gj->eij", cap_dT, u, ops.N)
                    + dt * np.einsum("eg,egi,gj->eij", stab_dT, w, ops.N))

        A = system.reduced_matrix(k_tilde_e + d_blocks)
        lam_free = sparse_linalg.splu(A.T.tocsc(),
                                      permc_spec="MMD_AT_PLUS_A").solve(coupling)
        lam = np.zeros(mesh.n_nodes)
        lam[system.free_nodes] = lam_free
        mu = lam[mesh.elems]

        s_u = np.einsum("egi,ei->eg", u, mu)
        s_w = np.einsum("egi,ei->eg", w, mu)
        cond_T = np.einsum("eij,ej->ei", ops.cond, T_next[mesh.elems])
        grads["k"] += dt * (np.einsum("ei,ei->e", cond_T, mu)
                            + np.einsum("eg,eg->e", terms["d_stab"]["k"], s_w))
        for ch in ("c", "rho", "L"):
            grads[ch] += (np.einsum("eg,eg->e", terms["d_coeff_c"][ch], s_u)
                          + dt * np.einsum("eg,eg->e", terms["d_stab"][ch], s_w))
        grads["t_melt"] += float(
            (terms["d_coeff_c"]["t_melt"] * s_u).sum()
            + dt * (terms["d_stab"]["t_melt"] * s_w).sum())

        # rhs for the next (earlier) adjoint: C_tot(T_next)^T lam restricted
        coupling = system.scatter(
            np.einsum("eij,ej->ei", c_tot_e, mu))[system.free_nodes]
    return grads
