"""Constrained co-design loop for geometry and material selection.

Minimizes the stored energy remaining at the end of the discharge
window, normalized by its initial value, subject to a budget on the
conductive material (cost or volume form) and to the latent coordinates
staying close to database materials.  Inequalities enter the loss
through a relaxed log barrier whose stiffness grows geometrically;
penalization, projection sharpness and the latent allowance follow
linear continuation schedules.  Updates come from Adam with the density
field clamped to [0, 1] and latent coordinates to [-3, 3]^2.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .adam import Adam
from .adjoint import GradientBundle, adjoint_property_gradients, make_schedule
from .config import RunConfig, config_hash
from .design import (DesignState, EffectiveProperties, FilterOperator,
                     interpolate, interpolation_gamma_gradient, project,
                     project_derivative)
from .materials import bundled_database_path, find_record, load_database
from .mesh import QuadMesh, build_quarter_annulus
from .simulate import (PhaseModel, StepConvergenceError, TemperatureHistory,
                       ThermalSystem, TransientSetup, smooth_step,
                       smooth_step_derivative, stored_energy)
from .vae import (DecoderModel, LatentAtlas, decode, decode_jacobian,
                  load_atlas, load_model)

Z_BOUND = 3.0


@dataclass(frozen=True)
class SchedulePoint:
    p: float
    beta_proj: float
    eps_star: float
    tau: float


@dataclass
class ContinuationSchedules:
    """Linear ramps with caps/floors plus geometric barrier growth."""

    p_start: float = 1.0
    p_rate: float = 0.005
    p_max: float = 3.0
    beta_start: float = 1.0
    beta_rate: float = 0.04
    beta_max: float = 64.0
    eps_start: float = 4.0
    eps_rate: float = 0.08
    eps_min: float = 0.02
    tau_start: float = 3.0
    tau_growth: float = 1.02

    def at(self, iteration: int) -> SchedulePoint:
        # geometric growth capped to stay in floating range; at 1e12 the
        # barrier is effectively exact anyway
        log_tau = np.log(self.tau_start) + iteration * np.log(self.tau_growth)
        return SchedulePoint(
            p=min(self.p_start + self.p_rate * iteration, self.p_max),
            beta_proj=min(self.beta_start + self.beta_rate * iteration, self.beta_max),
            eps_star=max(self.eps_start - self.eps_rate * iteration, self.eps_min),
            tau=float(np.exp(min(log_tau, np.log(1e12)))),
        )


def log_barrier(g: float, tau: float) -> float:
    """Relaxed log barrier: logarithmic inside, linear extension outside.

    The two branches join at g = -1/tau^2 with matching value and slope,
    so infeasible iterates see a finite, steep penalty instead of an
    undefined one.
    """
    if tau <= 0.0:
        raise ValueError("barrier stiffness must be positive")
    if g <= -1.0 / tau ** 2:
        return -np.log(-g) / tau
    return tau * g - np.log(1.0 / tau ** 2) / tau + 1.0 / tau


def log_barrier_derivative(g: float, tau: float) -> float:
    if g <= -1.0 / tau ** 2:
        return -1.0 / (tau * g)
    return tau


def cost_constraint(gamma, z_h, decoder_h: DecoderModel, volumes, budget: float) -> float:
    """Normalized conductive-material cost: <= 0 within budget.

    Decodes unit cost and density of the conductor at ``z_h`` and prices
    the (1 - gamma) volume.
    """
    props = decode(decoder_h, z_h)
    return cost_constraint_value(gamma, volumes, props[3], props[2], budget)


def cost_constraint_value(gamma, volumes, unit_cost: float, rho: float,
                          budget: float) -> float:
    hcm_volume = float(((1.0 - np.asarray(gamma)) * volumes).sum())
    return unit_cost * rho * hcm_volume / budget - 1.0


def volume_constraint_value(gamma, volumes, fraction: float) -> float:
    hcm_volume = float(((1.0 - np.asarray(gamma)) * volumes).sum())
    return hcm_volume / (fraction * float(np.sum(volumes))) - 1.0


def softmin_distance(z, coords: np.ndarray, rho_lse: float) -> tuple:
    """Smooth minimum of Euclidean distances to atlas points, with gradient.

    Underestimates the true minimum by at most log(n)/rho_lse.
    """
    z = np.asarray(z, dtype=float)
    diff = z[None, :] - coords
    dist = np.linalg.norm(diff, axis=1)
    value = -logsumexp(-rho_lse * dist) / rho_lse
    weights = np.exp(-rho_lse * (dist - dist.min()))
    weights /= weights.sum()
    safe = np.maximum(dist, 1e-12)
    grad = (weights / safe) @ diff
    return float(value), grad


def latent_constraint(z_h, z_p, atlas_h: LatentAtlas | None,
                      atlas_p: LatentAtlas | None, eps_star: float,
                      rho_lse: float) -> tuple:
    """Smooth max of the per-database smooth-min distances, minus eps_star.

    Either side may be absent (frozen-material stages); gradients for an
    absent side come back as None.
    """
    sides = []
    if atlas_h is not None:
        sides.append(("h", *softmin_distance(z_h, atlas_h.coords, rho_lse)))
    if atlas_p is not None:
        sides.append(("p", *softmin_distance(z_p, atlas_p.coords, rho_lse)))
    if not sides:
        raise ValueError("latent constraint needs at least one atlas")
    values = np.array([s[1] for s in sides])
    if len(sides) == 1:
        combined = values[0]
        weights = np.array([1.0])
    else:
        combined = logsumexp(rho_lse * values) / rho_lse
        weights = np.exp(rho_lse * (values - values.max()))
        weights /= weights.sum()
    grads = {"h": None, "p": None}
    for weight, (side, _v, grad) in zip(weights, sides):
        grads[side] = weight * grad
    return float(combined - eps_star), grads["h"], grads["p"]


def adam_step(design: DesignState, gradient: dict, optimizer: Adam) -> DesignState:
    """One Adam update of all design variables followed by bound clamping."""
    new = optimizer.step([design.gamma, design.z_h, design.z_p],
                         [gradient["gamma"], gradient["z_h"], gradient["z_p"]])
    return DesignState(*new).clamped()


def snap_to_atlas(z, atlas: LatentAtlas) -> tuple:
    """(index, name, coordinates, true distance) of the nearest material."""
    dist = np.linalg.norm(atlas.coords - np.asarray(z)[None, :], axis=1)
    idx = int(np.argmin(dist))
    return idx, atlas.names[idx], atlas.coords[idx].copy(), float(dist[idx])


def fin_baseline(mesh: QuadMesh, n_fins: int, hcm_fraction: float) -> np.ndarray:
    """Radial-spoke conductor layout hitting the volume fraction exactly.

    Fins are equal-width angular bands centered at (2i+1)/(2n) of the
    quarter arc; the two columns straddling each fin edge receive the
    fractional overlap, every column in between is pure conductor.
    """
    if mesh.kind != "quarter_annulus":
        raise ValueError("fin baselines are defined on the quarter annulus")
    if not (0.0 < hcm_fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    if n_fins < 1:
        raise ValueError("need at least one fin")
    n_r, n_theta = mesh.grid_shape
    span = np.pi / 2.0
    width = hcm_fraction * span / n_fins
    d_theta = span / n_theta
    column_fraction = np.zeros(n_theta)
    for i in range(n_fins):
        center = (2 * i + 1) * span / (2 * n_fins)
        lo, hi = center - width / 2.0, center + width / 2.0
        for j in range(n_theta):
            a, b = j * d_theta, (j + 1) * d_theta
            overlap = max(0.0, min(b, hi) - max(a, lo))
            column_fraction[j] += overlap / d_theta
    if np.any(column_fraction > 1.0 + 1e-12):
        raise ValueError("fins overlap; fraction too large for this fin count")
    gamma = np.ones(mesh.n_elems)
    for j in range(n_theta):
        gamma[j * n_r:(j + 1) * n_r] = 1.0 - column_fraction[j]
    return gamma


@dataclass
class ForwardEval:
    """Everything one loss evaluation produced."""

    design: DesignState
    gamma_phys: np.ndarray
    hcm_props: np.ndarray
    pcm_props: np.ndarray
    props: EffectiveProperties
    phase: PhaseModel
    history: TemperatureHistory
    J_end: float
    J_init: float
    J_capacity: float
    g_m: float | None
    g_l: float | None
    gl_grads: tuple = (None, None)


@dataclass
class LogRow:
    iteration: int
    J: float
    J_norm: float
    g_m: float
    g_l: float
    p: float
    beta_proj: float
    eps_star: float
    tau: float
    wall_time_s: float


@dataclass
class OptimizationResult:
    design: DesignState
    mode: str
    hcm_name: str
    pcm_name: str
    z_h: np.ndarray
    z_p: np.ndarray
    atlas_distance_h: float
    atlas_distance_p: float
    discharged_energy: float
    discharged_energy_decoded: float
    initial_energy: float
    final_energy: float
    energy_curve: np.ndarray
    gamma_phys: np.ndarray
    log: list
    iterations: int
    termination: str
    final_constraints: dict


class CoDesignProblem:
    """Forward chain, loss, and gradients for one configured scenario."""

    def __init__(self, cfg: RunConfig, mesh: QuadMesh | None = None):
        cfg.validate()
        self.cfg = cfg
        self.mode = cfg.optimizer.mode
        self.mesh = mesh if mesh is not None else build_quarter_annulus(
            cfg.mesh.r_in, cfg.mesh.r_out, cfg.mesh.n_r, cfg.mesh.n_theta)
        self.system = ThermalSystem(self.mesh)
        self.uses_filter = self.mode in ("co-design", "geometry-only")
        self.filter = (FilterOperator.from_mesh(self.mesh, cfg.design.filter_radius)
                       if self.uses_filter else None)
        self.setup = TransientSetup(
            t_initial=cfg.transient.t_initial, t_boundary=cfg.transient.t_boundary,
            dt=cfg.transient.dt, n_steps=cfg.transient.n_steps,
            newton_tol=cfg.transient.newton_tol,
            max_newton_iters=cfg.transient.max_newton_iters,
            ggls=cfg.transient.ggls, ggls_scale=cfg.transient.ggls_scale,
            linear_solver=cfg.transient.linear_solver)
        self.stored_macro = None
        if cfg.optimizer.max_stored_states >= 2:
            self.stored_macro = list(make_schedule(
                cfg.transient.n_steps, cfg.optimizer.max_stored_states).stored)

        mats = cfg.materials
        self.hcm_records = load_database(mats.hcm_db or bundled_database_path("hcm"), "hcm")
        self.pcm_records = load_database(mats.pcm_db or bundled_database_path("pcm"), "pcm")
        self.optimizes_hcm = self.mode in ("co-design", "sequential-hcm")
        self.optimizes_pcm = self.mode in ("co-design", "sequential-pcm")
        self.decoder_h = self.atlas_h = None
        self.decoder_p = self.atlas_p = None
        if self.optimizes_hcm:
            self.decoder_h = _load_decoder(mats.hcm_model, "hcm")
            self.atlas_h = load_atlas(mats.hcm_atlas or _bundled_model_path("hcm_atlas.csv"))
        else:
            self.fixed_hcm = find_record(self.hcm_records, mats.fixed_hcm)
        if self.optimizes_pcm:
            self.decoder_p = _load_decoder(mats.pcm_model, "pcm")
            self.atlas_p = load_atlas(mats.pcm_atlas or _bundled_model_path("pcm_atlas.csv"))
        else:
            self.fixed_pcm = find_record(self.pcm_records, mats.fixed_pcm)

        # Material-budget constraint applies where the layout is free;
        # frozen-geometry stages would turn it into a near-active
        # constant sitting on the barrier's singular branch.
        self.has_material_constraint = self.mode in ("co-design", "geometry-only")
        self.has_latent_constraint = self.optimizes_hcm or self.optimizes_pcm

    # -- forward chain -------------------------------------------------------

    def initial_design(self) -> DesignState:
        init_path = self.cfg.optimizer.init_design
        if init_path:
            gamma = _load_density(init_path, self.mesh.n_elems)
        else:
            gamma = np.full(self.mesh.n_elems, self.cfg.design.gamma_init)
            if self.cfg.design.gamma_dither > 0.0 and self.uses_filter:
                # the uniform state is a symmetric equilibrium of the
                # annulus problem; a seeded dither lets the gradient flow
                # develop angular structure
                rng = np.random.default_rng(self.cfg.optimizer.seed)
                gamma = np.clip(gamma + self.cfg.design.gamma_dither
                                * rng.uniform(-1.0, 1.0, gamma.size), 0.0, 1.0)
        return DesignState(gamma=gamma, z_h=np.zeros(2), z_p=np.zeros(2))

    def physical_density(self, design: DesignState, point: SchedulePoint) -> np.ndarray:
        if not self.uses_filter:
            # frozen layouts are already physical fields
            return design.gamma.copy()
        filtered = self.filter.apply(design.gamma)
        return project(filtered, point.beta_proj, self.cfg.design.projection_eta)

    def density_chain_transpose(self, design: DesignState, point: SchedulePoint,
                                seed: np.ndarray) -> np.ndarray:
        """Pull a d/d(gamma_phys) vector back to the raw design variables."""
        if not self.uses_filter:
            return seed
        filtered = self.filter.apply(design.gamma)
        h_prime = project_derivative(filtered, point.beta_proj,
                                     self.cfg.design.projection_eta)
        return self.filter.apply_transpose(h_prime * seed)

    def material_vectors(self, design: DesignState) -> tuple:
        if self.optimizes_hcm:
            hcm = decode(self.decoder_h, design.z_h)
        else:
            hcm = self.fixed_hcm.attribute_vector()
        if self.optimizes_pcm:
            pcm = decode(self.decoder_p, design.z_p)
        else:
            pcm = self.fixed_pcm.attribute_vector()
        return hcm, pcm

    def forward(self, design: DesignState, point: SchedulePoint) -> ForwardEval:
        gamma_phys = self.physical_density(design, point)
        hcm, pcm = self.material_vectors(design)
        props = interpolate(gamma_phys, hcm, pcm, point.p, self.cfg.phase.mushy_width)
        phase = PhaseModel(props.t_melt, props.mushy_width, self.cfg.phase.alpha)
        history = self.system.run_transient(props, phase, self.setup,
                                            stored_macro=self.stored_macro)
        J_end = stored_energy(history.final, self.mesh, props, phase,
                              t_ref=self.setup.t_boundary)
        J_init = stored_energy(self.system.initial_field(self.setup), self.mesh,
                               props, phase, t_ref=self.setup.t_boundary)
        J_capacity, _ = self.ideal_capacity(pcm)

        g_m = None
        if self.has_material_constraint:
            if self.cfg.optimizer.constraint == "cost":
                g_m = cost_constraint_value(gamma_phys, self.mesh.volumes,
                                            unit_cost=hcm[3], rho=hcm[2],
                                            budget=self.cfg.optimizer.budget)
            else:
                g_m = volume_constraint_value(gamma_phys, self.mesh.volumes,
                                              self.cfg.optimizer.volume_fraction)
        g_l, gl_h, gl_p = None, None, None
        if self.has_latent_constraint:
            g_l, gl_h, gl_p = latent_constraint(
                design.z_h, design.z_p, self.atlas_h, self.atlas_p,
                point.eps_star, self.cfg.optimizer.rho_lse)
        return ForwardEval(design=design, gamma_phys=gamma_phys, hcm_props=hcm,
                           pcm_props=pcm, props=props, phase=phase,
                           history=history, J_end=J_end, J_init=J_init,
                           J_capacity=J_capacity, g_m=g_m, g_l=g_l,
                           gl_grads=(gl_h, gl_p))

    def ideal_capacity(self, pcm_props: np.ndarray) -> tuple:
        """Storage capacity of the domain filled with this PCM, and its
        partials with respect to (c, rho, L, T_m).

        Sensible content over the operating window plus the latent
        content available at the initial temperature; the credit the
        discharge objective grants a material choice.
        """
        t_i, t_d = self.setup.t_initial, self.setup.t_boundary
        width, alpha = self.cfg.phase.mushy_width, self.cfg.phase.alpha
        c_p, rho, L, t_m = pcm_props[1], pcm_props[2], pcm_props[3], pcm_props[4]
        t_mid = t_m + 0.5 * width
        psi = float(smooth_step(t_i, t_mid, alpha, width))
        dpsi = float(smooth_step_derivative(t_i, t_mid, alpha, width))
        volume = float(self.mesh.volumes.sum())
        value = (c_p * (t_i - t_d) + L * psi) * rho * volume
        partials = {
            "c": (t_i - t_d) * rho * volume,
            "rho": (c_p * (t_i - t_d) + L * psi) * volume,
            "L": psi * rho * volume,
            "t_melt": -L * dpsi * rho * volume,  # psi depends on t_i - t_m
        }
        return value, partials

    def objective_value(self, ev: ForwardEval) -> float:
        """Scalar the loop minimizes, before normalization.

        The discharge form credits the storage capacity the selected
        PCM could ideally hold: J_end - (capacity of the pure-PCM
        domain).  For a fixed material the credit is a constant, so the
        layout dynamics coincide with the retention form; with the PCM
        latent coordinate free it rewards materials whose heat can
        actually be cycled over the operating window.  The retention
        form is the raw end-state energy.
        """
        if self.cfg.optimizer.objective == "discharge":
            return ev.J_end - ev.J_capacity
        return ev.J_end

    def objective_scale(self, j0: float, j_init0: float) -> float:
        """Denominator of the normalized objective term.

        Retention uses the iteration-0 objective itself (term = J/J0,
        bounded in (0, 1]).  The discharge deficit is unbounded below,
        so it is scaled by the iteration-0 storage capacity -- the
        largest possible discharge -- which keeps the term O(1) and the
        barrier weights meaningful; the term is anchored so iteration 0
        still evaluates to exactly 1.
        """
        if self.cfg.optimizer.objective == "discharge":
            return j_init0
        return j0

    def normalized_objective(self, value: float, j0: float, j_init0: float) -> float:
        return 1.0 + (value - j0) / self.objective_scale(j0, j_init0)

    # -- gradients -----------------------------------------------------------

    def adjoint_gradient(self, ev: ForwardEval, point: SchedulePoint) -> GradientBundle:
        """Exact discrete objective gradient via the reverse-time adjoint.

        In discharge mode the capacity-credit partials are subtracted on
        the PCM channel (the credit is an explicit function of the
        decoded PCM properties, no state dependence).
        """
        prop_grads = adjoint_property_gradients(
            self.system, ev.props, ev.phase, self.setup, ev.history,
            t_ref=self.setup.t_boundary)
        gamma_channels = interpolation_gamma_gradient(
            ev.gamma_phys, ev.hcm_props, ev.pcm_props, point.p)
        dJ_dphys = sum(prop_grads[ch] * gamma_channels[ch]
                       for ch in ("k", "c", "rho", "L"))
        j_gamma = self.density_chain_transpose(ev.design, point, dJ_dphys)

        g = ev.gamma_phys
        j_z_h = np.zeros(2)
        if self.optimizes_hcm:
            d_hcm = np.array([
                float((prop_grads["k"] * (1.0 - g ** point.p)).sum()),
                float((prop_grads["c"] * (1.0 - g)).sum()),
                float((prop_grads["rho"] * (1.0 - g)).sum()),
                0.0,  # cost enters constraints only
            ])
            j_z_h = decode_jacobian(self.decoder_h, ev.design.z_h).T @ d_hcm
        j_z_p = np.zeros(2)
        if self.optimizes_pcm:
            d_pcm = np.array([
                float((prop_grads["k"] * g ** point.p).sum()),
                float((prop_grads["c"] * g).sum()),
                float((prop_grads["rho"] * g).sum()),
                float((prop_grads["L"] * g).sum()),
                prop_grads["t_melt"],
            ])
            if self.cfg.optimizer.objective == "discharge":
                _, cap = self.ideal_capacity(ev.pcm_props)
                d_pcm[1] -= cap["c"]
                d_pcm[2] -= cap["rho"]
                d_pcm[3] -= cap["L"]
                d_pcm[4] -= cap["t_melt"]
            j_z_p = decode_jacobian(self.decoder_p, ev.design.z_p).T @ d_pcm
        return GradientBundle(j_gamma=j_gamma, j_z_h=j_z_h, j_z_p=j_z_p)

    def constraint_gradients(self, ev: ForwardEval, point: SchedulePoint,
                             bundle: GradientBundle) -> GradientBundle:
        if ev.g_m is not None:
            volumes = self.mesh.volumes
            if self.cfg.optimizer.constraint == "cost":
                unit_cost, rho = ev.hcm_props[3], ev.hcm_props[2]
                budget = self.cfg.optimizer.budget
                d_phys = -unit_cost * rho * volumes / budget
                hcm_volume = float(((1.0 - ev.gamma_phys) * volumes).sum())
                if self.optimizes_hcm:
                    jac = decode_jacobian(self.decoder_h, ev.design.z_h)
                    d_cost, d_rho = jac[3], jac[2]
                    bundle.gm_z_h = (hcm_volume / budget) * (d_cost * rho
                                                             + unit_cost * d_rho)
                else:
                    bundle.gm_z_h = np.zeros(2)
            else:
                total = self.cfg.optimizer.volume_fraction * float(volumes.sum())
                d_phys = -volumes / total
                bundle.gm_z_h = np.zeros(2)
            bundle.gm_gamma = self.density_chain_transpose(ev.design, point, d_phys)
        if ev.g_l is not None:
            bundle.gl_z_h, bundle.gl_z_p = ev.gl_grads
        return bundle

    def evaluate_loss(self, ev: ForwardEval, point: SchedulePoint, j0: float,
                      j_init0: float) -> tuple:
        """Barrier-augmented loss and its total design gradient.

        Returns (loss, total gradient dict, bundle).  ``j0`` and
        ``j_init0`` are the frozen scales captured at iteration 0.
        """
        bundle = self.adjoint_gradient(ev, point)
        bundle = self.constraint_gradients(ev, point, bundle)

        scale = self.objective_scale(j0, j_init0)
        loss = self.normalized_objective(self.objective_value(ev), j0, j_init0)
        total = {"gamma": bundle.j_gamma / scale,
                 "z_h": bundle.j_z_h / scale,
                 "z_p": bundle.j_z_p / scale}
        if ev.g_m is not None:
            loss += log_barrier(ev.g_m, point.tau)
            slope = log_barrier_derivative(ev.g_m, point.tau)
            total["gamma"] = total["gamma"] + slope * bundle.gm_gamma
            total["z_h"] = total["z_h"] + slope * bundle.gm_z_h
        if ev.g_l is not None:
            loss += log_barrier(ev.g_l, point.tau)
            slope = log_barrier_derivative(ev.g_l, point.tau)
            if bundle.gl_z_h is not None:
                total["z_h"] = total["z_h"] + slope * bundle.gl_z_h
            if bundle.gl_z_p is not None:
                total["z_p"] = total["z_p"] + slope * bundle.gl_z_p
        if not self.uses_filter:
            total["gamma"] = np.zeros_like(total["gamma"])
        if not self.optimizes_hcm:
            total["z_h"] = np.zeros(2)
        if not self.optimizes_pcm:
            total["z_p"] = np.zeros(2)
        return float(loss), total, bundle

    # -- reporting helpers ---------------------------------------------------

    def snapped_materials(self, design: DesignState) -> tuple:
        """Nearest database records plus the true atlas distances."""
        if self.optimizes_hcm:
            _, name_h, _, dist_h = snap_to_atlas(design.z_h, self.atlas_h)
            hcm = find_record(self.hcm_records, name_h)
        else:
            hcm, dist_h = self.fixed_hcm, 0.0
        if self.optimizes_pcm:
            _, name_p, _, dist_p = snap_to_atlas(design.z_p, self.atlas_p)
            pcm = find_record(self.pcm_records, name_p)
        else:
            pcm, dist_p = self.fixed_pcm, 0.0
        return hcm, pcm, dist_h, dist_p

    def simulate_design(self, gamma_phys: np.ndarray, hcm: np.ndarray,
                        pcm: np.ndarray, p: float) -> tuple:
        """(initial J, final J, energy curve) for fixed fields/materials."""
        props = interpolate(gamma_phys, hcm, pcm, p, self.cfg.phase.mushy_width)
        phase = PhaseModel(props.t_melt, props.mushy_width, self.cfg.phase.alpha)
        history = self.system.run_transient(props, phase, self.setup)
        from .simulate import energy_curve
        curve = energy_curve(history, self.mesh, props, phase,
                             t_ref=self.setup.t_boundary)
        return float(curve[0, 2]), float(curve[-1, 2]), curve


def run_optimization(cfg: RunConfig, problem: CoDesignProblem | None = None,
                     callback=None) -> OptimizationResult:
    """Drive the co-design loop to termination and package the result.

    Stops when the max-norm design change drops below ``step_tol`` or at
    the iteration cap; on a simulation failure the offending design is
    dumped to the output directory for post-mortem before re-raising.
    """
    problem = problem if problem is not None else CoDesignProblem(cfg)
    schedules = ContinuationSchedules(**{
        f: getattr(cfg.schedules, f) for f in (
            "p_start", "p_rate", "p_max", "beta_start", "beta_rate", "beta_max",
            "eps_start", "eps_rate", "eps_min", "tau_start", "tau_growth")})
    design = problem.initial_design()
    optimizer = Adam([design.gamma, design.z_h, design.z_p],
                     lr=cfg.optimizer.learning_rate)

    log: list = []
    j0 = None
    j_init0 = None
    ev = None
    termination = "max_iterations"
    started = time.monotonic()
    iteration = 0
    for iteration in range(cfg.optimizer.max_iters):
        point = schedules.at(iteration)
        try:
            ev = problem.forward(design, point)
        except StepConvergenceError:
            _dump_failed_design(cfg, design, iteration)
            raise
        if j0 is None:
            j_init0 = ev.J_init
            j0 = problem.objective_value(ev)
        objective = problem.objective_value(ev)
        loss, total_grad, _bundle = problem.evaluate_loss(ev, point, j0, j_init0)
        log.append(LogRow(
            iteration=iteration, J=objective,
            J_norm=problem.normalized_objective(objective, j0, j_init0),
            g_m=np.nan if ev.g_m is None else ev.g_m,
            g_l=np.nan if ev.g_l is None else ev.g_l,
            p=point.p, beta_proj=point.beta_proj, eps_star=point.eps_star,
            tau=point.tau, wall_time_s=time.monotonic() - started))
        if callback is not None:
            callback(iteration, ev, loss)
        optimizer.lr = (cfg.optimizer.learning_rate
                        * cfg.optimizer.lr_decay ** iteration)
        new_design = adam_step(design, total_grad, optimizer)
        step = max(np.abs(new_design.gamma - design.gamma).max(initial=0.0),
                   np.abs(new_design.z_h - design.z_h).max(initial=0.0),
                   np.abs(new_design.z_p - design.z_p).max(initial=0.0))
        design = new_design
        if step < cfg.optimizer.step_tol:
            termination = "step_tolerance"
            break

    final_point = schedules.at(iteration)
    gamma_phys = problem.physical_density(design, final_point)
    hcm_rec, pcm_rec, dist_h, dist_p = problem.snapped_materials(design)

    j_start, j_end, curve = problem.simulate_design(
        gamma_phys, hcm_rec.attribute_vector(), pcm_rec.attribute_vector(),
        final_point.p)
    discharged = j_start - j_end

    hcm_dec, pcm_dec = problem.material_vectors(design)
    j_start_dec, j_end_dec, _ = problem.simulate_design(
        gamma_phys, hcm_dec, pcm_dec, final_point.p)
    discharged_decoded = j_start_dec - j_end_dec

    final_constraints = {}
    if problem.has_material_constraint:
        if cfg.optimizer.constraint == "cost":
            final_constraints["g_m"] = cost_constraint_value(
                gamma_phys, problem.mesh.volumes, hcm_rec.cost, hcm_rec.rho,
                cfg.optimizer.budget)
        else:
            final_constraints["g_m"] = volume_constraint_value(
                gamma_phys, problem.mesh.volumes, cfg.optimizer.volume_fraction)
    final_constraints["atlas_distance_h"] = dist_h
    final_constraints["atlas_distance_p"] = dist_p
    final_constraints["eps_star_final"] = final_point.eps_star

    return OptimizationResult(
        design=design, mode=problem.mode,
        hcm_name=hcm_rec.name, pcm_name=pcm_rec.name,
        z_h=design.z_h.copy(), z_p=design.z_p.copy(),
        atlas_distance_h=dist_h, atlas_distance_p=dist_p,
        discharged_energy=discharged, discharged_energy_decoded=discharged_decoded,
        initial_energy=j_start, final_energy=j_end, energy_curve=curve,
        gamma_phys=gamma_phys, log=log, iterations=iteration + 1,
        termination=termination, final_constraints=final_constraints)


# -- artifact output ---------------------------------------------------------

def write_result_artifacts(result: OptimizationResult, cfg: RunConfig,
                           out_dir) -> Path:
    """Manifest, convergence log, density field, energy curve, design state."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "J", "J_norm", "g_m", "g_l", "p", "beta_proj",
                         "eps_star", "tau", "wall_time_s"])
        for row in result.log:
            writer.writerow([row.iteration, row.J, row.J_norm, row.g_m, row.g_l,
                             row.p, row.beta_proj, row.eps_star, row.tau,
                             row.wall_time_s])

    with open(out / "energy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time_s", "J_joules"])
        for step, t, J in result.energy_curve:
            writer.writerow([int(step), t, J])

    write_density_csv(out / "density.csv", result.gamma_phys)
    np.savez(out / "design_state.npz", gamma=result.design.gamma,
             z_h=result.design.z_h, z_p=result.design.z_p,
             gamma_phys=result.gamma_phys)

    manifest = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "mode": result.mode,
        "hcm": result.hcm_name,
        "pcm": result.pcm_name,
        "z_h": list(result.z_h),
        "z_p": list(result.z_p),
        "atlas_distance_h": result.atlas_distance_h,
        "atlas_distance_p": result.atlas_distance_p,
        "discharged_energy_J": result.discharged_energy,
        "discharged_energy_decoded_J": result.discharged_energy_decoded,
        "initial_energy_J": result.initial_energy,
        "final_energy_J": result.final_energy,
        "iterations": result.iterations,
        "termination": result.termination,
        "final_constraints": result.final_constraints,
        "config": {s: dict(vars(getattr(cfg, s))) for s in (
            "mesh", "phase", "transient", "design", "materials", "schedules",
            "optimizer", "output")},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out


def write_density_csv(path, gamma: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["element_id", "gamma"])
        for e, g in enumerate(gamma):
            writer.writerow([e, g])


def read_density_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["element_id", "gamma"]:
            raise ValueError(f"{path}: not a density CSV")
        values = [float(row[1]) for row in reader if row]
    return np.array(values)


def _load_density(path, n_elems: int) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npz":
        data = np.load(path)
        gamma = data["gamma_phys"] if "gamma_phys" in data else data["gamma"]
    else:
        gamma = read_density_csv(path)
    if gamma.shape != (n_elems,):
        raise ValueError(f"{path}: density field has {gamma.shape[0]} entries, "
                         f"mesh has {n_elems} elements")
    return np.clip(gamma, 0.0, 1.0)


def _dump_failed_design(cfg: RunConfig, design: DesignState, iteration: int):
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "failed_design.npz", gamma=design.gamma, z_h=design.z_h,
             z_p=design.z_p, iteration=iteration)


def _bundled_model_path(name: str):
    from importlib import resources
    return Path(resources.files("lhtes").joinpath(f"data/models/{name}"))


def _load_decoder(path, kind: str) -> DecoderModel:
    model_path = path or _bundled_model_path(f"{kind}_vae.bin")
    return load_model(model_path).decoder()
