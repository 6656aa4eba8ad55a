"""Acceptance suite: one test per release criterion.

The heavy scenario fixtures run every shipped desk-scale config once per
session and the criterion tests read off the results.  Run with
``pytest tests/test_acceptance.py -v -s`` to see the PASS lines.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from lhtes.config import RunConfig, load_config
from lhtes.design import DesignState, interpolate, interpolation_gamma_gradient
from lhtes.materials import (bundled_database_path, find_record, load_database,
                             normalize)
from lhtes.mesh import build_quarter_annulus, build_strip
from lhtes.optimize import (CoDesignProblem, ContinuationSchedules,
                            cost_constraint_value, fin_baseline, log_barrier,
                            run_optimization, write_density_csv)
from lhtes.simulate import (PhaseModel, ThermalSystem, TransientSetup,
                            apparent_capacity, phase_from_props, stored_energy)
from lhtes.vae import decode, encode_mean, train_vae

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def report(criterion, passed, detail):
    print(f"\n[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_phase_change_energy_conservation():
    phase = PhaseModel(t_solidus=330.0, width=10.0, alpha=0.25, latent=2e5)
    integral, _ = quad(lambda T: apparent_capacity(T, phase, 2000.0) - 2000.0,
                       330.0 - 5 * 10.0, 330.0 + 6 * 10.0, limit=200)
    error = abs(integral - 2e5) / 2e5
    report(1, error < 0.01,
           f"capacity pulse integrates to {integral:.1f} J/kg vs latent 2e5 "
           f"(relative error {error:.2e})")


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_linear_slab_series_solution():
    start = time.monotonic()
    mesh = build_strip(1.0, 0.01, 100, 1)
    hcm = np.array([237.0, 897.0, 2700.0, 2.6])
    pcm = np.array([1.0, 1000.0, 1500.0, 0.0, 1e4])
    props = interpolate(np.ones(mesh.n_elems), hcm, pcm, 1.0, 10.0)
    phase = phase_from_props(props)
    diffusivity = props.k[0] / (props.rho[0] * props.c[0])
    t_final = 0.2 / diffusivity
    setup = TransientSetup(400.0, 300.0, t_final / 50, 50, ggls=False)
    system = ThermalSystem(mesh)
    history = system.run_transient(props, phase, setup)
    x = mesh.coords[:, 0]
    theta = np.zeros_like(x)
    for n in range(200):
        lam = (2 * n + 1) * np.pi / 2.0
        theta += (4.0 / ((2 * n + 1) * np.pi) * np.sin(lam * x)
                  * np.exp(-diffusivity * lam ** 2 * t_final))
    exact = 300.0 + 100.0 * theta
    error = np.abs(history.final - exact).max() / 100.0
    report(2, error < 0.01 and time.monotonic() - start < 5.0,
           f"max nodal error {100 * error:.3f}% of the temperature span "
           f"in {time.monotonic() - start:.1f}s")


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_adjoint_matches_finite_differences():
    start = time.monotonic()
    cfg = RunConfig()
    cfg.mesh.n_r, cfg.mesh.n_theta = 10, 10
    cfg.transient.n_steps = 5
    cfg.transient.newton_tol = 1e-11
    cfg.transient.max_newton_iters = 500
    cfg.optimizer.mode = "co-design"
    cfg.optimizer.constraint = "cost"
    cfg.optimizer.objective = "retention"  # J itself, per the stated contract
    problem = CoDesignProblem(cfg)
    point = ContinuationSchedules().at(60)
    rng = np.random.default_rng(5)
    design = DesignState(
        gamma=np.clip(rng.uniform(0.4, 0.95, problem.mesh.n_elems), 0, 1),
        z_h=np.array([0.25, -0.1]), z_p=np.array([-0.15, 0.3]))

    def evaluate(d, latent_on=True):
        if latent_on:
            ev = problem.forward(d, point)
            return ev
        hcm, pcm = problem.material_vectors(d)
        pcm = pcm.copy()
        pcm[3] = 0.0
        gamma_phys = problem.physical_density(d, point)
        props = interpolate(gamma_phys, hcm, pcm, point.p,
                            cfg.phase.mushy_width)
        phase = phase_from_props(props)
        history = problem.system.run_transient(props, phase, problem.setup)
        J = stored_energy(history.final, problem.mesh, props, phase,
                          t_ref=problem.setup.t_boundary)
        return J

    # latent-free configuration: 1e-5 agreement on density entries
    pcm_frozen = find_record(problem.pcm_records, "RT-25")
    zero_latent = pcm_frozen.attribute_vector().copy()
    zero_latent[3] = 0.0
    gamma_phys = problem.physical_density(design, point)
    props0 = interpolate(gamma_phys, problem.material_vectors(design)[0],
                         zero_latent, point.p, cfg.phase.mushy_width)
    phase0 = phase_from_props(props0)
    from lhtes.adjoint import adjoint_property_gradients
    history0 = problem.system.run_transient(props0, phase0, problem.setup)
    grads0 = adjoint_property_gradients(problem.system, props0, phase0,
                                        problem.setup, history0,
    t_ref=problem.setup.t_boundary)
    channels = interpolation_gamma_gradient(
        gamma_phys, problem.material_vectors(design)[0], zero_latent, point.p)
    dJ_phys = sum(grads0[ch] * channels[ch] for ch in ("k", "c", "rho", "L"))
    dJ_gamma0 = problem.density_chain_transpose(design, point, dJ_phys)

    h = 1e-4
    rng2 = np.random.default_rng(7)
    elements = rng2.choice(problem.mesh.n_elems, size=10, replace=False)
    worst_linear = 0.0
    for e in elements:
        values = []
        for sign in (+1, -1):
            d = design.copy()
            d.gamma[e] += sign * h
            gp = problem.physical_density(d, point)
            p = interpolate(gp, problem.material_vectors(d)[0], zero_latent,
                            point.p, cfg.phase.mushy_width)
            ph = phase_from_props(p)
            hist = problem.system.run_transient(p, ph, problem.setup)
            values.append(stored_energy(hist.final, problem.mesh, p, ph,
                                        problem.setup.t_boundary))
        fd = (values[0] - values[1]) / (2 * h)
        worst_linear = max(worst_linear, abs(dJ_gamma0[e] - fd) / abs(fd))

    # full phase-change configuration: 1e-3 on gamma entries and all
    # four latent coordinates, for J and the cost constraint
    ev = problem.forward(design, point)
    bundle = problem.adjoint_gradient(ev, point)
    bundle = problem.constraint_gradients(ev, point, bundle)
    worst_phase = 0.0
    for e in elements:
        values = []
        for sign in (+1, -1):
            d = design.copy()
            d.gamma[e] += sign * h
            values.append(problem.forward(d, point).J_end)
        fd = (values[0] - values[1]) / (2 * h)
        worst_phase = max(worst_phase, abs(bundle.j_gamma[e] - fd) / abs(fd))
    worst_z = 0.0
    for which, grad_J, grad_gm in (("z_h", bundle.j_z_h, bundle.gm_z_h),
                                   ("z_p", bundle.j_z_p, None)):
        for i in range(2):
            vals_J, vals_gm = [], []
            for sign in (+1, -1):
                d = design.copy()
                getattr(d, which)[i] += sign * h
                e2 = problem.forward(d, point)
                vals_J.append(e2.J_end)
                vals_gm.append(e2.g_m)
            fd_J = (vals_J[0] - vals_J[1]) / (2 * h)
            worst_z = max(worst_z, abs(grad_J[i] - fd_J) / abs(fd_J))
            if grad_gm is not None:
                fd_gm = (vals_gm[0] - vals_gm[1]) / (2 * h)
                worst_z = max(worst_z, abs(grad_gm[i] - fd_gm) / abs(fd_gm))

    # checkpointing: store-all vs 3 stored states, identical gradients
    from lhtes.adjoint import make_schedule
    schedule = make_schedule(cfg.transient.n_steps, max_stored=3)
    lean_history = problem.system.run_transient(
        ev.props, ev.phase, problem.setup, stored_macro=list(schedule.stored))
    full = adjoint_property_gradients(problem.system, ev.props, ev.phase,
                                      problem.setup, ev.history,
                                      problem.setup.t_boundary)
    lean = adjoint_property_gradients(problem.system, ev.props, ev.phase,
                                      problem.setup, lean_history,
                                      problem.setup.t_boundary)
    ckpt_err = max(np.abs(lean[ch] - full[ch]).max()
                   / max(np.abs(full[ch]).max(), 1e-300)
                   for ch in ("k", "c", "rho", "L"))
    elapsed = time.monotonic() - start
    report(3, worst_linear < 1e-5 and worst_phase < 1e-3 and worst_z < 1e-3
           and ckpt_err < 1e-12 and elapsed < 60.0,
           f"FD agreement: {worst_linear:.2e} (no latent), "
           f"{worst_phase:.2e} (gamma, phase change), {worst_z:.2e} (latent "
           f"coords, J and g_m); checkpoint invariance {ckpt_err:.2e}; "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_barrier_junction():
    worst = 0.0
    for tau in (3.0, 10.0, 100.0):
        g = -1.0 / tau ** 2
        log_branch = -np.log(-g) / tau
        linear_branch = tau * g - np.log(1.0 / tau ** 2) / tau + 1.0 / tau
        worst = max(worst, abs(log_branch - linear_branch))
        worst = max(worst, abs(-1.0 / (tau * g) - tau))
        assert log_barrier(g, tau) == pytest.approx(log_branch, abs=1e-14)
    report(4, worst < 1e-10,
           f"value and slope of both branches agree at the junction to "
           f"{worst:.2e} for tau in {{3, 10, 100}}")


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_vae_reconstruction_quality():
    worst = {}
    for kind in ("hcm", "pcm"):
        records = load_database(bundled_database_path(kind), kind)
        matrix, params = normalize(records)
        model, _ = train_vae(matrix, kind, params, seed=0, epochs=50_000)
        decoder = model.decoder()
        coords = encode_mean(model, matrix)
        errors = []
        for z, record in zip(coords, records):
            predicted = decode(decoder, z)
            errors.append(np.abs(predicted - record.attribute_vector())
                          / record.attribute_vector())
        worst[kind] = float(np.mean(errors, axis=0).max())
    report(5, max(worst.values()) < 0.10,
           f"mean per-attribute reconstruction error: hcm {100 * worst['hcm']:.2f}%, "
           f"pcm {100 * worst['pcm']:.2f}% (both below 10%)")


# ------------------------------------------------------- scenario fixtures

def _load(name):
    return load_config(CONFIGS / name)


@pytest.fixture(scope="session")
def validation_results(tmp_path_factory):
    """Whole design-strategy ladder at desk scale."""
    out_root = tmp_path_factory.mktemp("validation")
    results = {}

    cfg = _load("desk_validation.ini")
    cfg.output.out_dir = str(out_root / "geometry_only")
    problem = CoDesignProblem(cfg)
    hcm = problem.fixed_hcm.attribute_vector()
    pcm = problem.fixed_pcm.attribute_vector()

    def discharged(gamma):
        j0, j_end, _ = problem.simulate_design(gamma, hcm, pcm, p=3.0)
        return j0 - j_end

    results["pure_pcm"] = discharged(np.ones(problem.mesh.n_elems))
    results["fins"] = {n: discharged(fin_baseline(problem.mesh, n, 0.2))
                       for n in (2, 3, 4)}

    geo = run_optimization(cfg, problem=problem)
    results["geometry_only"] = geo

    # sequential: freeze the optimized layout, then pick the conductor,
    # then the storage material
    layout = out_root / "layout.csv"
    write_density_csv(layout, geo.gamma_phys)

    cfg_h = _load("desk_validation.ini")
    cfg_h.optimizer.mode = "sequential-hcm"
    cfg_h.optimizer.lr_decay = 0.994  # latent coordinates need to park
    cfg_h.optimizer.init_design = str(layout)
    cfg_h.output.out_dir = str(out_root / "seq_hcm")
    seq_h = run_optimization(cfg_h)
    results["sequential_hcm"] = seq_h

    cfg_p = _load("desk_validation.ini")
    cfg_p.optimizer.mode = "sequential-pcm"
    cfg_p.optimizer.lr_decay = 0.994
    cfg_p.optimizer.init_design = str(layout)
    cfg_p.materials.fixed_hcm = seq_h.hcm_name
    cfg_p.output.out_dir = str(out_root / "seq_pcm")
    seq_p = run_optimization(cfg_p)
    results["sequential"] = seq_p

    cfg_c = _load("desk_codesign.ini")
    cfg_c.output.out_dir = str(out_root / "codesign")
    results["codesign"] = run_optimization(cfg_c)
    return results


@pytest.fixture(scope="session")
def pareto_results(tmp_path_factory):
    out_root = tmp_path_factory.mktemp("pareto")
    results = {}
    for budget in (150.0, 300.0, 600.0):
        cfg = _load("desk_pareto.ini")
        cfg.optimizer.budget = budget
        cfg.output.out_dir = str(out_root / f"budget_{budget:g}")
        results[budget] = run_optimization(cfg)
    return results


@pytest.fixture(scope="session")
def temperature_results(tmp_path_factory):
    out_root = tmp_path_factory.mktemp("temps")
    results = {}
    for t_initial in (350, 450, 550):
        cfg = _load(f"desk_temp_{t_initial}.ini")
        cfg.output.out_dir = str(out_root / f"t_{t_initial}")
        results[t_initial] = (cfg, run_optimization(cfg))
    return results


@pytest.fixture(scope="session")
def horizon_results(tmp_path_factory):
    out_root = tmp_path_factory.mktemp("times")
    results = {}
    for hours in (55, 110, 165, 220):
        cfg = _load(f"desk_time_{hours}h.ini")
        cfg.output.out_dir = str(out_root / f"h_{hours}")
        results[hours] = (cfg, run_optimization(cfg))
    return results


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_design_strategy_hierarchy(validation_results):
    r = validation_results
    pure = r["pure_pcm"]
    best_fin = max(r["fins"].values())
    geo = r["geometry_only"].discharged_energy
    seq = r["sequential"].discharged_energy
    co = r["codesign"].discharged_energy
    ordering = pure < best_fin < geo <= co
    seq_ok = co >= seq * (1.0 - 0.01)
    report(6, ordering and seq_ok,
           f"discharged energy (MJ): pure PCM {pure / 1e6:.1f} < best fin "
           f"{best_fin / 1e6:.1f} < geometry-only {geo / 1e6:.1f} <= "
           f"co-design {co / 1e6:.1f}; sequential {seq / 1e6:.1f} "
           f"(co-design within -1%: {seq_ok})")


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_constraint_feasibility(validation_results, pareto_results,
                                            temperature_results,
                                            horizon_results):
    failures = []
    runs = []
    runs.append(("validation/geometry-only", r_geo := validation_results["geometry_only"]))
    runs.append(("validation/sequential-hcm", validation_results["sequential_hcm"]))
    runs.append(("validation/sequential", validation_results["sequential"]))
    runs.append(("validation/co-design", validation_results["codesign"]))
    for budget, res in pareto_results.items():
        runs.append((f"pareto/{budget:g}", res))
    for t, (_cfg, res) in temperature_results.items():
        runs.append((f"temperature/{t}K", res))
    for hours, (_cfg, res) in horizon_results.items():
        runs.append((f"horizon/{hours}h", res))

    for name, res in runs:
        g_m = res.final_constraints.get("g_m")
        if g_m is not None and g_m > 1e-3:
            failures.append(f"{name}: g_m = {g_m:.4f}")
        bound = res.final_constraints["eps_star_final"] + 1e-3
        for side, dist in (("hcm", res.atlas_distance_h),
                           ("pcm", res.atlas_distance_p)):
            if dist > bound:
                failures.append(f"{name}: {side} atlas distance {dist:.4f} > {bound:.4f}")
        if res.discharged_energy > 0:
            delta = (abs(res.discharged_energy - res.discharged_energy_decoded)
                     / res.discharged_energy)
            if delta > 0.02:
                failures.append(f"{name}: snap changed energy by {100 * delta:.2f}%")
    report(7, not failures,
           f"{len(runs)} shipped runs feasible at convergence"
           + ("" if not failures else "; failures: " + "; ".join(failures)))


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_pareto_monotonicity(pareto_results):
    energies = [pareto_results[b].discharged_energy for b in (150.0, 300.0, 600.0)]
    monotone = energies[0] <= energies[1] * 1.0 + 1e-9 and energies[1] <= energies[2] + 1e-9
    report(8, monotone,
           "discharged energy non-decreasing across budgets {150, 300, 600}: "
           + ", ".join(f"{e / 1e6:.1f} MJ" for e in energies))


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_melting_point_in_operating_window(temperature_results):
    details = []
    ok = True
    for t_initial, (cfg, res) in temperature_results.items():
        pcm = find_record(load_database(bundled_database_path("pcm"), "pcm"),
                          res.pcm_name)
        t_d = cfg.transient.t_boundary
        inside = t_d < pcm.T_m < t_initial
        ok = ok and inside
        details.append(f"T_I={t_initial}K -> {res.pcm_name} "
                       f"(T_m={pcm.T_m:.1f}K, window ({t_d:.0f}, {t_initial})K"
                       f"{'' if inside else ' VIOLATED'})")
    report(9, ok, "; ".join(details))


# --------------------------------------------------------------- criterion 10

def test_criterion_10_performance_envelope():
    cfg = RunConfig()  # full resolution: 5000 elements, 60 steps
    cfg.optimizer.max_iters = 3
    cfg.optimizer.step_tol = 0.0
    cfg.output.out_dir = "/tmp/lhtes_perf_probe"
    problem = CoDesignProblem(cfg)
    start = time.monotonic()
    result = run_optimization(cfg, problem=problem)
    elapsed = time.monotonic() - start
    per_iteration = elapsed / result.iterations
    projected = 400 * per_iteration
    budget = 4 * (15 * 60 + 32)
    report(10, projected < budget,
           f"{per_iteration:.1f} s/iteration at full resolution -> "
           f"{projected / 60:.0f} min projected for 400 iterations "
           f"(budget {budget / 60:.0f} min)")
