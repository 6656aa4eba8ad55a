import numpy as np
import pytest

from lhtes.adam import Adam
from lhtes.config import RunConfig
from lhtes.design import DesignState
from lhtes.materials import bundled_database_path, load_database, normalize
from lhtes.mesh import build_quarter_annulus
from lhtes.optimize import (ContinuationSchedules, adam_step, cost_constraint,
                            cost_constraint_value, fin_baseline,
                            latent_constraint, log_barrier,
                            log_barrier_derivative, snap_to_atlas,
                            softmin_distance, volume_constraint_value)
from lhtes.vae import LatentAtlas, load_atlas, load_model


def bundled(name):
    from importlib import resources
    return resources.files("lhtes").joinpath(f"data/models/{name}")


# -- continuation schedules ----------------------------------------------------

def test_schedule_reference_points():
    sch = ContinuationSchedules()
    assert sch.at(0).p == 1.0
    assert sch.at(100).p == pytest.approx(1.5)
    assert sch.at(100).beta_proj == pytest.approx(5.0)
    assert sch.at(49).eps_star == pytest.approx(0.08)
    assert sch.at(399).p == pytest.approx(1.0 + 0.005 * 399)
    for k in (0, 10, 399):
        assert sch.at(k).tau == pytest.approx(3.0 * 1.02 ** k)


def test_schedule_caps_and_floors():
    sch = ContinuationSchedules()
    assert sch.at(100000).p == 3.0
    assert sch.at(100000).beta_proj == 64.0
    assert sch.at(100000).eps_star == 0.02
    assert np.isfinite(sch.at(100000).tau)
    points = [sch.at(k) for k in range(0, 500, 7)]
    assert all(b.p >= a.p for a, b in zip(points, points[1:]))
    assert all(b.eps_star <= a.eps_star for a, b in zip(points, points[1:]))
    assert all(b.tau > a.tau for a, b in zip(points, points[1:]))


# -- log barrier ----------------------------------------------------------------

def test_barrier_unit_value():
    assert log_barrier(-1.0, 1.0) == pytest.approx(0.0)


def test_barrier_junction_continuity():
    # evaluate both branch formulas exactly at the junction point
    for tau in (3.0, 10.0, 100.0):
        g = -1.0 / tau ** 2
        log_branch = -np.log(-g) / tau
        linear_branch = tau * g - np.log(1.0 / tau ** 2) / tau + 1.0 / tau
        assert abs(log_branch - linear_branch) < 1e-10
        assert abs(log_barrier(g, tau) - log_branch) < 1e-12
        log_slope = -1.0 / (tau * g)
        linear_slope = tau
        assert abs(log_slope - linear_slope) < 1e-10
        assert log_barrier_derivative(g, tau) == pytest.approx(tau)


def test_barrier_junction_hand_value():
    tau = 3.0
    value = log_barrier(-1.0 / 9.0, tau)
    assert value == pytest.approx(np.log(9.0) / 3.0)
    assert value == pytest.approx(0.7324, abs=1e-4)


def test_barrier_finite_when_infeasible():
    tau = 3.0
    assert np.isfinite(log_barrier(0.0, tau))
    assert np.isfinite(log_barrier(2.5, tau))
    expected_at_zero = -np.log(1.0 / tau ** 2) / tau + 1.0 / tau
    assert log_barrier(0.0, tau) == pytest.approx(expected_at_zero)


def test_barrier_derivative_matches_fd():
    h = 1e-8
    for tau in (3.0, 10.0):
        for g in (-2.0, -0.5, -1.0 / tau ** 2 - 1e-3, 0.3):
            fd = (log_barrier(g + h, tau) - log_barrier(g - h, tau)) / (2 * h)
            assert log_barrier_derivative(g, tau) == pytest.approx(fd, rel=1e-5)


# -- constraints -----------------------------------------------------------------

def test_cost_constraint_pure_pcm():
    volumes = np.full(10, 0.1)
    assert cost_constraint_value(np.ones(10), volumes, 5.0, 2000.0, 600.0) == -1.0


def test_cost_constraint_exact_budget():
    volumes = np.array([1.0])
    g = cost_constraint_value(np.zeros(1), volumes, 3.0, 200.0, 600.0)
    assert g == pytest.approx(0.0, abs=1e-14)


def test_cost_constraint_hand_value():
    mesh = build_quarter_annulus(0.1, 1.0, 10, 20)
    gamma = np.full(mesh.n_elems, 0.9)
    g = cost_constraint_value(gamma, mesh.volumes, unit_cost=1.0, rho=2000.0,
                              budget=600.0)
    total = np.pi * (1.0 - 0.01) / 4.0
    assert g == pytest.approx(2000.0 * 0.1 * total / 600.0 - 1.0, rel=1e-10)
    assert g == pytest.approx(-0.7408, abs=1e-4)


def test_cost_constraint_decodes_material():
    decoder = load_model(bundled("hcm_vae.bin")).decoder()
    mesh = build_quarter_annulus(0.1, 1.0, 5, 5)
    g = cost_constraint(np.full(mesh.n_elems, 0.5), np.zeros(2), decoder,
                        mesh.volumes, budget=600.0)
    assert np.isfinite(g)


def test_volume_constraint_values():
    volumes = np.full(4, 0.25)
    assert volume_constraint_value(np.ones(4), volumes, 0.2) == -1.0
    g = volume_constraint_value(np.full(4, 0.8), volumes, 0.2)
    assert g == pytest.approx(0.0, abs=1e-14)


def test_softmin_single_point_exact():
    atlas = np.array([[1.0, 1.0]])
    value, grad = softmin_distance(np.array([4.0, 5.0]), atlas, rho_lse=20.0)
    assert value == pytest.approx(5.0)
    np.testing.assert_allclose(grad, np.array([3.0, 4.0]) / 5.0, rtol=1e-12)


def test_latent_constraint_single_material_atlases():
    atlas_h = LatentAtlas(["a"], np.array([[0.0, 0.0]]))
    atlas_p = LatentAtlas(["b"], np.array([[1.0, 0.0]]))
    z = np.array([0.0, 1.0])  # distance 1 to both atlas points
    g, gh, gp = latent_constraint(z, z, atlas_h, atlas_p, eps_star=0.5,
                                  rho_lse=200.0)
    assert g == pytest.approx(np.sqrt(2.0) - 0.5, rel=1e-3)
    assert gh is not None and gp is not None


def test_latent_constraint_on_atlas_points_bounded_by_smoothing():
    atlas_h = load_atlas(bundled("hcm_atlas.csv"))
    atlas_p = load_atlas(bundled("pcm_atlas.csv"))
    rho = 20.0
    g, _, _ = latent_constraint(atlas_h.coords[0], atlas_p.coords[0],
                                atlas_h, atlas_p, eps_star=0.5, rho_lse=rho)
    n_max = max(len(atlas_h), len(atlas_p))
    assert g <= -0.5 + 2 * np.log(n_max) / rho


def test_latent_constraint_inactive_at_start():
    atlas_h = load_atlas(bundled("hcm_atlas.csv"))
    atlas_p = load_atlas(bundled("pcm_atlas.csv"))
    g, _, _ = latent_constraint(np.zeros(2), np.zeros(2), atlas_h, atlas_p,
                                eps_star=4.0, rho_lse=20.0)
    assert g < 0.0


def test_latent_constraint_single_side():
    atlas_h = load_atlas(bundled("hcm_atlas.csv"))
    g, gh, gp = latent_constraint(np.zeros(2), np.zeros(2), atlas_h, None,
                                  eps_star=1.0, rho_lse=20.0)
    assert gh is not None and gp is None
    assert np.isfinite(g)


# -- Adam and update -------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    design = DesignState(np.array([0.25, 0.75]), np.zeros(2), np.zeros(2))
    opt = Adam([design.gamma, design.z_h, design.z_p], lr=0.05)
    zero = {"gamma": np.zeros(2), "z_h": np.zeros(2), "z_p": np.zeros(2)}
    out = adam_step(design, zero, opt)
    np.testing.assert_array_equal(out.gamma, design.gamma)
    np.testing.assert_array_equal(out.z_h, design.z_h)


def test_adam_clamps_at_bounds():
    design = DesignState(np.array([1.0, 0.0]), np.array([3.0, -3.0]), np.zeros(2))
    opt = Adam([design.gamma, design.z_h, design.z_p], lr=0.1)
    grads = {"gamma": np.array([-1.0, 1.0]),  # pushes past both bounds
             "z_h": np.array([-1.0, 1.0]), "z_p": np.zeros(2)}
    out = adam_step(design, grads, opt)
    np.testing.assert_array_equal(out.gamma, [1.0, 0.0])
    np.testing.assert_array_equal(out.z_h, [3.0, -3.0])


def test_adam_deterministic():
    def run():
        design = DesignState(np.array([0.5, 0.5]), np.zeros(2), np.zeros(2))
        opt = Adam([design.gamma, design.z_h, design.z_p], lr=0.05)
        rng = np.random.default_rng(0)
        for _ in range(25):
            grads = {"gamma": rng.normal(size=2), "z_h": rng.normal(size=2),
                     "z_p": rng.normal(size=2)}
            design = adam_step(design, grads, opt)
        return design
    a, b = run(), run()
    np.testing.assert_array_equal(a.gamma, b.gamma)
    np.testing.assert_array_equal(a.z_h, b.z_h)
    np.testing.assert_array_equal(a.z_p, b.z_p)


def test_adam_matches_reference_formula():
    opt = Adam([np.array([1.0])], lr=0.1)
    grad = np.array([2.0])
    (out,) = opt.step([np.array([1.0])], [grad])
    # first step with bias correction reduces to lr * g / (|g| + eps)
    assert out[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8))


# -- snapping and baselines -------------------------------------------------------

def test_snap_to_atlas():
    atlas = LatentAtlas(["near", "far"], np.array([[0.1, 0.1], [2.0, 2.0]]))
    idx, name, coords, dist = snap_to_atlas(np.array([0.0, 0.0]), atlas)
    assert (idx, name) == (0, "near")
    assert dist == pytest.approx(np.sqrt(0.02))


@pytest.mark.parametrize("n_fins", [2, 3, 4])
def test_fin_baseline_volume_fraction_exact(n_fins):
    mesh = build_quarter_annulus(0.1, 1.0, 50, 100)
    gamma = fin_baseline(mesh, n_fins, 0.2)
    fraction = ((1.0 - gamma) * mesh.volumes).sum() / mesh.volumes.sum()
    assert fraction == pytest.approx(0.2, rel=0.01)


def test_fin_baseline_symmetric_for_even_counts():
    mesh = build_quarter_annulus(0.1, 1.0, 10, 40)
    for n_fins in (2, 4):
        gamma = fin_baseline(mesh, n_fins, 0.25).reshape(40, 10)
        np.testing.assert_allclose(gamma, gamma[::-1], atol=1e-12)


def test_fin_baseline_small_fraction_limit():
    mesh = build_quarter_annulus(0.1, 1.0, 10, 20)
    gamma = fin_baseline(mesh, 3, 1e-6)
    assert gamma.min() > 0.999


def test_fin_baseline_validation():
    mesh = build_quarter_annulus(0.1, 1.0, 5, 10)
    with pytest.raises(ValueError):
        fin_baseline(mesh, 0, 0.2)
    with pytest.raises(ValueError):
        fin_baseline(mesh, 2, 1.5)


# -- evaluate_loss plumbing (coarse, fast) ---------------------------------------

@pytest.fixture(scope="module")
def tiny_problem():
    from lhtes.optimize import CoDesignProblem
    cfg = RunConfig()
    cfg.mesh.n_r, cfg.mesh.n_theta = 5, 5
    cfg.transient.n_steps = 3
    cfg.transient.newton_tol = 1e-10
    cfg.transient.max_newton_iters = 300
    cfg.optimizer.mode = "co-design"
    cfg.optimizer.constraint = "cost"
    return CoDesignProblem(cfg)


def test_loss_objective_term_is_one_at_start(tiny_problem):
    sch = ContinuationSchedules()
    design = tiny_problem.initial_design()
    ev = tiny_problem.forward(design, sch.at(0))
    j_init0 = ev.J_init
    j0 = tiny_problem.objective_value(ev)
    assert j0 == ev.J_end - ev.J_capacity
    assert tiny_problem.normalized_objective(j0, j0, j_init0) == 1.0


def test_loss_reduces_to_objective_when_deeply_feasible(tiny_problem):
    sch = ContinuationSchedules()
    point = sch.at(0)
    design = tiny_problem.initial_design()
    ev = tiny_problem.forward(design, point)
    j0 = tiny_problem.objective_value(ev)
    loss, _, _ = tiny_problem.evaluate_loss(ev, point, j0, ev.J_init)
    barrier_terms = loss - 1.0
    # both constraints are far from active at the initial design; with a
    # soft barrier their joint contribution stays a modest additive term
    assert abs(barrier_terms) < 1.0


def test_combined_loss_gradient_matches_fd(tiny_problem):
    sch = ContinuationSchedules()
    point = sch.at(30)
    rng = np.random.default_rng(11)
    design = DesignState(
        gamma=np.clip(rng.uniform(0.4, 0.95, tiny_problem.mesh.n_elems), 0, 1),
        z_h=np.array([0.2, -0.3]), z_p=np.array([-0.1, 0.25]))
    ev = tiny_problem.forward(design, point)
    j0 = tiny_problem.objective_value(ev)
    j_init0 = ev.J_init
    _, total, _ = tiny_problem.evaluate_loss(ev, point, j0, j_init0)

    def loss_of(d):
        e = tiny_problem.forward(d, point)
        value = tiny_problem.normalized_objective(
            tiny_problem.objective_value(e), j0, j_init0)
        value += log_barrier(e.g_m, point.tau)
        value += log_barrier(e.g_l, point.tau)
        return value

    h = 1e-5
    for which, index in (("gamma", 7), ("gamma", 16), ("z_h", 0), ("z_p", 1)):
        dp, dm = design.copy(), design.copy()
        getattr(dp, which)[index] += h
        getattr(dm, which)[index] -= h
        fd = (loss_of(dp) - loss_of(dm)) / (2 * h)
        assert total[which][index] == pytest.approx(fd, rel=1e-3)
