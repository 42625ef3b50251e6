import math

import numpy as np
import pytest

from spdelab.bform import BForm
from spdelab.errors import (
    ImplicitSolveFailed,
    NonFiniteState,
    PathFailed,
    RadiusOverflow,
    SingularSystem,
)
from spdelab.integrator import (
    Problem,
    SolverConfig,
    energy_at_end,
    mc_run,
    picard_ball_solve,
    simulate_batch,
    solve_path,
    state_at_end,
    step_explicit,
    step_implicit,
)
from spdelab.noise import NoiseModel
from spdelab.operators import (
    NonlinearOperator,
    OperatorMetadata,
    cubic_operator,
    linear_operator,
    zero_operator,
)
from spdelab.problems import (
    Grid1D,
    half_weight,
    make_degenerate_plaplacian,
    make_ou,
    make_porous_media,
    make_zero_b,
    sine_noise,
    sine_profile,
)
from spdelab.rng import path_seed


def scalar_problem(b=1.0, r=1.0, a=None, sigma=1.0, u0=1.0, f=None, T=1.0):
    a = a or zero_operator(1)
    noise = NoiseModel(np.eye(1), sigma * np.eye(1))
    return Problem(BForm([[b]]), [[r]], a, noise, [u0], np.eye(1), T, f)


def test_explicit_step_pure_noise():
    prob = scalar_problem()
    cfg = SolverConfig(dt=0.1)
    assert step_explicit(prob, cfg, 0.0, np.array([0.5]), np.array([0.3]))[0] == pytest.approx(0.8)


def test_explicit_step_hand_example():
    prob = scalar_problem(a=linear_operator(np.eye(1)), sigma=0.0)
    cfg = SolverConfig(epsilon=1.0, dt=0.1)
    assert step_explicit(prob, cfg, 0.0, np.array([1.0]), np.array([0.0]))[0] == pytest.approx(0.9, abs=1e-15)


def test_zero_b_step_ignores_noise():
    prob = make_zero_b(2)
    cfg = SolverConfig(epsilon=1.0, dt=0.1)
    u = np.array([1.0, -2.0])
    a = step_explicit(prob, cfg, 0.0, u, np.array([0.0, 0.0]))
    b = step_explicit(prob, cfg, 0.0, u, np.array([5.0, -3.0]))
    assert np.array_equal(a, b)
    assert np.array_equal(step_implicit(prob, cfg, 0.0, u, np.zeros(2)), step_implicit(prob, cfg, 0.0, u, np.ones(2)))


def test_singular_system_without_regularization():
    prob = make_zero_b(2)
    with pytest.raises(SingularSystem):
        step_explicit(prob, SolverConfig(epsilon=0.0, dt=0.1), 0.0, np.ones(2), np.zeros(2))
    with pytest.raises(SingularSystem):
        solve_path(prob, SolverConfig(epsilon=0.0, dt=0.1))


def bisect(f, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_implicit_cubic_root():
    root = bisect(lambda x: x**3 + 2 * x - 1, 0.0, 1.0)
    prob = Problem(BForm([[0.0]]), [[1.0]], cubic_operator(1), NoiseModel.zero(1), [0.0], np.eye(1), 1.0, lambda t: np.array([1.0]))
    u = step_implicit(prob, SolverConfig("implicit_resolvent", epsilon=1.0, dt=1.0), 0.0, np.array([0.0]), np.zeros(1))
    assert root == pytest.approx(0.45340, abs=5e-6)
    assert u[0] == pytest.approx(root, abs=1e-11)


def test_implicit_linear_matches_direct_solve():
    rng = np.random.default_rng(0)
    d = 5
    G = rng.standard_normal((d, d))
    B = G @ G.T + np.eye(d)
    K = rng.standard_normal((d, d)) + 3 * np.eye(d)
    R = np.eye(d) * 2.0
    phi = rng.standard_normal((d, 2))
    prob = Problem(BForm(B), R, linear_operator(K), NoiseModel(np.eye(2), phi), np.ones(d), np.eye(d))
    cfg = SolverConfig("implicit_resolvent", epsilon=0.3, dt=0.05)
    u = rng.standard_normal(d)
    dw = rng.standard_normal(2)
    M = B + 0.3 * R
    direct = np.linalg.solve(M + 0.05 * (K + 0.3 * R), M @ u + B @ phi @ dw)
    got = step_implicit(prob, cfg, 0.0, u, dw)
    np.testing.assert_allclose(got, direct, rtol=1e-12, atol=1e-12)


def test_implicit_minus_explicit_is_second_order():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    gaps = []
    for dt in (1e-2, 1e-3):
        u = np.array([1.0])
        e = step_explicit(prob, SolverConfig(dt=dt), 0.0, u, np.zeros(1))
        i = step_implicit(prob, SolverConfig("implicit_resolvent", dt=dt), 0.0, u, np.zeros(1))
        gaps.append(abs(i[0] - e[0]))
    assert gaps[0] / gaps[1] == pytest.approx(100.0, rel=0.05)


def test_implicit_failure_reported():
    # Newton with a single iteration cannot solve a strongly nonlinear step
    prob = Problem(BForm([[1.0]]), [[1.0]], cubic_operator(1), NoiseModel.zero(1), [5.0], np.eye(1))
    cfg = SolverConfig("implicit_resolvent", dt=1.0, newton_max_iter=1)
    with pytest.raises(ImplicitSolveFailed):
        step_implicit(prob, cfg, 0.0, np.array([5.0]), np.zeros(1))


def test_implicit_without_jacobian_uses_fd():
    meta = OperatorMetadata(p=4.0, coercivity_k=1.0, growth_c=1.0, monotone_lambda=0.0)
    bare = NonlinearOperator(1, lambda t, u: np.asarray(u) ** 3, meta)
    with_jac = cubic_operator(1)
    cfg = SolverConfig("implicit_resolvent", dt=0.1)
    args = (0.0, np.array([1.3]), np.array([0.2]))
    a = step_implicit(scalar_problem(a=bare), cfg, *args)
    b = step_implicit(scalar_problem(a=with_jac), cfg, *args)
    assert a[0] == pytest.approx(b[0], abs=1e-10)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_state_aborts():
    prob = Problem(BForm([[1.0]]), [[1.0]], cubic_operator(1, sign=-1.0), NoiseModel.zero(1), [10.0], np.eye(1))
    with pytest.raises(NonFiniteState):
        solve_path(prob, SolverConfig(dt=0.1))


def test_ou_deterministic_decay():
    prob = make_ou(1, 1.0, 0.0, 1.0)
    path = solve_path(prob, SolverConfig("implicit_resolvent", dt=1e-3))
    assert path.states[-1, 0] == pytest.approx(math.exp(-1.0), rel=1e-3)
    assert path.times[-1] == 1.0
    assert path.states.shape == (1001, 1)


def test_zero_b_deterministic_decay():
    # eps R u' + A u + eps R u = 0 with A = R = I, eps = 1 gives u' = -2u
    prob = make_zero_b(1, u0=np.array([1.0]))
    path = solve_path(prob, SolverConfig("implicit_resolvent", epsilon=1.0, dt=1e-3))
    assert path.states[-1, 0] == pytest.approx(math.exp(-2.0), rel=2e-3)


def test_path_reproducible_and_noise_path_consistent():
    prob = make_ou(2, 0.5, 1.0, [1.0, 0.0])
    cfg = SolverConfig(dt=0.01, seed=17)
    a, b = solve_path(prob, cfg), solve_path(prob, cfg)
    assert np.array_equal(a.states, b.states)
    np.testing.assert_allclose(a.noise_path[1:], np.cumsum(a.wiener_increments, axis=0), atol=1e-14)


def test_batch_equals_single_paths():
    prob = make_porous_media(Grid1D(8), 3.0, sine_noise(Grid1D(8), 3), sine_profile(Grid1D(8)))
    cfg = SolverConfig("implicit_resolvent", dt=0.01)
    batch = simulate_batch(prob, cfg, [3, 4, 5])
    for i, s in enumerate([3, 4, 5]):
        single = solve_path(prob, cfg, seed=s)
        np.testing.assert_allclose(batch.path(i).states, single.states, rtol=1e-12, atol=1e-14)


# ------------------------------------------------------------------ Picard


def linear_picard_problem(d=3):
    rng = np.random.default_rng(2)
    K = rng.standard_normal((d, d))
    K = K @ K.T / d + np.eye(d)
    phi = rng.standard_normal((d, 2)) * 0.5
    return Problem(BForm(np.eye(d)), np.eye(d), linear_operator(K), NoiseModel(np.eye(2), phi), np.ones(d), np.eye(d), 1.0)


def test_picard_zero_operator():
    prob = Problem(BForm(np.eye(2)), np.eye(2), zero_operator(2), NoiseModel(np.eye(2), np.eye(2)), [1.0, 2.0], np.eye(2))
    path = picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.01), seed=4)
    np.testing.assert_array_equal(path.states, prob.u0 + path.noise_path)
    # the first sweep is the fixed point; the second only confirms it
    assert path.flags["picard_iterations"] <= 2


def test_picard_matches_explicit():
    prob = linear_picard_problem()
    pic = picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.01), seed=9)
    em = solve_path(prob, SolverConfig("explicit", dt=0.01), seed=9)
    assert np.abs(pic.states - em.states).max() <= 1e-10
    assert not pic.flags["truncation_active"]
    assert pic.flags["radius_escalations"] == 0


def test_picard_truncation_noop_bitwise():
    prob = linear_picard_problem()
    cfg = SolverConfig("picard_ball", dt=0.01)
    a = picard_ball_solve(prob, cfg, seed=1)
    b = picard_ball_solve(prob, cfg, seed=1, start_level=a.flags["level"] + 1)
    assert np.array_equal(a.states, b.states)


def test_picard_initial_level_and_escalation():
    # |u0|^2 = 4 needs 4 < 2^(n-1), so the schedule starts at n = 4
    prob = Problem(BForm(np.eye(1)), np.eye(1), zero_operator(1), NoiseModel(np.eye(1), np.eye(1)), [2.0], np.eye(1))
    path = picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.01), seed=0)
    assert path.flags["level"] >= 4
    # starting too low forces an escalation past the sup of the path
    low = picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.01), seed=0, start_level=1)
    assert low.flags["radius_escalations"] >= 1
    assert float(np.max(low.states[:, 0] ** 2)) <= 2.0 ** low.flags["level"]


def test_picard_radius_overflow_on_blowup():
    prob = Problem(BForm(np.eye(1)), np.eye(1), cubic_operator(1, sign=-1.0), NoiseModel.zero(1), [1.0], np.eye(1))
    with pytest.raises(RadiusOverflow):
        picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.01))


def test_picard_requires_gelfand_case():
    prob = make_zero_b(2)
    with pytest.raises(ValueError):
        picard_ball_solve(prob, SolverConfig("picard_ball", dt=0.1))
    with pytest.raises(ValueError):
        picard_ball_solve(linear_picard_problem(), SolverConfig("picard_ball", epsilon=0.1, dt=0.1))


# --------------------------------------------------------------- ensembles


def test_mc_single_path_reproduces_solve():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    cfg = SolverConfig(dt=0.01)
    summary = mc_run(prob, cfg, 1, 55, {"u": state_at_end(0)})
    single = solve_path(prob, cfg, seed=path_seed(55, 0))
    assert summary["u"].mean == single.states[-1, 0]
    assert summary["u"].count == 1


def test_mc_worker_count_irrelevant():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    cfg = SolverConfig(dt=0.01)
    obs = {"e": energy_at_end}
    a = mc_run(prob, cfg, 300, 8, obs, workers=1)
    b = mc_run(prob, cfg, 300, 8, obs, workers=4)
    assert np.array_equal(a.values["e"], b.values["e"])


def test_mc_ou_second_moment():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    s = mc_run(prob, SolverConfig(dt=0.01), 4000, 2024, {"e": energy_at_end})["e"]
    # exact second moment of the Euler scheme: m' = (1 - dt)^2 m + dt
    m = 1.0
    for _ in range(100):
        m = 0.99**2 * m + 0.01
    assert abs(s.mean - m) <= 3 * s.se


def test_mc_se_halving():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    cfg = SolverConfig(dt=0.05)
    ratios = []
    for rep in range(20):
        master = (rep + 1) << 24
        small = mc_run(prob, cfg, 256, master, {"u": state_at_end(0)})["u"].se
        big = mc_run(prob, cfg, 512, master + (1 << 20), {"u": state_at_end(0)})["u"].se
        ratios.append(big / small)
    assert 0.6 <= np.mean(ratios) <= 0.82


@pytest.mark.filterwarnings("ignore:overflow")
def test_mc_failure_names_seed():
    prob = Problem(BForm([[1.0]]), [[1.0]], cubic_operator(1, sign=-1.0), NoiseModel(np.eye(1), np.eye(1)), [10.0], np.eye(1))
    with pytest.raises(PathFailed) as info:
        mc_run(prob, SolverConfig(dt=0.1), 3, 1, {"u": state_at_end(0)})
    assert info.value.seed == path_seed(1, info.value.path_index)


# ------------------------------------------------------------- properties


def test_zero_b_bit_identical_across_seeds():
    prob = make_zero_b(3)
    cfg = SolverConfig("implicit_resolvent", epsilon=1.0, dt=0.01)
    ref = solve_path(prob, cfg, seed=0).states
    for s in range(1, 5):
        assert np.array_equal(solve_path(prob, cfg, seed=s).states, ref)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_contraction_same_noise(p):
    grid = Grid1D(16)
    noise = sine_noise(grid, 4, sigma=0.5)
    u0a = sine_profile(grid)
    u0b = 0.5 * sine_profile(grid, mode=2) - 0.3
    dt = 1e-2
    cfg = SolverConfig("implicit_resolvent", epsilon=0.0, dt=dt)
    for make in (
        lambda u0: make_degenerate_plaplacian(grid, p, 1.0, noise, u0, T=0.5),
        lambda u0: make_porous_media(grid, p, noise, u0, T=0.5),
    ):
        pa, pb = make(u0a), make(u0b)
        a = solve_path(pa, cfg, seed=7).states[-1]
        b = solve_path(pb, cfg, seed=7).states[-1]
        assert pa.b.energy(a - b) <= pa.b.energy(u0a - u0b) * (1 + 10 * dt)


def test_porous_media_energy_decays_per_step():
    grid = Grid1D(16)
    prob = make_porous_media(grid, 3.0, NoiseModel.zero(16), sine_profile(grid), T=0.2)
    path = solve_path(prob, SolverConfig("implicit_resolvent", dt=0.01))
    energy = prob.b.energy(path.states)
    assert np.all(np.diff(energy) < 0)


def test_epsilon_consistency_trend():
    grid = Grid1D(16)
    u0 = sine_profile(grid)
    prob = make_degenerate_plaplacian(grid, 3.0, half_weight(grid), NoiseModel.zero(16), u0, T=0.2)
    W = prob.w_mass

    def run(eps):
        return solve_path(prob, SolverConfig("implicit_resolvent", epsilon=eps, dt=1e-3)).states

    gaps = []
    for eps in (1e-1, 1e-2, 1e-3):
        diff = run(eps) - run(eps / 2)
        gaps.append(float(np.sqrt(np.einsum("ti,ij,tj->t", diff, W, diff)).max()))
    assert gaps[0] > gaps[1] > gaps[2]


def test_strong_order_one_for_additive_noise():
    prob = make_ou(1, 1.0, 1.0, 1.0)
    fine = 1e-5
    seeds = [path_seed(314, i) for i in range(40)]
    ref = simulate_batch(prob, SolverConfig(dt=fine, brownian_refine=1), seeds).states[:, -1, 0]
    errs = []
    for dt in (0.02, 0.01, 0.005):
        refine = int(round(dt / fine))
        u = simulate_batch(prob, SolverConfig(dt=dt, brownian_refine=refine), seeds).states[:, -1, 0]
        errs.append(np.mean(np.abs(u - ref)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.7 <= r <= 2.3 for r in ratios), ratios
