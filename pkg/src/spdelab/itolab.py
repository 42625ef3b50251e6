"""Term-by-term checks of the Ito energy identity on simulated paths.

For a path ``u`` on the grid ``t_j`` with increments ``dW_j`` the ledger
tracks, cumulatively in time,

* ``lhs``          ``<B u(t), u(t)>``
* ``drift``        ``sum 2 <Y(t_j), u(t_j)> dt`` with ``Y = f - A(u)``
* ``bzz``          ``sum <BZ, Z>(t_j) dt``
* ``martingale``   ``sum 2 <B u(t_j), Phi(t_j) dW_j>``

and the residual ``lhs - (initial + drift + bzz + martingale)``.  With
``eps > 0`` the form ``B + eps R`` replaces ``B`` and ``Y`` gains ``-eps R u``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .bform import BForm, bzz_pairing, hs_norm_sq
from .errors import DimensionMismatch
from .integrator import Statistic, run_chunks

LEDGER_TERMS = ("lhs", "term_initial", "term_drift", "term_bzz", "term_martingale", "residual")


@dataclass
class ItoLedger:
    times: np.ndarray
    lhs: np.ndarray
    term_initial: np.ndarray
    term_drift: np.ndarray
    term_bzz: np.ndarray
    term_martingale: np.ndarray
    residual: np.ndarray
    qv_bound: np.ndarray
    noise_qv_excess: np.ndarray = field(repr=False, default=None)

    def max_abs_residual(self):
        return float(np.abs(self.residual).max())

    def martingale_qv(self):
        """Realized quadratic variation of the discrete martingale term."""
        inc = np.diff(self.term_martingale, axis=-1)
        out = np.zeros_like(self.term_martingale)
        np.cumsum(inc**2, axis=-1, out=out[..., 1:])
        return out


def _form_matrix(problem, eps):
    B = problem.b.matrix
    return B + eps * problem.r if eps else B


def _bzz_series(problem, times, eps):
    """Pairing ``<BZ, Z>`` at each left endpoint."""
    noise = problem.noise
    B = problem.b.matrix
    if eps:
        M = B + eps * problem.r

        def value(t):
            g = B @ noise.phi_at(t) @ noise.g_basis()
            return float(np.einsum("ij,ij->", g, np.linalg.solve(M, g)))

    else:

        def value(t):
            return bzz_pairing(problem.b, noise, problem.w_mass, t)

    if not noise.time_dependent:
        return np.full(times.size, value(times[0]))
    return np.array([value(t) for t in times])


def ledger_arrays(problem, times, states, increments, eps=0.0, qv_constant=None):
    """Ledger terms for states of shape ``(..., N + 1, d)``."""
    states = np.asarray(states, dtype=float)
    dw = np.asarray(increments, dtype=float)
    n = times.size - 1
    if states.shape[-2] != n + 1 or dw.shape[-2] != n or states.shape[-1] != problem.dim:
        raise DimensionMismatch("path arrays do not match the time grid or the problem")
    dt = np.diff(times)
    M = _form_matrix(problem, eps)
    B = problem.b.matrix
    W = problem.w_mass
    noise = problem.noise
    left = states[..., :-1, :]

    lhs = np.einsum("...i,ij,...j->...", states, M, states)
    initial = np.broadcast_to(lhs[..., :1], lhs.shape).copy()

    y = np.empty(left.shape)
    for j in range(n):
        y[..., j, :] = problem.drift(times[j], left[..., j, :], eps)
    drift_inc = 2.0 * np.einsum("...ji,...ji->...j", y, left) * dt

    bzz_vals = _bzz_series(problem, times[:-1], eps)
    bzz_inc = bzz_vals * dt

    if noise.time_dependent:
        phis = np.stack([noise.phi_at(t) for t in times[:-1]])
        phi_dw = np.einsum("jdm,...jm->...jd", phis, dw)
        hs = np.array([hs_norm_sq(noise, W, t) for t in times[:-1]])
    else:
        phi_dw = dw @ noise.phi_at(0.0).T
        hs = np.full(n, hs_norm_sq(noise, W))
    b_phi_dw = phi_dw @ B.T
    mart_inc = 2.0 * np.einsum("...ji,...ji->...j", left, b_phi_dw)

    if eps:
        quad = np.einsum("...ji,...ji->...j", b_phi_dw, np.linalg.solve(M, b_phi_dw[..., None])[..., 0])
    else:
        quad = np.einsum("...ji,...ji->...j", phi_dw, b_phi_dw)
    excess_inc = quad - bzz_inc

    if qv_constant is None:
        qv_constant = 4.0 * np.linalg.cond(W)
    bu = left @ B.T
    bu_dual = np.einsum("...ji,...ji->...j", bu, np.linalg.solve(W, bu[..., None])[..., 0])
    qv_inc = qv_constant * hs * bu_dual * dt

    def cum(inc):
        out = np.zeros(inc.shape[:-1] + (n + 1,))
        np.cumsum(inc, axis=-1, out=out[..., 1:])
        return out

    drift = cum(drift_inc)
    bzz = np.broadcast_to(cum(bzz_inc), lhs.shape).copy()
    mart = cum(mart_inc)
    residual = lhs - (initial + drift + bzz + mart)
    residual[..., 0] = lhs[..., 0] - initial[..., 0]
    return {
        "lhs": lhs,
        "term_initial": initial,
        "term_drift": drift,
        "term_bzz": bzz,
        "term_martingale": mart,
        "residual": residual,
        "qv_bound": cum(qv_inc),
        "noise_qv_excess": cum(excess_inc),
    }


def pathwise_ledger(path, problem, eps=0.0, qv_constant=None):
    """Ito ledger of one simulated path.

    ``qv_constant`` defaults to ``4 * cond(W-Gram)``.
    """
    arrays = ledger_arrays(
        problem, path.times, path.states, path.wiener_increments, eps, qv_constant
    )
    return ItoLedger(path.times, **arrays)


# ----------------------------------------------------------- ensemble checks


def _checkpoint_indices(times, t_checks):
    t_checks = np.atleast_1d(np.asarray(t_checks, dtype=float))
    idx = np.searchsorted(times, t_checks - 1e-12 * times[-1])
    idx = np.clip(idx, 0, times.size - 1)
    return t_checks, idx


@dataclass
class IdentityCheck:
    t: float
    lhs: Statistic
    rhs: Statistic
    difference: Statistic
    martingale: Statistic
    residual: Statistic
    residual_cv: Statistic
    allowance: float

    @property
    def identity_ok(self):
        return abs(self.difference.mean) <= 3.0 * self.difference.se + self.allowance

    @property
    def martingale_ok(self):
        return abs(self.martingale.mean) <= 3.0 * self.martingale.se

    @property
    def passed(self):
        return self.identity_ok and self.martingale_ok


@dataclass
class ExpectedEnergyReport:
    checks: list
    times: np.ndarray
    mean_ledger: dict
    n_paths: int
    dt: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def expected_energy_check(
    problem, config, n_paths, master_seed, t_checks, kappa=0.0, workers=1, eps=None
):
    """Monte Carlo test of ``E<Bu,u>(t) = E<Bu0,u0> + E int (2<Y,u> + <BZ,Z>) ds``.

    ``difference`` is the per-path ``lhs - (initial + drift + bzz)``; the
    check passes when its mean is within ``3 SE + kappa * dt`` of zero and the
    martingale term's mean is within ``3 SE`` of zero.  ``residual_cv`` is the
    ledger residual minus the zero-mean quadratic-variation noise, a low
    variance estimate of the discretization bias.
    """
    if eps is None:
        eps = config.epsilon
    n_steps = config.n_steps(problem.T)
    times = np.arange(n_steps + 1) * config.dt
    times[-1] = problem.T
    t_checks, idx = _checkpoint_indices(times, t_checks)

    def reducer(batch):
        led = ledger_arrays(problem, batch.times, batch.states, batch.wiener_increments, eps)
        rhs = led["term_initial"] + led["term_drift"] + led["term_bzz"]
        sums = np.stack([led[k].sum(axis=0) for k in LEDGER_TERMS])
        return {
            "lhs": led["lhs"][:, idx],
            "rhs": rhs[:, idx],
            "diff": (led["lhs"] - rhs)[:, idx],
            "mart": led["term_martingale"][:, idx],
            "res": led["residual"][:, idx],
            "res_cv": (led["residual"] - led["noise_qv_excess"])[:, idx],
            "ledger_sum": sums[None],
        }

    vals = run_chunks(problem, config, n_paths, master_seed, reducer, workers)
    allowance = kappa * config.dt
    checks = []
    for k, t in enumerate(t_checks):
        checks.append(
            IdentityCheck(
                float(t),
                Statistic.of(vals["lhs"][:, k]),
                Statistic.of(vals["rhs"][:, k]),
                Statistic.of(vals["diff"][:, k]),
                Statistic.of(vals["mart"][:, k]),
                Statistic.of(vals["res"][:, k]),
                Statistic.of(vals["res_cv"][:, k]),
                allowance,
            )
        )
    total = np.zeros_like(vals["ledger_sum"][0])
    for part in vals["ledger_sum"]:
        total = total + part
    mean_ledger = {k: total[i] / n_paths for i, k in enumerate(LEDGER_TERMS)}
    return ExpectedEnergyReport(checks, times, mean_ledger, n_paths, config.dt)


@dataclass
class EnergyInequalityReport:
    lhs: Statistic
    rhs: Statistic
    difference: Statistic
    slack: float

    @property
    def margin(self):
        """How far ``LHS - RHS`` sits below its allowance (positive is good)."""
        se = self.difference.se if math.isfinite(self.difference.se) else 0.0
        return 3.0 * se + self.slack - self.difference.mean

    @property
    def passed(self):
        return self.margin >= 0.0


def energy_inequality_check(problem, config, n_paths, master_seed, slack=0.0, workers=1):
    """Monte Carlo check of the regularized energy inequality at time T.

    LHS is ``1/2 E<(B+eps R)u(T),u(T)> - 1/2 <(B+eps R)u0,u0> +
    E int <Au,u> + eps <Ru,u> ds`` and RHS is ``1/2 int <BZ,Z> ds +
    E int <f,u> ds`` with ``<BZ,Z>`` taken with the unregularized B.  Passes
    when ``LHS - RHS <= 3 SE + slack * dt``.
    """
    eps = config.epsilon
    M = _form_matrix(problem, eps)
    R = problem.r
    n_steps = config.n_steps(problem.T)
    times = np.arange(n_steps + 1) * config.dt
    times[-1] = problem.T
    dt = np.diff(times)
    bzz = _bzz_series(problem, times[:-1], 0.0)
    rhs_noise = 0.5 * float(np.sum(bzz * dt))
    e0 = float(problem.u0 @ M @ problem.u0)

    def reducer(batch):
        u = batch.states
        eT = np.einsum("ni,ij,nj->n", u[:, -1], M, u[:, -1])
        diss = np.zeros(len(batch))
        force = np.zeros(len(batch))
        for j in range(n_steps):
            uj = u[:, j]
            au = np.einsum("ni,ni->n", problem.a(times[j], uj), uj)
            if eps:
                au = au + eps * np.einsum("ni,ij,nj->n", uj, R, uj)
            diss += au * dt[j]
            if problem.f is not None:
                force += (uj @ problem.forcing(times[j])) * dt[j]
        lhs = 0.5 * eT - 0.5 * e0 + diss
        rhs = rhs_noise + force
        return {"lhs": lhs, "rhs": rhs, "diff": lhs - rhs}

    vals = run_chunks(problem, config, n_paths, master_seed, reducer, workers)
    return EnergyInequalityReport(
        Statistic.of(vals["lhs"]),
        Statistic.of(vals["rhs"]),
        Statistic.of(vals["diff"]),
        slack * config.dt,
    )


@dataclass
class SupEnergy:
    estimate: float
    se: float
    y_norm: float
    x_norm: float
    z_norm: float
    initial_energy: float
    endpoint_energy: float


def sup_energy_diagnostic(paths, problem):
    """Estimate ``E sup_t <Bu(t),u(t)>`` with the norms it is controlled by.

    Returns the estimate together with ``|Y|`` in L^{p'}(0,T; V'),
    ``|u|`` in L^p(0,T; V), ``|Z|`` in L^2(0,T; HS into W) and the initial
    energy, each from left-point quadrature and averaged over paths.
    """
    if hasattr(paths, "states"):
        times, states = paths.times, paths.states
        if states.ndim == 2:
            states = states[None]
    else:
        paths = list(paths)
        if not paths:
            raise ValueError("need at least one path")
        times = paths[0].times
        states = np.stack([p.states for p in paths])
    B = problem.b
    A = problem.a
    p = A.metadata.p
    q = p / (p - 1.0)
    dt = np.diff(times)
    energies = B.energy(states)
    sups = energies.max(axis=-1)
    y_acc = np.zeros(states.shape[0])
    x_acc = np.zeros(states.shape[0])
    dual = A.dual_norm
    for j in range(times.size - 1):
        uj = states[:, j]
        y = problem.drift(times[j], uj)
        if dual is not None:
            y_acc += np.asarray(dual(y)) ** q * dt[j]
        x_acc += np.asarray(A.v_norm(uj)) ** p * dt[j]
    hs = np.array([hs_norm_sq(problem.noise, problem.w_mass, t) for t in times[:-1]])
    stat = Statistic.of(sups) if sups.size > 1 else Statistic(float(sups[0]), float("nan"), 1)
    return SupEnergy(
        estimate=stat.mean,
        se=stat.se,
        y_norm=float(np.mean(y_acc)) ** (1.0 / q) if dual is not None else float("nan"),
        x_norm=float(np.mean(x_acc)) ** (1.0 / p),
        z_norm=math.sqrt(float(np.sum(hs * dt))),
        initial_energy=float(np.mean(energies[:, 0])),
        endpoint_energy=float(np.mean(energies[:, -1])),
    )
