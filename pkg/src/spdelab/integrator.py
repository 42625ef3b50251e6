"""Time stepping for ``d((B + eps R) u) + (A(u) + eps R u) dt = f dt + B Phi dW``.

Three schemes share one left-point (Euler-Maruyama) treatment of the noise:

``explicit``
    drift evaluated at the left endpoint, one linear solve with ``B + eps R``.
``implicit_resolvent``
    ``A`` and ``eps R`` taken at the new state, solved by damped Newton.
``picard_ball``
    fixed point of the discrete integral equation with ``A`` composed with a
    projection onto a ball, escalating the radius as needed.

Explicit and implicit solves run a whole batch of paths at once; batches are
cut into chunks of ``CHUNK_SIZE`` paths so results never depend on how many
workers process them.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .bform import BForm
from .errors import (
    DimensionMismatch,
    ImplicitSolveFailed,
    NonFiniteState,
    PathFailed,
    PicardDiverged,
    RadiusOverflow,
    SingularSystem,
    SolverError,
)
from .noise import NoiseModel, uniform_increments
from .operators import ball_project, h_norm
from .rng import path_seed

SCHEMES = ("explicit", "implicit_resolvent", "picard_ball")
CHUNK_SIZE = 64
MAX_RADIUS_LEVEL = 60


@dataclass(frozen=True)
class Problem:
    b: BForm
    r: np.ndarray
    a: object
    noise: NoiseModel
    u0: np.ndarray
    w_mass: np.ndarray
    T: float = 1.0
    f: object = None
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.b, BForm):
            object.__setattr__(self, "b", BForm(self.b))
        d = self.b.dim
        r = np.array(self.r, dtype=float)
        w = np.array(self.w_mass, dtype=float)
        u0 = np.array(self.u0, dtype=float).reshape(-1)
        for label, arr in (("r", r), ("w_mass", w)):
            if arr.shape != (d, d):
                raise DimensionMismatch(f"{label} has shape {arr.shape}, expected {(d, d)}")
        if u0.shape != (d,):
            raise DimensionMismatch(f"u0 has length {u0.size}, expected {d}")
        if self.a.dim != d or self.noise.d != d:
            raise DimensionMismatch("operator, noise and form dimensions disagree")
        for label, arr in (("r", r), ("w_mass", w)):
            if np.linalg.eigvalsh(0.5 * (arr + arr.T))[0] <= 0:
                raise ValueError(f"{label} must be symmetric positive definite")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        for arr in (r, w, u0):
            arr.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "w_mass", w)
        object.__setattr__(self, "u0", u0)

    @property
    def dim(self):
        return self.b.dim

    def forcing(self, t):
        if self.f is None:
            return np.zeros(self.dim)
        return np.asarray(self.f(t), dtype=float)

    def drift(self, t, u, eps=0.0):
        """``Y = f - A(t, u) - eps R u`` for a batch of states."""
        y = self.forcing(t) - self.a(t, u)
        if eps:
            y = y - eps * (u @ self.r.T)
        return y


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "explicit"
    epsilon: float = 0.0
    dt: float = 1e-3
    newton_tol: float = 1e-11
    newton_max_iter: int = 50
    picard_tol: float = 1e-13
    picard_max_iter: int = None  # None: number of steps + 2, enough on a grid
    radius_base: tuple = (9.0, 2.0)
    seed: int = 0
    brownian_refine: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.brownian_refine < 1:
            raise ValueError("brownian_refine must be at least 1")
        object.__setattr__(self, "radius_base", tuple(float(x) for x in self.radius_base))

    def n_steps(self, T):
        n = int(round(T / self.dt))
        if n < 1 or abs(n * self.dt - T) > 1e-9 * T:
            raise ValueError(f"dt={self.dt} does not divide T={T}")
        return n


@dataclass
class PathResult:
    times: np.ndarray
    states: np.ndarray  # (N + 1, d)
    wiener_increments: np.ndarray  # (N, m)
    noise_path: np.ndarray  # (N + 1, d), sum of Phi dW
    newton_iterations: np.ndarray  # (N,)
    seed: int = 0
    flags: dict = field(default_factory=dict)


@dataclass
class PathBatch:
    """Paths stacked on a leading axis; ``path(i)`` gives one PathResult."""

    times: np.ndarray
    states: np.ndarray  # (n, N + 1, d)
    wiener_increments: np.ndarray  # (n, N, m)
    noise_path: np.ndarray  # (n, N + 1, d)
    newton_iterations: np.ndarray  # (n, N)
    seeds: list
    flags: list = None

    def __len__(self):
        return self.states.shape[0]

    def path(self, i):
        return PathResult(
            self.times,
            self.states[i],
            self.wiener_increments[i],
            self.noise_path[i],
            self.newton_iterations[i],
            self.seeds[i],
            dict(self.flags[i]) if self.flags else {},
        )

    @classmethod
    def stack(cls, paths):
        return cls(
            paths[0].times,
            np.stack([p.states for p in paths]),
            np.stack([p.wiener_increments for p in paths]),
            np.stack([p.noise_path for p in paths]),
            np.stack([p.newton_iterations for p in paths]),
            [p.seed for p in paths],
            [p.flags for p in paths],
        )


# ------------------------------------------------------------------ stepping


class _Stepper:
    """Caches ``B + eps R`` and its factorization for one solve."""

    def __init__(self, problem, config):
        self.problem = problem
        self.config = config
        self.eps = config.epsilon
        B = problem.b.matrix
        self.B = B
        self.R = problem.r
        self.M = B + self.eps * problem.r if self.eps else B.copy()
        lam = np.linalg.eigvalsh(self.M)
        scale = max(1.0, abs(lam[-1]))
        if lam[0] <= 1e-12 * scale:
            raise SingularSystem(
                f"B + eps R is singular (min eigenvalue {lam[0]:.3e}); "
                "use epsilon > 0 for a degenerate B"
            )
        self.lu = scipy.linalg.lu_factor(self.M)

    def solve(self, rhs):
        rhs = np.asarray(rhs)
        flat = rhs.reshape(-1, rhs.shape[-1])
        out = scipy.linalg.lu_solve(self.lu, flat.T, check_finite=False).T
        return out.reshape(rhs.shape)

    def noise_image(self, t, dw):
        """``B Phi(t) dW`` and ``Phi(t) dW`` for a batch of increments."""
        phi_dw = dw @ self.problem.noise.phi_at(t).T
        return phi_dw @ self.B.T, phi_dw

    def explicit(self, t, u, b_phi_dw):
        dt = self.config.dt
        rhs = dt * self.problem.drift(t, u, self.eps) + b_phi_dw
        return u + self.solve(rhs)

    def implicit(self, t, u, b_phi_dw):
        """Solve ``M x + dt (A(t,x) + eps R x) = M u + dt f + B Phi dW``."""
        cfg = self.config
        dt, eps = cfg.dt, self.eps
        prob = self.problem
        M, R = self.M, self.R
        rhs = u @ M.T + dt * prob.forcing(t) + b_phi_dw
        scale = 1.0 + np.abs(rhs).max(axis=-1)
        tol = cfg.newton_tol * scale

        def G(x, target):
            g = x @ M.T + dt * prob.a(t, x) - target
            if eps:
                g = g + dt * eps * (x @ R.T)
            return g

        def J(x):
            if prob.a.jacobian is not None:
                ja = np.asarray(prob.a.jacobian(t, x))
            else:
                ja = _fd_jacobian(lambda y: prob.a(t, y), x)
            jm = M + dt * eps * R if eps else M
            return jm + dt * ja

        x = np.array(u, dtype=float, copy=True)
        res = G(x, rhs)
        rn = np.abs(res).max(axis=-1)
        iters = np.zeros(x.shape[0], dtype=int)
        for _ in range(cfg.newton_max_iter):
            active = np.nonzero(rn > tol)[0]
            if active.size == 0:
                break
            xa, ra, rna = x[active], res[active], rn[active]
            delta = np.linalg.solve(J(xa), -ra[..., None])[..., 0]
            step = np.ones(active.size)
            trial = xa + delta
            rt = G(trial, rhs[active])
            rnt = np.abs(rt).max(axis=-1)
            for _ in range(30):
                worse = ~(rnt < rna) & (rnt > tol[active])
                if not worse.any():
                    break
                step = np.where(worse, 0.5 * step, step)
                w = np.nonzero(worse)[0]
                trial[w] = xa[w] + step[w, None] * delta[w]
                rt[w] = G(trial[w], rhs[active][w])
                rnt[w] = np.abs(rt[w]).max(axis=-1)
            x[active], res[active], rn[active] = trial, rt, rnt
            iters[active] += 1
        if np.any(rn > tol) or not np.all(np.isfinite(rn)):
            worst = float(np.nanmax(rn / tol))
            raise ImplicitSolveFailed(
                f"Newton did not converge at t={t:g} after {cfg.newton_max_iter} "
                f"iterations (residual {worst:.2e} x tolerance); reduce dt or switch scheme"
            )
        return x, iters


def _fd_jacobian(fun, x, rel=1e-7):
    x = np.asarray(x, dtype=float)
    f0 = fun(x)
    d = x.shape[-1]
    jac = np.empty(x.shape[:-1] + (f0.shape[-1], d))
    for j in range(d):
        h = rel * np.maximum(1.0, np.abs(x[..., j]))
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        jac[..., :, j] = (fun(xp) - fun(xm)) / (2.0 * h[..., None])
    return jac


def _as_batch(u, dw):
    u = np.asarray(u, dtype=float)
    dw = np.asarray(dw, dtype=float)
    single = u.ndim == 1
    return np.atleast_2d(u), np.atleast_2d(dw), single


def step_explicit(problem, config, t, u, dW):
    """One left-point step; ``u`` and ``dW`` may carry a leading batch axis."""
    st = _Stepper(problem, config)
    ub, dwb, single = _as_batch(u, dW)
    b_phi_dw, _ = st.noise_image(t, dwb)
    out = st.explicit(t, ub, b_phi_dw)
    return out[0] if single else out


def step_implicit(problem, config, t, u, dW):
    """One resolvent step, backward in ``A`` and ``eps R``."""
    st = _Stepper(problem, config)
    ub, dwb, single = _as_batch(u, dW)
    b_phi_dw, _ = st.noise_image(t, dwb)
    out, _ = st.implicit(t, ub, b_phi_dw)
    return out[0] if single else out


# ---------------------------------------------------------------- path solves


def wiener_increments(problem, config, seed):
    n = config.n_steps(problem.T)
    return uniform_increments(problem.noise, problem.T, n, seed, config.brownian_refine)


def simulate_batch(problem, config, seeds):
    """Simulate one path per seed with the explicit or implicit scheme."""
    if config.scheme == "picard_ball":
        return PathBatch.stack([picard_ball_solve(problem, config, seed=s) for s in seeds])
    st = _Stepper(problem, config)
    n = config.n_steps(problem.T)
    dt = config.dt
    times = np.arange(n + 1) * dt
    times[-1] = problem.T
    k = len(seeds)
    d = problem.dim
    dw = np.stack([wiener_increments(problem, config, s) for s in seeds])
    states = np.empty((k, n + 1, d))
    noise_path = np.zeros((k, n + 1, d))
    iters = np.zeros((k, n), dtype=int)
    states[:, 0] = problem.u0
    implicit = config.scheme == "implicit_resolvent"
    for j in range(n):
        t = times[j]
        b_phi_dw, phi_dw = st.noise_image(t, dw[:, j])
        noise_path[:, j + 1] = noise_path[:, j] + phi_dw
        u = states[:, j]
        if implicit:
            nxt, iters[:, j] = st.implicit(t, u, b_phi_dw)
        else:
            nxt = st.explicit(t, u, b_phi_dw)
        finite = np.isfinite(nxt).all(axis=-1)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise NonFiniteState(
                f"non-finite state at t={times[j + 1]:g} on path with seed {seeds[bad]}",
            )
        states[:, j + 1] = nxt
    flags = [{"scheme": config.scheme} for _ in seeds]
    return PathBatch(times, states, dw, noise_path, iters, list(seeds), flags)


def solve_path(problem, config, seed=None):
    """Single path; the default seed is ``config.seed``."""
    seed = config.seed if seed is None else seed
    if config.scheme == "picard_ball":
        return picard_ball_solve(problem, config, seed=seed)
    return simulate_batch(problem, config, [seed]).path(0)


def _initial_level(u0_norm_sq, base):
    n = 0
    while not u0_norm_sq < base ** (n - 1):
        n += 1
        if n > MAX_RADIUS_LEVEL:
            raise RadiusOverflow("initial state too large for the radius schedule")
    return n


def picard_ball_solve(problem, config, seed=None, start_level=None):
    """Ball-truncated Picard solve of ``u(t) - u0 + int A(P_n u) = int f + int Phi dW``.

    ``P_n`` projects onto the H-ball of radius ``radius_base[0] ** n``.  If the
    converged path leaves the ball of squared radius ``radius_base[1] ** n``
    the level ``n`` is raised and the fixed point recomputed.  Requires
    ``B`` equal to the W-Gram matrix and ``epsilon == 0``.
    """
    if config.epsilon != 0:
        raise ValueError("picard_ball requires epsilon == 0")
    H = problem.w_mass
    if not np.allclose(problem.b.matrix, H, rtol=1e-12, atol=1e-14):
        raise ValueError("picard_ball requires B equal to the W-Gram matrix")
    seed = config.seed if seed is None else seed
    n_steps = config.n_steps(problem.T)
    dt = config.dt
    times = np.arange(n_steps + 1) * dt
    times[-1] = problem.T
    dw = wiener_increments(problem, config, seed)
    noise = problem.noise
    phi_dw = np.stack([dw[j] @ noise.phi_at(times[j]).T for j in range(n_steps)])
    noise_path = np.zeros((n_steps + 1, problem.dim))
    np.cumsum(phi_dw, axis=0, out=noise_path[1:])
    forcing = np.stack([problem.forcing(t) for t in times[:-1]])
    lu = scipy.linalg.lu_factor(problem.b.matrix)
    u0 = problem.u0
    max_iter = config.picard_max_iter or n_steps + 2
    r_base, s_base = config.radius_base

    level = start_level
    if level is None:
        level = _initial_level(float(h_norm(u0, H)) ** 2, s_base)
    escalations = 0
    while True:
        if level > MAX_RADIUS_LEVEL:
            raise RadiusOverflow(
                f"radius level exceeded {MAX_RADIUS_LEVEL} (seed {seed}); "
                "the path escapes every ball of the schedule"
            )
        radius = r_base**level
        u = np.broadcast_to(u0, (n_steps + 1, problem.dim)).copy()
        for it in range(1, max_iter + 1):
            pu = ball_project(u[:-1], radius, H)
            a_vals = np.stack([problem.a(times[j], pu[j]) for j in range(n_steps)])
            incr = scipy.linalg.lu_solve(lu, (dt * (forcing - a_vals)).T).T + phi_dw
            new = np.empty_like(u)
            new[0] = u0
            np.cumsum(incr, axis=0, out=new[1:])
            new[1:] += u0
            if not np.all(np.isfinite(new)):
                raise NonFiniteState(f"non-finite Picard iterate at level {level}")
            change = float(np.abs(new - u).max())
            u = new
            if change <= config.picard_tol * (1.0 + float(np.abs(u).max())):
                break
        else:
            raise PicardDiverged(
                f"Picard iteration did not converge in {max_iter} sweeps at level {level}"
            )
        norms = h_norm(u, H)
        # compare norms, not squares, so huge radii stay finite
        if float(norms.max()) > math.sqrt(s_base**level):
            level += 1
            escalations += 1
            continue
        flags = {
            "scheme": "picard_ball",
            "level": level,
            "radius": radius,
            "truncation_active": bool(np.any(norms[:-1] > radius)),
            "radius_escalations": escalations,
            "picard_iterations": it,
        }
        return PathResult(
            times, u, dw, noise_path, np.full(n_steps, it), seed, flags
        )


# ---------------------------------------------------------------- ensembles


def default_workers():
    env = os.environ.get("SPDE_LAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_chunks(problem, config, n_paths, master_seed, reducer, workers=1):
    """Apply ``reducer(batch)`` to fixed-size chunks and concatenate in order.

    ``reducer`` returns a dict of per-path arrays.  Path ``i`` uses seed
    ``SplitMix64(master_seed XOR i)``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    seeds = [path_seed(master_seed, i) for i in range(n_paths)]
    chunks = [
        (start, seeds[start : start + CHUNK_SIZE]) for start in range(0, n_paths, CHUNK_SIZE)
    ]

    def work(chunk):
        start, chunk_seeds = chunk
        try:
            batch = simulate_batch(problem, config, chunk_seeds)
        except SolverError as exc:
            failing, index = _locate_failure(problem, config, start, chunk_seeds)
            raise PathFailed(f"{exc} [path {index}, seed {failing}]", failing, index) from exc
        return reducer(batch)

    if workers <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))
    keys = parts[0].keys()
    return {k: np.concatenate([np.asarray(p[k]) for p in parts]) for k in keys}


def _locate_failure(problem, config, start, chunk_seeds):
    for offset, s in enumerate(chunk_seeds):
        try:
            simulate_batch(problem, config, [s])
        except SolverError:
            return s, start + offset
    return chunk_seeds[0], start


@dataclass(frozen=True)
class Statistic:
    mean: float
    se: float
    count: int

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        return cls(float(v.mean()), se, int(v.size))


@dataclass
class EnsembleSummary:
    stats: dict
    values: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, name):
        return self.stats[name]


def energy_at_end(batch, problem):
    """Observable ``<B u(T), u(T)>``."""
    return problem.b.energy(batch.states[:, -1])


def state_at_end(component=0):
    def obs(batch, problem):
        return batch.states[:, -1, component]

    return obs


def mc_run(problem, config, n_paths, master_seed, observables, workers=1):
    """Monte Carlo means and standard errors of per-path observables.

    ``observables`` maps names to callables ``(batch, problem) -> (n,)``.
    """
    def reducer(batch):
        return {name: np.asarray(fn(batch, problem), dtype=float) for name, fn in observables.items()}

    values = run_chunks(problem, config, n_paths, master_seed, reducer, workers)
    stats = {name: Statistic.of(v) for name, v in values.items()}
    return EnsembleSummary(stats, values)
