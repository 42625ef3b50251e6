"""Q-Wiener sampling, left-point stochastic integrals and quadratic variation.

The Wiener process lives directly on ``Q^{1/2} U`` with ``U = R^m``:
``W(t) = sum_i sqrt(lambda_i) beta_i(t) u_i`` for the positive eigenpairs
``(lambda_i, u_i)`` of ``Q``.  No auxiliary Hilbert-Schmidt embedding is used.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, LevelTooFine, PartitionNotNested
from .rng import counter_normals

MAX_LEVEL = 24


@dataclass(frozen=True)
class NoiseModel:
    """Covariance ``q`` (m x m) and state-independent coefficient ``phi``.

    ``phi`` is either a constant d x m matrix or a callable ``t -> (d, m)``.
    """

    q: np.ndarray
    phi: object
    d: int = None
    spectral_cutoff: float = 1e-14

    def __post_init__(self):
        q = np.array(self.q, dtype=float, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DimensionMismatch(f"Q must be square, got {q.shape}")
        q = 0.5 * (q + q.T)
        lam, vec = np.linalg.eigh(q)
        scale = max(abs(lam[-1]), 1.0) if lam.size else 1.0
        if lam.size and lam[0] < -1e-10 * scale:
            from .errors import FormNotPSD

            raise FormNotPSD(f"Q has eigenvalue {lam[0]:.3e}")
        lam = np.clip(lam, 0.0, None)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "q_eigs", (lam, vec))
        if callable(self.phi):
            sample = np.asarray(self.phi(0.0), dtype=float)
            object.__setattr__(self, "_phi_const", None)
        else:
            sample = np.array(self.phi, dtype=float, copy=True)
            if sample.ndim == 1:
                sample = sample[:, None]
            sample.setflags(write=False)
            object.__setattr__(self, "_phi_const", sample)
        if sample.ndim != 2 or sample.shape[1] != q.shape[0]:
            raise DimensionMismatch(
                f"Phi has shape {sample.shape}, noise dimension m={q.shape[0]}"
            )
        if self.d is None:
            object.__setattr__(self, "d", sample.shape[0])
        elif self.d != sample.shape[0]:
            raise DimensionMismatch(f"Phi has {sample.shape[0]} rows, d={self.d}")

    @property
    def m(self):
        return self.q.shape[0]

    @property
    def time_dependent(self):
        return self._phi_const is None

    def phi_at(self, t):
        if self._phi_const is not None:
            return self._phi_const
        return np.asarray(self.phi(t), dtype=float)

    def positive_spectrum(self):
        """Eigenpairs of Q with ``lambda > cutoff * max lambda``."""
        lam, vec = self.q_eigs
        if lam.size == 0 or lam[-1] <= 0.0:
            return np.zeros(0), np.zeros((self.m, 0))
        keep = lam > self.spectral_cutoff * lam[-1]
        return lam[keep], vec[:, keep]

    def g_basis(self):
        """Columns ``sqrt(lambda_i) u_i``: orthonormal basis of Q^{1/2} U."""
        lam, vec = self.positive_spectrum()
        return vec * np.sqrt(lam)

    def trace(self):
        return float(self.q_eigs[0].sum())

    @classmethod
    def zero(cls, d, m=1):
        return cls(np.zeros((m, m)), np.zeros((d, m)))


@dataclass(frozen=True)
class Partition:
    times: np.ndarray
    level: int = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("partition times must be strictly increasing from 0")
        object.__setattr__(self, "times", t)

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def mesh(self):
        return float(np.diff(self.times).max())

    @classmethod
    def uniform(cls, T, n_steps, level=None):
        return cls((np.arange(n_steps + 1) / n_steps) * T, level)


def dyadic_partitions(T, min_level, max_level):
    """Nested uniform partitions of [0, T] with 2**k intervals, k in range."""
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0 <= min_level <= max_level:
        raise ValueError("need 0 <= min_level <= max_level")
    if max_level > MAX_LEVEL:
        raise LevelTooFine(f"level {max_level} exceeds {MAX_LEVEL}")
    return [Partition.uniform(T, 2**k, level=k) for k in range(min_level, max_level + 1)]


def uniform_increments(noise, T, n_steps, seed, refine=1):
    """Q-Wiener increments on a uniform grid, aggregated from a finer one.

    The fine grid has ``n_steps * refine`` intervals and fine step ``j`` with
    eigen-index ``i`` always uses stream index ``j * m + i``.  Grids that share
    a fine grid therefore see the same Brownian path.
    """
    n_fine = n_steps * refine
    lam, vec = noise.positive_spectrum()
    if lam.size == 0:
        return np.zeros((n_steps, noise.m))
    m = noise.m
    xi = counter_normals(seed, n_fine * m).reshape(n_fine, m)
    # Brownian coordinates only along the positive spectrum
    idx = np.searchsorted(noise.q_eigs[0], lam[0])
    xi = xi[:, idx : idx + lam.size]
    dt_fine = T / n_fine
    fine = (xi * np.sqrt(lam * dt_fine)) @ vec.T
    if refine == 1:
        return fine
    return fine.reshape(n_steps, refine, m).sum(axis=1)


def sample_increments(noise, partition, seed, base_level=None):
    """Increments ``Delta W_j`` of the Q-Wiener process over ``partition``.

    For a dyadic partition of level ``k`` and ``base_level >= k`` the
    increments are sums of level-``base_level`` increments, so every level
    views one and the same sample path.  Other partitions draw one normal
    vector per interval.
    """
    if base_level is not None and partition.level is not None:
        if base_level < partition.level:
            raise ValueError("base_level must not be coarser than the partition")
        if base_level > MAX_LEVEL:
            raise LevelTooFine(f"level {base_level} exceeds {MAX_LEVEL}")
        return uniform_increments(
            noise, partition.T, partition.n_steps, seed, 2 ** (base_level - partition.level)
        )
    lam, vec = noise.positive_spectrum()
    n = partition.n_steps
    if lam.size == 0:
        return np.zeros((n, noise.m))
    xi = counter_normals(seed, n * noise.m).reshape(n, noise.m)
    idx = np.searchsorted(noise.q_eigs[0], lam[0])
    xi = xi[:, idx : idx + lam.size]
    dt = np.diff(partition.times)[:, None]
    return (xi * np.sqrt(lam) * np.sqrt(dt)) @ vec.T


def ito_integral(step_values, increments):
    """Left-point stochastic integral ``sum_{j<k} Z_j dW_j``.

    Parameters
    ----------
    step_values : array_like, shape (N, d, m) or (d, m)
        Integrand at the left endpoint of each interval; a single matrix is
        used on every interval.
    increments : array_like, shape (..., N, m)
        Wiener increments; leading axes index independent paths.

    Returns
    -------
    terminal : ndarray, shape (..., d)
    path : ndarray, shape (..., N + 1, d)
        Partial sums, starting from zero.
    """
    dw = np.asarray(increments, dtype=float)
    z = np.asarray(step_values, dtype=float)
    if dw.ndim < 2:
        raise DimensionMismatch("increments must have shape (..., N, m)")
    n, m = dw.shape[-2:]
    if z.ndim == 2:
        if z.shape[1] != m:
            raise DimensionMismatch("integrand columns do not match noise dimension")
        terms = dw @ z.T
    else:
        if z.shape[0] != n or z.shape[2] != m:
            raise DimensionMismatch(
                f"{z.shape[0]} integrand values for {n} increments"
            )
        terms = np.einsum("jdm,...jm->...jd", z, dw)
    path = np.zeros(dw.shape[:-2] + (n + 1, terms.shape[-1]))
    np.cumsum(terms, axis=-2, out=path[..., 1:, :])
    return path[..., -1, :], path


@dataclass
class QVEstimate:
    target_times: np.ndarray
    per_level: list = field(default_factory=list)  # [(level, estimates)]

    def at_level(self, level):
        for lev, est in self.per_level:
            if lev == level:
                return est
        raise KeyError(level)


def _check_nested(partitions):
    for coarse, fine in zip(partitions, partitions[1:]):
        if not np.all(np.isin(coarse.times, fine.times)):
            raise PartitionNotNested(
                f"partition with {coarse.n_steps} steps is not contained in the next one"
            )


def quadratic_variation(path_sampler, partitions, w_mass, t_targets):
    """Sum of squared W-norm increments of a path over nested partitions.

    ``path_sampler(partition)`` must return the values ``M(t_j)`` (shape
    ``(N + 1, d)``) of one fixed sample path.  For a target ``t`` that is not
    a grid point the path is read at the last grid point before ``t``.
    """
    partitions = list(partitions)
    _check_nested(partitions)
    targets = np.atleast_1d(np.asarray(t_targets, dtype=float))
    w = np.atleast_2d(np.asarray(w_mass, dtype=float))
    out = QVEstimate(targets)
    for part in partitions:
        values = np.asarray(path_sampler(part), dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != part.times.size:
            raise DimensionMismatch("path sampler returned the wrong number of points")
        dm = np.diff(values, axis=0)
        sq = np.einsum("ji,ik,jk->j", dm, w, dm)
        cum = np.concatenate([[0.0], np.cumsum(sq)])
        pos = np.searchsorted(part.times, targets, side="right") - 1
        out.per_level.append((part.level, cum[np.clip(pos, 0, None)]))
    return out
