"""Problem gallery: closed-form oracle problems and 1D grid discretizations.

All grid problems use homogeneous Dirichlet ends and put the quadrature
weight ``h`` on both ``A`` and ``B`` so discrete pairings approximate the
corresponding L^2 integrals.
"""
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .bform import BForm
from .errors import InvalidWeight, UnsupportedExponent
from .integrator import Problem
from .noise import NoiseModel
from .operators import (
    OperatorMetadata,
    dirichlet_laplacian,
    linear_operator,
    p_laplacian_operator,
    porous_media_operator,
    zero_operator,
)


@dataclass(frozen=True)
class Grid1D:
    n: int
    L: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one interior node")
        if not self.L > 0:
            raise ValueError("domain length must be positive")

    @property
    def h_exact(self):
        return Fraction(self.L) / (self.n + 1)

    @property
    def h(self):
        return self.L / (self.n + 1)

    @property
    def nodes(self):
        return self.h * np.arange(1, self.n + 1)

    def laplacian(self):
        return dirichlet_laplacian(self.n, self.h)


def sine_noise(grid, modes, sigma=1.0, decay=1.0):
    """Phi columns ``sigma * sin(k pi x / L)``, Q = diag(k^(-2 decay))."""
    x = grid.nodes
    k = np.arange(1, modes + 1)
    phi = sigma * np.sin(np.outer(x, k) * math.pi / grid.L)
    q = np.diag(k ** (-2.0 * decay))
    return NoiseModel(q, phi)


def sine_profile(grid, amplitude=1.0, mode=1):
    return amplitude * np.sin(mode * math.pi * grid.nodes / grid.L)


def make_ou(d, lam, sigma, u0, T=1.0):
    """``du = -lam u dt + sigma dW`` with B = I, Q = I."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), (d,)).copy()
    eye = np.eye(d)
    meta = OperatorMetadata(
        p=2.0, coercivity_k=lam, growth_c=lam, monotone_lambda=0.0
    )
    a = linear_operator(lam * eye, meta, name="ou")
    noise = NoiseModel(eye, sigma * eye)
    return Problem(BForm(eye), eye, a, noise, u0, eye, T, None, "ou")


def ou_second_moment(u0, lam, sigma, t):
    """``E u(t)^2`` for the scalar OU process started at ``u0``."""
    if lam == 0:
        return u0**2 + sigma**2 * t
    decay = math.exp(-2.0 * lam * t)
    return u0**2 * decay + sigma**2 * (1.0 - decay) / (2.0 * lam)


def make_porous_media(grid, p, noise, u0, T=1.0):
    """Porous media equation in the implicit form ``d((-Lap)^{-1} u) + u|u|^{p-2} dt``.

    B is ``h * L_h^{-1}`` (dense SPD), A is ``h * u|u|^{p-2}`` and W = L^2 with
    Gram matrix ``h I``.
    """
    if p < 2:
        raise UnsupportedExponent(f"porous media needs p >= 2, got {p}")
    n, h = grid.n, grid.h
    L = grid.laplacian()
    B = h * np.linalg.inv(L)
    a = porous_media_operator(n, h, p)
    r = h * np.eye(n) + h * L
    u0 = np.asarray(u0, dtype=float)
    return Problem(BForm(B), r, a, noise, u0, h * np.eye(n), T, None, "porous_media")


def make_degenerate_plaplacian(grid, p, b_weight, noise, u0, T=1.0):
    """Degenerate p-Laplace problem ``d(b u) - div(|u'|^{p-2} u') dt = b Phi dW``.

    ``b_weight`` is a callable on node positions or an array of nodal values
    and may vanish.  W = H^1_0 with Gram matrix ``h I + h L_h``, which also
    serves as the regularizing Riesz map R.
    """
    if p < 2:
        raise UnsupportedExponent(f"p-Laplacian problems need p >= 2, got {p}")
    n, h = grid.n, grid.h
    bw = b_weight(grid.nodes) if callable(b_weight) else b_weight
    bw = np.broadcast_to(np.asarray(bw, dtype=float), (n,))
    if np.any(bw < 0) or not np.all(np.isfinite(bw)):
        raise InvalidWeight("b must be finite and nonnegative at every node")
    B = np.diag(h * bw)
    a = p_laplacian_operator(n, h, p)
    gram = h * np.eye(n) + h * grid.laplacian()
    u0 = np.asarray(u0, dtype=float)
    return Problem(BForm(B), gram, a, noise, u0, gram, T, None, "degenerate_plaplacian")


def half_weight(grid):
    """``b = 1`` on the left half of the domain and 0 on the right half."""
    return lambda x: (x < 0.5 * grid.L).astype(float)


def make_zero_b(d, A=None, f=None, noise=None, u0=None, T=1.0, r=None):
    """``B = 0``: the solve reduces to ``eps R u' + A(u) = f``."""
    eye = np.eye(d)
    if A is None:
        A = linear_operator(eye)
    if noise is None:
        noise = NoiseModel(eye, eye)
    if u0 is None:
        u0 = np.ones(d)
    r = eye if r is None else r
    return Problem(BForm(np.zeros((d, d))), r, A, noise, u0, eye, T, f, "zero_b")


def make_zero_problem(d=1, T=1.0):
    """Everything zero except ``u0 = 0``: all energies vanish."""
    eye = np.eye(d)
    return Problem(
        BForm(eye), eye, zero_operator(d), NoiseModel.zero(d), np.zeros(d), eye, T, None, "zero"
    )
