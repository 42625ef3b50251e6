"""Linear algebra for symmetric positive semidefinite bilinear forms.

A form ``B`` is stored as the matrix taking state coordinates to covector
coordinates, so ``<Bx, y>`` is ``y @ B @ x``.  Nothing here assumes ``B`` is
invertible.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyInput, FormNotPSD


@dataclass(frozen=True)
class BForm:
    """Symmetric PSD form; construction symmetrizes and validates the matrix."""

    matrix: np.ndarray
    psd_tol: float = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise DimensionMismatch(f"form matrix must be square, got {m.shape}")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        tol = self.psd_tol
        if tol is None:
            tol = 1e-10 * (1.0 + np.abs(m).max())
        object.__setattr__(self, "psd_tol", float(tol))
        lam_min = np.linalg.eigvalsh(m)[0]
        if lam_min < -self.psd_tol:
            raise FormNotPSD(
                f"smallest eigenvalue {lam_min:.3e} is below -psd_tol={self.psd_tol:.3e}"
            )

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def norm_inf(self):
        return float(np.abs(self.matrix).sum(axis=1).max())

    def apply(self, x):
        """``Bx`` for ``x`` with the state on the last axis."""
        return np.asarray(x) @ self.matrix.T

    def energy(self, x):
        """``<Bx, x>`` along the last axis."""
        x = np.asarray(x)
        return np.einsum("...i,...i->...", self.apply(x), x)

    def numerical_rank(self, tol=None):
        lam = np.linalg.eigvalsh(self.matrix)
        if tol is None:
            tol = 1e-10 * max(1.0, lam[-1])
        return int((lam > tol).sum())


@dataclass
class BOrthonormalBasis:
    vectors: np.ndarray  # (r, dim), rows are e_i
    form: BForm
    drop_log: list = field(default_factory=list)
    zero_tol: float = 0.0

    def __len__(self):
        return self.vectors.shape[0]

    def gram(self):
        """Matrix of pairings ``<B e_i, e_j>``."""
        return self.vectors @ self.form.matrix @ self.vectors.T


def default_zero_tol(form):
    return 1e-12 * (1.0 + float(np.abs(form.matrix).max()))


def b_gram_schmidt(form, candidates, zero_tol=None):
    """B-orthonormalize ``candidates`` in the order given.

    A candidate is accepted when the B-energy of its residual after removing
    its projection onto the accepted vectors exceeds
    ``zero_tol * max(1, |r|^2)``; otherwise its index goes to ``drop_log``.
    The length factor matters once weak directions have been accepted: their
    B-unit vectors are long, so a null-space residual can be long too and
    pick up roundoff energy far above an absolute threshold.  With a vanishing form the basis is empty.

    Parameters
    ----------
    form : BForm
    candidates : array_like, shape (k, dim)
        Candidate vectors as rows.
    zero_tol : float, optional
        Residual-energy threshold, default ``1e-12 * (1 + max|B|)``.

    Returns
    -------
    BOrthonormalBasis
    """
    g = np.atleast_2d(np.asarray(candidates, dtype=float))
    if g.size == 0:
        raise EmptyInput("no candidate vectors given")
    if g.shape[1] != form.dim:
        raise DimensionMismatch(f"candidates have length {g.shape[1]}, form dim {form.dim}")
    if zero_tol is None:
        zero_tol = default_zero_tol(form)
    if zero_tol <= 0:
        raise ValueError("zero_tol must be positive")

    B = form.matrix
    accepted = []
    bes = []  # cached B e_i
    dropped = []
    for idx, cand in enumerate(g):
        r = cand.copy()
        if accepted:
            E = np.array(accepted)
            BE = np.array(bes)
            # project twice; semidefinite forms amplify cancellation
            for _ in range(2):
                r = r - (BE @ r) @ E
        energy = r @ B @ r
        if energy > zero_tol * max(1.0, r @ r):
            e = r / np.sqrt(energy)
            accepted.append(e)
            bes.append(B @ e)
        else:
            dropped.append(idx)
    vectors = np.array(accepted) if accepted else np.zeros((0, form.dim))
    return BOrthonormalBasis(vectors, form, dropped, float(zero_tol))


def b_parseval(form, basis, x):
    """Energy and covector reconstruction of ``Bx`` from the basis.

    Returns ``(energy, reconstruction, residual)`` where ``energy`` is the sum
    of squared coefficients ``<Bx, e_i>``, ``reconstruction`` is
    ``sum <Bx, e_i> B e_i`` and ``residual`` is the max-norm of ``Bx`` minus it.
    """
    x = np.asarray(x, dtype=float)
    if basis.form.dim != form.dim or x.shape[-1] != form.dim:
        raise DimensionMismatch("basis, form and vector dimensions disagree")
    bx = form.apply(x)
    if len(basis) == 0:
        coef = np.zeros(0)
        recon = np.zeros_like(bx)
    else:
        coef = basis.vectors @ bx
        recon = coef @ (basis.vectors @ form.matrix)
    energy = float(coef @ coef)
    residual = float(np.abs(bx - recon).max()) if bx.size else 0.0
    return energy, recon, residual


def bzz_pairing(form, noise, w_mass=None, t=0.0):
    """``sum_i lambda_i <B Phi u_i, Phi u_i>`` over the positive spectrum of Q.

    This is the pairing of ``B Z`` with ``Z`` in the Hilbert-Schmidt sense;
    with ``B`` equal to the W-Gram matrix it is the squared HS norm of Phi
    into W.  ``w_mass`` is only used to check dimensions.
    """
    phi = noise.phi_at(t)
    if phi.shape[0] != form.dim:
        raise DimensionMismatch(f"Phi has {phi.shape[0]} rows, form dim {form.dim}")
    if w_mass is not None and np.shape(w_mass) != (form.dim, form.dim):
        raise DimensionMismatch("W-Gram matrix does not match the state dimension")
    g = phi @ noise.g_basis()  # columns Phi g_i
    value = float(np.einsum("ij,ik,kj->", g, form.matrix, g))
    if value < -form.psd_tol * max(1.0, float(np.abs(g).sum()) ** 2):
        raise FormNotPSD(f"negative pairing {value:.3e}")
    return max(value, 0.0)


def hs_norm_sq(noise, w_mass, t=0.0):
    """Squared Hilbert-Schmidt norm of Phi(t) from Q^{1/2}U into W."""
    g = noise.phi_at(t) @ noise.g_basis()
    return float(np.einsum("ij,ik,kj->", g, np.asarray(w_mass), g))
