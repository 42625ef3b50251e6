"""Nonlinear operators ``A(t, u)`` with their structural constants.

Operators act on arrays whose last axis is the state, so a batch of paths is
evaluated in one call.  The value ``A(t, u)`` is a covector; ``<A(t,u), v>``
is the plain dot product of coordinates.

All shipped operators are monotone and hemicontinuous, hence of type M; that
property is an assumption recorded here and is not checked at runtime.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

VIOLATION_TOL = 1e-9


def _zero(t):
    return 0.0


@dataclass(frozen=True)
class OperatorMetadata:
    """Constants in coercivity, growth and weak monotonicity bounds.

    Coercivity: ``shift * <Bu,u> + <A(t,u),u> >= k * |u|_V^p - C(t)``.
    Growth: ``|A(t,v)|_{V'} <= g(t) + c * |v|_V^(p-1)``.
    Weak monotonicity: ``monotone_lambda * B + A`` is monotone.
    """

    p: float = 2.0
    coercivity_k: float = 0.0
    coercivity_shift_lambda: float = 0.0
    coercivity_C: object = _zero
    growth_c: float = 0.0
    growth_g: object = _zero
    monotone_lambda: float = None

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"exponent p must exceed 1, got {self.p}")
        for name in ("coercivity_k", "coercivity_shift_lambda", "growth_c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.monotone_lambda is not None and not self.monotone_lambda >= 0:
            raise ValueError("monotone_lambda must be nonnegative")


def euclidean_norm(u):
    return np.linalg.norm(u, axis=-1)


@dataclass(frozen=True)
class NonlinearOperator:
    """Deterministic map ``(t, u) -> A(t, u)``.

    ``jacobian(t, u)`` returns ``dA/du`` with shape ``(..., d, d)``; when it is
    absent the implicit solver differentiates numerically.  ``dual_norm``
    evaluates the V' norm of a covector.
    """

    dim: int
    apply: object
    metadata: OperatorMetadata = field(default_factory=OperatorMetadata)
    v_norm: object = euclidean_norm
    jacobian: object = None
    dual_norm: object = None
    name: str = ""

    def __call__(self, t, u):
        return self.apply(t, u)


# ---------------------------------------------------------------- factories


def zero_operator(d):
    return NonlinearOperator(
        d,
        lambda t, u: np.zeros_like(np.asarray(u, dtype=float)),
        OperatorMetadata(p=2.0, monotone_lambda=0.0),
        jacobian=lambda t, u: np.zeros(np.shape(u) + (d,)),
        dual_norm=euclidean_norm,
        name="zero",
    )


def linear_operator(K, metadata=None, name="linear"):
    """``A(u) = K u`` on Euclidean R^d with p = 2.

    Default constants come from the spectrum of the symmetric part of ``K``.
    """
    K = np.array(K, dtype=float)
    if metadata is None:
        sym = 0.5 * (K + K.T)
        lam = np.linalg.eigvalsh(sym)
        metadata = OperatorMetadata(
            p=2.0,
            coercivity_k=max(lam[0], 0.0),
            growth_c=float(np.linalg.norm(K, 2)),
            monotone_lambda=0.0 if lam[0] >= -1e-12 else None,
        )
    return NonlinearOperator(
        K.shape[0],
        lambda t, u: np.asarray(u) @ K.T,
        metadata,
        jacobian=lambda t, u: np.broadcast_to(K, np.shape(u)[:-1] + K.shape),
        dual_norm=euclidean_norm,
        name=name,
    )


def cubic_operator(d, sign=1.0, name=None):
    """Componentwise ``sign * u**3``; monotone for ``sign > 0``.

    With ``sign < 0`` this is the super-linear, anti-dissipative map used to
    exercise the radius escalation of the truncated Picard solver.
    """
    meta = (
        OperatorMetadata(p=4.0, coercivity_k=1.0, growth_c=1.0, monotone_lambda=0.0)
        if sign > 0
        else OperatorMetadata(p=4.0)
    )

    def jac(t, u):
        u = np.asarray(u)
        return np.einsum("...i,ij->...ij", 3.0 * sign * u * u, np.eye(d))

    return NonlinearOperator(
        d,
        lambda t, u: sign * np.asarray(u) ** 3,
        meta,
        v_norm=lambda u: np.sum(np.abs(u) ** 4, axis=-1) ** 0.25,
        jacobian=jac,
        dual_norm=lambda a: np.sum(np.abs(a) ** (4.0 / 3.0), axis=-1) ** 0.75,
        name=name or ("cubic" if sign > 0 else "anti-cubic"),
    )


def weighted_lp_norm(h, p):
    """Discrete L^p norm ``(h * sum |u_i|^p)^(1/p)``."""

    def norm(u):
        return (h * np.sum(np.abs(u) ** p, axis=-1)) ** (1.0 / p)

    return norm


def porous_media_operator(n, h, p):
    """``A(u)_i = h * u_i |u_i|^(p-2)`` with V the weighted l^p space."""
    q = p / (p - 1.0)

    def apply(t, u):
        u = np.asarray(u)
        return h * u * np.abs(u) ** (p - 2.0)

    def jac(t, u):
        u = np.asarray(u)
        diag = h * (p - 1.0) * np.abs(u) ** (p - 2.0)
        return np.einsum("...i,ij->...ij", diag, np.eye(n))

    def dual(a):
        # sup a.v / |v|_{p,h} = (h sum |a_i/h|^q)^(1/q)
        return (h * np.sum(np.abs(np.asarray(a) / h) ** q, axis=-1)) ** (1.0 / q)

    meta = OperatorMetadata(p=p, coercivity_k=1.0, growth_c=1.0, monotone_lambda=0.0)
    return NonlinearOperator(n, apply, meta, weighted_lp_norm(h, p), jac, dual, "porous_media")


def difference_matrix(n, h):
    """Forward differences on n interior nodes with zero Dirichlet ends.

    Shape ``(n + 1, n)``; with nodes numbered ``0..n-1`` row ``e`` gives
    ``(u_e - u_{e-1}) / h`` where ``u_{-1} = u_n = 0``.
    """
    D = np.zeros((n + 1, n))
    idx = np.arange(n)
    D[idx + 1, idx] = -1.0 / h
    D[idx, idx] = 1.0 / h
    return D


def dirichlet_laplacian(n, h):
    """Tridiagonal ``(2, -1) / h^2`` stencil, equal to ``D.T @ D``."""
    L = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    return L / h**2


def p_laplacian_operator(n, h, p):
    """Discrete ``-div(|grad u|^(p-2) grad u)`` in weak form.

    ``<A u, v> = h * sum_e |Du_e|^(p-2) Du_e Dv_e`` over the n + 1 edges, V is
    the edge-wise weighted l^p norm of the difference quotient.
    """
    D = difference_matrix(n, h)
    q = p / (p - 1.0)

    def apply(t, u):
        s = np.asarray(u) @ D.T
        return h * (s * np.abs(s) ** (p - 2.0)) @ D

    def jac(t, u):
        s = np.asarray(u) @ D.T
        w = h * (p - 1.0) * np.abs(s) ** (p - 2.0)
        return (D.T * w[..., None, :]) @ D

    def v_norm(u):
        s = np.asarray(u) @ D.T
        return (h * np.sum(np.abs(s) ** p, axis=-1)) ** (1.0 / p)

    def dual(a):
        # |a|_{V'} = min over edge fields s with h D^T s = a of |s|_{q,h}.
        # Solutions differ by constants, so minimize over that shift.
        a = np.asarray(a, dtype=float)
        # h D^T s = a  <=>  s_i - s_{i+1} = a_i
        s0 = np.zeros(a.shape[:-1] + (n + 1,))
        s0[..., 1:] = -np.cumsum(a, axis=-1)
        return _min_shift_norm(s0, q, h)

    meta = OperatorMetadata(p=p, coercivity_k=1.0, growth_c=1.0, monotone_lambda=0.0)
    return NonlinearOperator(n, apply, meta, v_norm, jac, dual, "p_laplacian")


def _min_shift_norm(s0, q, h, iters=200):
    """``min_c (h sum |s0 + c|^q)^(1/q)`` by bisection on the derivative."""
    hi = np.abs(s0).max(axis=-1) + 1.0
    lo = -hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        x = s0 + mid[..., None]
        slope = np.sum(np.sign(x) * np.abs(x) ** (q - 1.0), axis=-1)
        pos = slope > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    c = 0.5 * (lo + hi)
    return (h * np.sum(np.abs(s0 + c[..., None]) ** q, axis=-1)) ** (1.0 / q)


# ----------------------------------------------------------------- checks


@dataclass
class CheckReport:
    values: np.ndarray
    violations: list

    @property
    def passed(self):
        return not self.violations


def check_coercivity(A, B, samples):
    """Evaluate ``shift<Bu,u> + <A(t,u),u> - (k |u|_V^p - C(t))`` per sample."""
    meta = A.metadata
    values, bad = [], []
    for i, (t, u) in enumerate(samples):
        u = np.asarray(u, dtype=float)
        shift = meta.coercivity_shift_lambda * float(B.energy(u))
        pair = float(A(t, u) @ u)
        lower = meta.coercivity_k * float(A.v_norm(u)) ** meta.p
        c = float(meta.coercivity_C(t))
        v = shift + pair - (lower - c)
        values.append(v)
        scale = abs(shift) + abs(pair) + abs(lower) + abs(c)
        if v < -VIOLATION_TOL * (1.0 + scale):
            bad.append(i)
    return CheckReport(np.array(values), bad)


def check_monotonicity(A, B, pairs, lam=None):
    """Evaluate ``<lam B(u-v) + A(t,u) - A(t,v), u - v>`` per triple."""
    if lam is None:
        lam = A.metadata.monotone_lambda or 0.0
    values, bad = [], []
    for i, (t, u, v) in enumerate(pairs):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        w = u - v
        bpart = lam * float(B.energy(w))
        au, av = A(t, u), A(t, v)
        apart = float((au - av) @ w)
        val = bpart + apart
        values.append(val)
        scale = abs(bpart) + abs(float(au @ w)) + abs(float(av @ w))
        if val < -VIOLATION_TOL * (1.0 + scale):
            bad.append(i)
    return CheckReport(np.array(values), bad)


def check_growth(A, samples):
    """Evaluate ``g(t) + c |v|^(p-1) - |A(t,v)|_{V'}`` per sample."""
    if A.dual_norm is None:
        raise ValueError(f"operator {A.name!r} has no dual norm")
    meta = A.metadata
    values, bad = [], []
    for i, (t, v) in enumerate(samples):
        v = np.asarray(v, dtype=float)
        lhs = float(A.dual_norm(A(t, v)))
        rhs = float(meta.growth_g(t)) + meta.growth_c * float(A.v_norm(v)) ** (meta.p - 1)
        values.append(rhs - lhs)
        if rhs - lhs < -VIOLATION_TOL * (1.0 + lhs + rhs):
            bad.append(i)
    return CheckReport(np.array(values), bad)


# ----------------------------------------------------------- transformers


def exp_shift(A, lam, horizon=1.0):
    """Operator ``(t, w) -> exp(-lam t) A(t, exp(lam t) w)``.

    The coercivity constant becomes ``k * min exp((p-2) lam t)`` and the
    offset ``exp(-2 lam t) C(t)``; growth becomes ``exp(-lam t) g(t)`` and
    ``c * max exp((p-2) lam t)``.  Extremes over t are taken on
    ``[0, horizon]``.
    """
    if not math.isfinite(lam):
        raise ValueError("lam must be finite")
    if lam == 0.0:
        return A
    meta = A.metadata
    expo = (meta.p - 2.0) * lam
    k_factor = min(1.0, math.exp(expo * horizon))
    c_factor = max(1.0, math.exp(expo * horizon))
    C0, g0 = meta.coercivity_C, meta.growth_g
    new_meta = replace(
        meta,
        coercivity_k=meta.coercivity_k * k_factor,
        coercivity_C=lambda t: math.exp(-2.0 * lam * t) * C0(t),
        growth_c=meta.growth_c * c_factor,
        growth_g=lambda t: math.exp(-lam * t) * g0(t),
    )

    def apply(t, w):
        return math.exp(-lam * t) * A(t, math.exp(lam * t) * np.asarray(w))

    jac = None
    if A.jacobian is not None:

        def jac(t, w):
            return A.jacobian(t, math.exp(lam * t) * np.asarray(w))

    return replace(A, apply=apply, metadata=new_meta, jacobian=jac,
                   name=f"{A.name}[shift {lam:g}]")


def h_norm(u, h_mass):
    """``sqrt(u^T H u)`` along the last axis, safe against overflow."""
    u = np.asarray(u, dtype=float)
    scale = np.abs(u).max(axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    v = u / safe
    quad = np.einsum("...i,ij,...j->...", v, np.asarray(h_mass), v)
    return scale[..., 0] * np.sqrt(np.maximum(quad, 0.0))


def ball_project(u, radius, h_mass):
    """Metric projection onto the closed H-ball of the given radius."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    u = np.asarray(u, dtype=float)
    nrm = h_norm(u, h_mass)
    outside = nrm > radius
    if not np.any(outside):
        return u
    factor = np.where(outside, radius / np.where(outside, nrm, 1.0), 1.0)
    return np.where(outside[..., None], u * factor[..., None], u)
