import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdelab.bform import BForm, b_gram_schmidt, b_parseval, bzz_pairing, hs_norm_sq
from spdelab.errors import DimensionMismatch, EmptyInput, FormNotPSD
from spdelab.noise import NoiseModel

from oracles import HAND_CASES, random_psd, rational_gram_schmidt


def test_identity_form_standard_basis():
    basis = b_gram_schmidt(BForm(np.eye(2)), np.eye(2))
    np.testing.assert_array_equal(basis.vectors, np.eye(2))
    assert basis.drop_log == []


def test_degenerate_form_drops_null_direction():
    basis = b_gram_schmidt(BForm(np.diag([1.0, 0.0])), np.eye(2))
    np.testing.assert_array_equal(basis.vectors, [[1.0, 0.0]])
    assert basis.drop_log == [1]


def test_two_by_two_hand_example():
    form = BForm([[2.0, 1.0], [1.0, 1.0]])
    basis = b_gram_schmidt(form, np.eye(2))
    s = math.sqrt(2.0)
    np.testing.assert_allclose(basis.vectors, [[1 / s, 0.0], [-s / 2, s]], atol=1e-15)
    g = basis.gram()
    assert abs(g[0, 1]) < 1e-15
    assert abs(g[1, 1] - 1.0) < 1e-15


def test_errors():
    with pytest.raises(FormNotPSD):
        BForm([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(EmptyInput):
        b_gram_schmidt(BForm(np.eye(2)), np.zeros((0, 2)))
    with pytest.raises(DimensionMismatch):
        b_gram_schmidt(BForm(np.eye(2)), np.eye(3))


def test_construction_symmetrizes():
    form = BForm([[1.0, 0.3], [0.1, 1.0]])
    assert np.array_equal(form.matrix, form.matrix.T)


def test_candidate_order_respected():
    form = BForm(np.diag([1.0, 4.0]))
    basis = b_gram_schmidt(form, [[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(basis.vectors, [[0.0, 0.5], [1.0, 0.0]])


@pytest.mark.parametrize("B, cands", HAND_CASES)
def test_matches_rational_oracle(B, cands):
    vs, norms = rational_gram_schmidt(B, cands)
    expected = np.array([[float(x) for x in v] for v in vs]) if vs else np.zeros((0, len(B)))
    expected /= np.sqrt([float(n) for n in norms])[:, None] if vs else 1.0
    basis = b_gram_schmidt(BForm(np.array(B, dtype=float)), np.array(cands, dtype=float))
    assert basis.vectors.shape == expected.shape
    np.testing.assert_allclose(basis.vectors, expected, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_random_forms_orthonormal_and_rank(dim, frac, seed):
    rng = np.random.default_rng(seed)
    rank = int(round(frac * dim))
    form = BForm(random_psd(rng, dim, rank))
    basis = b_gram_schmidt(form, rng.standard_normal((dim, dim)))
    assert len(basis) == rank == form.numerical_rank()
    if rank:
        assert np.abs(basis.gram() - np.eye(rank)).max() <= 1e-8
    x = rng.standard_normal(dim)
    energy, _, residual = b_parseval(form, basis, x)
    scale = 1.0 + np.linalg.norm(form.matrix, 2) * np.linalg.norm(x)
    assert residual <= 1e-8 * scale
    assert abs(energy - x @ form.matrix @ x) <= 1e-8 * scale


def test_parseval_identity_form():
    x = np.array([3.0, -1.0, 2.0])
    form = BForm(np.eye(3))
    energy, recon, residual = b_parseval(form, b_gram_schmidt(form, np.eye(3)), x)
    assert energy == pytest.approx(14.0, abs=1e-14)
    assert residual == 0.0


def test_parseval_zero_form():
    form = BForm(np.zeros((2, 2)))
    basis = b_gram_schmidt(form, np.eye(2))
    assert len(basis) == 0
    energy, recon, residual = b_parseval(form, basis, [1.0, 2.0])
    assert energy == 0.0 and residual == 0.0
    assert not recon.any()


def test_parseval_two_by_two():
    form = BForm([[2.0, 1.0], [1.0, 1.0]])
    energy, _, residual = b_parseval(form, b_gram_schmidt(form, np.eye(2)), [1.0, 1.0])
    assert energy == pytest.approx(5.0, abs=1e-12)
    assert residual <= 1e-12


def test_parseval_dimension_mismatch():
    form = BForm(np.eye(2))
    basis = b_gram_schmidt(BForm(np.eye(3)), np.eye(3))
    with pytest.raises(DimensionMismatch):
        b_parseval(form, basis, [1.0, 2.0])


PHI = np.array([[1.0, 2.0], [3.0, 4.0]])


def test_bzz_gelfand_case():
    noise = NoiseModel(np.eye(2), PHI)
    assert bzz_pairing(BForm(np.eye(2)), noise, np.eye(2)) == pytest.approx(30.0)


def test_bzz_zero_form():
    noise = NoiseModel(np.diag([2.0, 0.5]), PHI)
    assert bzz_pairing(BForm(np.zeros((2, 2))), noise) == 0.0


def test_bzz_diagonal_form():
    noise = NoiseModel(np.eye(2), PHI)
    assert bzz_pairing(BForm(np.diag([2.0, 0.0])), noise) == pytest.approx(10.0)


def test_bzz_linear_and_monotone_in_form():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d, m = 5, 3
        q = random_psd(rng, m, m)
        noise = NoiseModel(q, rng.standard_normal((d, m)))
        b1 = random_psd(rng, d, 3)
        b2 = random_psd(rng, d, 2)
        p1 = bzz_pairing(BForm(b1), noise)
        p2 = bzz_pairing(BForm(b2), noise)
        assert bzz_pairing(BForm(2.0 * b1 + b2), noise) == pytest.approx(2 * p1 + p2, rel=1e-12)
        # b1 + b2 dominates b2
        assert bzz_pairing(BForm(b1 + b2), noise) >= p2


def test_bzz_equals_hs_norm_for_gram_form():
    rng = np.random.default_rng(11)
    for _ in range(10):
        d, m = 4, 6
        w = random_psd(rng, d, d) + 0.1 * np.eye(d)
        q = random_psd(rng, m, 4)
        phi = rng.standard_normal((d, m))
        noise = NoiseModel(q, phi)
        # HS norm squared via the Frobenius form trace(W Phi Q Phi^T)
        frob = np.trace(w @ phi @ q @ phi.T)
        assert bzz_pairing(BForm(w), noise, w) == pytest.approx(frob, rel=1e-10)
        assert hs_norm_sq(noise, w) == pytest.approx(frob, rel=1e-10)


def test_long_null_residuals_dropped():
    # weak directions give long B-unit vectors; null-space residuals then
    # carry roundoff energy above an absolute threshold
    for seed in range(20):
        rng = np.random.default_rng(seed)
        rank = int(rng.integers(1, 40))
        form = BForm(random_psd(rng, 48, rank))
        basis = b_gram_schmidt(form, rng.standard_normal((48, 48)))
        assert len(basis) == rank
        assert np.abs(basis.gram() - np.eye(rank)).max() <= 1e-8
