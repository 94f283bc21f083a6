import numpy as np
import pytest

from starlab.numerics import (JacobiConvergenceError, Rng, gaussian_matrix,
                              mean_singular_value, orthogonal_matrix,
                              orthogonal_stack, singular_values)


def test_same_seed_same_matrix():
    a = gaussian_matrix(Rng(1), 2, 2)
    b = gaussian_matrix(Rng(1), 2, 2)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    a = gaussian_matrix(Rng(1, 0), 4, 4)
    b = gaussian_matrix(Rng(1, 1), 4, 4)
    assert not np.allclose(a, b)


def test_derive_is_deterministic_and_splits():
    r = Rng(7)
    a = r.derive(3, 5).uniforms(8)
    b = Rng(7).derive(3, 5).uniforms(8)
    c = r.derive(3, 6).uniforms(8)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_gaussian_law_of_large_numbers():
    # sample mean of 1e6 standard normals: 0 +- 0.01 (10 sigma)
    x = Rng(123).normals(1_000_000)
    assert abs(x.mean()) < 0.01
    assert abs(x.std() - 1.0) < 0.01


def test_uniforms_in_range():
    u = Rng(5).uniforms(10000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_integers_below_covers_range():
    v = Rng(5).integers_below(7, 5000)
    assert set(np.unique(v)) == set(range(7))


def test_shuffled_is_permutation():
    p = Rng(9).shuffled(100)
    assert sorted(p.tolist()) == list(range(100))
    assert np.array_equal(p, Rng(9).shuffled(100))


def test_orthogonal_square():
    q = orthogonal_matrix(Rng(2), 8, 8)
    assert np.abs(q.T @ q - np.eye(8)).max() <= 1e-12


def test_orthogonal_unit_spectrum():
    q = orthogonal_matrix(Rng(3), 8, 8)
    sv = singular_values(q)
    assert np.abs(sv - 1.0).max() <= 1e-10


def test_orthogonal_isometry():
    q = orthogonal_matrix(Rng(4), 12, 12)
    v = Rng(5).normals(12)
    assert abs(np.linalg.norm(q @ v) - np.linalg.norm(v)) <= 1e-12


@pytest.mark.parametrize("rows,cols", [(6, 3), (3, 6), (10, 1)])
def test_semi_orthogonal_shapes(rows, cols):
    q = orthogonal_matrix(Rng(6), rows, cols)
    assert q.shape == (rows, cols)
    small = q.T @ q if rows >= cols else q @ q.T
    assert np.abs(small - np.eye(min(rows, cols))).max() <= 1e-12


def test_orthogonal_stack_matches_contract():
    qs = orthogonal_stack(Rng(8), 16, 5)
    assert qs.shape == (5, 16, 16)
    for q in qs:
        assert np.abs(q.T @ q - np.eye(16)).max() <= 1e-12


def test_singular_values_identity():
    assert np.allclose(singular_values(np.eye(3)), [1, 1, 1])


def test_singular_values_padded_diag():
    m = np.zeros((2, 2))
    m[0, 0], m[1, 1] = 3.0, 2.0
    assert np.allclose(singular_values(m), [3, 2])


def test_singular_values_scaled_orthogonal():
    q = orthogonal_matrix(Rng(11), 16, 16)
    sv = singular_values(0.25 * q)
    assert np.abs(sv - 0.25).max() <= 1e-10


def test_spectrum_scaling_property():
    a = gaussian_matrix(Rng(12), 7, 5)
    sv = singular_values(a)
    sv_scaled = singular_values(-2.5 * a)
    assert np.abs(sv_scaled - 2.5 * sv).max() <= 1e-10 * max(1.0, sv.max())


def test_jacobi_det_product_oracle():
    # product of singular values equals |det| on random 5x5 matrices
    for seed in range(10):
        a = gaussian_matrix(Rng(100 + seed), 5, 5)
        sv = singular_values(a)
        assert np.prod(sv) == pytest.approx(abs(np.linalg.det(a)), rel=1e-8)


def test_jacobi_against_lapack():
    for seed, (r, c) in enumerate([(6, 6), (9, 4), (4, 9), (30, 30)]):
        a = gaussian_matrix(Rng(200 + seed), r, c)
        ours = singular_values(a)
        ref = np.linalg.svd(a, compute_uv=False)
        assert np.abs(ours - ref).max() <= 1e-10 * max(1.0, ref.max())


def test_zero_matrix_spectrum():
    assert np.array_equal(singular_values(np.zeros((4, 4))), np.zeros(4))
    assert mean_singular_value(np.zeros((4, 4))) == 0.0


def test_mean_singular_value_orthogonal():
    q = orthogonal_matrix(Rng(13), 10, 10)
    assert mean_singular_value(q) == pytest.approx(1.0, abs=1e-10)
    assert mean_singular_value(0.5 * q) == pytest.approx(0.5, abs=1e-10)


def test_nonfinite_rejected():
    m = np.eye(3)
    m[1, 1] = np.nan
    with pytest.raises(ValueError):
        singular_values(m)


def test_non_convergence_reports():
    a = gaussian_matrix(Rng(14), 8, 8)
    with pytest.raises(JacobiConvergenceError):
        singular_values(a, max_sweeps=0)
