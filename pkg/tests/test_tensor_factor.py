import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funvar import density_panel as dp
from funvar import tensor_factor as tf
from funvar.exceptions import ConvergenceError, RankError, ShapeError


def orthonormal(rng, n, k):
    return np.linalg.qr(rng.standard_normal((n, k)))[0]


def tucker_fixture(rng, n1=10, n2=10, k1=2, k2=2, T=30):
    H1, H2 = orthonormal(rng, n1, k1), orthonormal(rng, n2, k2)
    scale = np.array([[3.0, 1.0], [1.5, 0.7]])[:k1, :k2]
    B = rng.standard_normal((T, k1, k2)) * scale
    X = np.einsum("ia,tab,jb->ijt", H1, B, H2)
    return X - X.mean(axis=-1, keepdims=True), H1, H2


def cp_fixture(rng, n1=8, n2=9, T=25):
    u = orthonormal(rng, n1, 2)
    v = orthonormal(rng, n2, 2)
    beta = rng.standard_normal((T, 2)) * [4.0, 1.5]
    beta -= beta.mean(axis=0)
    return np.einsum("ik,jk,tk->ijt", u, v, beta)


def proj(M):
    Q = np.linalg.qr(M)[0]
    return Q @ Q.T


def test_unfold_index_convention():
    a = np.empty((2, 2, 2))
    for i in range(2):
        for j in range(2):
            for t in range(2):
                a[i, j, t] = 100 * (i + 1) + 10 * (j + 1) + (t + 1)
    np.testing.assert_array_equal(tf.unfold(a, 2), [[111, 112], [211, 212], [121, 122], [221, 222]])


def test_unfold_single_period_and_range():
    a = np.arange(6.0).reshape(2, 3, 1)
    assert tf.unfold(a, 2).shape == (6, 1)
    with pytest.raises(IndexError):
        tf.unfold(a, 3)


@settings(max_examples=40, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=2, max_size=4), mode=st.integers(0, 3), seed=st.integers(0, 999))
def test_fold_inverts_unfold(shape, mode, seed):
    mode = mode % len(shape)
    X = np.random.default_rng(seed).standard_normal(shape)
    np.testing.assert_array_equal(tf.fold(tf.unfold(X, mode), mode, X.shape), X)


def test_mode_n_product_properties():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 5, 6))
    np.testing.assert_allclose(tf.mode_n_product(X, np.eye(5), 1), X)
    avg = tf.mode_n_product(X, np.ones((1, 4)) / 4, 0)
    np.testing.assert_allclose(avg[0], X.mean(axis=0))
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((2, 5))
    np.testing.assert_allclose(tf.mode_n_product(tf.mode_n_product(X, A, 0), B, 1),
                               tf.mode_n_product(tf.mode_n_product(X, B, 1), A, 0))
    with pytest.raises(ShapeError):
        tf.mode_n_product(X, np.eye(3), 1)


def test_pca_rank_one_exact():
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal(20), rng.standard_normal(15)
    L = np.outer(u, v)
    loading, scores = tf.pca_unfolded(L, 1, center=False)
    assert loading.explained_variance == pytest.approx(1.0)
    assert np.abs(loading.reconstruct(scores.scores) - L).max() < 1e-10
    np.testing.assert_allclose(loading.flat_H.T @ loading.flat_H, np.eye(1), atol=1e-12)


def test_pca_full_rank_and_bounds():
    rng = np.random.default_rng(2)
    L = rng.standard_normal((6, 9))
    loading, scores = tf.pca_unfolded(L, 6, center=False)
    np.testing.assert_allclose(loading.reconstruct(scores.scores), L, atol=1e-12)
    for K in (0, 7):
        with pytest.raises(RankError):
            tf.pca_unfolded(L, K)


def test_pca_error_non_increasing_in_rank():
    rng = np.random.default_rng(3)
    L = rng.standard_normal((100, 250))
    errs = []
    for K in range(1, 11):
        loading, scores = tf.pca_unfolded(L, K)
        errs.append(np.linalg.norm(L - loading.reconstruct(scores.scores)))
    assert np.all(np.diff(errs) <= 1e-10)


def test_pca_residual_orthogonal_to_loadings():
    rng = np.random.default_rng(4)
    L = rng.standard_normal((30, 40))
    loading, scores = tf.pca_unfolded(L, 3)
    resid = L - loading.reconstruct(scores.scores)
    assert np.abs(loading.flat_H.T @ resid).max() < 1e-8
    # sign convention: largest entry of each column is positive
    H = loading.flat_H
    assert np.all(H[np.argmax(np.abs(H), axis=0), np.arange(3)] > 0)


def test_mlpca_recovers_exact_tucker():
    rng = np.random.default_rng(5)
    X, H1, H2 = tucker_fixture(rng)
    loading, scores = tf.mlpca(X, (2, 2), restarts=10)
    assert tf.reconstruction_error(X, loading, scores) < 1e-8
    np.testing.assert_allclose(proj(loading.mode_loadings[0]), proj(H1), atol=1e-8)
    np.testing.assert_allclose(proj(loading.mode_loadings[1]), proj(H2), atol=1e-8)
    G1, G2 = loading.mode_loadings
    np.testing.assert_array_equal(loading.flat_H, np.kron(G2, G1))
    np.testing.assert_allclose(loading.flat_H.T @ loading.flat_H, np.eye(4), atol=1e-8)
    assert loading.n_loadings == 10 * 2 + 10 * 2


def test_mlpca_score_layout_is_column_major_core():
    rng = np.random.default_rng(6)
    X, _, _ = tucker_fixture(rng, 6, 5, 2, 2, 12)
    loading, scores = tf.mlpca(X, (2, 2), restarts=2)
    G1, G2 = loading.mode_loadings
    core_t = G1.T @ X[..., 3] @ G2
    np.testing.assert_allclose(scores.scores[3], core_t.ravel(order="F"), atol=1e-12)


def test_mlpca_full_rank_is_exact():
    X = np.random.default_rng(7).standard_normal((4, 3, 10))
    loading, scores = tf.mlpca(X, (4, 3), restarts=2)
    assert tf.reconstruction_error(X, loading, scores) < 1e-10


def test_mlpca_nine_basis_functions():
    X = np.random.default_rng(8).standard_normal((8, 8, 30))
    loading, scores = tf.mlpca(X, (3, 3), restarts=2)
    assert loading.K == 9 and scores.scores.shape == (30, 9)


def test_mlpca_errors():
    X = np.random.default_rng(9).standard_normal((5, 5, 20))
    with pytest.raises(RankError):
        tf.mlpca(X, (6, 2))
    with pytest.raises(RankError):
        tf.mlpca(X, (2,))
    # a negative tolerance can never be met
    with pytest.raises(ConvergenceError) as info:
        tf.mlpca(X, (2, 2), restarts=1, max_iter=3, epsilon=-1.0)
    assert info.value.objective is not None and len(info.value.history) == 3


def test_cp_rank_one_and_rank_two():
    rng = np.random.default_rng(10)
    u, v = rng.standard_normal(7), rng.standard_normal(6)
    beta = rng.standard_normal(20)
    X1 = np.einsum("i,j,t->ijt", u, v, beta - beta.mean())
    loading, scores = tf.cp_als(X1, 1, restarts=3)
    assert tf.reconstruction_error(X1, loading, scores) < 1e-8
    X2 = cp_fixture(rng)
    loading, scores = tf.cp_als(X2, 2, restarts=10)
    assert tf.reconstruction_error(X2, loading, scores) < 1e-6
    assert loading.n_loadings == 2 * (8 + 9)
    for k in range(2):
        a, b = loading.mode_loadings[0][:, k], loading.mode_loadings[1][:, k]
        np.testing.assert_allclose(loading.flat_H[:, k], np.outer(a, b).ravel(order="F"))
        assert np.linalg.norm(a) == pytest.approx(1.0)


def test_khatri_rao_matches_kron_columns():
    rng = np.random.default_rng(11)
    A, B = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    KR = tf.khatri_rao([A, B])
    for k in range(2):
        np.testing.assert_allclose(KR[:, k], np.kron(B[:, k], A[:, k]))


@pytest.mark.parametrize("seed", range(3))
def test_error_non_increasing_in_rank(seed):
    X = np.random.default_rng(seed).standard_normal((6, 5, 15))
    errs = []
    for r in [(1, 1), (2, 1), (2, 2), (3, 2), (3, 3)]:
        loading, scores = tf.mlpca(X, r, restarts=5, seed=0)
        errs.append(tf.reconstruction_error(X, loading, scores))
    assert np.all(np.diff(errs) <= 1e-9)


def test_select_rank():
    rng = np.random.default_rng(12)
    X, _, _ = tucker_fixture(rng, 6, 6, 2, 2, 25)
    assert tf.select_rank(X, "tucker", 0.99) == (2, 2)
    u, v = rng.standard_normal(5), rng.standard_normal(4)
    beta = rng.standard_normal(10)
    assert tf.select_rank(np.einsum("i,j,t->ijt", u, v, beta), "flat", 0.999) == (1,)
    noisy = rng.standard_normal((4, 4, 40))
    assert tf.select_rank(noisy, "flat", 0.999999) == (16,)
    with pytest.raises(ValueError):
        tf.select_rank(noisy, "flat", 1.0)


def test_factorize_and_persistence(tmp_path):
    rng = np.random.default_rng(13)
    g = dp.GridSpec((6, 6), ((0, 1), (0, 1)))
    X, _, _ = tucker_fixture(rng, 6, 6, 2, 2, 20)
    tens = dp.ClrTensor(g, X - X.mean(axis=(0, 1)))
    for method, ranks in (("flat", (4,)), ("tucker", (2, 2)), ("cp", (2,))):
        loading, scores = tf.factorize(tens, method, ranks, restarts=3)
        tf.save_loading(tmp_path / method, loading, scores)
        back, back_scores = tf.load_loading(tmp_path / method)
        np.testing.assert_array_equal(back.flat_H, loading.flat_H)
        np.testing.assert_array_equal(back.mean, loading.mean)
        np.testing.assert_array_equal(back_scores.scores, scores.scores)
        assert back.kind == loading.kind and back.ranks == loading.ranks
    with pytest.raises(RankError):
        tf.factorize(tens, "flat")


def test_project_inverts_reconstruct():
    rng = np.random.default_rng(14)
    L = rng.standard_normal((12, 30))
    loading, scores = tf.pca_unfolded(L, 4)
    np.testing.assert_allclose(loading.project(loading.reconstruct(scores.scores)), scores.scores, atol=1e-10)
