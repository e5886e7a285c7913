"""
Dimensionality reduction of a CLR tensor into a loading matrix and scores.

Three estimators share one output type:

* ``pca_unfolded`` -- PCA on the time-mode unfolding (``N_grid x T``).
* ``mlpca`` -- multilinear PCA (Tucker loadings), fitted by alternating
  per-mode SVD maximization of the projected variance with random restarts.
* ``cp_als`` -- CANDECOMP/PARAFAC with a rank shared across modes, fitted by
  alternating least squares with random restarts.

All of them center the tensor on its time-mean field by default; the mean is
kept on the ``LoadingSet`` and added back by ``reconstruct``.

Modes are 0-based numpy axes. For a tensor with ``d`` grid axes the time mode
is axis ``d``. Vectorization is column-major (first grid axis fastest), so a
Tucker score vector is ``vec`` of the projected core in Fortran order and the
flat loading matrix is ``H_d kron ... kron H_1``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import reduce
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .density_panel import ClrTensor
from .exceptions import ConvergenceError, RankError, ShapeError

logger = logging.getLogger(__name__)

FLAT, TUCKER, CP = "flat", "tucker", "cp"
METHODS = (FLAT, TUCKER, CP)


@dataclass
class LoadingSet:
    """Basis loadings evaluated on the grid.

    ``flat_H`` is always materialized (``N_grid x K``); ``mode_loadings`` holds
    the per-axis factors for Tucker and CP fits.
    """

    kind: str
    flat_H: np.ndarray
    ranks: tuple
    explained_variance: float
    grid_shape: tuple
    mean: np.ndarray
    mode_loadings: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    seed: Optional[int] = None
    converged: bool = True

    @property
    def K(self) -> int:
        return self.flat_H.shape[1]

    @property
    def n_loadings(self) -> int:
        """Number of free loading entries the method estimates."""
        if self.kind == FLAT:
            return self.flat_H.size
        if self.kind == TUCKER:
            return sum(n * k for n, k in zip(self.grid_shape, self.ranks))
        return self.ranks[0] * sum(self.grid_shape)

    def project(self, flat_fields: np.ndarray) -> np.ndarray:
        """Least-squares scores for ``N_grid x T`` fields (mean removed first)."""
        centered = flat_fields - self.mean[:, None]
        return np.linalg.lstsq(self.flat_H, centered, rcond=None)[0].T

    def reconstruct(self, scores: np.ndarray) -> np.ndarray:
        """Fields (``N_grid x T``) implied by a ``T x K`` score matrix."""
        return self.mean[:, None] + self.flat_H @ np.atleast_2d(scores).T

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "ranks": list(self.ranks),
            "K": self.K,
            "explained_variance": self.explained_variance,
            "grid_shape": list(self.grid_shape),
            "n_loadings": self.n_loadings,
            "seed": self.seed,
            "converged": self.converged,
            "iterations": len(self.objective_history),
        }


@dataclass
class ScorePath:
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        if not np.all(np.isfinite(self.scores)):
            raise ShapeError("scores must be finite")

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    @property
    def K(self) -> int:
        return self.scores.shape[1]


def _data(tensor) -> np.ndarray:
    return tensor.data if isinstance(tensor, ClrTensor) else np.asarray(tensor, dtype=float)


def unfold(tensor, mode: int) -> np.ndarray:
    """Matrix with one row per fiber of ``mode``.

    Rows run over the remaining indices in ascending-mode order with the
    lowest mode fastest; columns run over ``mode``. The time-mode unfolding of
    an ``N_1 x N_2 x T`` tensor is therefore the ``N_1 N_2 x T`` matrix whose
    column ``t`` is the column-major vectorization of slice ``t``.
    """
    X = _data(tensor)
    if not -X.ndim <= mode < X.ndim:
        raise IndexError(f"mode {mode} out of range for a {X.ndim}-way tensor")
    mode = mode % X.ndim
    return np.moveaxis(X, mode, -1).reshape(-1, X.shape[mode], order="F")


def fold(matrix: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    mode = mode % len(shape)
    rest = shape[:mode] + shape[mode + 1:]
    arr = np.asarray(matrix).reshape(rest + (shape[mode],), order="F")
    return np.moveaxis(arr, -1, mode)


def mode_n_product(tensor, matrix, mode: int) -> np.ndarray:
    """Contract ``matrix`` (``J x N_mode``) with the ``mode`` axis of ``tensor``."""
    X = _data(tensor)
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    mode = mode % X.ndim
    if A.shape[1] != X.shape[mode]:
        raise ShapeError(f"matrix has {A.shape[1]} columns, tensor mode {mode} has size {X.shape[mode]}")
    return np.moveaxis(np.tensordot(A, X, axes=(1, mode)), 0, mode)


def _sign_fix(M: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive.
    idx = np.argmax(np.abs(M), axis=0)
    signs = np.sign(M[idx, np.arange(M.shape[1])])
    signs[signs == 0] = 1.0
    return M * signs


def _center(X: np.ndarray, center: bool):
    if center:
        mean = X.mean(axis=-1)
        return X - mean[..., None], mean
    return X, np.zeros(X.shape[:-1])


def _random_orthonormal(rng, n, k):
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


# -- flat PCA ----------------------------------------------------------------

def pca_unfolded(L_tilde, K: int, center: bool = True, grid_shape=None):
    """PCA of the ``N_grid x T`` unfolded CLR matrix via the SVD.

    Returns
    -------
    (LoadingSet, ScorePath)
        ``flat_H`` holds the top-``K`` left singular vectors; scores are
        ``flat_H.T @ (l_t - mean)``.
    """
    L = np.asarray(L_tilde, dtype=float)
    if L.ndim != 2:
        raise ShapeError("pca_unfolded expects a matrix")
    N, T = L.shape
    if not 1 <= K <= min(N, T):
        raise RankError(f"K={K} must lie in [1, {min(N, T)}]")
    Lc, mean = _center(L, center)
    U, s, _ = np.linalg.svd(Lc, full_matrices=False)
    total = float(np.sum(s ** 2))
    ev = 1.0 if total == 0 else float(np.sum(s[:K] ** 2) / total)
    H = _sign_fix(U[:, :K])
    scores = (H.T @ Lc).T
    loading = LoadingSet(FLAT, H, (K,), min(ev, 1.0), tuple(grid_shape or (N,)), mean)
    return loading, ScorePath(scores)


def flat_explained_variance(L_tilde, center: bool = True) -> np.ndarray:
    """Cumulative explained-variance ratios for K = 1, 2, ..."""
    Lc, _ = _center(np.asarray(L_tilde, dtype=float), center)
    s2 = np.linalg.svd(Lc, compute_uv=False) ** 2
    total = s2.sum()
    return np.ones_like(s2) if total == 0 else np.cumsum(s2) / total


# -- Tucker / MLPCA ----------------------------------------------------------

def _project_except(X, Hs, skip):
    Y = X
    for i, H in enumerate(Hs):
        if i != skip:
            Y = mode_n_product(Y, H.T, i)
    return Y


def _hooi(X, ranks, H0, epsilon, max_iter, total):
    Hs = [H.copy() for H in H0]
    d = len(ranks)
    T = X.shape[-1]
    history = []
    core = _project_except(X, Hs, -1)
    prev = float(np.sum(core ** 2)) / T
    for _ in range(max_iter):
        for i in range(d):
            Y = _project_except(X, Hs, i)
            # Mode-i fibers as rows of Y_(i); top left singular vectors maximize
            # the projected energy with every other mode fixed.
            Yi = np.moveaxis(Y, i, 0).reshape(X.shape[i], -1)
            U, _, _ = np.linalg.svd(Yi, full_matrices=False)
            Hs[i] = U[:, : ranks[i]]
        core = _project_except(X, Hs, -1)
        obj = float(np.sum(core ** 2)) / T
        history.append(obj)
        if obj - prev < epsilon * max(total, np.finfo(float).tiny):
            return Hs, history, True
        prev = obj
    return Hs, history, False


def mlpca(tensor, ranks, restarts: int = 10, epsilon: float = 1e-9, max_iter: int = 500,
          seed: int = 0, center: bool = True):
    """Multilinear PCA: orthonormal loadings ``H_i`` (``N_i x K_i``) per grid axis.

    Maximizes ``T^-1 sum_t ||L_t x_1 H_1' ... x_d H_d'||^2`` by alternating
    SVD updates from ``restarts`` random orthonormal starts; the start with the
    largest converged objective wins (lowest restart index on ties). Iteration
    stops once the objective gains less than ``epsilon`` times the total
    variance.

    Raises
    ------
    ConvergenceError
        If no restart converges within ``max_iter`` sweeps.
    """
    X = _data(tensor)
    d = X.ndim - 1
    ranks = tuple(int(k) for k in np.atleast_1d(ranks))
    if len(ranks) != d:
        raise RankError(f"need {d} ranks, got {ranks}")
    for k, n in zip(ranks, X.shape[:-1]):
        if not 1 <= k <= n:
            raise RankError(f"rank {k} outside [1, {n}]")
    Xc, mean = _center(X, center)
    T = X.shape[-1]
    total = float(np.sum(Xc ** 2)) / T
    rng = np.random.default_rng(seed)

    best = None
    last = None
    for r in range(restarts):
        H0 = [_random_orthonormal(rng, n, k) for n, k in zip(X.shape[:-1], ranks)]
        Hs, hist, ok = _hooi(Xc, ranks, H0, epsilon, max_iter, total)
        last = (hist[-1], hist)
        if ok and (best is None or hist[-1] > best[1][-1] + 1e-12 * max(total, 1.0)):
            best = (Hs, hist)
    if best is None:
        raise ConvergenceError(f"mlpca did not converge in {max_iter} iterations", last[0], last[1])

    Hs = [_sign_fix(H) for H in best[0]]
    core = _project_except(Xc, Hs, -1)
    scores = core.reshape(-1, T, order="F").T
    flat_H = reduce(lambda acc, H: np.kron(H, acc), Hs[1:], Hs[0])
    ev = 1.0 if total == 0 else float(np.sum(core ** 2) / T / total)
    loading = LoadingSet(TUCKER, flat_H, ranks, min(ev, 1.0), X.shape[:-1], mean.ravel(order="F"),
                         mode_loadings=Hs, objective_history=best[1], seed=seed)
    return loading, ScorePath(scores)


# -- CP / ALS ----------------------------------------------------------------

def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product with the first matrix varying fastest."""
    K = mats[0].shape[1]
    out = mats[0]
    for M in mats[1:]:
        out = (M[:, None, :] * out[None, :, :]).reshape(-1, K)
    return out


def cp_to_tensor(factors: Sequence[np.ndarray]) -> np.ndarray:
    shape = tuple(F.shape[0] for F in factors)
    return (khatri_rao(factors) @ np.ones(factors[0].shape[1])).reshape(shape, order="F")


def _kolda_unfold(X, mode):
    # N_mode x prod(rest), remaining modes ascending with the lowest fastest.
    return unfold(X, mode).T


def _als(X, K, F0, epsilon, max_iter, norm_x):
    F = [f.copy() for f in F0]
    n = X.ndim
    unfolded = [_kolda_unfold(X, m) for m in range(n)]
    history = []
    prev = -np.inf
    for _ in range(max_iter):
        for m in range(n):
            others = [F[i] for i in range(n) if i != m]
            gram = reduce(np.multiply, [f.T @ f for f in others])
            mttkrp = unfolded[m] @ khatri_rao(others)
            F[m] = np.linalg.lstsq(gram, mttkrp.T, rcond=None)[0].T
        resid = np.linalg.norm(X - cp_to_tensor(F))
        fit = 1.0 - resid / norm_x if norm_x > 0 else 1.0
        history.append(float(fit))
        if fit - prev < epsilon:
            return F, history, True
        prev = fit
    return F, history, False


def _normalize_cp(F):
    # Grid-axis vectors to unit norm; magnitude absorbed by the time factor.
    F = [f.copy() for f in F]
    for m in range(len(F) - 1):
        norms = np.linalg.norm(F[m], axis=0)
        norms[norms == 0] = 1.0
        F[m] = F[m] / norms
        F[-1] = F[-1] * norms
    for m in range(len(F) - 1):
        idx = np.argmax(np.abs(F[m]), axis=0)
        s = np.sign(F[m][idx, np.arange(F[m].shape[1])])
        s[s == 0] = 1.0
        F[m] = F[m] * s
        F[-1] = F[-1] * s
    return F


def cp_als(tensor, K: int, restarts: int = 10, epsilon: float = 1e-9, max_iter: int = 2000,
           seed: int = 0, center: bool = True):
    """Rank-``K`` CP decomposition ``L_t = sum_k beta_tk h_k^(1) o ... o h_k^(d)``.

    The time axis is the score factor. Fit (``1 - ||resid|| / ||X||``) is
    non-decreasing across sweeps; iteration stops when it gains less than
    ``epsilon``.
    """
    X = _data(tensor)
    K = int(K)
    if K < 1:
        raise RankError(f"K must be >= 1, got {K}")
    Xc, mean = _center(X, center)
    norm_x = float(np.linalg.norm(Xc))
    rng = np.random.default_rng(seed)

    best = None
    last = None
    for _ in range(restarts):
        F0 = [rng.standard_normal((n, K)) for n in X.shape]
        F, hist, ok = _als(Xc, K, F0, epsilon, max_iter, norm_x)
        last = (hist[-1], hist)
        if ok and (best is None or hist[-1] > best[1][-1] + 1e-12):
            best = (F, hist)
    if best is None:
        raise ConvergenceError(f"cp_als did not converge in {max_iter} iterations", last[0], last[1])

    F = _normalize_cp(best[0])
    modes, scores = F[:-1], F[-1]
    flat_H = khatri_rao(modes)
    resid = Xc - cp_to_tensor(F)
    total = float(np.sum(Xc ** 2))
    ev = 1.0 if total == 0 else float(1.0 - np.sum(resid ** 2) / total)
    loading = LoadingSet(CP, flat_H, (K,), float(np.clip(ev, 0.0, 1.0)), X.shape[:-1],
                         mean.ravel(order="F"), mode_loadings=modes, objective_history=best[1], seed=seed)
    return loading, ScorePath(scores)


# -- rank selection ------------------------------------------------------------

def reconstruction_error(tensor, loading: LoadingSet, scores: ScorePath, relative: bool = True) -> float:
    X = _data(tensor)
    L = X.reshape(-1, X.shape[-1], order="F")
    err = np.linalg.norm(L - loading.reconstruct(scores.scores))
    if relative:
        return float(err / max(np.linalg.norm(L), np.finfo(float).tiny))
    return float(err)


def _tucker_candidates(shape):
    cands = list(product(*[range(1, n + 1) for n in shape]))
    return sorted(cands, key=lambda r: (int(np.prod(r)), r))


def select_rank(tensor, method: str, threshold: float, restarts: int = 3, seed: int = 0,
                center: bool = True):
    """Smallest rank whose explained variance reaches ``threshold``.

    Tucker candidates are scanned by total size ``prod(K_i)`` and then
    lexicographically.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    X = _data(tensor)
    method = method.lower()
    if method == FLAT:
        cum = flat_explained_variance(X.reshape(-1, X.shape[-1], order="F"), center)
        return (int(np.argmax(cum >= threshold - 1e-12)) + 1,)
    if method == TUCKER:
        for ranks in _tucker_candidates(X.shape[:-1]):
            loading, _ = mlpca(X, ranks, restarts=restarts, seed=seed, center=center)
            if loading.explained_variance >= threshold - 1e-12:
                return tuple(ranks)
        return tuple(X.shape[:-1])
    if method == CP:
        k = 1
        while True:
            try:
                loading, _ = cp_als(X, k, restarts=restarts, seed=seed, center=center)
                if loading.explained_variance >= threshold - 1e-12:
                    return (k,)
            except ConvergenceError as exc:
                logger.warning("cp_als rank %d did not converge (fit %.6g)", k, exc.objective)
            if k >= int(np.prod(X.shape[:-1])):
                return (k,)
            k += 1
    raise ValueError(f"unknown method {method!r}")


def factorize(tensor: ClrTensor, method: str = FLAT, ranks=None, threshold: Optional[float] = None,
              restarts: int = 10, epsilon: float = 1e-9, seed: int = 0):
    """Dispatch to one of the three estimators, selecting ranks if not given."""
    method = method.lower()
    if ranks is None:
        if threshold is None:
            raise RankError("give either ranks or a threshold")
        ranks = select_rank(tensor, method, threshold, seed=seed)
    ranks = tuple(int(k) for k in np.atleast_1d(ranks))
    if method == FLAT:
        return pca_unfolded(tensor.flat(), ranks[0], grid_shape=tensor.grid.shape)
    if method == TUCKER:
        return mlpca(tensor, ranks, restarts=restarts, epsilon=epsilon, seed=seed)
    if method == CP:
        return cp_als(tensor, ranks[0], restarts=restarts, epsilon=epsilon, seed=seed)
    raise ValueError(f"unknown method {method!r}")


# -- persistence -----------------------------------------------------------------

def _write_matrix(path, M):
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17g")


def save_loading(directory, loading: LoadingSet, scores: Optional[ScorePath] = None) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_matrix(d / "flat_H.csv", loading.flat_H)
    _write_matrix(d / "mean.csv", loading.mean[:, None])
    for i, M in enumerate(loading.mode_loadings):
        _write_matrix(d / f"mode_{i + 1}.csv", M)
    if scores is not None:
        _write_matrix(d / "scores.csv", scores.scores)
    (d / "loading.json").write_text(json.dumps(loading.manifest(), indent=2, sort_keys=True) + "\n")


def load_loading(directory):
    from pathlib import Path

    d = Path(directory)
    meta = json.loads((d / "loading.json").read_text())
    flat_H = np.loadtxt(d / "flat_H.csv", delimiter=",", ndmin=2)
    mean = np.loadtxt(d / "mean.csv", delimiter=",", ndmin=1)
    modes = []
    i = 1
    while (d / f"mode_{i}.csv").exists():
        modes.append(np.loadtxt(d / f"mode_{i}.csv", delimiter=",", ndmin=2))
        i += 1
    loading = LoadingSet(meta["kind"], flat_H, tuple(meta["ranks"]), meta["explained_variance"],
                         tuple(meta["grid_shape"]), mean, mode_loadings=modes, seed=meta.get("seed"),
                         converged=meta.get("converged", True))
    scores = None
    if (d / "scores.csv").exists():
        scores = ScorePath(np.loadtxt(d / "scores.csv", delimiter=",", ndmin=2))
    return loading, scores
