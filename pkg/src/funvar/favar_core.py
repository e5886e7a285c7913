"""
Bayesian estimation of the factor-augmented VAR state space.

The state is ``w_t = [y_t; beta_t]`` (``n_y`` observed aggregates followed by
``K`` latent factor scores) with VAR(p) dynamics

    w_t = Phi_0 + Phi_1 w_{t-1} + ... + Phi_p w_{t-p} + u_t,   u_t ~ N(0, Sigma),

and the centered CLR field observed as ``l_t = H beta_t + e_t``,
``e_t ~ N(0, sigma2 I)`` at the periods picked out by the frequency selector.

The sampler cycles through four conditionals: the measurement variance, the
innovation covariance, the VAR coefficients and the full factor path. The
factor path is drawn in one block from its Gaussian conditional through a
banded Cholesky factorization of its precision matrix.

Two priors are supported for ``(Phi, Sigma)``: a normal-inverse-Wishart prior
with Minnesota-style scaling and the equation-by-equation asymmetric conjugate
prior on the triangular form ``A u_t = eps_t``, optionally with group
spike-and-slab shrinkage on the coefficients.

Regression layout: row ``t`` of ``X`` is ``[1, w_{t-1}', ..., w_{t-p}']`` and
``B`` is the ``(1 + m p) x m`` coefficient matrix with ``Y = X B + U``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.linalg import lapack

from .exceptions import DivergenceError, InvalidConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

NIW, ASYM = "niw", "asym"


# -- containers ----------------------------------------------------------------

@dataclass
class VarParams:
    n_y: int
    K: int
    p: int
    Phi0: np.ndarray
    Phi: np.ndarray  # (p, m, m)
    Sigma: np.ndarray

    def __post_init__(self):
        m = self.n_y + self.K
        self.Phi0 = np.asarray(self.Phi0, dtype=float).reshape(m)
        self.Phi = np.asarray(self.Phi, dtype=float).reshape(self.p, m, m)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.Sigma.shape != (m, m):
            raise ShapeError(f"Sigma must be {m}x{m}")
        if not np.allclose(self.Sigma, self.Sigma.T, atol=1e-10, rtol=0):
            raise NumericalError("Sigma is not symmetric")

    @property
    def m(self) -> int:
        return self.n_y + self.K

    @property
    def B(self) -> np.ndarray:
        """Coefficients in regression layout, ``(1 + m p) x m``."""
        return np.vstack([self.Phi0[None, :]] + [P.T for P in self.Phi])

    @classmethod
    def from_B(cls, B, Sigma, n_y, K, p):
        m = n_y + K
        B = np.asarray(B, dtype=float)
        Phi = np.stack([B[1 + l * m: 1 + (l + 1) * m].T for l in range(p)]) if p else np.zeros((0, m, m))
        return cls(n_y, K, p, B[0], Phi, Sigma)

    def companion(self) -> np.ndarray:
        m, p = self.m, self.p
        C = np.zeros((m * p, m * p))
        C[:m] = np.hstack(list(self.Phi))
        C[m:, :-m] = np.eye(m * (p - 1))
        return C

    def spectral_radius(self) -> float:
        if self.p == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    def is_stable(self) -> bool:
        return self.spectral_radius() < 1.0

    def unconditional_mean(self) -> np.ndarray:
        A = np.eye(self.m) - self.Phi.sum(axis=0)
        return np.linalg.solve(A, self.Phi0)


@dataclass
class SpikeSlabConfig:
    """Group spike-and-slab shrinkage on the non-intercept coefficients.

    ``groups`` lists group sizes that partition the ``m p`` lag coefficients of
    each equation in regression-column order (default: one group per lag).
    """

    groups: Optional[Sequence[int]] = None
    a2: float = 1.0
    b2: float = 1.0
    c: float = 1.0
    d: float = 1.0

    def partition(self, n_cols: int) -> list:
        sizes = list(self.groups) if self.groups is not None else None
        if sizes is None:
            raise InvalidConfigError("group sizes not resolved")
        if sum(sizes) != n_cols or min(sizes) < 1:
            raise InvalidConfigError(f"group sizes {sizes} do not partition {n_cols} columns")
        edges = np.concatenate([[0], np.cumsum(sizes)])
        return [np.arange(edges[j], edges[j + 1]) for j in range(len(sizes))]


@dataclass
class PriorConfig:
    """Hyperparameters for ``(Phi, Sigma)`` and the measurement variance.

    Scales ``s2`` default to AR(p) residual variances of the initialized state
    series; ``v0`` and ``nu0`` default to ``m + 2``.
    """

    kind: str = NIW
    s2: Optional[np.ndarray] = None
    v0: Optional[float] = None
    nu0: Optional[float] = None
    S0: Optional[np.ndarray] = None
    B0: Optional[np.ndarray] = None
    V0: Optional[np.ndarray] = None
    kappa0: float = 100.0
    kappa1: float = 1.0
    kappa2: float = 0.25
    own_lag_mean: float = 0.0
    conditional_beta: bool = True
    shrinkage: Optional[SpikeSlabConfig] = None
    sigma2_a0: float = 1e-3
    sigma2_b0: float = 1e-3

    def validate(self, m: int) -> list:
        problems = []
        if self.kind not in (NIW, ASYM):
            problems.append(f"prior kind must be '{NIW}' or '{ASYM}', got {self.kind!r}")
        if self.v0 is not None and not self.v0 > m + 1:
            problems.append(f"v0={self.v0} must exceed m + 1 = {m + 1}")
        if self.nu0 is not None and not self.nu0 > m - 1:
            problems.append(f"nu0={self.nu0} must exceed m - 1 = {m - 1}")
        if self.s2 is not None and np.any(np.asarray(self.s2) <= 0):
            problems.append("s2 scales must be positive")
        for name in ("kappa0", "kappa1", "kappa2", "sigma2_a0", "sigma2_b0"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.shrinkage is not None:
            if self.kind != ASYM:
                problems.append("spike-and-slab shrinkage requires the asymmetric prior")
            for name in ("a2", "b2", "c", "d"):
                if not getattr(self.shrinkage, name) > 0:
                    problems.append(f"shrinkage.{name} must be positive")
        return problems

    def resolved(self, m: int, p: int, s2: np.ndarray) -> "PriorConfig":
        """Copy with every data-dependent default filled in."""
        problems = self.validate(m)
        if problems:
            raise InvalidConfigError("; ".join(problems))
        s2 = np.asarray(self.s2 if self.s2 is not None else s2, dtype=float)
        out = replace(self, s2=s2, v0=self.v0 if self.v0 is not None else m + 2.0,
                      nu0=self.nu0 if self.nu0 is not None else m + 2.0)
        if out.B0 is None:
            B0 = np.zeros((1 + m * p, m))
            if p:
                B0[1:1 + m] = out.own_lag_mean * np.eye(m)
            out.B0 = B0
        if out.S0 is None:
            out.S0 = np.diag(s2) * max(out.nu0 - m - 1.0, 1.0)
        if out.V0 is None:
            out.V0 = minnesota_variances(m, p, s2, out.kappa0, out.kappa1, out.kappa2)
        if out.shrinkage is not None and out.shrinkage.groups is None:
            out.shrinkage = replace(out.shrinkage, groups=[m] * p)
        return out


def minnesota_variances(m, p, s2, kappa0=100.0, kappa1=1.0, kappa2=0.25) -> np.ndarray:
    """Prior variances, ``(1 + m p) x m``; column ``i`` belongs to equation ``i``.

    Intercepts get ``kappa0 / s_i^2``; lag ``l`` of variable ``j`` gets
    ``kappa1 / (l^2 s_j^2)`` in its own equation and ``kappa2 / (l^2 s_j^2)``
    elsewhere. The NIW prior uses the own-lag column for every equation since
    its row covariance is shared.
    """
    s2 = np.asarray(s2, dtype=float)
    V = np.empty((1 + m * p, m))
    V[0] = kappa0 / s2
    for l in range(1, p + 1):
        block = np.full((m, m), kappa2) / (l ** 2 * s2[:, None])
        block[np.diag_indices(m)] = kappa1 / (l ** 2 * s2)
        V[1 + (l - 1) * m: 1 + l * m] = block
    return V


def build_selector(T: int, m: int) -> np.ndarray:
    """Boolean mask over periods ``0..T-1`` marking where the field is observed.

    With frequency ratio ``m`` the field is seen every ``m``-th period, i.e.
    1-based periods ``m, 2m, ...``; trailing periods past the last multiple of
    ``m`` are unobserved.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"frequency ratio must be a positive integer, got {m}")
    if T < 0:
        raise ValueError("T must be nonnegative")
    mask = np.zeros(int(T), dtype=bool)
    mask[int(m) - 1::int(m)] = True
    return mask


def observed_periods(mask) -> list:
    """1-based indices of the observed periods."""
    return [int(t) + 1 for t in np.flatnonzero(mask)]


@dataclass
class StateSpaceData:
    """Aggregates, centered field observations and the loading matrix.

    ``l_obs`` is ``N_grid x T``; columns at unobserved periods are ignored.
    ``presample`` (``p x m``, most recent first) pins ``w_0, ..., w_{1-p}``.
    """

    y: np.ndarray
    l_obs: np.ndarray
    H: np.ndarray
    m: int = 1
    obs_mask: Optional[np.ndarray] = None
    presample: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.l_obs = np.asarray(self.l_obs, dtype=float)
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        T = self.y.shape[0]
        if self.l_obs.shape != (self.H.shape[0], T):
            raise ShapeError(f"l_obs must be {self.H.shape[0]}x{T}, got {self.l_obs.shape}")
        if self.obs_mask is None:
            self.obs_mask = build_selector(T, self.m)
        self.obs_mask = np.asarray(self.obs_mask, dtype=bool)
        if self.obs_mask.shape != (T,):
            raise ShapeError("obs_mask must have length T")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.l_obs[:, self.obs_mask])):
            raise ShapeError("observed data must be finite")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    def default_presample(self, p: int) -> np.ndarray:
        w0 = np.concatenate([self.y.mean(axis=0) if self.T else np.zeros(self.n_y), np.zeros(self.K)])
        return np.tile(w0, (p, 1))

    def get_presample(self, p: int) -> np.ndarray:
        if self.presample is None:
            return self.default_presample(p)
        pre = np.atleast_2d(np.asarray(self.presample, dtype=float))
        if pre.shape != (p, self.n_y + self.K):
            raise ShapeError(f"presample must be {p}x{self.n_y + self.K}")
        return pre


def regression_form(w: np.ndarray, presample: np.ndarray, p: int):
    """``(X, Y)`` for the VAR on the path ``w`` (``T x m``) given pre-sample values."""
    w = np.asarray(w, dtype=float)
    T, m = w.shape
    full = np.vstack([presample[::-1], w]) if p else w
    cols = [np.ones((T, 1))]
    for l in range(1, p + 1):
        cols.append(full[p - l: p - l + T])
    return np.hstack(cols), w


def ar_residual_variances(w: np.ndarray, p: int) -> np.ndarray:
    """Residual variance of a univariate AR(p) with intercept for each column."""
    T, m = w.shape
    out = np.empty(m)
    for j in range(m):
        x = w[:, j]
        Z = np.column_stack([np.ones(T - p)] + [x[p - l: T - l] for l in range(1, p + 1)])
        resid = x[p:] - Z @ np.linalg.lstsq(Z, x[p:], rcond=None)[0]
        dof = max(T - p - Z.shape[1], 1)
        out[j] = max(resid @ resid / dof, 1e-10 * max(np.var(x), 1e-300), 1e-300)
    return out


# -- latent states -----------------------------------------------------------------

@lru_cache(maxsize=32)
def _band_indices(T, K, p):
    bw = (p + 1) * K - 1
    s, d, a, b = np.meshgrid(np.arange(T), np.arange(p + 1), np.arange(K), np.arange(K), indexing="ij")
    row = d * K + a - b
    col = s * K + b
    keep = (row >= 0) & (row <= bw) & (s + d < T)
    return bw, keep, row[keep], col[keep]


def _precision_banded(params: VarParams, data: StateSpaceData, sigma2: float):
    """Lower banded precision and linear term of the factor-path conditional."""
    T, K, n_y, p, m = data.T, data.K, data.n_y, params.p, params.m
    if params.K != K or params.n_y != n_y:
        raise ShapeError("VarParams dimensions do not match the data")
    try:
        Om = linalg.cho_solve(linalg.cho_factor(params.Sigma, lower=True), np.eye(m))
    except linalg.LinAlgError as exc:
        raise NumericalError(f"Sigma is not positive definite: {exc}") from exc
    Om = 0.5 * (Om + Om.T)

    # E_l = columns of D_l at factor positions; D_0 = I, D_l = -Phi_l
    E = [np.eye(m)[:, n_y:]] + [-params.Phi[l][:, n_y:] for l in range(p)]
    OmE = [Om @ El for El in E]
    # prefix[d][L] = sum_{l=d}^{L} E_l' Om E_{l-d}
    blocks = np.zeros((T, p + 1, K, K))
    lmax = np.minimum(p, T - 1 - np.arange(T))
    for d in range(p + 1):
        terms = [E[l].T @ OmE[l - d] for l in range(d, p + 1)]
        prefix = np.cumsum(np.stack(terms), axis=0)
        ok = lmax >= d
        # block (s+d, s) of the lower triangle = (sum_l E_l' Om E_{l-d})'
        blocks[ok, d] = np.transpose(prefix[lmax[ok] - d], (0, 2, 1))

    HtH = data.H.T @ data.H
    obs = data.obs_mask
    blocks[obs, 0] += HtH / sigma2

    bw, keep, rows, cols = _band_indices(T, K, p)
    ab = np.zeros((bw + 1, T * K))
    ab[rows, cols] = blocks[keep]
    ab = ab[: min(bw + 1, T * K)]  # short paths: the band cannot exceed the matrix

    # r_t = c_Phi,t - (G_o y)_t with factors zeroed in the known part
    pre = data.get_presample(p)
    wk = np.hstack([data.y, np.zeros((T, K))])
    X, _ = regression_form(wk, pre, p)
    r = X @ params.B - wk
    Omr = r @ Om
    rhs = np.zeros((T, K))
    for l in range(p + 1):
        rhs[: T - l] += Omr[l:] @ E[l]
    rhs[obs] += (data.l_obs[:, obs].T @ data.H) / sigma2
    return ab, rhs.ravel()


def _banded_to_dense(ab):
    n = ab.shape[1]
    M = np.zeros((n, n))
    for k in range(ab.shape[0]):
        idx = np.arange(n - k)
        M[idx + k, idx] = ab[k, : n - k]
        M[idx, idx + k] = ab[k, : n - k]
    return M


def latent_state_moments(params: VarParams, data: StateSpaceData, sigma2: float):
    """Mean (``T x K``) and covariance (``TK x TK``) of the factor-path conditional.

    Dense; intended for checking small instances.
    """
    ab, rhs = _precision_banded(params, data, sigma2)
    P = _banded_to_dense(ab)
    cov = np.linalg.inv(P)
    mean = np.linalg.solve(P, rhs)
    return mean.reshape(data.T, data.K), 0.5 * (cov + cov.T)


def draw_latent_states(params: VarParams, data: StateSpaceData, sigma2: float, rng) -> np.ndarray:
    """One joint draw of the ``T x K`` factor path given parameters and data."""
    if not sigma2 > 0:
        raise NumericalError("sigma2 must be positive")
    ab, rhs = _precision_banded(params, data, sigma2)
    try:
        cb = linalg.cholesky_banded(ab, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"factor-path precision is not positive definite: {exc}") from exc
    mean = linalg.cho_solve_banded((cb, True), rhs)
    z = rng.standard_normal(rhs.size)
    dev, info = lapack.dtbtrs(cb, z[:, None], uplo="L", trans="T")
    if info != 0:
        raise NumericalError(f"triangular solve failed (info={info})")
    return (mean + dev[:, 0]).reshape(data.T, data.K)


# -- NIW ---------------------------------------------------------------------------

def _inv_pd(M):
    c = linalg.cho_factor(M, lower=True)
    return linalg.cho_solve(c, np.eye(M.shape[0]))


def _niw_row_variances(V0, k, m):
    # The NIW row covariance is shared by all equations: intercepts take the
    # average across equations and each lag row its own-equation entry.
    if V0 is None:
        return np.full(k, 100.0)
    V0 = np.asarray(V0, dtype=float)
    if V0.ndim == 1:
        return V0
    v = np.empty(k)
    v[0] = V0[0].mean()
    rows = np.arange(1, k)
    v[1:] = V0[rows, (rows - 1) % m]
    return v


def niw_posterior(X, Y, prior: PriorConfig):
    """Posterior hyperparameters ``(B_bar, V_bar, S_bar, nu_bar)``.

    Prior: ``vec(B) | Sigma ~ N(vec(B0), Sigma kron V0)`` with diagonal ``V0``
    and ``Sigma ~ IW(S0, nu0)``.
    """
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    V0inv = np.diag(1.0 / _niw_row_variances(prior.V0, X.shape[1], Y.shape[1]))
    try:
        Vbar = _inv_pd(V0inv + X.T @ X)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"posterior coefficient scale is singular: {exc}") from exc
    Vbar = 0.5 * (Vbar + Vbar.T)
    Bbar = Vbar @ (V0inv @ prior.B0 + X.T @ Y)
    S = prior.S0 + Y.T @ Y + prior.B0.T @ V0inv @ prior.B0 - Bbar.T @ (V0inv + X.T @ X) @ Bbar
    S = 0.5 * (S + S.T)
    return Bbar, Vbar, S, prior.nu0 + X.shape[0]


def niw_posterior_draw(X, Y, prior: PriorConfig, rng):
    """Exact draw ``(B, Sigma)`` from the conjugate NIW posterior."""
    Bbar, Vbar, S, nu = niw_posterior(X, Y, prior)
    try:
        Sigma = np.atleast_2d(stats.invwishart.rvs(df=nu, scale=S, random_state=rng))
        cV = np.linalg.cholesky(Vbar)
        cS = np.linalg.cholesky(Sigma)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"NIW draw failed: {exc}") from exc
    B = Bbar + cV @ rng.standard_normal(Bbar.shape) @ cS.T
    return B, 0.5 * (Sigma + Sigma.T)


# -- asymmetric conjugate prior on the triangular system --------------------------------

@dataclass
class AsymState:
    """Current values of the triangular-system sampler.

    ``A`` is unit lower triangular with ``A u_t = eps_t``; row ``i`` holds
    ``-alpha_i`` left of the diagonal. ``Omega = A^-1 diag(sig2) A^-T``.
    """

    B: np.ndarray
    A: np.ndarray
    sig2: np.ndarray
    tau2: Optional[np.ndarray] = None
    lam2: Optional[np.ndarray] = None
    pi0: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    pi1: Optional[np.ndarray] = None

    @property
    def alpha(self) -> np.ndarray:
        return -np.tril(self.A, -1)

    @property
    def Sigma(self) -> np.ndarray:
        Ainv = linalg.solve_triangular(self.A, np.eye(len(self.sig2)), lower=True, unit_diagonal=True)
        S = (Ainv * self.sig2) @ Ainv.T
        return 0.5 * (S + S.T)

    @property
    def precision(self) -> np.ndarray:
        return (self.A.T / self.sig2) @ self.A

    def copy(self) -> "AsymState":
        return AsymState(*[None if v is None else np.array(v, copy=True) for v in
                           (self.B, self.A, self.sig2, self.tau2, self.lam2, self.pi0, self.gamma, self.pi1)])


def triangular_from_sigma(Sigma: np.ndarray):
    """``(A, d)`` with ``A`` unit lower triangular and ``A Sigma A' = diag(d)``."""
    L = np.linalg.cholesky(Sigma)
    dg = np.diag(L)
    Lu = L / dg
    A = linalg.solve_triangular(Lu, np.eye(len(dg)), lower=True, unit_diagonal=True)
    return A, dg ** 2


def init_asym_state(B, Sigma, prior: PriorConfig) -> AsymState:
    A, d = triangular_from_sigma(Sigma)
    st = AsymState(np.array(B, dtype=float), A, d)
    if prior.shrinkage is not None:
        m = st.B.shape[1]
        G = len(prior.shrinkage.groups)
        st.tau2 = np.ones((m, G))
        st.lam2 = np.ones((m, G))
        st.pi0 = np.full(m, 0.5)
        st.gamma = np.ones((m, G), dtype=bool)
        st.pi1 = np.full((m, G), 0.5)
    return st


def _ig(rng, shape, scale):
    return scale / rng.gamma(shape)


def _whitened(i, cols, X, E, st, beta_block):
    # Stack equations k >= i scaled to noise variance sig2_i; beta_block is the
    # current value of beta_i restricted to ``cols``.
    m = st.B.shape[1]
    Xj = X[:, cols]
    fit = Xj @ beta_block
    s_i = np.sqrt(st.sig2[i])
    Xt, yt = [], []
    for k in range(i, m):
        a = st.A[k, i]
        w = s_i / np.sqrt(st.sig2[k])
        if k > i and a == 0.0:
            continue
        Xt.append(a * w * Xj)
        yt.append(w * (E[:, k] + a * fit))
    return np.vstack(Xt), np.concatenate(yt)


def _gaussian_block(i, cols, X, U, E, st, prior_prec, prior_mean, rng):
    """Draw ``beta_i[cols]`` given everything else under a Gaussian prior.

    ``prior_prec`` is expressed in units of ``sig2_i`` (the prior covariance is
    ``sig2_i * prior_prec^-1``).
    """
    old = st.B[cols, i].copy()
    Xt, yt = _whitened(i, cols, X, E, st, old)
    P = prior_prec + Xt.T @ Xt
    C = Xt.T @ yt + prior_prec @ prior_mean
    new = _draw_normal_prec(P, C, st.sig2[i], rng, i)
    _apply_block(i, cols, X, U, E, st, new - old)
    return new


def _draw_normal_prec(P, C, scale, rng, i=None):
    try:
        c = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"equation {i}: coefficient precision is not positive definite") from exc
    mu = linalg.cho_solve(c, C)
    z = rng.standard_normal(len(C))
    return mu + np.sqrt(scale) * linalg.solve_triangular(c[0], z, lower=True, trans="T")


def _apply_block(i, cols, X, U, E, st, delta):
    if not np.any(delta):
        st.B[cols, i] += delta
        return
    st.B[cols, i] += delta
    du = X[:, cols] @ delta
    U[:, i] -= du
    E -= np.outer(du, st.A[:, i])


def _slab_block(i, j, cols, X, U, E, st, rng):
    # Two-component conditional for group j of equation i.
    old = st.B[cols, i].copy()
    Xt, yt = _whitened(i, cols, X, E, st, old)
    g = len(cols)
    tau2 = st.tau2[i, j]
    P = np.eye(g) / tau2 + Xt.T @ Xt
    C = Xt.T @ yt
    try:
        c = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"equation {i} group {j}: precision not positive definite") from exc
    PinvC = linalg.cho_solve(c, C)
    logdetP = 2.0 * np.sum(np.log(np.diag(c[0])))
    log_bf = -0.5 * g * np.log(tau2) - 0.5 * logdetP + 0.5 * (C @ PinvC) / st.sig2[i]
    pi0 = st.pi0[i]
    # spike probability pi0 / (pi0 + (1 - pi0) BF), in log space
    with np.errstate(over="ignore", divide="ignore"):
        pi1 = 1.0 / (1.0 + np.exp(np.log1p(-pi0) - np.log(pi0) + log_bf)) if 0 < pi0 < 1 else float(pi0 >= 1)
    st.pi1[i, j] = pi1
    if rng.random() < pi1:
        new = np.zeros(g)
        st.gamma[i, j] = False
    else:
        z = rng.standard_normal(g)
        new = PinvC + np.sqrt(st.sig2[i]) * linalg.solve_triangular(c[0], z, lower=True, trans="T")
        st.gamma[i, j] = True
    _apply_block(i, cols, X, U, E, st, new - old)


def _beta_prior(prior: PriorConfig, i: int, k: int, sig2_i: float):
    if prior.V0 is None:
        v = np.full(k, prior.kappa0)
    else:
        V = np.asarray(prior.V0, dtype=float)
        v = (V[:, i] if V.ndim == 2 else V)[:k]
    mean = np.zeros(k) if prior.B0 is None else np.asarray(prior.B0, dtype=float)[:k, i]
    prec = 1.0 / v
    if not prior.conditional_beta:
        prec = prec * sig2_i
    return prec, mean


def _alpha_sigma(i, U, E, st, prior: PriorConfig, rng, extra_shape=0.0, extra_scale=0.0):
    """Collapsed draw of ``sig2_i`` then ``alpha_i`` given the coefficients."""
    m = st.B.shape[1]
    T = U.shape[0]
    ydot = U[:, i]
    Z = U[:, :i]
    S = np.diag(np.asarray(prior.s2, dtype=float)[:i])
    shape = 0.5 * (prior.v0 + (i + 1) - m) + 0.5 * T + extra_shape
    ssr = ydot @ ydot
    if i > 0:
        P = Z.T @ Z + S
        try:
            c = linalg.cho_factor(P, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"equation {i}: alpha precision is not positive definite") from exc
        ZY = Z.T @ ydot
        mu = linalg.cho_solve(c, ZY)
        ssr = ssr - ZY @ mu
    scale = 0.5 * prior.s2[i] + 0.5 * max(ssr, 0.0) + extra_scale
    st.sig2[i] = _ig(rng, shape, scale)
    if i > 0:
        z = rng.standard_normal(i)
        alpha = mu + np.sqrt(st.sig2[i]) * linalg.solve_triangular(c[0], z, lower=True, trans="T")
        st.A[i, :i] = -alpha
    E[:, i] = U[:, i] + U[:, :i] @ st.A[i, :i]


def _sweep(X, Y, prior: PriorConfig, rng, st: AsymState, update_cov=True):
    X = np.atleast_2d(X)
    T, k = X.shape
    m = Y.shape[1]
    U = Y - X @ st.B
    E = U @ st.A.T
    ss = prior.shrinkage
    groups = None
    if ss is not None:
        groups = [g + 1 for g in ss.partition(k - 1)]  # column 0 is the intercept
    for i in range(m):
        extra_shape = extra_scale = 0.0
        if k:
            prec, mean = _beta_prior(prior, i, k, st.sig2[i])
            if groups is None:
                cols = np.arange(k)
                new = _gaussian_block(i, cols, X, U, E, st, np.diag(prec), mean, rng)
                if prior.conditional_beta:
                    extra_shape += 0.5 * k
                    extra_scale += 0.5 * np.sum(prec * (new - mean) ** 2)
            else:
                cols = np.array([0])
                new = _gaussian_block(i, cols, X, U, E, st, np.diag(prec[:1]), mean[:1], rng)
                if prior.conditional_beta:
                    extra_shape += 0.5
                    extra_scale += 0.5 * prec[0] * (new[0] - mean[0]) ** 2
                for j, gcols in enumerate(groups):
                    _slab_block(i, j, gcols, X, U, E, st, rng)
                    if st.gamma[i, j]:
                        b = st.B[gcols, i]
                        extra_shape += 0.5 * len(gcols)
                        extra_scale += 0.5 * (b @ b) / st.tau2[i, j]
        if update_cov:
            _alpha_sigma(i, U, E, st, prior, rng, extra_shape, extra_scale)
    if groups is not None:
        _shrinkage_hyper(st, groups, ss, rng)
    return st


def _shrinkage_hyper(st: AsymState, groups, ss: SpikeSlabConfig, rng):
    m = st.B.shape[1]
    for i in range(m):
        for j, gcols in enumerate(groups):
            g = len(gcols)
            b = st.B[gcols, i]
            nb = np.sqrt(b @ b)
            lam2 = st.lam2[i, j]
            if st.gamma[i, j] and nb > 0:
                mu = np.sqrt(lam2) * np.sqrt(st.sig2[i]) / nb
                st.tau2[i, j] = 1.0 / rng.wald(mu, lam2)
            else:
                st.tau2[i, j] = rng.gamma(0.5 * (g + 1), 2.0 / lam2)
            st.lam2[i, j] = rng.gamma(0.5 * (g + 1) + ss.a2, 1.0 / (0.5 * st.tau2[i, j] + ss.b2))
        n_slab = int(np.sum(st.gamma[i]))
        st.pi0[i] = rng.beta(len(groups) - n_slab + ss.c, n_slab + ss.d)


def asym_conjugate_draw(X, Y, prior: PriorConfig, rng, state: Optional[AsymState] = None) -> AsymState:
    """One sweep over equations ``i = 1..m`` of the triangular-system sampler.

    For each equation the coefficients ``beta_i`` are drawn from their full
    conditional (which involves every equation ``k >= i`` through the
    residual ``u_i``), then ``(alpha_i, sigma_i^2)`` jointly, with ``sigma_i^2``
    drawn with ``alpha_i`` integrated out. With group shrinkage configured the
    coefficient step is the spike-and-slab block update and the shrinkage
    hyperparameters are refreshed at the end of the sweep.

    Priors: ``sigma_i^2 ~ IG((v0 + i - m)/2, s_i^2/2)``,
    ``alpha_{i,c} | sigma_i^2 ~ N(0, sigma_i^2 / s_c^2)`` for ``c < i``, and
    ``beta_i ~ N(B0[:, i], sigma_i^2 V0[:, i])`` (or without the ``sigma_i^2``
    factor when ``conditional_beta`` is off). The implied prior on
    ``Omega^-1`` is Wishart with ``v0`` degrees of freedom and scale
    ``diag(s^2)^-1``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    m = Y.shape[1]
    if X.ndim != 2:
        X = X.reshape(Y.shape[0], -1)
    if prior.v0 is None or prior.s2 is None:
        raise InvalidConfigError("asymmetric prior needs resolved v0 and s2")
    if state is None:
        k = X.shape[1]
        B0 = np.asarray(prior.B0, dtype=float) if prior.B0 is not None else np.zeros((k, m))
        state = init_asym_state(B0[:k].copy(), np.diag(np.asarray(prior.s2, dtype=float)), prior)
    st = state.copy()
    return _sweep(X, Y, prior, rng, st)


def spike_slab_group_step(X, Y, state: AsymState, prior: PriorConfig, rng) -> AsymState:
    """Coefficient blocks and shrinkage hyperparameters, holding ``(A, sig2)`` fixed."""
    if prior.shrinkage is None:
        raise InvalidConfigError("no shrinkage block configured")
    st = state.copy()
    return _sweep(np.asarray(X, dtype=float), np.atleast_2d(np.asarray(Y, dtype=float)), prior, rng, st,
                  update_cov=False)


# -- Gibbs driver ------------------------------------------------------------------------

@dataclass
class GibbsDraws:
    """Stored draws of one chain plus the state needed to resume it."""

    n_y: int
    K: int
    p: int
    prior_kind: str
    seed: int
    burn: int
    thin: int
    iterations: int
    B: np.ndarray
    Sigma: np.ndarray
    sigma2: np.ndarray
    explosive: np.ndarray
    factors: Optional[np.ndarray] = None
    tau2: Optional[np.ndarray] = None
    lam2: Optional[np.ndarray] = None
    pi0: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    obs_periods: list = field(default_factory=list)
    s2: Optional[np.ndarray] = None
    chain_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.n_y + self.K

    def params(self, d: int) -> VarParams:
        return VarParams.from_B(self.B[d], self.Sigma[d], self.n_y, self.K, self.p)

    def posterior_mean(self) -> VarParams:
        return VarParams.from_B(self.B.mean(axis=0), self.Sigma.mean(axis=0), self.n_y, self.K, self.p)

    def inclusion(self) -> Optional[np.ndarray]:
        return None if self.gamma is None else self.gamma.mean(axis=0)


def _n_store(iterations, burn, thin):
    return max(iterations - burn, 0) // thin


def _initial_factors(data: StateSpaceData) -> np.ndarray:
    T, K = data.T, data.K
    obs = np.flatnonzero(data.obs_mask)
    if obs.size == 0:
        return np.zeros((T, K))
    bobs = np.linalg.lstsq(data.H, data.l_obs[:, obs], rcond=None)[0].T
    t = np.arange(T)
    return np.column_stack([np.interp(t, obs, bobs[:, k]) for k in range(K)])


def _ols_init(data: StateSpaceData, p: int, factors):
    w = np.hstack([data.y, factors])
    X, Y = regression_form(w, data.get_presample(p), p)
    B = np.linalg.lstsq(X, Y, rcond=None)[0]
    U = Y - X @ B
    m = w.shape[1]
    Sigma = U.T @ U / max(data.T - X.shape[1], 1)
    Sigma = 0.5 * (Sigma + Sigma.T) + 1e-8 * max(np.trace(Sigma) / m, 1e-12) * np.eye(m)
    return B, Sigma, w


def _sigma2_draw(data, factors, prior, rng):
    obs = data.obs_mask
    resid = data.l_obs[:, obs] - data.H @ factors[obs].T
    shape = prior.sigma2_a0 + 0.5 * resid.size
    scale = prior.sigma2_b0 + 0.5 * float(np.sum(resid ** 2))
    return _ig(rng, shape, scale)


def _check_pd(Sigma, it):
    if not np.all(np.isfinite(Sigma)):
        raise DivergenceError(f"non-finite Sigma at iteration {it}", it)
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Sigma draw not positive definite at iteration {it}", it) from exc


def gibbs_run(data: StateSpaceData, prior: PriorConfig, p: int, iterations: int, burn: int = 0,
              thin: int = 1, seed: int = 0, store_factors: bool = True,
              resume: Optional[GibbsDraws] = None, progress_every: int = 0) -> GibbsDraws:
    """Run (or continue) the four-block Gibbs sampler.

    Each iteration draws, in order, the measurement variance ``sigma2``, the
    innovation covariance and VAR coefficients (jointly under NIW, by one
    triangular sweep under the asymmetric prior) and the factor path. Draws
    after ``burn`` are kept every ``thin`` iterations. Explosive coefficient
    draws are kept and flagged.

    Passing a previous result as ``resume`` continues that chain up to
    ``iterations`` total; the combined output is identical to an uninterrupted
    run with the same seed.
    """
    T, K, n_y = data.T, data.K, data.n_y
    m = n_y + K
    if p < 1:
        raise InvalidConfigError("lag order p must be at least 1")
    if T <= p + 2:
        raise InvalidConfigError(f"need T > p + 2, got T={T}, p={p}")
    if thin < 1 or burn < 0 or iterations < 1:
        raise InvalidConfigError("iterations >= 1, burn >= 0 and thin >= 1 are required")
    if burn >= iterations:
        raise InvalidConfigError("burn must be smaller than the number of iterations")

    rng = np.random.default_rng(seed)
    n_store = _n_store(iterations, burn, thin)
    k = 1 + m * p
    out = GibbsDraws(n_y, K, p, prior.kind, seed, burn, thin, 0,
                     B=np.zeros((n_store, k, m)), Sigma=np.zeros((n_store, m, m)),
                     sigma2=np.zeros(n_store), explosive=np.zeros(n_store, dtype=bool),
                     factors=np.zeros((n_store, T, K)) if store_factors else None,
                     obs_periods=observed_periods(data.obs_mask))

    if resume is None:
        factors = _initial_factors(data)
        B, Sigma, w = _ols_init(data, p, factors)
        s2 = ar_residual_variances(w, p)
        prior = prior.resolved(m, p, s2)
        resid = data.l_obs[:, data.obs_mask] - data.H @ factors[data.obs_mask].T
        sigma2 = max(float(np.mean(resid ** 2)) if resid.size else 1.0, 1e-12)
        ast = init_asym_state(B, Sigma, prior) if prior.kind == ASYM else None
        start = 0
    else:
        if (resume.seed, resume.burn, resume.thin, resume.p) != (seed, burn, thin, p):
            raise InvalidConfigError("resume requires the same seed, burn, thin and p")
        rng.bit_generator.state = resume.rng_state
        cs = resume.chain_state
        factors = np.array(cs["factors"], dtype=float).reshape(T, K)
        B = np.array(cs["B"], dtype=float).reshape(k, m)
        Sigma = np.array(cs["Sigma"], dtype=float).reshape(m, m)
        sigma2 = float(cs["sigma2"])
        s2 = np.array(cs["s2"], dtype=float)
        prior = prior.resolved(m, p, s2)
        ast = None
        if prior.kind == ASYM:
            ast = AsymState(B.copy(), np.array(cs["A"]).reshape(m, m), np.array(cs["sig2"]))
            if prior.shrinkage is not None:
                G = len(prior.shrinkage.groups)
                ast.tau2 = np.array(cs["tau2"]).reshape(m, G)
                ast.lam2 = np.array(cs["lam2"]).reshape(m, G)
                ast.pi0 = np.array(cs["pi0"])
                ast.gamma = np.array(cs["gamma"], dtype=bool).reshape(m, G)
                ast.pi1 = np.array(cs["pi1"]).reshape(m, G)
        start = resume.iterations
        n_old = min(resume.n_draws, n_store)
        for name in ("B", "Sigma", "sigma2", "explosive", "factors"):
            src = getattr(resume, name)
            dst = getattr(out, name)
            if src is not None and dst is not None:
                dst[:n_old] = src[:n_old]

    out.s2 = np.asarray(prior.s2, dtype=float)
    if prior.shrinkage is not None:
        G = len(prior.shrinkage.groups)
        out.tau2 = np.zeros((n_store, m, G))
        out.lam2 = np.zeros((n_store, m, G))
        out.pi0 = np.zeros((n_store, m))
        out.gamma = np.zeros((n_store, m, G), dtype=bool)
        if resume is not None and resume.gamma is not None:
            n_old = min(resume.n_draws, n_store)
            for name in ("tau2", "lam2", "pi0", "gamma"):
                getattr(out, name)[:n_old] = getattr(resume, name)[:n_old]

    pre = data.get_presample(p)
    for it in range(start + 1, iterations + 1):
        sigma2 = _sigma2_draw(data, factors, prior, rng)
        w = np.hstack([data.y, factors])
        X, Y = regression_form(w, pre, p)
        if prior.kind == NIW:
            B, Sigma = niw_posterior_draw(X, Y, prior, rng)
        else:
            ast.B = B
            ast = _sweep(X, Y, prior, rng, ast)
            B, Sigma = ast.B, ast.Sigma
        _check_pd(Sigma, it)
        params = VarParams.from_B(B, Sigma, n_y, K, p)
        try:
            factors = draw_latent_states(params, data, sigma2, rng)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (iteration {it})", it) from exc
        if not (np.all(np.isfinite(factors)) and np.all(np.isfinite(B)) and np.isfinite(sigma2)):
            raise DivergenceError(f"non-finite state at iteration {it}", it)

        if it > burn and (it - burn) % thin == 0:
            d = (it - burn) // thin - 1
            out.B[d] = B
            out.Sigma[d] = Sigma
            out.sigma2[d] = sigma2
            out.explosive[d] = not params.is_stable()
            if out.factors is not None:
                out.factors[d] = factors
            if out.gamma is not None:
                out.tau2[d], out.lam2[d], out.pi0[d], out.gamma[d] = ast.tau2, ast.lam2, ast.pi0, ast.gamma
        if progress_every and it % progress_every == 0:
            logger.info("gibbs iteration %d/%d", it, iterations)

    out.iterations = iterations
    out.rng_state = rng.bit_generator.state
    cs = {"factors": factors.ravel().tolist(), "B": B.ravel().tolist(), "Sigma": Sigma.ravel().tolist(),
          "sigma2": sigma2, "s2": out.s2.tolist()}
    if ast is not None:
        cs.update(A=ast.A.ravel().tolist(), sig2=ast.sig2.tolist())
        if ast.gamma is not None:
            cs.update(tau2=ast.tau2.ravel().tolist(), lam2=ast.lam2.ravel().tolist(), pi0=ast.pi0.tolist(),
                      gamma=ast.gamma.ravel().astype(int).tolist(), pi1=ast.pi1.ravel().tolist())
    out.chain_state = cs
    n_expl = int(out.explosive.sum())
    if n_expl:
        logger.warning("%d of %d stored draws are explosive", n_expl, n_store)
    return out


# -- persistence -------------------------------------------------------------------------

def content_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def save_draws(directory, draws: GibbsDraws, extra_manifest: Optional[dict] = None) -> None:
    """One CSV per parameter group plus ``manifest.json`` and ``chain_state.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, m, k = draws.n_draws, draws.m, draws.B.shape[1]
    _write_rows(d / "B.csv", [f"b_{r}_{c}" for r in range(k) for c in range(m)], draws.B.reshape(n, -1))
    _write_rows(d / "Sigma.csv", [f"s_{r}_{c}" for r in range(m) for c in range(m)], draws.Sigma.reshape(n, -1))
    _write_rows(d / "sigma2.csv", ["sigma2"], draws.sigma2[:, None])
    _write_rows(d / "explosive.csv", ["explosive"], draws.explosive[:, None].astype(float))
    if draws.factors is not None:
        T, K = draws.factors.shape[1:]
        _write_rows(d / "factors.csv", [f"f_{t}_{j}" for t in range(T) for j in range(K)],
                    draws.factors.reshape(n, -1))
    if draws.gamma is not None:
        G = draws.gamma.shape[2]
        names = [f"{i}_{j}" for i in range(m) for j in range(G)]
        for key in ("tau2", "lam2", "gamma"):
            _write_rows(d / f"{key}.csv", names, getattr(draws, key).reshape(n, -1).astype(float))
        _write_rows(d / "pi0.csv", [str(i) for i in range(m)], draws.pi0)
    manifest = {
        "n_y": draws.n_y, "K": draws.K, "p": draws.p, "prior": draws.prior_kind, "seed": draws.seed,
        "iterations": draws.iterations, "burn": draws.burn, "thin": draws.thin, "n_draws": n,
        "last_iteration": draws.iterations, "observed_periods": draws.obs_periods,
        "n_explosive": int(draws.explosive.sum()), "s2": [repr(float(v)) for v in draws.s2],
    }
    manifest.update(extra_manifest or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    state = {"chain": draws.chain_state, "rng": draws.rng_state}
    (d / "chain_state.json").write_text(json.dumps(state, sort_keys=True, default=repr) + "\n")


def _read_rows(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def load_draws(directory) -> GibbsDraws:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    st = json.loads((d / "chain_state.json").read_text())
    n, m, K, p = man["n_draws"], man["n_y"] + man["K"], man["K"], man["p"]
    k = 1 + m * p
    draws = GibbsDraws(
        man["n_y"], K, p, man["prior"], man["seed"], man["burn"], man["thin"], man["iterations"],
        B=_read_rows(d / "B.csv").reshape(n, k, m), Sigma=_read_rows(d / "Sigma.csv").reshape(n, m, m),
        sigma2=_read_rows(d / "sigma2.csv").reshape(n),
        explosive=_read_rows(d / "explosive.csv").reshape(n).astype(bool),
        obs_periods=man["observed_periods"], s2=np.array([float(v) for v in man["s2"]]),
        chain_state=st["chain"], rng_state=st["rng"])
    if (d / "factors.csv").exists():
        draws.factors = _read_rows(d / "factors.csv").reshape(n, -1, K)
    if (d / "gamma.csv").exists():
        G = _read_rows(d / "gamma.csv").shape[1] // m
        draws.tau2 = _read_rows(d / "tau2.csv").reshape(n, m, G)
        draws.lam2 = _read_rows(d / "lam2.csv").reshape(n, m, G)
        draws.gamma = _read_rows(d / "gamma.csv").reshape(n, m, G).astype(bool)
        draws.pi0 = _read_rows(d / "pi0.csv").reshape(n, m)
    return draws
